"""Counter-addressed randomness.

Every random draw in the package is a pure function of (seed, a few
integer address words), realized with numpy's Philox counter generator.
That buys three properties the trainer depends on:

* bit-identical reruns for a given seed, independent of worker count
  or the order streams happen to be consumed in;
* common random numbers across the paired +beta/-beta nudge phases
  (they address the same time steps, so their spike draws coincide);
* a single-frame sequence schedule that collapses bitwise onto the
  static schedule, because frame offsets enter the address arithmetic
  rather than the generator state.

Spike sampling is the hot path, so `SpikeStreams` keeps one Philox
instance and re-addresses it by state assignment instead of building a
fresh generator per call; the two are bitwise equivalent and the reuse
is about three times faster.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def mix(*words: int) -> int:
    """Collapse integer address words into one well-mixed 64-bit word."""
    acc = 0
    for w in words:
        acc = _splitmix64(acc ^ (int(w) & _MASK64))
    return acc


def _tag(name: str) -> int:
    acc = len(name)
    for b in name.encode():
        acc = _splitmix64(acc ^ b)
    return acc


def stream_context(name: str, *words: int) -> int:
    """Context word for SpikeStreams, scoping a named consumer (training
    epoch, evaluation pass) away from every other one."""
    return mix(_tag(name), *words)


def derive(seed: int, purpose: str, *words: int) -> np.random.Generator:
    """Independent generator for cold-path uses (init, shuffling, data).

    Streams with different purposes or address words never collide: the
    purpose tag and words are folded into the Philox key.
    """
    return np.random.Generator(
        np.random.Philox(key=[mix(seed, _tag(purpose), *words), 0]))


class SpikeStreams:
    """Uniform draws addressed by (sample, layer, time step).

    The address goes into the Philox key/counter words that do not
    advance during generation (the running block index lives in counter
    word 0), so each address owns a disjoint 2^64-block slice of the
    counter space and draws are independent across addresses.
    """

    def __init__(self, seed: int, context: int = 0):
        self._key0 = mix(seed, _tag("spikes"), context)
        self._bitgen = np.random.Philox(key=0)
        self._gen = np.random.Generator(self._bitgen)
        self._template = self._bitgen.state

    def uniform(self, sample_index: int, layer_index: int, time_step: int,
                shape) -> np.ndarray:
        st = self._template
        inner = st["state"]
        inner["counter"][:] = (0, time_step, layer_index, 0)
        inner["key"][0] = self._key0
        inner["key"][1] = int(sample_index) & _MASK64
        st["buffer_pos"] = 4  # discard any buffered words from the last address
        st["has_uint32"] = 0
        self._bitgen.state = st
        return self._gen.random(shape)
