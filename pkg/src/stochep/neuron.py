"""Activation and spike generation.

The working neuron is stochastic: its firing probability is a hard
sigmoid of the membrane potential, sigma(xi) = clamp(kappa * xi, 0, 1),
and spikes are independent Bernoulli draws at that rate.  The gain kappa
sets both the slope of the active band and, downstream, the firing
density of the network.

Two deterministic leaky integrate-and-fire cells live here as well.
They are baselines for the membrane-stability study only; nothing in the
trainer depends on them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def sigma(xi: np.ndarray, kappa: float) -> np.ndarray:
    """Firing probability: clamp(kappa * xi, 0, 1)."""
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    return np.clip(kappa * xi, 0.0, 1.0)


def sigma_prime(xi: np.ndarray, kappa: float) -> np.ndarray:
    """Derivative of sigma: kappa on the active band [0, 1/kappa), 0
    elsewhere.

    The band is closed at zero and open at the top.  Both ends are
    subgradient choices at kinks, but they are not symmetric in effect:
    relaxation starts every free phase at xi = 0, and a zero slope there
    would gate off the drive and freeze the whole network at its
    initialization.  Including the lower endpoint lets the drive flow
    from rest; excluding the upper one keeps fully saturated units from
    being pushed further out of range.
    """
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    kx = kappa * np.asarray(xi)
    return np.where((kx >= 0.0) & (kx < 1.0), kappa, 0.0)


def sample_spikes(prob: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Bernoulli spikes from pre-drawn uniforms: 1.0 where u < prob.

    Spikes are float64 zeros and ones so they feed straight into the
    dense kernels.  prob = 0 can never fire and prob = 1 always does
    (uniforms live in [0, 1)).
    """
    p = np.asarray(prob)
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("spike probabilities must lie in [0, 1]")
    return (uniforms < p).astype(np.float64)


@dataclass
class LowpassLifState:
    """Leaky integrator with a hard reset and a low-passed rate readout."""

    v: np.ndarray
    rate: np.ndarray  # exponential moving average of emitted spikes

    @classmethod
    def zeros(cls, shape) -> "LowpassLifState":
        return cls(np.zeros(shape), np.zeros(shape))


def lif_lowpass_step(state: LowpassLifState, input_current: np.ndarray,
                     decay: float = 0.9, threshold: float = 1.0
                     ) -> tuple[LowpassLifState, np.ndarray]:
    """One step of the low-pass-filtered LIF baseline.

    Membrane leaks by `decay`, integrates the input, fires a binary
    spike on crossing `threshold` and hard-resets to zero.  The state
    additionally tracks a moving average of the spike train, which is
    what this cell transmits downstream in place of raw spikes.
    """
    v = decay * state.v + input_current
    spikes = (v > threshold).astype(np.float64)
    v = np.where(spikes > 0, 0.0, v)
    rate = decay * state.rate + (1.0 - decay) * spikes
    return LowpassLifState(v, rate), spikes


@dataclass
class PredCodingLifState:
    """State of the predictive-coding LIF cell.

    Carries the decoder estimate of the input, the membrane potential of
    the underlying rate neuron, that neuron's previous firing rate, and
    the integrator the spike threshold acts on.
    """

    dec: np.ndarray
    xi: np.ndarray
    rho_prev: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "PredCodingLifState":
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape), np.zeros(shape))


def lif_predcoding_step(state: PredCodingLifState, weighted_input: np.ndarray,
                        lam: float, alpha: float, kappa: float,
                        v_th: float = 1.0
                        ) -> tuple[PredCodingLifState, np.ndarray]:
    """One step of the predictive-coding LIF baseline.

    The decoder low-passes the weighted input with factor alpha, the
    rate neuron relaxes toward it, and the encoder quantizes the change
    in firing rate into deterministic spikes through an integrate-and-
    fire stage.  Per layer of I neurons this costs 4I multiplies and 4I
    adds on top of the plain cell, and 3I extra state words.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    dec = (1.0 - alpha) * state.dec + alpha * weighted_input
    xi = (1.0 - lam) * state.xi + lam * sigma_prime(state.xi, kappa) * dec
    rho = sigma(xi, kappa)
    enc = (rho - (1.0 - alpha) * state.rho_prev) / alpha
    spikes = (state.v + enc > v_th).astype(np.float64)
    v = state.v + enc - spikes
    return PredCodingLifState(dec, xi, rho, v), spikes
