"""Network structure: layer chain, connection specs, weights, state.

A network is a chain of layers joined by bidirectional connections.
Layer 0 is the clamped input and carries no state of its own; every
other layer holds a membrane-potential tensor per sample.  Connection i
joins layer i (source, lower) to layer i + 1 (target, upper).  The
feedback direction always uses the adjoint of the feedforward weight,
so each connection owns exactly one tensor.

Dense connections flatten whatever shape their source layer has, which
is how a conv stack hands off to its classifier head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .linalg import conv_output_hw


def flat_size(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape, dtype=np.int64))


@dataclass(frozen=True)
class DenseConn:
    """Fully connected layer pair; weight shape (out_size, in_size)."""

    in_size: int
    out_size: int

    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_size, self.in_size)

    def fans(self) -> tuple[int, int]:
        return self.in_size, self.out_size


@dataclass(frozen=True)
class ConvConn:
    """Conv + optional maxpool; weight shape (out_channels, C_in, KH, KW).

    The forward message is pool(conv(source)); pooling argmax indices are
    recomputed from whatever tensor flows forward at each step and reused
    by the feedback path of the same step.
    """

    in_shape: tuple[int, int, int]  # (C, H, W) of the source layer
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    padding: int = 0
    pool_window: tuple[int, int] | None = None
    pool_stride: int = 1

    def conv_hw(self) -> tuple[int, int]:
        return conv_output_hw(self.in_shape[1:], self.kernel, self.stride, self.padding)

    def out_shape(self) -> tuple[int, int, int]:
        h, w = self.conv_hw()
        if self.pool_window is not None:
            h = (h - self.pool_window[0]) // self.pool_stride + 1
            w = (w - self.pool_window[1]) // self.pool_stride + 1
        return (self.out_channels, h, w)

    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_shape[0]) + self.kernel

    def fans(self) -> tuple[int, int]:
        k = self.kernel[0] * self.kernel[1]
        return self.in_shape[0] * k, self.out_channels * k


Connection = DenseConn | ConvConn


@dataclass(frozen=True)
class Topology:
    """Layer shapes plus the connection chain joining them.

    layer_shapes[0] is the input layer.  The final layer is the output,
    sized n_classes * n_perclass; predictions sum each class's
    contiguous block of n_perclass neurons.
    """

    layer_shapes: tuple[tuple[int, ...], ...]
    connections: tuple[Connection, ...]
    n_classes: int
    n_perclass: int = 1

    def __post_init__(self):
        if len(self.connections) != len(self.layer_shapes) - 1:
            raise ValueError(
                f"{len(self.layer_shapes)} layers need "
                f"{len(self.layer_shapes) - 1} connections, got {len(self.connections)}")
        for i, conn in enumerate(self.connections):
            src, dst = self.layer_shapes[i], self.layer_shapes[i + 1]
            if isinstance(conn, DenseConn):
                if conn.in_size != flat_size(src) or (conn.out_size,) != dst:
                    raise ValueError(f"connection {i} does not join {src} to {dst}")
            else:
                if conn.in_shape != src or conn.out_shape() != dst:
                    raise ValueError(f"connection {i} does not join {src} to {dst}")
        out = flat_size(self.layer_shapes[-1])
        if out != self.n_classes * self.n_perclass:
            raise ValueError(
                f"output layer has {out} neurons, expected "
                f"{self.n_classes} x {self.n_perclass}")

    @property
    def n_free_layers(self) -> int:
        """Layers that carry state (everything but the clamped input)."""
        return len(self.layer_shapes) - 1


@dataclass
class Params:
    """Per-connection weight tensors, updated in place by the optimizer."""

    weights: list[np.ndarray]

    def copy(self) -> "Params":
        return Params([w.copy() for w in self.weights])


@dataclass
class NetworkState:
    """Membrane potentials for the free layers of a batch; xi[j] has
    shape (batch, *layer_shapes[j + 1])."""

    xi: list[np.ndarray]

    def copy(self) -> "NetworkState":
        return NetworkState([a.copy() for a in self.xi])

    @property
    def batch(self) -> int:
        return self.xi[0].shape[0]


def zero_state(topology: Topology, batch: int) -> NetworkState:
    return NetworkState([np.zeros((batch,) + shape)
                         for shape in topology.layer_shapes[1:]])


def init_params(topology: Topology, seed: int) -> Params:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)) per connection.

    The bound keeps initial drives inside the active band of the hard
    sigmoid for the gains used here.
    """
    weights = []
    for i, conn in enumerate(topology.connections):
        fan_in, fan_out = conn.fans()
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        gen = rng.derive(seed, "init", i)
        weights.append(gen.uniform(-bound, bound, conn.weight_shape()))
    return Params(weights)


def uniform_positive_params(topology: Topology, seed: int, lo: float = 0.008,
                            hi: float = 0.035) -> Params:
    """Weak all-positive weights.

    With moderate inputs every unit then settles strictly inside the
    transfer band, the regime where the two-fixed-point contrast is a
    clean linear response.  Mixed-sign weights generically park some
    units against a band edge instead.  This is the init the gradient
    verification harness runs on.
    """
    if not 0.0 < lo < hi:
        raise ValueError(f"need 0 < lo < hi, got ({lo}, {hi})")
    weights = []
    for i, conn in enumerate(topology.connections):
        gen = rng.derive(seed, "init-positive", i)
        weights.append(gen.uniform(lo, hi, conn.weight_shape()))
    return Params(weights)


def dense_chain(sizes: list[int], n_classes: int, n_perclass: int = 1) -> Topology:
    """Fully connected chain; `sizes` lists input and hidden widths, the
    output layer is appended from the class counts."""
    widths = list(sizes) + [n_classes * n_perclass]
    layers = tuple((w,) for w in widths)
    conns = tuple(DenseConn(widths[i], widths[i + 1]) for i in range(len(widths) - 1))
    return Topology(layers, conns, n_classes, n_perclass)


def conv_chain(input_shape: tuple[int, int, int], conv_specs: list[dict],
               n_classes: int, n_perclass: int = 1) -> Topology:
    """Conv stack followed by one dense classifier connection.

    Each spec dict gives out_channels, kernel, stride, padding and an
    optional pool (window, stride).
    """
    layers: list[tuple[int, ...]] = [input_shape]
    conns: list[Connection] = []
    shape = input_shape
    for spec in conv_specs:
        conn = ConvConn(in_shape=shape, out_channels=spec["out_channels"],
                        kernel=spec["kernel"], stride=spec.get("stride", 1),
                        padding=spec.get("padding", 0),
                        pool_window=spec.get("pool_window"),
                        pool_stride=spec.get("pool_stride", 1))
        shape = conn.out_shape()
        layers.append(shape)
        conns.append(conn)
    out = n_classes * n_perclass
    conns.append(DenseConn(flat_size(shape), out))
    layers.append((out,))
    return Topology(tuple(layers), tuple(conns), n_classes, n_perclass)


def build_architecture(name: str, n_classes: int, n_perclass: int,
                       input_shape: tuple[int, ...] | None = None,
                       hidden: int = 512) -> Topology:
    """Named architectures used by the presets.

    `dense:a-b-c` builds an arbitrary fully connected chain (sizes before
    the output layer); the rest are the fixed stacks the experiments use.
    """
    if name.startswith("dense:"):
        sizes = [int(s) for s in name.split(":", 1)[1].split("-")]
        return dense_chain(sizes, n_classes, n_perclass)

    if name in ("1fc", "2fc"):
        if input_shape is None:
            input_shape = (1, 28, 28)
        n_in = flat_size(input_shape)
        hiddens = [hidden] if name == "1fc" else [hidden, hidden]
        return dense_chain([n_in] + hiddens, n_classes, n_perclass)

    if name == "2c":
        if input_shape is None:
            input_shape = (1, 28, 28)
        specs = [
            dict(out_channels=64, kernel=(5, 5), stride=1, padding=1,
                 pool_window=(3, 3), pool_stride=3),
            dict(out_channels=128, kernel=(5, 5), stride=1, padding=1,
                 pool_window=(3, 3), pool_stride=3),
        ]
        return conv_chain(input_shape, specs, n_classes, n_perclass)

    if name == "5c":
        if input_shape is None:
            input_shape = (3, 32, 32)
        # stride-2 convs halve the map each stage; one final 2x2 pool
        # brings the last 2x2 map to a single spatial cell
        specs = [
            dict(out_channels=64, kernel=(5, 5), stride=2, padding=2),
            dict(out_channels=128, kernel=(5, 5), stride=2, padding=2),
            dict(out_channels=256, kernel=(5, 5), stride=2, padding=2),
            dict(out_channels=256, kernel=(5, 5), stride=2, padding=2,
                 pool_window=(2, 2), pool_stride=2),
        ]
        return conv_chain(input_shape, specs, n_classes, n_perclass)

    if name == "3c":
        if input_shape is None:
            input_shape = (2, 32, 32)
        specs = [
            dict(out_channels=64, kernel=(5, 5), stride=1, padding=1,
                 pool_window=(2, 2), pool_stride=2),
            dict(out_channels=128, kernel=(5, 5), stride=1, padding=1,
                 pool_window=(2, 2), pool_stride=2),
            dict(out_channels=256, kernel=(5, 5), stride=1, padding=1,
                 pool_window=(2, 2), pool_stride=2),
        ]
        return conv_chain(input_shape, specs, n_classes, n_perclass)

    if name == "tiny_conv":
        if input_shape is None:
            input_shape = (2, 8, 8)
        specs = [dict(out_channels=8, kernel=(3, 3), stride=1, padding=1,
                      pool_window=(2, 2), pool_stride=2)]
        return conv_chain(input_shape, specs, n_classes, n_perclass)

    raise ValueError(f"unknown architecture {name!r}")


def topology_to_dict(topology: Topology) -> dict:
    conns = []
    for c in topology.connections:
        if isinstance(c, DenseConn):
            conns.append({"kind": "dense", "in_size": c.in_size, "out_size": c.out_size})
        else:
            conns.append({"kind": "conv", "in_shape": list(c.in_shape),
                          "out_channels": c.out_channels, "kernel": list(c.kernel),
                          "stride": c.stride, "padding": c.padding,
                          "pool_window": list(c.pool_window) if c.pool_window else None,
                          "pool_stride": c.pool_stride})
    return {"layer_shapes": [list(s) for s in topology.layer_shapes],
            "connections": conns,
            "n_classes": topology.n_classes,
            "n_perclass": topology.n_perclass}


def topology_from_dict(d: dict) -> Topology:
    conns: list[Connection] = []
    for c in d["connections"]:
        if c["kind"] == "dense":
            conns.append(DenseConn(c["in_size"], c["out_size"]))
        else:
            conns.append(ConvConn(tuple(c["in_shape"]), c["out_channels"],
                                  tuple(c["kernel"]), c["stride"], c["padding"],
                                  tuple(c["pool_window"]) if c["pool_window"] else None,
                                  c["pool_stride"]))
    return Topology(tuple(tuple(s) for s in d["layer_shapes"]), tuple(conns),
                    d["n_classes"], d["n_perclass"])
