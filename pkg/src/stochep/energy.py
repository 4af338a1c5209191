"""Energy functions of the layered network.

The scalar energy is quadratic in the membrane potentials minus the
interaction carried by each connection:

    E = 1/2 sum_i ||xi_i||^2 - sum_i <rho(xi_{i+1}), forward_i(rho(xi_i))>

where rho is the firing rate.  Three variants share this shape and
differ only in what flows through the connections: the deterministic
and expected energies use the rates themselves (they are the same
function here, since the rate nonlinearity doubles as the activation),
and the stochastic energy uses freshly drawn Bernoulli spikes.  The
clamped input layer contributes its raw intensities as rates, has no
quadratic term, and touches only the first connection.

The relaxation dynamics are exactly the negative state-gradient of the
expected energy, and the learning rule contrasts `denergy_dw` between
two fixed points, so the message helpers here are the single source of
truth for what the network computes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import (PoolIndices, conv2d_adjoint_batch, conv2d_batch,
                     conv2d_kernel_grad, maxpool, unpool)
from .network import Connection, ConvConn, DenseConn, NetworkState, Params, Topology
from .neuron import sample_spikes, sigma
from .rng import SpikeStreams


@dataclass(frozen=True)
class LayeredEnergyModel:
    topology: Topology
    params: Params
    kappa: float

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        for w, conn in zip(self.params.weights, self.topology.connections):
            if w.shape != conn.weight_shape():
                raise ValueError(f"weight shape {w.shape} does not match {conn}")


def forward_message(conn: Connection, w: np.ndarray, src: np.ndarray
                    ) -> tuple[np.ndarray, PoolIndices | None]:
    """Drive a connection sends its upper layer, given the lower layer's
    outgoing tensor (rates or spikes).  Conv connections also return the
    pooling argmax indices so the same step's feedback can invert them."""
    if isinstance(conn, DenseConn):
        return src.reshape(src.shape[0], -1) @ w.T, None
    conv = conv2d_batch(src, w, conn.stride, conn.padding)
    if conn.pool_window is None:
        return conv, None
    pooled, idx = maxpool(conv, conn.pool_window, conn.pool_stride)
    return pooled, idx


def feedback_message(conn: Connection, w: np.ndarray, dst: np.ndarray,
                     pool_idx: PoolIndices | None,
                     src_shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint drive a connection sends its lower layer, given the upper
    layer's outgoing tensor, the forward pass's pooling indices, and the
    lower layer's natural shape (a dense connection flattens it going
    forward, so it cannot be recovered from the weights)."""
    if isinstance(conn, DenseConn):
        return (dst @ w).reshape((dst.shape[0],) + tuple(src_shape))
    if conn.pool_window is not None:
        b = dst.shape[0]
        target = (b, conn.out_channels) + conn.conv_hw()
        dst = unpool(dst, pool_idx, target)
    return conv2d_adjoint_batch(dst, w, conn.in_shape[1:], conn.stride, conn.padding)


def layer_rates(model: LayeredEnergyModel, x: np.ndarray,
                state: NetworkState) -> list[np.ndarray]:
    """Rates of every layer, input first.  The input's rate is x itself."""
    return [x] + [sigma(xi, model.kappa) for xi in state.xi]


def draw_spikes(model: LayeredEnergyModel, x: np.ndarray, state: NetworkState,
                streams: SpikeStreams, sample_indices: np.ndarray,
                time_step: int) -> list[np.ndarray]:
    """One synchronous round of Bernoulli spikes for every layer.

    Each (sample, layer) draws from its own addressed stream, so the
    spike trains are reproducible regardless of batching or scheduling.
    """
    rates = layer_rates(model, x, state)
    spikes = []
    for layer_index, rate in enumerate(rates):
        u = np.empty_like(rate)
        for row, sid in enumerate(sample_indices):
            u[row] = streams.uniform(int(sid), layer_index, time_step, rate.shape[1:])
        spikes.append(sample_spikes(rate, u))
    return spikes


def check_shapes(model: LayeredEnergyModel, x: np.ndarray, state: NetworkState):
    topo = model.topology
    if x.shape[1:] != topo.layer_shapes[0] and x.shape[1:] != (np.prod(topo.layer_shapes[0]),):
        raise ValueError(f"input shape {x.shape[1:]} does not match layer {topo.layer_shapes[0]}")
    if len(state.xi) != topo.n_free_layers:
        raise ValueError(f"state has {len(state.xi)} layers, topology wants {topo.n_free_layers}")
    for j, xi in enumerate(state.xi):
        if xi.shape[1:] != topo.layer_shapes[j + 1]:
            raise ValueError(f"layer {j + 1} state shape {xi.shape[1:]} "
                             f"does not match {topo.layer_shapes[j + 1]}")


def _energy_from_flows(model: LayeredEnergyModel, state: NetworkState,
                       flows: list[np.ndarray]) -> np.ndarray:
    """Per-sample energy given each layer's outgoing tensor (rates or
    spikes).  The quadratic term always uses the membrane potentials."""
    b = state.batch
    quad = np.zeros(b)
    for xi in state.xi:
        quad += 0.5 * (xi.reshape(b, -1) ** 2).sum(axis=1)
    inter = np.zeros(b)
    for i, conn in enumerate(model.topology.connections):
        msg, _ = forward_message(conn, model.params.weights[i], flows[i])
        inter += (flows[i + 1].reshape(b, -1) * msg.reshape(b, -1)).sum(axis=1)
    return quad - inter


def energy_expected(model: LayeredEnergyModel, x: np.ndarray,
                    state: NetworkState) -> np.ndarray:
    """Per-sample expected energy: connections carry the firing rates."""
    check_shapes(model, x, state)
    return _energy_from_flows(model, state, layer_rates(model, x, state))


def energy_det(model: LayeredEnergyModel, x: np.ndarray,
               state: NetworkState) -> np.ndarray:
    """Deterministic energy.  Identical to energy_expected, because the
    activation and the firing rate are the same hard sigmoid."""
    return energy_expected(model, x, state)


def energy_stoch(model: LayeredEnergyModel, x: np.ndarray, state: NetworkState,
                 streams: SpikeStreams, sample_indices: np.ndarray,
                 time_step: int = 0) -> np.ndarray:
    """Per-sample stochastic energy: connections carry fresh Bernoulli
    spikes.  Averaged over draws it recovers energy_expected."""
    check_shapes(model, x, state)
    spikes = draw_spikes(model, x, state, streams, sample_indices, time_step)
    return _energy_from_flows(model, state, spikes)


def denergy_dw(model: LayeredEnergyModel, x: np.ndarray,
               state: NetworkState) -> list[np.ndarray]:
    """Gradient of the summed expected energy with respect to each
    connection's weights, accumulated over the batch.

    Per connection this is minus the correlation of the adjacent layers'
    rates: the outer product for dense connections, the kernel-shaped
    patch correlation (through the pooling selection) for conv ones.
    """
    check_shapes(model, x, state)
    rates = layer_rates(model, x, state)
    grads = []
    for i, conn in enumerate(model.topology.connections):
        src, dst = rates[i], rates[i + 1]
        b = src.shape[0]
        if isinstance(conn, DenseConn):
            grads.append(-np.einsum("bo,bi->oi", dst, src.reshape(b, -1)))
        else:
            w = model.params.weights[i]
            if conn.pool_window is not None:
                conv = conv2d_batch(src, w, conn.stride, conn.padding)
                _, idx = maxpool(conv, conn.pool_window, conn.pool_stride)
                dst = unpool(dst, idx, conv.shape)
            grads.append(-conv2d_kernel_grad(src, dst, conn.kernel,
                                             conn.stride, conn.padding))
    return grads
