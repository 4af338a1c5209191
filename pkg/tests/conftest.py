"""Shared toy-model builders for the test suite."""

import numpy as np
import pytest

from stochep.energy import LayeredEnergyModel
from stochep.network import (Topology, ConvConn, DenseConn, dense_chain,
                             init_params, uniform_positive_params, zero_state)


def make_dense_model(sizes=(6, 8), n_classes=4, n_perclass=1, seed=0,
                     kappa=2.0, weight_scale=1.0):
    """Small fully connected model; `sizes` is input plus hidden widths."""
    topo = dense_chain(list(sizes), n_classes, n_perclass)
    params = init_params(topo, seed)
    if weight_scale != 1.0:
        for w in params.weights:
            w *= weight_scale
    return LayeredEnergyModel(topo, params, kappa)


def make_interior_model(sizes=(6, 8), n_classes=4, seed=3, lo=0.008, hi=0.035,
                        kappa=2.0):
    """Weak all-positive weights so every unit settles deep inside the
    transfer band.  Mixed-sign weights generically park some units on a
    band edge, where linear response (which the estimator-agreement and
    oracle-comparison properties presuppose) breaks down."""
    topo = dense_chain(list(sizes), n_classes)
    params = uniform_positive_params(topo, seed, lo, hi)
    return LayeredEnergyModel(topo, params, kappa)


def make_conv_model(seed=0, kappa=2.0, weight_scale=1.0, pool=True):
    """Tiny conv model: (2, 8, 8) input -> conv 3ch -> dense 4-class head."""
    conv = ConvConn(in_shape=(2, 8, 8), out_channels=3, kernel=(3, 3),
                    stride=1, padding=1,
                    pool_window=(2, 2) if pool else None,
                    pool_stride=2 if pool else 1)
    mid = conv.out_shape()
    flat = int(np.prod(mid))
    topo = Topology(((2, 8, 8), mid, (4,)),
                    (conv, DenseConn(flat, 4)), n_classes=4, n_perclass=1)
    params = init_params(topo, seed)
    if weight_scale != 1.0:
        for w in params.weights:
            w *= weight_scale
    return LayeredEnergyModel(topo, params, kappa)


def random_state(model, batch, gen, lo=0.05, hi=None):
    """State with every membrane inside the active band of sigma."""
    if hi is None:
        hi = 1.0 / model.kappa - 0.05
    state = zero_state(model.topology, batch)
    for xi in state.xi:
        xi[:] = gen.uniform(lo, hi, xi.shape)
    return state


def random_input(model, batch, gen):
    return gen.uniform(0.0, 1.0, (batch,) + model.topology.layer_shapes[0])


@pytest.fixture
def gen():
    return np.random.default_rng(1234)
