"""Energy functions against independent scalar references."""

import numpy as np
import pytest

from conftest import make_conv_model, make_dense_model, random_input, random_state
from stochep import rng
from stochep.energy import (LayeredEnergyModel, denergy_dw, energy_det,
                            energy_expected, energy_stoch)
from stochep.network import DenseConn, Topology, Params, zero_state


def clamp(v, kappa):
    return min(max(kappa * v, 0.0), 1.0)


def scalar_dense_energy(weights, kappa, x_row, xi_rows):
    """Independent per-scalar evaluation for a dense chain, one sample."""
    quad = 0.5 * sum(float(v) ** 2 for xi in xi_rows for v in xi)
    rho = [list(x_row)] + [[clamp(v, kappa) for v in xi] for xi in xi_rows]
    inter = 0.0
    for w, pre, post in zip(weights, rho[:-1], rho[1:]):
        for o in range(len(post)):
            for i in range(len(pre)):
                inter += post[o] * w[o, i] * pre[i]
    return quad - inter


def test_energy_zero_state_is_zero(gen):
    model = make_dense_model()
    x = random_input(model, 3, gen)
    state = zero_state(model.topology, 3)
    assert np.array_equal(energy_det(model, x, state), np.zeros(3))


def test_energy_saturated_identity_weights():
    # one connection, identity weights, everything saturated at rate 1:
    # E = 1/2 ||xi||^2 - dim
    topo = Topology(((4,), (4,)), (DenseConn(4, 4),), n_classes=4)
    model = LayeredEnergyModel(topo, Params([np.eye(4)]), kappa=2.0)
    x = np.ones((1, 4))
    state = zero_state(topo, 1)
    state.xi[0][:] = 2.0  # well past 1/kappa
    want = 0.5 * 4 * 4.0 - 4.0
    assert energy_det(model, x, state)[0] == pytest.approx(want, abs=1e-12)


def test_energy_matches_scalar_loop(gen):
    model = make_dense_model(sizes=(5, 7), n_classes=3, seed=2)
    x = random_input(model, 2, gen)
    state = random_state(model, 2, gen)
    got = energy_det(model, x, state)
    for b in range(2):
        want = scalar_dense_energy(model.params.weights, model.kappa,
                                   x[b], [xi[b] for xi in state.xi])
        assert abs(got[b] - want) <= 1e-12


def test_energy_expected_equals_det_bitwise(gen):
    model = make_conv_model(seed=3)
    x = random_input(model, 2, gen)
    state = random_state(model, 2, gen)
    assert np.array_equal(energy_expected(model, x, state),
                          energy_det(model, x, state))


def test_energy_shape_mismatch_rejected(gen):
    model = make_dense_model()
    x = random_input(model, 2, gen)
    state = zero_state(model.topology, 2)
    state.xi[0] = state.xi[0][:, :-1]
    with pytest.raises(ValueError):
        energy_det(model, x, state)


def test_energy_stoch_quadratic_term_matches_det():
    # rates saturated at zero: no spikes can be drawn, so the stochastic
    # energy is exactly the quadratic term
    model = make_dense_model(seed=4)
    x = np.zeros((1,) + model.topology.layer_shapes[0])
    state = zero_state(model.topology, 1)
    for xi in state.xi:
        xi[:] = -0.3  # sigma = 0 everywhere
    streams = rng.SpikeStreams(seed=5)
    got = energy_stoch(model, x, state, streams, np.array([0]))
    want = sum(0.5 * (xi ** 2).sum() for xi in state.xi)
    assert got[0] == pytest.approx(want, abs=1e-12)


def test_energy_stoch_mean_approaches_expected(gen):
    model = make_dense_model(sizes=(6, 5), n_classes=3, seed=6)
    x = random_input(model, 1, gen)
    state = random_state(model, 1, gen)
    streams = rng.SpikeStreams(seed=7)
    n = 10_000
    draws = np.array([energy_stoch(model, x, state, streams, np.array([0]), t)[0]
                      for t in range(n)])
    want = energy_expected(model, x, state)[0]
    se = draws.std(ddof=1) / np.sqrt(n)
    assert abs(draws.mean() - want) <= 3.0 * se


def test_denergy_dw_zero_state(gen):
    model = make_dense_model()
    x = np.zeros((2,) + model.topology.layer_shapes[0])
    grads = denergy_dw(model, x, zero_state(model.topology, 2))
    assert all(not g.any() for g in grads)


def test_denergy_dw_outer_product_toy():
    # rates e1 (pre) and e2 (post) make the gradient -e2 e1^T
    topo = Topology(((2,), (2,)), (DenseConn(2, 2),), n_classes=2)
    model = LayeredEnergyModel(topo, Params([np.zeros((2, 2))]), kappa=2.0)
    x = np.array([[0.5, 0.0]])  # input rate is x itself
    state = zero_state(topo, 1)
    state.xi[0][:] = [0.0, 0.5]  # sigma -> [0, 1]
    (g,) = denergy_dw(model, x, state)
    assert np.array_equal(g, -np.outer([0.0, 1.0], [0.5, 0.0]))


@pytest.mark.parametrize("factory,seed", [(make_dense_model, 8), (make_conv_model, 9)])
def test_denergy_dw_matches_finite_differences(factory, seed, gen):
    model = factory(seed=seed)
    x = random_input(model, 2, gen)
    state = random_state(model, 2, gen)
    grads = denergy_dw(model, x, state)
    eps = 1e-6
    probe = np.random.default_rng(seed)
    for ci, w in enumerate(model.params.weights):
        flat = probe.choice(w.size, size=min(10, w.size), replace=False)
        for fi in flat:
            idx = np.unravel_index(fi, w.shape)
            keep = w[idx]
            w[idx] = keep + eps
            e_plus = energy_expected(model, x, state).sum()
            w[idx] = keep - eps
            e_minus = energy_expected(model, x, state).sum()
            w[idx] = keep
            fd = (e_plus - e_minus) / (2 * eps)
            scale = max(1.0, abs(fd))
            assert abs(grads[ci][idx] - fd) <= 1e-6 * scale, (ci, idx)


def test_denergy_dw_conv_shapes(gen):
    model = make_conv_model(seed=10)
    x = random_input(model, 3, gen)
    grads = denergy_dw(model, x, random_state(model, 3, gen))
    for g, w in zip(grads, model.params.weights):
        assert g.shape == w.shape
        assert np.isfinite(g).all()
