import numpy as np
import pytest

from conftest import make_dense_model, make_interior_model

from stochep.dynamics import PhaseConfig, relax_meanfield
from stochep.energy import LayeredEnergyModel
from stochep.network import Params, dense_chain, zero_state
from stochep.oracle import (MAX_FD_WEIGHTS, OracleConfig, OracleError,
                            cosine, fd_gradient, loss_at_fixed_point, settle)
from stochep.rng import derive
from stochep.trainer import (GradEstimate, TrainConfig, apply_update,
                             ep_gradient_three_phase, ep_gradient_two_phase,
                             init_optimizer_state)


@pytest.fixture(scope="module")
def toy():
    """4-8-4 net with an interior fixed point, one batch, and its
    finite-difference gradient."""
    model = make_interior_model(sizes=(4, 8), n_classes=4, seed=3)
    feed = np.random.default_rng(103)
    x = feed.uniform(0.3, 0.8, (3, 4))
    labels = feed.integers(0, 4, 3)
    y = np.zeros((3, 4))
    y[np.arange(3), labels] = 1.0
    ocfg = OracleConfig(epsilon=1e-4, relax_steps=2000, residual_tol=1e-12)
    return model, x, y, ocfg, fd_gradient(model, x, y, ocfg)


def ep_cfg(beta, t=500):
    return TrainConfig(lam=0.2, t_free=t, t_nudge=t, beta=beta, kappa=2.0,
                       learning_rate=0.01, batch_size=4)


def test_config_validation():
    with pytest.raises(ValueError):
        OracleConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        OracleConfig(relax_steps=0)


def test_loss_zero_at_perfect_output(toy):
    model, x, _, ocfg, _ = toy
    fp = settle(model, x, ocfg)
    assert loss_at_fixed_point(model, x, fp.state.xi[-1].copy(), ocfg) == 0.0


def test_loss_zero_weights_closed_form():
    topo = dense_chain([5, 6], 3)
    params = Params([np.zeros(c.weight_shape()) for c in topo.connections])
    model = LayeredEnergyModel(topo, params, kappa=2.0)
    x = np.full((2, 5), 0.5)
    y = np.zeros((2, 3))
    y[0, 1] = 1.0
    y[1, 2] = 1.0
    ocfg = OracleConfig()
    # with zero weights the fixed point is the zero state
    assert loss_at_fixed_point(model, x, y, ocfg) == pytest.approx(
        0.5 * (y ** 2).sum() / 2)


def test_nonconvergence_raises():
    # full-scale weights sustain a limit cycle; the oracle must refuse
    model = make_dense_model(sizes=(8, 8), n_classes=4, seed=4)
    gen = np.random.default_rng(0)
    x = gen.uniform(0.0, 1.0, (2, 8))
    ocfg = OracleConfig(relax_steps=300, residual_tol=1e-10, lam=0.35)
    with pytest.raises(OracleError):
        loss_at_fixed_point(model, x, np.zeros((2, 4)), ocfg)


def test_settle_warm_start_reaches_same_fixed_point(toy):
    model, x, _, ocfg, _ = toy
    cold = settle(model, x, ocfg)
    half = relax_meanfield(model, x, zero_state(model.topology, x.shape[0]),
                           PhaseConfig(ocfg.lam, 30))
    warm = settle(model, x, ocfg, init_state=half.state)
    for a, b in zip(cold.state.xi, warm.state.xi):
        assert np.abs(a - b).max() <= 10 * ocfg.residual_tol


def test_fd_zero_error_sample_near_zero_gradient(toy):
    model, x, _, ocfg, _ = toy
    fp = settle(model, x, ocfg)
    fd = fd_gradient(model, x, fp.state.xi[-1].copy(), ocfg)
    assert max(np.abs(g).max() for g in fd) <= 1e-6


def test_fd_leaves_weights_untouched(toy):
    model, x, y, ocfg, _ = toy
    before = [w.copy() for w in model.params.weights]
    fd_gradient(model, x, y, ocfg)
    for w0, w1 in zip(before, model.params.weights):
        np.testing.assert_array_equal(w0, w1)


def test_two_phase_matches_oracle(toy):
    model, x, y, _, fd = toy
    ep = ep_gradient_two_phase(model, x, y, ep_cfg(0.05), derive(0, "sign"),
                               meanfield=True, force_sign=1.0)
    assert min(cosine(ep.tensors, fd)) >= 0.90


def test_three_phase_matches_oracle(toy):
    model, x, y, _, fd = toy
    ep = ep_gradient_three_phase(model, x, y, ep_cfg(0.01), derive(0, "sign"),
                                 meanfield=True)
    assert min(cosine(ep.tensors, fd)) >= 0.95


def test_cosine_improves_as_beta_shrinks(toy):
    model, x, y, _, fd = toy
    rng = derive(0, "sign")
    cos = {}
    for beta in (0.5, 0.1, 0.01):
        ep = ep_gradient_three_phase(model, x, y, ep_cfg(beta), rng,
                                     meanfield=True)
        cos[beta] = cosine(ep.tensors, fd)
    for c_small, c_mid, c_big in zip(cos[0.01], cos[0.1], cos[0.5]):
        assert c_small >= c_mid - 1e-9
        assert c_mid >= c_big - 1e-9
    # the large nudge genuinely degrades the estimate on this net
    assert min(cos[0.5]) < 0.9 < min(cos[0.01])


def test_fd_self_consistent_under_epsilon_halving(toy):
    model, x, y, _, _ = toy
    tight = dict(relax_steps=2000, residual_tol=1e-13)
    ref = fd_gradient(model, x, y, OracleConfig(epsilon=1e-5, **tight))
    dev = {}
    for eps in (1e-3, 1e-4):
        g = fd_gradient(model, x, y, OracleConfig(epsilon=eps, **tight))
        dev[eps] = max(np.abs(a - b).max() for a, b in zip(g, ref))
    # quadratic truncation: a 10x smaller step cuts the error ~100x
    assert dev[1e-3] > 10 * dev[1e-4]
    assert dev[1e-4] <= 1e-5


def test_loss_decreases_after_one_ep_step(toy):
    model, x, y, ocfg, _ = toy
    work = LayeredEnergyModel(model.topology, model.params.copy(), model.kappa)
    before = loss_at_fixed_point(work, x, y, ocfg)
    cfg = ep_cfg(0.05)
    grad = ep_gradient_two_phase(work, x, y, cfg, derive(0, "sign"),
                                 meanfield=True, force_sign=1.0)
    lr_cfg = TrainConfig(lam=cfg.lam, t_free=cfg.t_free, t_nudge=cfg.t_nudge,
                         beta=cfg.beta, kappa=cfg.kappa, learning_rate=0.05,
                         batch_size=cfg.batch_size)
    apply_update(work.params, grad, init_optimizer_state(work.params, lr_cfg),
                 lr_cfg)
    after = loss_at_fixed_point(work, x, y, ocfg)
    assert after < before


def test_weight_budget_guard():
    model = make_dense_model(sizes=(100, 60), n_classes=4, seed=0)
    n = sum(w.size for w in model.params.weights)
    assert n > MAX_FD_WEIGHTS
    with pytest.raises(ValueError):
        fd_gradient(model, np.zeros((1, 100)), np.zeros((1, 4)), OracleConfig())
