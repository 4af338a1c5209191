"""Ground-truth gradients by brute force.

The estimator the trainer uses never sees a loss gradient directly; it
reads one off the contrast between two settled states.  To check that
this is actually the gradient of something, this module computes the
same quantity the slow honest way: relax the deterministic rate model
to its free fixed point, evaluate the squared output error there, and
differentiate through the whole settling process by central finite
differences, one weight at a time.

Everything here is deliberately independent of the estimator code
paths: no energy gradients, no nudging, just loss values at perturbed
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import FixedPoint, PhaseConfig, relax_meanfield
from .energy import LayeredEnergyModel
from .network import NetworkState, zero_state

# past this many weights the per-weight loop stops being a desk job
MAX_FD_WEIGHTS = 5000

_CHUNK = 50


@dataclass(frozen=True)
class OracleConfig:
    """Finite-difference settings: perturbation size, the relaxation
    budget, the residual below which a state counts as settled, and the
    relaxation step size."""

    epsilon: float = 1e-4
    relax_steps: int = 2000
    residual_tol: float = 1e-10
    lam: float = 0.2

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.relax_steps < 1:
            raise ValueError(f"relax_steps must be >= 1, got {self.relax_steps}")


class OracleError(RuntimeError):
    """The mean-field relaxation did not settle, so no ground truth is
    available."""

    def __init__(self, steps: int, residual: float, tol: float):
        super().__init__(
            f"no fixed point after {steps} steps: residual {residual:.3e} "
            f"above tolerance {tol:.1e}")
        self.steps = steps
        self.residual = residual


def settle(model: LayeredEnergyModel, x: np.ndarray, ocfg: OracleConfig,
           init_state: NetworkState | None = None) -> FixedPoint:
    """Relax to the mean-field free fixed point, in chunks so a warm
    start can return early.  Raises OracleError if the residual never
    reaches the tolerance within the step budget."""
    state = init_state if init_state is not None else zero_state(
        model.topology, x.shape[0])
    done = 0
    fp = None
    while done < ocfg.relax_steps:
        steps = min(_CHUNK, ocfg.relax_steps - done)
        fp = relax_meanfield(model, x, state, PhaseConfig(ocfg.lam, steps))
        state = fp.state
        done += steps
        if fp.residual <= ocfg.residual_tol:
            return fp
    raise OracleError(done, fp.residual, ocfg.residual_tol)


def _loss(output: np.ndarray, y: np.ndarray) -> float:
    b = output.shape[0]
    return float(0.5 * ((output - y) ** 2).sum() / b)


def loss_at_fixed_point(model: LayeredEnergyModel, x: np.ndarray,
                        y: np.ndarray, ocfg: OracleConfig,
                        init_state: NetworkState | None = None) -> float:
    """Half squared distance between the settled output state and the
    target, averaged over the batch (matching the batch-mean gradient
    convention of the estimators)."""
    fp = settle(model, x, ocfg, init_state)
    return _loss(fp.state.xi[-1], y)


def fd_gradient(model: LayeredEnergyModel, x: np.ndarray, y: np.ndarray,
                ocfg: OracleConfig) -> list[np.ndarray]:
    """Central-difference loss gradient, one entry per weight, each side
    re-settled to its own fixed point.

    Perturbed relaxations warm-start from the unperturbed fixed point;
    with the residual tolerance enforced on every settle this changes
    nothing but the runtime.  O(epsilon^2) truncation error.
    """
    n_weights = sum(w.size for w in model.params.weights)
    if n_weights > MAX_FD_WEIGHTS:
        raise ValueError(
            f"{n_weights} weights is past the per-weight differentiation "
            f"budget of {MAX_FD_WEIGHTS}")
    base = settle(model, x, ocfg)
    eps = ocfg.epsilon
    grads = []
    for w in model.params.weights:
        g = np.zeros_like(w)
        flat_w = w.reshape(-1)
        flat_g = g.reshape(-1)
        for k in range(flat_w.size):
            orig = flat_w[k]
            flat_w[k] = orig + eps
            plus = loss_at_fixed_point(model, x, y, ocfg, base.state)
            flat_w[k] = orig - eps
            minus = loss_at_fixed_point(model, x, y, ocfg, base.state)
            flat_w[k] = orig
            flat_g[k] = (plus - minus) / (2.0 * eps)
        grads.append(g)
    return grads


def cosine(a: list[np.ndarray], b: list[np.ndarray]) -> list[float]:
    """Per-connection cosine similarity between two Params-shaped
    gradients; 0 where either side is all zero."""
    out = []
    for ga, gb in zip(a, b):
        na = float(np.linalg.norm(ga))
        nb = float(np.linalg.norm(gb))
        if na == 0.0 or nb == 0.0:
            out.append(0.0)
        else:
            out.append(float((ga * gb).sum() / (na * nb)))
    return out
