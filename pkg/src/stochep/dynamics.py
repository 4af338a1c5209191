"""Fixed-point relaxation dynamics.

One relaxation step reads every layer's outgoing tensor (spikes, or
rates in mean-field mode), routes it through the connections in both
directions, and moves each membrane toward the gated drive:

    xi <- (1 - lam) * xi + lam * sigma'(xi) * (forward + feedback)

All layers update synchronously from the previous step's tensors.  The
nudge phase adds lam * beta * (target - xi) to the output layer, not
gated by sigma', so saturated output units can still be pulled back.
This update is exactly minus the state-gradient of the expected energy
(plus the nudge force), which is what makes the fixed points the
stationary points the learning rule contrasts.

Worker threads, when enabled, only farm out per-connection message
products; every numeric operation sees identical operands in an
identical order regardless of worker count, so results are bit-stable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .energy import (LayeredEnergyModel, check_shapes, draw_spikes,
                     feedback_message, forward_message, layer_rates)
from .neuron import (LowpassLifState, PredCodingLifState, lif_lowpass_step,
                     lif_predcoding_step, sigma, sigma_prime)
from .network import NetworkState, zero_state
from .rng import SpikeStreams

DIVERGENCE_LIMIT = 1e3


class DivergenceError(RuntimeError):
    """A membrane potential left the plausible range (mis-set lam/kappa,
    exploding weights, or a corrupted checkpoint)."""

    def __init__(self, step: int, layer: int, value: float):
        super().__init__(
            f"|xi| reached {value:.3g} at step {step}, layer {layer} "
            f"(limit {DIVERGENCE_LIMIT:g})")
        self.step = step
        self.layer = layer
        self.value = value


@dataclass(frozen=True)
class PhaseConfig:
    """One relaxation phase: free when beta == 0, nudged otherwise."""

    lam: float
    steps: int
    beta: float = 0.0
    record_traces: bool = False

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lam must be in (0, 1], got {self.lam}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


@dataclass
class FixedPoint:
    """Where a relaxation ended up.

    rates are sigma(state) per free layer; residual is the max-norm of
    the final step's state change; spike_density holds the mean of what
    actually flowed through each layer (input included) over the phase.
    """

    state: NetworkState
    rates: list[np.ndarray]
    residual: float
    spike_density: np.ndarray


@dataclass
class TraceLog:
    """Per-step recordings for the stability study.

    Scalar rows summarize each (step, layer); neuron_mean keeps the
    batch-averaged membrane of every neuron when tracing is on, which is
    what the stability criteria are computed from.
    """

    phase_boundary: int = -1
    steps: list[int] = field(default_factory=list)
    phases: list[int] = field(default_factory=list)
    layer_mean: list[list[float]] = field(default_factory=list)
    layer_var: list[list[float]] = field(default_factory=list)
    layer_rate: list[list[float]] = field(default_factory=list)
    neuron_mean: list[list[np.ndarray]] = field(default_factory=list)

    @property
    def n_recorded(self) -> int:
        return len(self.steps)

    def record(self, step: int, phase: int, xi_list: list[np.ndarray],
               flow_means: list[float]):
        self.steps.append(step)
        self.phases.append(phase)
        self.layer_mean.append([float(z.mean()) for z in xi_list])
        self.layer_var.append([float(z.var()) for z in xi_list])
        self.layer_rate.append(flow_means)
        self.neuron_mean.append([z.mean(axis=0).reshape(-1) for z in xi_list])

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            out = csv.writer(f)
            out.writerow(["step", "phase", "layer", "mean_xi", "var_xi", "firing_rate"])
            for r in range(self.n_recorded):
                for layer in range(len(self.layer_mean[r])):
                    out.writerow([self.steps[r], self.phases[r], layer,
                                  f"{self.layer_mean[r][layer]:.9g}",
                                  f"{self.layer_var[r][layer]:.9g}",
                                  f"{self.layer_rate[r][layer]:.9g}"])


def _compute_messages(model: LayeredEnergyModel, flows: list[np.ndarray], pool):
    """Forward and feedback messages for every connection, in two waves
    (feedback needs the forward wave's pooling indices).  The optional
    executor only changes where each product is computed, never what is
    summed in what order."""
    conns = model.topology.connections
    weights = model.params.weights
    fwd_jobs = [lambda i=i: forward_message(conns[i], weights[i], flows[i])
                for i in range(len(conns))]
    if pool is None:
        fwd = [job() for job in fwd_jobs]
    else:
        fwd = list(pool.map(lambda job: job(), fwd_jobs))
    src_shapes = model.topology.layer_shapes
    fb_jobs = [lambda i=i: feedback_message(conns[i], weights[i], flows[i + 1],
                                            fwd[i][1], src_shapes[i])
               for i in range(1, len(conns))]
    if pool is None:
        fb = [job() for job in fb_jobs]
    else:
        fb = list(pool.map(lambda job: job(), fb_jobs))
    return [m for m, _ in fwd], fb


def _relax(model: LayeredEnergyModel, x: np.ndarray, init_state: NetworkState,
           phase: PhaseConfig, target, streams, sample_indices, step_offset,
           pool, stochastic: bool) -> tuple[FixedPoint, TraceLog]:
    check_shapes(model, x, state=init_state)
    if phase.beta != 0.0 and target is None:
        raise ValueError("nudged relaxation needs a target")
    if stochastic and (streams is None or sample_indices is None):
        raise ValueError("stochastic relaxation needs spike streams and sample indices")

    topo = model.topology
    lam, kappa = phase.lam, model.kappa
    n_free = topo.n_free_layers
    state = init_state.copy()
    trace = TraceLog()
    density = np.zeros(n_free + 1)
    delta_max = 0.0

    for t in range(phase.steps):
        gstep = step_offset + t
        if stochastic:
            flows = draw_spikes(model, x, state, streams, sample_indices, gstep)
        else:
            flows = layer_rates(model, x, state)
        for layer, flow in enumerate(flows):
            density[layer] += flow.mean()

        fwd, fb = _compute_messages(model, flows, pool)

        last = t == phase.steps - 1
        new_xi = []
        for j in range(n_free):
            drive = fwd[j]
            if j < n_free - 1:
                drive = drive + fb[j]
            nxt = (1.0 - lam) * state.xi[j] + lam * sigma_prime(state.xi[j], kappa) * drive
            if phase.beta != 0.0 and j == n_free - 1:
                nxt += lam * phase.beta * (target - state.xi[j])
            m = np.abs(nxt).max() if nxt.size else 0.0
            if not m <= DIVERGENCE_LIMIT:
                raise DivergenceError(gstep, j + 1, float(m))
            if last:
                delta_max = max(delta_max, float(np.abs(nxt - state.xi[j]).max()))
            new_xi.append(nxt)
        state = NetworkState(new_xi)

        if phase.record_traces:
            trace.record(gstep, int(phase.beta != 0.0), state.xi,
                         [float(f.mean()) for f in flows])

    fp = FixedPoint(state=state,
                    rates=[sigma(xi, kappa) for xi in state.xi],
                    residual=delta_max,
                    spike_density=density / phase.steps)
    return fp, trace


def relax(model: LayeredEnergyModel, x: np.ndarray, init_state: NetworkState,
          phase: PhaseConfig, target: np.ndarray | None,
          streams: SpikeStreams, sample_indices: np.ndarray,
          step_offset: int = 0, pool=None) -> tuple[FixedPoint, TraceLog]:
    """Stochastic relaxation: every step draws fresh spikes from the
    addressed streams.  step_offset shifts the stream addresses, which
    is how the nudge phase (and later sequence frames) get draws that
    are distinct from the free phase yet shared between the +beta and
    -beta variants."""
    return _relax(model, x, init_state, phase, target, streams,
                  sample_indices, step_offset, pool, stochastic=True)


def relax_meanfield(model: LayeredEnergyModel, x: np.ndarray,
                    init_state: NetworkState, phase: PhaseConfig,
                    target: np.ndarray | None = None, step_offset: int = 0,
                    pool=None) -> FixedPoint:
    """Deterministic rate relaxation: spikes replaced by their
    expectations.  Same update rule, no randomness; this is the model
    the gradient oracle differentiates."""
    fp, _ = _relax(model, x, init_state, phase, target, None, None,
                   step_offset, pool, stochastic=False)
    return fp


def free_then_nudge(model: LayeredEnergyModel, x: np.ndarray, target: np.ndarray,
                    lam: float, t_free: int, t_nudge: int, beta: float,
                    streams: SpikeStreams, sample_indices: np.ndarray,
                    step_offset: int = 0, pool=None, record_traces: bool = False
                    ) -> tuple[FixedPoint, FixedPoint, TraceLog]:
    """Free phase from zero init, then a nudged phase continuing from the
    free fixed point.  Returns both fixed points and the (possibly
    empty) concatenated trace."""
    free_phase = PhaseConfig(lam, t_free, 0.0, record_traces)
    init = zero_state(model.topology, x.shape[0])
    free_fp, free_trace = relax(model, x, init, free_phase, None, streams,
                                sample_indices, step_offset, pool)
    nudge_phase = PhaseConfig(lam, t_nudge, beta, record_traces)
    nudge_fp, nudge_trace = relax(model, x, free_fp.state, nudge_phase, target,
                                  streams, sample_indices,
                                  step_offset + t_free, pool)
    trace = free_trace
    if record_traces:
        trace.phase_boundary = step_offset + t_free
        trace.steps += nudge_trace.steps
        trace.phases += nudge_trace.phases
        trace.layer_mean += nudge_trace.layer_mean
        trace.layer_var += nudge_trace.layer_var
        trace.layer_rate += nudge_trace.layer_rate
        trace.neuron_mean += nudge_trace.neuron_mean
    return free_fp, nudge_fp, trace


def relax_lif(model: LayeredEnergyModel, x: np.ndarray, steps: int,
              cell: str, lam: float = 0.5, alpha: float = 0.5,
              decay: float = 0.9, threshold: float = 1.0) -> TraceLog:
    """Run the network with deterministic LIF cells in place of the
    stochastic neuron, recording membrane traces.

    Baselines for the stability study only.  `cell` picks the variant:
    "plain" (hard-reset LIF transmitting raw spikes), "lowpass" (same
    cell transmitting a moving average of its spikes), or "predcoding"
    (encoder/decoder cell whose spikes carry rate changes).  The input
    layer transmits its intensities unchanged; these baselines are
    deterministic by construction.
    """
    if cell not in ("plain", "lowpass", "predcoding"):
        raise ValueError(f"unknown LIF cell {cell!r}")
    topo = model.topology
    n_free = topo.n_free_layers
    shapes = [(x.shape[0],) + s for s in topo.layer_shapes[1:]]
    if cell == "predcoding":
        states = [PredCodingLifState.zeros(s) for s in shapes]
    else:
        states = [LowpassLifState.zeros(s) for s in shapes]
    outgoing = [np.zeros(s) for s in shapes]
    trace = TraceLog()

    for t in range(steps):
        flows = [x] + outgoing
        fwd, fb = _compute_messages(model, flows, None)
        new_states, new_out, membranes = [], [], []
        for j in range(n_free):
            drive = fwd[j]
            if j < n_free - 1:
                drive = drive + fb[j]
            if cell == "predcoding":
                st, spikes = lif_predcoding_step(states[j], drive, lam, alpha,
                                                 model.kappa, threshold)
                transmit = spikes
                membrane = st.xi
            else:
                st, spikes = lif_lowpass_step(states[j], drive, decay, threshold)
                transmit = st.rate if cell == "lowpass" else spikes
                membrane = st.v
            new_states.append(st)
            new_out.append(transmit)
            membranes.append(membrane)
        states, outgoing = new_states, new_out
        trace.record(t, 0, membranes, [float(f.mean()) for f in flows])
    return trace


def _neuron_series(trace: TraceLog) -> np.ndarray:
    """(steps, total neurons) matrix of batch-averaged membranes."""
    if not trace.neuron_mean:
        raise ValueError("trace was recorded without per-neuron membranes")
    return np.stack([np.concatenate(per_layer) for per_layer in trace.neuron_mean])


def stability_report(traces: dict[str, TraceLog], last_n: int = 10) -> dict:
    """Summarize membrane stability per model variant.

    For each trace: per-neuron variance over the final `last_n` recorded
    free-phase steps, averaged over neurons, plus the final free-phase
    residual (max change of any batch-averaged membrane between the last
    two free steps).  Lower variance means the membranes sit still at
    equilibrium instead of oscillating.
    """
    summary = {}
    for label, trace in traces.items():
        series = _neuron_series(trace)
        free = [i for i, p in enumerate(trace.phases) if p == 0]
        tail = series[free[-last_n:]]
        summary[label] = {
            "last_steps_var": float(tail.var(axis=0).mean()),
            "final_residual": float(np.abs(series[free[-1]] - series[free[-2]]).max()),
        }
    return summary


def write_stability_csv(summary: dict, path):
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["model", "last_steps_var", "final_residual"])
        for label, row in summary.items():
            out.writerow([label, f"{row['last_steps_var']:.9g}",
                          f"{row['final_residual']:.9g}"])
