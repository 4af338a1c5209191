"""Equilibrium-propagation training.

Learning contrasts two settled states of the same network: the free
fixed point, and the fixed point reached when the output layer is
weakly pulled toward the target.  Each connection's update is the
difference of its local energy gradient between the two states, scaled
by the inverse nudge strength, so every piece of information a weight
needs lives on the two layers it joins.

The plain two-phase estimate carries an O(beta) bias; two mitigations
are provided.  `random_sign` flips the nudge sign per batch so the bias
cancels in expectation.  `three_phase` runs both signed nudges from the
same free state and takes the symmetric difference, which cancels the
bias sample by sample.  Both nudge phases address the same spike-stream
time steps, so the paired estimates see common random numbers and their
average equals the symmetric estimate exactly.

Time-varying inputs reuse the same machinery once per frame: settle
free, settle nudged, update immediately, carry the nudged state into
the next frame.  A one-frame sequence is bitwise identical to the
static path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DivergenceError, FixedPoint, PhaseConfig, relax, relax_meanfield
from .energy import LayeredEnergyModel, denergy_dw
from .network import DenseConn, Params, Topology, zero_state
from .rng import SpikeStreams, stream_context

BIAS_MODES = ("random_sign", "three_phase")
OPTIMIZERS = ("sgd", "adamw")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters for one training run.

    lam is the relaxation step size, t_free/t_nudge the phase lengths,
    beta the nudge strength, kappa the transfer gain.  n_perclass widens
    the output layer to n_classes * n_perclass neurons whose per-class
    sums form the prediction.
    """

    lam: float
    t_free: int
    t_nudge: int
    beta: float
    kappa: float
    learning_rate: float
    batch_size: int
    n_perclass: int = 1
    bias_mode: str = "random_sign"
    optimizer: str = "sgd"
    weight_decay: float = 0.0
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.beta <= 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.n_perclass < 1:
            raise ValueError(f"n_perclass must be >= 1, got {self.n_perclass}")
        if self.bias_mode not in BIAS_MODES:
            raise ValueError(f"bias_mode must be one of {BIAS_MODES}, got {self.bias_mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.t_free < 1 or self.t_nudge < 1:
            raise ValueError("phase lengths must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class GradEstimate:
    """Per-connection gradient tensors (batch mean) plus the signed
    nudge strength that produced them."""

    tensors: list[np.ndarray]
    beta_used: float


class TrainingDiverged(RuntimeError):
    """Relaxation blew up while training; records which batch."""

    def __init__(self, batch_index: int, cause: DivergenceError):
        super().__init__(
            f"diverged on batch {batch_index}: {cause}")
        self.batch_index = batch_index
        self.cause = cause


class NonFiniteGradient(RuntimeError):
    """A gradient tensor contained nan or inf; the update was rejected."""

    def __init__(self, connection: int):
        super().__init__(
            f"non-finite gradient for connection {connection}; update rejected")
        self.connection = connection


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    """Moment accumulators for the adaptive optimizer; plain SGD keeps
    only the step counter."""

    step: int
    m: list[np.ndarray] | None
    v: list[np.ndarray] | None


def init_optimizer_state(params: Params, cfg: TrainConfig) -> OptimizerState:
    if cfg.optimizer == "adamw":
        return OptimizerState(0, [np.zeros_like(w) for w in params.weights],
                              [np.zeros_like(w) for w in params.weights])
    return OptimizerState(0, None, None)


def apply_update(params: Params, grad: GradEstimate,
                 optimizer_state: OptimizerState, cfg: TrainConfig) -> Params:
    """One optimizer step, in place.  Checks every tensor before touching
    any weight so a rejected update leaves the parameters untouched."""
    if len(grad.tensors) != len(params.weights):
        raise ValueError("gradient does not match parameter layout")
    for i, (g, w) in enumerate(zip(grad.tensors, params.weights)):
        if g.shape != w.shape:
            raise ValueError(f"gradient shape mismatch for connection {i}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(i)

    lr, wd = cfg.learning_rate, cfg.weight_decay
    optimizer_state.step += 1
    if cfg.optimizer == "sgd":
        for w, g in zip(params.weights, grad.tensors):
            if wd:
                w -= lr * wd * w
            w -= lr * g
        return params

    t = optimizer_state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for w, g, m, v in zip(params.weights, grad.tensors,
                          optimizer_state.m, optimizer_state.v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        if wd:
            w -= lr * wd * w
        w -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params


# ---------------------------------------------------------------------------
# output augmentation

def augment_outputs(topology: Topology, n_classes: int, n_perclass: int) -> Topology:
    """Rebuild the topology with an output layer of n_classes * n_perclass
    neurons.  The final connection must be dense."""
    last = topology.connections[-1]
    if not isinstance(last, DenseConn):
        raise TypeError("output augmentation needs a dense final connection")
    out = n_classes * n_perclass
    conns = topology.connections[:-1] + (DenseConn(last.in_size, out),)
    layers = topology.layer_shapes[:-1] + ((out,),)
    return Topology(layers, conns, n_classes, n_perclass)


def class_scores(output: np.ndarray, n_classes: int, n_perclass: int) -> np.ndarray:
    """Sum each class's contiguous block of output neurons: (batch,
    n_classes * n_perclass) -> (batch, n_classes)."""
    b = output.shape[0]
    return output.reshape(b, n_classes, n_perclass).sum(axis=2)


def predict(output: np.ndarray, n_classes: int, n_perclass: int) -> np.ndarray:
    return class_scores(output, n_classes, n_perclass).argmax(axis=1)


# ---------------------------------------------------------------------------
# gradient estimation

def _default_streams(cfg: TrainConfig, batch: int, streams, sample_indices):
    if streams is None:
        streams = SpikeStreams(cfg.seed)
    if sample_indices is None:
        sample_indices = np.arange(batch)
    return streams, sample_indices


def _settle(model, x, init_state, phase, target, streams, sample_indices,
            step_offset, meanfield, pool) -> FixedPoint:
    if meanfield:
        return relax_meanfield(model, x, init_state, phase, target,
                               step_offset, pool)
    fp, _ = relax(model, x, init_state, phase, target, streams,
                  sample_indices, step_offset, pool)
    return fp


def _two_phase(model, x, y, cfg, sign, streams, sample_indices, init_state,
               step_offset, meanfield, pool):
    """Free then one signed nudge; returns (grad, free_fp, nudge_fp)."""
    if init_state is None:
        init_state = zero_state(model.topology, x.shape[0])
    free_fp = _settle(model, x, init_state, PhaseConfig(cfg.lam, cfg.t_free),
                      None, streams, sample_indices, step_offset, meanfield, pool)
    beta = sign * cfg.beta
    nudge_fp = _settle(model, x, free_fp.state,
                       PhaseConfig(cfg.lam, cfg.t_nudge, beta), y, streams,
                       sample_indices, step_offset + cfg.t_free, meanfield, pool)
    g_free = denergy_dw(model, x, free_fp.state)
    g_nudge = denergy_dw(model, x, nudge_fp.state)
    scale = 1.0 / (beta * x.shape[0])
    grad = GradEstimate([(a - b) * scale for a, b in zip(g_nudge, g_free)], beta)
    return grad, free_fp, nudge_fp


def _three_phase(model, x, y, cfg, streams, sample_indices, init_state,
                 step_offset, meanfield, pool):
    """Free then both signed nudges from the same free state, at the same
    stream addresses; returns (grad, free_fp, plus_fp, minus_fp)."""
    if init_state is None:
        init_state = zero_state(model.topology, x.shape[0])
    free_fp = _settle(model, x, init_state, PhaseConfig(cfg.lam, cfg.t_free),
                      None, streams, sample_indices, step_offset, meanfield, pool)
    off = step_offset + cfg.t_free
    plus_fp = _settle(model, x, free_fp.state,
                      PhaseConfig(cfg.lam, cfg.t_nudge, cfg.beta), y, streams,
                      sample_indices, off, meanfield, pool)
    minus_fp = _settle(model, x, free_fp.state,
                       PhaseConfig(cfg.lam, cfg.t_nudge, -cfg.beta), y, streams,
                       sample_indices, off, meanfield, pool)
    g_plus = denergy_dw(model, x, plus_fp.state)
    g_minus = denergy_dw(model, x, minus_fp.state)
    scale = 1.0 / (2.0 * cfg.beta * x.shape[0])
    grad = GradEstimate([(a - b) * scale for a, b in zip(g_plus, g_minus)],
                        cfg.beta)
    return grad, free_fp, plus_fp, minus_fp


def ep_gradient_two_phase(model: LayeredEnergyModel, x: np.ndarray,
                          y: np.ndarray, cfg: TrainConfig,
                          rng: np.random.Generator, *, streams=None,
                          sample_indices=None, init_state=None,
                          step_offset: int = 0, meanfield: bool = False,
                          pool=None, force_sign: float | None = None
                          ) -> GradEstimate:
    """Contrast the free and nudged energy gradients, divided by the
    signed nudge strength and averaged over the batch.

    Under bias_mode random_sign the nudge sign is drawn from `rng` with
    probability one half per call; force_sign pins it for paired runs.
    """
    if force_sign is not None:
        sign = float(force_sign)
    elif cfg.bias_mode == "random_sign":
        sign = 1.0 if rng.random() < 0.5 else -1.0
    else:
        sign = 1.0
    if not meanfield:
        streams, sample_indices = _default_streams(cfg, x.shape[0], streams,
                                                   sample_indices)
    grad, _, _ = _two_phase(model, x, y, cfg, sign, streams, sample_indices,
                            init_state, step_offset, meanfield, pool)
    return grad


def ep_gradient_three_phase(model: LayeredEnergyModel, x: np.ndarray,
                            y: np.ndarray, cfg: TrainConfig,
                            rng: np.random.Generator, *, streams=None,
                            sample_indices=None, init_state=None,
                            step_offset: int = 0, meanfield: bool = False,
                            pool=None) -> GradEstimate:
    """Symmetric difference of the two signed nudge gradients; unbiased
    to second order in beta, at twice the relaxation cost."""
    if not meanfield:
        streams, sample_indices = _default_streams(cfg, x.shape[0], streams,
                                                   sample_indices)
    grad, _, _, _ = _three_phase(model, x, y, cfg, streams, sample_indices,
                                 init_state, step_offset, meanfield, pool)
    return grad


# ---------------------------------------------------------------------------
# training loops

@dataclass
class EpochMetrics:
    """Aggregates over one pass: mean per-sample loss, accuracy, and the
    measured mean firing rate of every layer (input first)."""

    loss: float
    accuracy: float
    firing_rates: np.ndarray
    n_samples: int


def sample_loss(output: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Squared distance between output state and target, halved, per
    sample; the quantity the nudge phase descends."""
    b = output.shape[0]
    return 0.5 * ((output - target) ** 2).reshape(b, -1).sum(axis=1)


class _Accumulator:
    def __init__(self, n_layers: int):
        self.loss = 0.0
        self.correct = 0
        self.n = 0
        self.rates = np.zeros(n_layers)

    def add(self, loss_vec, pred, labels, density):
        b = len(loss_vec)
        self.loss += float(loss_vec.sum())
        self.correct += int((pred == labels).sum())
        self.n += b
        self.rates += b * density

    def metrics(self) -> EpochMetrics:
        if self.n == 0:
            raise ValueError("empty dataset")
        return EpochMetrics(self.loss / self.n, self.correct / self.n,
                            self.rates / self.n, self.n)


def _batch_step(model, x, y, indices, cfg, streams, rng, opt_state, *,
                init_state, step_offset, pool):
    """Shared per-batch body of the static and temporal loops: settle,
    estimate, update.  Returns the free fixed point, the nudged state to
    carry into a following frame, and the per-sample loss."""
    if cfg.bias_mode == "three_phase":
        grad, free_fp, plus_fp, _ = _three_phase(
            model, x, y, cfg, streams, indices, init_state, step_offset,
            False, pool)
        carry = plus_fp
    else:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        grad, free_fp, carry = _two_phase(
            model, x, y, cfg, sign, streams, indices, init_state, step_offset,
            False, pool)
    apply_update(model.params, grad, opt_state, cfg)
    loss_vec = sample_loss(free_fp.state.xi[-1], y)
    return free_fp, carry, loss_vec


def train_epoch(model: LayeredEnergyModel, dataset, cfg: TrainConfig,
                rng: np.random.Generator, opt_state: OptimizerState | None = None,
                *, epoch: int = 0, pool=None) -> EpochMetrics:
    """One pass over batches of static inputs.

    `dataset` yields (sample_indices, inputs, expanded_targets); the
    indices address each sample's private spike streams.  Weights update
    after every batch.  Divergence aborts with the offending batch index.
    """
    if opt_state is None:
        opt_state = init_optimizer_state(model.params, cfg)
    topo = model.topology
    streams = SpikeStreams(cfg.seed, stream_context("train", epoch))
    acc = _Accumulator(topo.n_free_layers + 1)
    for batch_index, (indices, x, y) in enumerate(dataset):
        try:
            free_fp, _, loss_vec = _batch_step(
                model, x, y, indices, cfg, streams, rng, opt_state,
                init_state=None, step_offset=0, pool=pool)
        except DivergenceError as e:
            raise TrainingDiverged(batch_index, e) from e
        pred = predict(free_fp.state.xi[-1], topo.n_classes, topo.n_perclass)
        labels = class_scores(y, topo.n_classes, topo.n_perclass).argmax(axis=1)
        acc.add(loss_vec, pred, labels, free_fp.spike_density)
    return acc.metrics()


def train_temporal(model: LayeredEnergyModel, dataset, cfg: TrainConfig,
                   rng: np.random.Generator,
                   opt_state: OptimizerState | None = None, *, epoch: int = 0,
                   pool=None) -> EpochMetrics:
    """One pass over batches of frame sequences.

    Every frame settles free then nudged and updates the weights
    immediately; the nudged state carries over as the next frame's
    initialization, and frame tau's spike draws live at stream offset
    tau * (t_free + t_nudge).  The prediction sums the free output
    state over frames before taking the per-class argmax, and the loss
    reported is the per-frame mean.  A one-frame sequence reproduces
    train_epoch bitwise.
    """
    if opt_state is None:
        opt_state = init_optimizer_state(model.params, cfg)
    topo = model.topology
    streams = SpikeStreams(cfg.seed, stream_context("train", epoch))
    acc = _Accumulator(topo.n_free_layers + 1)
    for batch_index, (indices, x_seq, y) in enumerate(dataset):
        n_frames = x_seq.shape[1]
        carry = None
        out_sum = 0.0
        loss_sum = 0.0
        density = np.zeros(topo.n_free_layers + 1)
        for tau in range(n_frames):
            try:
                free_fp, carry_fp, loss_vec = _batch_step(
                    model, x_seq[:, tau], y, indices, cfg, streams, rng,
                    opt_state, init_state=carry,
                    step_offset=tau * (cfg.t_free + cfg.t_nudge), pool=pool)
            except DivergenceError as e:
                raise TrainingDiverged(batch_index, e) from e
            carry = carry_fp.state
            out_sum = out_sum + free_fp.state.xi[-1]
            loss_sum = loss_sum + loss_vec
            density += free_fp.spike_density
        pred = predict(out_sum, topo.n_classes, topo.n_perclass)
        labels = class_scores(y, topo.n_classes, topo.n_perclass).argmax(axis=1)
        acc.add(loss_sum / n_frames, pred, labels, density / n_frames)
    return acc.metrics()


def evaluate(model: LayeredEnergyModel, dataset, cfg: TrainConfig, *,
             context: int = 0, pool=None) -> EpochMetrics:
    """Free-phase-only pass with spikes sampled: settle each batch, take
    the class-group argmax, no weight changes, single repetition."""
    topo = model.topology
    streams = SpikeStreams(cfg.seed, stream_context("eval", context))
    acc = _Accumulator(topo.n_free_layers + 1)
    for indices, x, y in dataset:
        init = zero_state(topo, x.shape[0])
        fp, _ = relax(model, x, init, PhaseConfig(cfg.lam, cfg.t_free), None,
                      streams, indices, 0, pool)
        pred = predict(fp.state.xi[-1], topo.n_classes, topo.n_perclass)
        labels = class_scores(y, topo.n_classes, topo.n_perclass).argmax(axis=1)
        acc.add(sample_loss(fp.state.xi[-1], y), pred, labels, fp.spike_density)
    return acc.metrics()


def evaluate_temporal(model: LayeredEnergyModel, dataset, cfg: TrainConfig, *,
                      context: int = 0, pool=None) -> EpochMetrics:
    """Free-phase pass over frame sequences: each frame settles from the
    previous frame's state, outputs are summed over frames before the
    argmax.  Frame offsets match the training schedule."""
    topo = model.topology
    streams = SpikeStreams(cfg.seed, stream_context("eval", context))
    acc = _Accumulator(topo.n_free_layers + 1)
    for indices, x_seq, y in dataset:
        n_frames = x_seq.shape[1]
        carry = zero_state(topo, x_seq.shape[0])
        out_sum = 0.0
        loss_sum = 0.0
        density = np.zeros(topo.n_free_layers + 1)
        for tau in range(n_frames):
            fp, _ = relax(model, x_seq[:, tau], carry,
                          PhaseConfig(cfg.lam, cfg.t_free), None, streams,
                          indices, tau * (cfg.t_free + cfg.t_nudge), pool)
            carry = fp.state
            out_sum = out_sum + fp.state.xi[-1]
            loss_sum = loss_sum + sample_loss(fp.state.xi[-1], y)
            density += fp.spike_density
        pred = predict(out_sum, topo.n_classes, topo.n_perclass)
        labels = class_scores(y, topo.n_classes, topo.n_perclass).argmax(axis=1)
        acc.add(loss_sum / n_frames, pred, labels, density / n_frames)
    return acc.metrics()
