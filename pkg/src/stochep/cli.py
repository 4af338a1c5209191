"""Command-line front end.

Subcommands: train, eval, gradcheck, stability, cost, sweep.  Each takes
--config (a file path or the name of a shipped preset) plus optional
--seed and --out overrides.  Outputs are CSV and plain text; the only
binary artifact is the checkpoint.

Exit codes: 0 success, 1 verification below threshold, 2 configuration,
3 training divergence, 4 oracle non-convergence, 5 checkpoint problems.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import (Checkpoint, CheckpointError, load_checkpoint,
                         save_checkpoint)
from .config import ConfigError, RunConfig, find_config, override
from .data import (SequenceDataset, batches, data_root, expand_labels,
                   find_mnist, load_idx, make_moving_bar)
from .dynamics import (DivergenceError, free_then_nudge, relax_lif,
                       stability_report, write_stability_csv)
from .energy import LayeredEnergyModel
from .metrics import (FiringStats, energy_ratio, kappa_sweep, mac_count_fp,
                      network_density, write_cost_report,
                      write_density_report)
from .network import (build_architecture, init_params,
                      uniform_positive_params)
from .oracle import OracleConfig, OracleError, cosine, fd_gradient
from .rng import SpikeStreams, derive, mix, stream_context
from .trainer import (TrainingDiverged, ep_gradient_three_phase, evaluate,
                      evaluate_temporal, init_optimizer_state, train_epoch,
                      train_temporal)

EXIT_OK = 0
EXIT_FAILED_CHECK = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_ORACLE = 4
EXIT_CHECKPOINT = 5

METRICS_HEADER = ["epoch", "loss", "accuracy", "test_loss", "test_accuracy",
                  "density"]


def _load_datasets(cfg: RunConfig):
    """Train and test splits for the configured dataset.  Raises
    ConfigError naming the missing piece; never silently substitutes."""
    if cfg.dataset == "moving_bar":
        train = make_moving_bar(cfg.n_samples, cfg.frames, cfg.size,
                                seed=mix(cfg.seed, 0))
        n_test = cfg.test_subset or max(cfg.n_samples // 4, 2)
        test = make_moving_bar(n_test, cfg.frames, cfg.size,
                               seed=mix(cfg.seed, 1))
        return train, test
    root = Path(cfg.data_root) if cfg.data_root else data_root()
    splits = []
    for split in ("train", "test"):
        pair = find_mnist(root, split)
        if pair is None:
            raise ConfigError(
                f"data.root: no {split}-split IDX files under {root} "
                f"(gunzip the standard archive there, or set data.root)")
        splits.append(load_idx(*pair))
    train, test = splits
    if cfg.subset:
        train = train.subset(cfg.subset)
    if cfg.test_subset:
        test = test.subset(cfg.test_subset)
    return train, test


def _batch_iter(dataset, cfg: RunConfig, topology, batch_size,
                shuffle_seed=None):
    shape = None if isinstance(dataset, SequenceDataset) \
        else topology.layer_shapes[0]
    return batches(dataset, batch_size, shuffle_seed,
                   n_classes=cfg.n_classes, n_perclass=cfg.n_perclass,
                   input_shape=shape)


def _make_pool(cfg: RunConfig):
    return ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(cfg: RunConfig) -> int:
    topo = cfg.topology()
    model = LayeredEnergyModel(topo, init_params(topo, cfg.seed), cfg.kappa)
    tcfg = cfg.train_config()
    train_ds, test_ds = _load_datasets(cfg)
    temporal = isinstance(train_ds, SequenceDataset)
    train_pass = train_temporal if temporal else train_epoch
    eval_pass = evaluate_temporal if temporal else evaluate
    out = _out_dir(cfg)
    pool = _make_pool(cfg)
    opt_state = init_optimizer_state(model.params, tcfg)
    rows = []
    try:
        for epoch in range(tcfg.epochs):
            data = _batch_iter(train_ds, cfg, topo, tcfg.batch_size,
                               shuffle_seed=mix(cfg.seed, epoch))
            sign_rng = derive(cfg.seed, "nudge-sign", epoch)
            m = train_pass(model, data, tcfg, sign_rng, opt_state,
                           epoch=epoch, pool=pool)
            test = eval_pass(model, _batch_iter(test_ds, cfg, topo,
                                                tcfg.batch_size),
                             tcfg, context=epoch, pool=pool)
            rows.append([epoch, m.loss, m.accuracy, test.loss, test.accuracy,
                         network_density(m.firing_rates, topo)])
            print(f"epoch {epoch}: loss {m.loss:.4f} acc {m.accuracy:.4f} "
                  f"test {test.accuracy:.4f}")
    finally:
        if pool is not None:
            pool.shutdown()
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        w.writerows(rows)
    save_checkpoint(out / "model.ckpt",
                    Checkpoint(topo, model.params, cfg.seed, tcfg.epochs,
                               opt_state))
    final = rows[-1] if rows else None
    with open(out / "summary.txt", "w") as f:
        f.write(f"epochs {tcfg.epochs}\n")
        if final is not None:
            f.write(f"train_accuracy {final[2]}\n")
            f.write(f"test_accuracy {final[4]}\n")
    if final is not None:
        print(f"done: test accuracy {final[4]:.4f}")
    else:
        print("done: no epochs run, initial checkpoint written")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint_path=None) -> int:
    path = checkpoint_path or cfg.checkpoint
    if path is None:
        raise ConfigError("run.checkpoint: no checkpoint to evaluate "
                          "(set the key or pass --checkpoint)")
    ckpt = load_checkpoint(path)
    model = LayeredEnergyModel(ckpt.topology, ckpt.params, cfg.kappa)
    _, test_ds = _load_datasets(cfg)
    tcfg = cfg.train_config()
    temporal = isinstance(test_ds, SequenceDataset)
    eval_pass = evaluate_temporal if temporal else evaluate
    pool = _make_pool(cfg)
    try:
        m = eval_pass(model, _batch_iter(test_ds, cfg, ckpt.topology,
                                         tcfg.batch_size),
                      tcfg, context=0, pool=pool)
    finally:
        if pool is not None:
            pool.shutdown()
    print(f"test accuracy {m.accuracy:.4f} (loss {m.loss:.4f}, "
          f"{m.n_samples} samples)")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, beta_sweep: bool = False) -> int:
    """Compare the contrast estimate against central finite differences
    on a small net held strictly inside the transfer band."""
    topo = cfg.topology()
    model = LayeredEnergyModel(topo,
                               uniform_positive_params(topo, cfg.seed),
                               cfg.kappa)
    gen = derive(cfg.seed, "gradcheck-data")
    x = gen.uniform(0.3, 0.8, (cfg.batch_size,) + topo.layer_shapes[0])
    y = expand_labels(gen.integers(0, cfg.n_classes, cfg.batch_size),
                      cfg.n_classes, cfg.n_perclass)
    fd = fd_gradient(model, x, y, OracleConfig())

    betas = sorted(cfg.betas, reverse=True)
    if not (beta_sweep or cfg.beta_sweep):
        betas = betas[-1:]
    sign_rng = derive(cfg.seed, "nudge-sign")
    rows = []
    for beta in betas:
        tcfg = dataclasses.replace(cfg.train_config(), beta=beta)
        est = ep_gradient_three_phase(model, x, y, tcfg, sign_rng,
                                      meanfield=True)
        rows.append((beta, cosine(est.tensors, fd)))
    if len(rows) > 1:
        print("beta      " + "  ".join(f"conn{i}"
                                       for i in range(len(rows[0][1]))))
        for beta, cos in rows:
            print(f"{beta:<8g}  " + "  ".join(f"{c:.6f}" for c in cos))
    final_cos = rows[-1][1]
    ok = True
    for i, c in enumerate(final_cos):
        verdict = "ok" if c >= cfg.threshold else "BELOW THRESHOLD"
        ok = ok and c >= cfg.threshold
        print(f"connection {i}: cosine {c:.6f} "
              f"(threshold {cfg.threshold}) {verdict}")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAILED_CHECK


def _static_slice(cfg: RunConfig, dataset, topology, n: int):
    """First n samples as plain (inputs, targets); sequences contribute
    their first frame."""
    if isinstance(dataset, SequenceDataset):
        x = dataset.sequences[:n, 0]
    else:
        x = dataset.images[:n].reshape((-1,) + topology.layer_shapes[0])
    y = expand_labels(dataset.labels[:n], cfg.n_classes, cfg.n_perclass)
    return x, y


def cmd_stability(cfg: RunConfig) -> int:
    """Membrane traces of the stochastic net next to the deterministic
    LIF baselines on the same weights and inputs."""
    topo = cfg.topology()
    model = LayeredEnergyModel(topo, init_params(topo, cfg.seed), cfg.kappa)
    _, test_ds = _load_datasets(cfg)
    n = min(cfg.stability_samples, len(test_ds))
    x, y = _static_slice(cfg, test_ds, topo, n)
    tcfg = cfg.train_config()
    out = _out_dir(cfg)

    streams = SpikeStreams(cfg.seed, stream_context("stability"))
    _, _, trace = free_then_nudge(model, x, y, tcfg.lam, tcfg.t_free,
                                  tcfg.t_nudge, tcfg.beta, streams,
                                  np.arange(n), record_traces=True)
    traces = {"stochastic": trace}
    for cell in ("plain", "lowpass", "predcoding"):
        traces[f"lif_{cell}"] = relax_lif(model, x, tcfg.t_free, cell,
                                          lam=tcfg.lam)
    for label, tr in traces.items():
        tr.write_csv(out / f"stability_{label}.csv")
    summary = stability_report(traces)
    write_stability_csv(summary, out / "stability_summary.csv")
    sto = summary["stochastic"]["last_steps_var"]
    low = summary["lif_lowpass"]["last_steps_var"]
    order = "<" if sto < low else ">="
    print(f"stochastic variance {sto:.3e} {order} lowpass variance {low:.3e}")
    print(f"stochastic final residual {summary['stochastic']['final_residual']:.3e}")
    return EXIT_OK


def cmd_cost(cfg: RunConfig) -> int:
    """Price one update sweep of the configured net against its
    full-precision counterpart (one output unit per class)."""
    if cfg.ifr is None:
        raise ConfigError("run.ifr: the cost command needs measured "
                          "per-layer firing rates")
    snn = cfg.topology()
    fp = build_architecture(cfg.architecture, cfg.n_classes, 1)
    rates = tuple(cfg.ifr)
    if len(rates) == len(snn.layer_shapes) - 1:
        rates = rates + (0.0,)  # output layer sends nothing onward
    stats = FiringStats(rates, n_samples=1)
    out = _out_dir(cfg)
    write_cost_report(out / "cost.csv", snn, stats)
    ratio = energy_ratio(snn, fp, stats)
    total_macs = int(mac_count_fp(fp).sum())
    print(f"full-precision: {total_macs} MACs per sweep")
    print(f"energy ratio full-precision / spiking: {ratio:.2f}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    """Firing density across transfer slopes, everything else fixed."""
    topo = cfg.topology()
    _, test_ds = _load_datasets(cfg)
    n = min(64, len(test_ds))
    dataset_slice = _static_slice(cfg, test_ds, topo, n)

    def factory(kappa):
        return LayeredEnergyModel(topo, init_params(topo, cfg.seed), kappa)

    pool = _make_pool(cfg)
    try:
        rows = kappa_sweep(factory, cfg.kappas, dataset_slice,
                           SpikeStreams(cfg.seed, stream_context("sweep")),
                           lam=cfg.lam, t_free=cfg.t_free,
                           t_nudge=cfg.t_nudge, beta=cfg.beta, pool=pool)
    finally:
        if pool is not None:
            pool.shutdown()
    out = _out_dir(cfg)
    write_density_report(out / "sweep.csv", rows)
    for kappa, density in rows:
        print(f"kappa {kappa:g}: density {density:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stochep",
        description="Train and analyze stochastic spiking nets that learn "
                    "from the contrast between two fixed points.")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "train": "train a model and write checkpoint plus metrics",
        "eval": "measure test accuracy of a checkpoint",
        "gradcheck": "verify gradient estimates against an oracle",
        "stability": "membrane traces versus deterministic baselines",
        "cost": "operation counts and the energy ratio",
        "sweep": "firing density across transfer slopes",
    }
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True,
                       help="config file path or preset name")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", help="override run.out")
    sub.choices["train"].add_argument("--epochs", type=int,
                                      help="override train.epochs")
    sub.choices["eval"].add_argument("--checkpoint",
                                     help="override run.checkpoint")
    sub.choices["gradcheck"].add_argument("--beta-sweep", action="store_true",
                                          help="also print the nudge-strength"
                                               " sweep table")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = find_config(args.config)
        cfg = override(cfg, seed=args.seed, out_dir=args.out,
                       epochs=getattr(args, "epochs", None))
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.beta_sweep)
        if args.command == "stability":
            return cmd_stability(cfg)
        if args.command == "cost":
            return cmd_cost(cfg)
        return cmd_sweep(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except DivergenceError as err:
        print(f"relaxation diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except OracleError as err:
        print(f"oracle did not converge: {err}", file=sys.stderr)
        return EXIT_ORACLE
    except CheckpointError as err:
        print(f"checkpoint error: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
