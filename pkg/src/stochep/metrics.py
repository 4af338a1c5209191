"""Operation counting and energy accounting for neuromorphic deployment.

A rate-coded recurrent net on digital hardware pays a multiply-accumulate
per weight per step; the spiking version pays an accumulate only when the
source neuron actually fires.  These counters turn a topology plus
measured firing rates into energy figures, and the sweep utility maps how
the transfer slope trades accuracy against spike traffic.

Counting is per relaxation step on each side.  The step count, and the
factor two for bidirectional message flow, multiply both sides of the
energy ratio equally, so the reported ratio is independent of them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .dynamics import free_then_nudge
from .network import ConvConn, DenseConn, Topology, flat_size

MAC_PICOJOULES = 4.6
AC_PICOJOULES = 0.9


@dataclass(frozen=True)
class CostModel:
    """Energy per accumulate and per multiply-accumulate, in picojoules."""

    energy_per_ac: float = AC_PICOJOULES
    energy_per_mac: float = MAC_PICOJOULES

    def __post_init__(self):
        if self.energy_per_ac <= 0.0 or self.energy_per_mac <= 0.0:
            raise ValueError("per-operation energies must be positive")


class StatsMismatchError(ValueError):
    """Firing statistics do not line up with the topology's layers."""


@dataclass(frozen=True)
class FiringStats:
    """Mean firing rate per layer (input first) and how many samples the
    means were measured over.

    The output layer's rate is carried for reporting; it has no outgoing
    connection, so it never enters an accumulate count.
    """

    rates: tuple[float, ...]
    n_samples: int

    def __post_init__(self):
        if any(not 0.0 <= r <= 1.0 for r in self.rates):
            raise ValueError(f"rates must lie in [0,1]: {self.rates}")
        if self.n_samples < 1:
            raise ValueError("sample count must be positive")

    @classmethod
    def from_rates(cls, rates, n_samples: int) -> "FiringStats":
        return cls(tuple(float(r) for r in np.asarray(rates)), n_samples)


def _connection_macs(conn) -> int:
    if isinstance(conn, DenseConn):
        return conn.in_size * conn.out_size
    oh, ow = conn.conv_hw()
    c_out, c_in, kh, kw = conn.weight_shape()
    return c_in * kh * kw * c_out * oh * ow


def mac_count_fp(topology: Topology, bidirectional: bool = False) -> np.ndarray:
    """Multiply-accumulates per connection for one full-precision update
    sweep.  Convolutions are counted at the convolution output, before
    any pooling, since every such product is formed."""
    counts = np.array([_connection_macs(c) for c in topology.connections],
                      dtype=np.int64)
    return counts * 2 if bidirectional else counts


def ac_count_snn(topology: Topology, stats: FiringStats,
                 bidirectional: bool = False) -> np.ndarray:
    """Expected accumulates per connection when inputs arrive as spikes:
    each connection's MAC count scaled by its source layer's firing
    rate."""
    if len(stats.rates) != len(topology.layer_shapes):
        raise StatsMismatchError(
            f"{len(stats.rates)} layer rates for a topology with "
            f"{len(topology.layer_shapes)} layers")
    macs = mac_count_fp(topology, bidirectional)
    return macs * np.array(stats.rates[:len(macs)])


def energy_ratio(topology_snn: Topology, topology_fp: Topology,
                 stats: FiringStats, cost: CostModel = CostModel()) -> float:
    """Full-precision energy over spiking energy for one update sweep.

    The two topologies may differ (the spiking net typically runs a
    widened output layer while the baseline keeps one unit per class,
    which makes the comparison conservative for the spiking side).
    """
    fp_pj = int(mac_count_fp(topology_fp).sum()) * cost.energy_per_mac
    snn_pj = float(ac_count_snn(topology_snn, stats).sum()) * cost.energy_per_ac
    if snn_pj == 0.0:
        raise ValueError("spiking side consumed no energy; ratio undefined")
    return fp_pj / snn_pj


def error_signal(output: np.ndarray, target: np.ndarray,
                 tol: float = 0.0) -> tuple[float, float]:
    """Size and support of the output error pulling on the nudge phase:
    total absolute error across the batch and the fraction of output
    units carrying a signal above tol."""
    err = np.abs(np.asarray(output) - np.asarray(target))
    return float(err.sum()), float((err > tol).mean())


def network_density(spike_density: np.ndarray, topology: Topology) -> float:
    """Collapse per-layer spike densities to one number: the mean over
    stateful units, each layer weighted by its size.  The clamped input
    layer is excluded; its traffic is fixed by the data, not the model."""
    sizes = np.array([flat_size(s) for s in topology.layer_shapes[1:]],
                     dtype=np.float64)
    return float(np.asarray(spike_density)[1:] @ sizes / sizes.sum())


def kappa_sweep(model_factory, kappas, dataset_slice, streams, *,
                lam: float = 0.5, t_free: int = 60, t_nudge: int = 15,
                beta: float = 0.75, pool=None) -> list[tuple[float, float]]:
    """Firing density as a function of the transfer slope.

    For each slope the factory builds a model, the slice of (inputs,
    targets) is relaxed through a free and a nudged phase, and the mean
    spike density over both phases is recorded.  A slope of zero silences
    every stateful layer, so its density is exactly zero.
    """
    if len(kappas) == 0:
        raise ValueError("need at least one slope value")
    x, y = dataset_slice
    indices = np.arange(len(x))
    rows = []
    for kappa in kappas:
        if kappa == 0.0:
            # Slope zero clamps every firing probability to zero; the
            # model type itself rejects it (the active band's top, 1/k,
            # is undefined), so the silent limit is recorded directly.
            rows.append((0.0, 0.0))
            continue
        model = model_factory(kappa)
        free_fp, nudge_fp, _ = free_then_nudge(
            model, x, y, lam, t_free, t_nudge, beta, streams, indices,
            pool=pool)
        blend = (free_fp.spike_density * t_free
                 + nudge_fp.spike_density * t_nudge) / (t_free + t_nudge)
        rows.append((float(kappa), network_density(blend, model.topology)))
    return rows


COST_REPORT_HEADER = ["layer", "mac", "ac", "ifr", "energy_pj"]


def write_cost_report(path, topology: Topology, stats: FiringStats,
                      cost: CostModel = CostModel(),
                      bidirectional: bool = False):
    """Per-connection operation and energy table, plus a total row.
    The energy column prices accumulates only, which is what the spiking
    network pays."""
    macs = mac_count_fp(topology, bidirectional)
    acs = ac_count_snn(topology, stats, bidirectional)
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(COST_REPORT_HEADER)
        for i, (mac, ac) in enumerate(zip(macs, acs)):
            out.writerow([i, int(mac), f"{ac:.6g}", f"{stats.rates[i]:.6g}",
                          f"{ac * cost.energy_per_ac:.6g}"])
        out.writerow(["total", int(macs.sum()), f"{acs.sum():.6g}", "",
                      f"{acs.sum() * cost.energy_per_ac:.6g}"])


def write_density_report(path, rows):
    """CSV of (kappa, density) pairs from kappa_sweep."""
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["kappa", "density"])
        for kappa, density in rows:
            out.writerow([f"{kappa:.6g}", f"{density:.9g}"])
