"""Operation counters, the energy ratio, and firing-rate accounting."""

import csv

import numpy as np
import pytest

from conftest import make_interior_model

from stochep.dynamics import PhaseConfig, relax_meanfield
from stochep.metrics import (CostModel, FiringStats, StatsMismatchError,
                             ac_count_snn, energy_ratio, error_signal,
                             kappa_sweep, mac_count_fp, network_density,
                             write_cost_report, write_density_report)
from stochep.network import (ConvConn, DenseConn, Params, Topology,
                             build_architecture, dense_chain, init_params,
                             zero_state)
from stochep.neuron import sample_spikes, sigma
from stochep.energy import LayeredEnergyModel
from stochep.rng import SpikeStreams


class TestCostModel:
    def test_defaults(self):
        cost = CostModel()
        assert cost.energy_per_ac == 0.9
        assert cost.energy_per_mac == 4.6

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            CostModel(energy_per_ac=0.0)
        with pytest.raises(ValueError):
            CostModel(energy_per_mac=-1.0)


class TestFiringStats:
    def test_rate_range_enforced(self):
        with pytest.raises(ValueError):
            FiringStats((0.5, 1.2), 10)
        with pytest.raises(ValueError):
            FiringStats((0.5,), 0)

    def test_from_rates(self):
        stats = FiringStats.from_rates(np.array([0.25, 0.5]), 3)
        assert stats.rates == (0.25, 0.5)
        assert stats.n_samples == 3


class TestMacCount:
    def test_dense_784_to_512(self):
        topo = dense_chain([784, 512], 512)
        assert mac_count_fp(topo)[0] == 401408

    def test_conv_counts_pre_pool_products(self):
        conn = ConvConn(in_shape=(2, 12, 12), out_channels=3, kernel=(5, 5))
        topo = Topology(((2, 12, 12), conn.out_shape()), (conn,),
                        n_classes=192)
        # 2 * 5 * 5 * 3 * 8 * 8
        assert mac_count_fp(topo)[0] == 9600

    def test_pooling_does_not_change_count(self):
        plain = ConvConn(in_shape=(2, 12, 12), out_channels=3, kernel=(5, 5))
        pooled = ConvConn(in_shape=(2, 12, 12), out_channels=3, kernel=(5, 5),
                          pool_window=(2, 2), pool_stride=2)
        t1 = Topology(((2, 12, 12), plain.out_shape()), (plain,), 192)
        t2 = Topology(((2, 12, 12), pooled.out_shape()), (pooled,), 48)
        assert mac_count_fp(t1)[0] == mac_count_fp(t2)[0]

    def test_bidirectional_doubles(self):
        topo = dense_chain([20, 10], 5)
        assert np.array_equal(mac_count_fp(topo, bidirectional=True),
                              2 * mac_count_fp(topo))

    def test_no_connections_zero_total(self):
        topo = Topology(((4,),), (), n_classes=4)
        assert mac_count_fp(topo).sum() == 0


class TestAcCount:
    def test_unit_rates_reduce_to_macs(self):
        topo = dense_chain([20, 10], 5)
        stats = FiringStats((1.0, 1.0, 1.0), 1)
        assert np.array_equal(ac_count_snn(topo, stats), mac_count_fp(topo))

    def test_silent_net_is_free(self):
        topo = dense_chain([20, 10], 5)
        stats = FiringStats((0.0, 0.0, 0.0), 1)
        assert ac_count_snn(topo, stats).sum() == 0.0

    def test_scaling_by_source_rate(self):
        topo = dense_chain([20, 10], 5)
        stats = FiringStats((0.5, 0.25, 0.9), 1)
        ac = ac_count_snn(topo, stats)
        assert ac[0] == 0.5 * 200
        assert ac[1] == 0.25 * 50

    def test_missing_layer_stats_rejected(self):
        topo = dense_chain([20, 10], 5)
        with pytest.raises(StatsMismatchError):
            ac_count_snn(topo, FiringStats((0.5, 0.5), 1))

    def test_never_exceeds_macs(self):
        gen = np.random.default_rng(0)
        for _ in range(20):
            sizes = gen.integers(2, 30, int(gen.integers(1, 4))).tolist()
            topo = dense_chain(sizes, int(gen.integers(2, 6)))
            rates = tuple(float(r)
                          for r in gen.uniform(0, 1, len(topo.layer_shapes)))
            ac = ac_count_snn(topo, FiringStats(rates, 1))
            assert (ac <= mac_count_fp(topo) + 1e-12).all()

    def test_bidirectional_flag_passes_through(self):
        topo = dense_chain([20, 10], 5)
        stats = FiringStats((0.5, 0.5, 0.5), 1)
        assert np.array_equal(ac_count_snn(topo, stats, bidirectional=True),
                              2 * ac_count_snn(topo, stats))


class TestEnergyRatio:
    def test_two_hidden_layer_reference_point(self):
        # 784-512-512 trunk; spiking net runs 70 units per class, the
        # full-precision baseline one.  With measured source rates of
        # 0.21, 0.19 and 0.12 the ratio lands just over nineteen.
        snn = build_architecture("2fc", n_classes=10, n_perclass=70)
        fp = build_architecture("2fc", n_classes=10, n_perclass=1)
        stats = FiringStats((0.21, 0.19, 0.12, 0.0), 1)
        ratio = energy_ratio(snn, fp, stats)
        fp_macs = 784 * 512 + 512 * 512 + 512 * 10
        snn_acs = 401408 * 0.21 + 262144 * 0.19 + 512 * 700 * 0.12
        assert ratio == pytest.approx(fp_macs * 4.6 / (snn_acs * 0.9), rel=1e-12)
        assert 17.1 <= ratio <= 20.9

    def test_identical_nets_at_full_rate_reduce_to_cost_quotient(self):
        topo = dense_chain([20, 10], 5)
        stats = FiringStats((1.0, 1.0, 1.0), 1)
        assert energy_ratio(topo, topo, stats) == pytest.approx(4.6 / 0.9)

    def test_silent_snn_rejected(self):
        topo = dense_chain([20, 10], 5)
        with pytest.raises(ValueError, match="undefined"):
            energy_ratio(topo, topo, FiringStats((0.0, 0.0, 0.0), 1))

    def test_custom_cost_model(self):
        topo = dense_chain([20, 10], 5)
        stats = FiringStats((1.0, 1.0, 1.0), 1)
        cost = CostModel(energy_per_ac=1.0, energy_per_mac=3.0)
        assert energy_ratio(topo, topo, stats, cost) == pytest.approx(3.0)


class TestErrorSignal:
    def test_magnitude_and_support(self):
        total, frac = error_signal(np.array([[1.0, 0.0]]),
                                   np.array([[0.0, 0.0]]))
        assert total == 1.0
        assert frac == 0.5

    def test_zero_error(self):
        total, frac = error_signal(np.zeros((2, 3)), np.zeros((2, 3)))
        assert total == 0.0 and frac == 0.0


class TestNetworkDensity:
    def test_size_weighted_mean_excluding_input(self):
        topo = dense_chain([10, 4], 2)
        # input density 0.9 must not contribute
        d = network_density(np.array([0.9, 0.5, 0.25]), topo)
        assert d == pytest.approx((0.5 * 4 + 0.25 * 2) / 6)


class TestKappaSweep:
    def make_factory(self):
        topo = dense_chain([6, 8], 4)
        weights = init_params(topo, seed=5)
        for w in weights.weights:
            w *= 0.2
        return lambda kappa: LayeredEnergyModel(topo, weights, kappa)

    def slice_(self):
        gen = np.random.default_rng(7)
        x = gen.uniform(0.2, 0.8, (4, 6))
        y = np.eye(4)[gen.integers(0, 4, 4)]
        return x, y

    def test_zero_slope_is_exactly_silent(self):
        rows = kappa_sweep(self.make_factory(), [0.0], self.slice_(),
                           SpikeStreams(3), t_free=5, t_nudge=2)
        assert rows == [(0.0, 0.0)]

    def test_slope_order_preserved_and_density_bounded(self):
        rows = kappa_sweep(self.make_factory(), [2.0, 0.5], self.slice_(),
                           SpikeStreams(3), t_free=30, t_nudge=10)
        assert [k for k, _ in rows] == [2.0, 0.5]
        assert all(0.0 <= d <= 1.0 for _, d in rows)

    def test_repeat_is_deterministic(self):
        a = kappa_sweep(self.make_factory(), [0.5, 2.0], self.slice_(),
                        SpikeStreams(3), t_free=20, t_nudge=5)
        b = kappa_sweep(self.make_factory(), [0.5, 2.0], self.slice_(),
                        SpikeStreams(3), t_free=20, t_nudge=5)
        assert a == b

    def test_empty_slope_list_rejected(self):
        with pytest.raises(ValueError):
            kappa_sweep(self.make_factory(), [], self.slice_(), SpikeStreams(3))


class TestReports:
    def test_cost_report_rows(self, tmp_path):
        topo = dense_chain([20, 10], 5)
        stats = FiringStats((0.5, 0.25, 0.1), 1)
        path = tmp_path / "cost.csv"
        write_cost_report(path, topo, stats)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["layer", "mac", "ac", "ifr", "energy_pj"]
        assert rows[1][:3] == ["0", "200", "100"]
        assert rows[-1][0] == "total"
        assert float(rows[-1][2]) == pytest.approx(100 + 12.5)
        assert float(rows[-1][4]) == pytest.approx((100 + 12.5) * 0.9)

    def test_density_report_roundtrip(self, tmp_path):
        path = tmp_path / "sweep.csv"
        write_density_report(path, [(0.5, 0.04), (4.0, 0.26)])
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["kappa", "density"]
        assert [float(r[1]) for r in rows[1:]] == [0.04, 0.26]


def test_measured_rate_tracks_firing_probability():
    # Spikes drawn at a held fixed point must average to the transfer
    # probabilities within Monte-Carlo error.
    model, streams = make_interior_model(seed=11), SpikeStreams(21)
    feed = np.random.default_rng(5)
    x = feed.uniform(0.3, 0.8, (2, 6))
    fp = relax_meanfield(model, x, zero_state(model.topology, 2),
                         PhaseConfig(0.2, 400))
    draws = 4000
    for layer, xi in enumerate(fp.state.xi):
        prob = sigma(xi, model.kappa)
        total = np.zeros_like(prob)
        for t in range(draws):
            u = streams.uniform(0, layer + 1, t, prob.shape)
            total += sample_spikes(prob, u)
        measured = (total / draws).mean()
        se = np.sqrt((prob * (1 - prob)).sum()) / prob.size / np.sqrt(draws)
        assert abs(measured - prob.mean()) <= 3 * se + 1e-9
