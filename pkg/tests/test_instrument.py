import csv
import math

import numpy as np
import pytest

from metamix.costmodel import CostTable, LayerCost, count_ops
from metamix.data import make_blobs
from metamix.instrument import (StatTrace, act_histogram, hessian_trace_per_op, histogram,
                                hutchinson_trace, quantized_gaussian_variance, rank_correlation,
                                relative_fluctuation, select_layers, trace_bn, variance_spread)
from metamix.mixsearch import BitAssignment
from metamix.trainer import MetaMixTrainer, PhasePlan
from metamix.zoo import Model, build_plain_net, build_toy_mobilenet


def blobs(n=128, seed=0):
    return make_blobs(n, num_classes=4, dim=192, separation=3.0, seed=seed, shape=(3, 8, 8))


@pytest.fixture
def plain():
    m = Model(build_plain_net(channels=(4, 8, 8, 16)), seed=0)
    m.calibrate(blobs(64, 5).x)
    return m


class TestSelectors:
    def test_depthwise(self):
        m = Model(build_toy_mobilenet(8))
        assert select_layers(m, "depthwise") == [f"b{i}.dw" for i in range(1, 6)]

    def test_glob_and_list(self, plain):
        assert select_layers(plain, "c[12].*") == ["c1.conv", "c2.conv"]
        assert select_layers(plain, ["c3.conv"]) == ["c3.conv"]

    def test_no_match(self, plain):
        with pytest.raises(ValueError, match="matches no"):
            select_layers(plain, "nothing*")

    def test_linear_layer_has_no_bn(self, plain):
        with pytest.raises(ValueError):
            select_layers(plain, ["head.fc"])


class TestTraceBn:
    def test_frozen_is_flat(self, plain):
        tr = trace_bn(plain, blobs(), "c*", "frozen", iterations=12)
        for layer in ("c1.conv", "c4.conv"):
            _, v = tr.series(layer)
            assert np.ptp(v) == 0.0

    @pytest.mark.parametrize("iters,every", [(10, 1), (10, 3), (7, 7), (0, 2)])
    def test_row_count(self, plain, iters, every):
        stats = ("bn_running_var", "bn_running_mean")
        tr = trace_bn(plain, blobs(), ["c1.conv", "c2.conv"], "frozen", iterations=iters, every=every,
                      stats=stats)
        assert len(tr.rows) == math.ceil(iters / every) * 2 * len(stats)

    def test_training_regimes_move_stats(self, plain):
        t = MetaMixTrainer(plain, PhasePlan(batch_size=32))
        tr = trace_bn(plain, blobs(), ["c2.conv"], "bit_meta", iterations=6, trainer=t)
        assert np.ptp(tr.series("c2.conv")[1]) > 0

    def test_random_regime_needs_trainer(self, plain):
        with pytest.raises(ValueError, match="trainer"):
            trace_bn(plain, blobs(), "c*", "random_fp", iterations=3)

    def test_bad_arguments(self, plain):
        with pytest.raises(ValueError):
            trace_bn(plain, blobs(), "c*", "sometimes", iterations=3)
        with pytest.raises(ValueError):
            trace_bn(plain, blobs(), "c*", "frozen", iterations=3, every=0)
        with pytest.raises(ValueError):
            trace_bn(plain, blobs(), "c*", "frozen", iterations=3, stats=("act_var",))

    def test_csv(self, plain, tmp_path):
        tr = trace_bn(plain, blobs(), ["c1.conv"], "frozen", iterations=4, every=2)
        tr.to_csv(tmp_path / "t.csv")
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["regime", "iteration", "layer", "statistic", "value"]
        assert [r[1] for r in rows[1:]] == ["0", "2"]


def test_trace_iterations_strictly_increase():
    tr = StatTrace()
    tr.add(3, "l", "bn_running_var", 1.0)
    tr.add(3, "m", "bn_running_var", 1.0)  # other layer, own sequence
    with pytest.raises(ValueError, match="increase"):
        tr.add(3, "l", "bn_running_var", 2.0)
    with pytest.raises(ValueError, match="statistic"):
        tr.add(4, "l", "gradient_norm", 0.0)


def test_relative_fluctuation():
    assert relative_fluctuation(np.full(30, 2.0)) == 0.0
    alt = np.tile([1.0, 3.0], 20)
    assert relative_fluctuation(alt, window=20) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        relative_fluctuation(np.ones(5), window=20)


class TestHistograms:
    def test_counts_conserved(self, rng):
        x = rng.standard_normal(5000)
        edges, counts = histogram(x, 64)
        assert counts.sum() == 5000 and len(edges) == 65
        assert edges[0] == x.min() and edges[-1] == x.max()

    def test_constant_input_one_bin(self):
        edges, counts = histogram(np.full(40, 2.5), 16)
        assert counts[0] == 40 and counts[1:].sum() == 0
        assert (edges[0], edges[-1]) == (2.5, 3.5)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            histogram(np.array([]))

    def test_act_histogram_is_read_only(self, plain, tmp_path):
        before = plain.state_dict()
        mode = plain.mode
        hists = act_histogram(plain, "c2.conv", ["fp", 8, 2], blobs(32).x, bins=32, out_dir=tmp_path)
        after = plain.state_dict()
        for k in before:
            np.testing.assert_array_equal(before[k], after[k])
        assert plain.mode is mode and plain.capture is None
        # c2.conv reads the 4-channel output of c1
        assert {h.counts.sum() for h in hists.values()} == {32 * 4 * 8 * 8}
        assert (tmp_path / "act_hist_c2.conv_2.csv").exists()
        assert variance_spread(hists) >= 1.0

    def test_act_histogram_unknown_layer(self, plain):
        with pytest.raises(KeyError):
            act_histogram(plain, "nope", ["fp"], blobs(4).x)


class TestQuantizedGaussian:
    GOLDEN = {"fp": 1.001344125619476, "2": 1.1484391603050723, "3": 1.0677966842430988,
              "4": 1.031585017426973, "8": 1.0030683219015168}

    def test_golden_values(self, tmp_path):
        rows = quantized_gaussian_variance(out_path=tmp_path / "q.csv")
        assert [r[0] for r in rows] == ["fp", "2", "3", "4", "8"]
        for name, var in rows:
            assert var == pytest.approx(self.GOLDEN[name], rel=1e-12)
        assert sum(1 for _ in open(tmp_path / "q.csv")) == 6

    def test_low_bits_inflate_variance(self):
        v = dict(quantized_gaussian_variance(n=200_000, seed=3))
        assert v["2"] > v["3"] > v["4"] > v["8"] > 0.99 * v["fp"]

    def test_sample_size_floor(self):
        with pytest.raises(ValueError):
            quantized_gaussian_variance(n=1000)


class TestHutchinson:
    def test_diagonal_quadratic(self, rng):
        d1, d2 = rng.uniform(0.5, 3, 40), rng.uniform(-1, 1, 7)
        est = hutchinson_trace(lambda th: [d1 * th[0], d2 * th[1]],
                               [rng.standard_normal(40), rng.standard_normal(7)], probes=10)
        np.testing.assert_allclose(est, [d1.sum(), d2.sum()], rtol=0.05)

    def test_dense_quadratic(self, rng):
        a = rng.standard_normal((30, 30))
        h = a @ a.T / 30 + np.eye(30)
        est = hutchinson_trace(lambda th: [h @ th[0]], [rng.standard_normal(30)], probes=400)
        assert est[0] == pytest.approx(np.trace(h), rel=0.05)

    def test_non_finite_raises(self):
        with pytest.raises(FloatingPointError):
            hutchinson_trace(lambda th: [np.full(3, np.nan)], [np.zeros(3)], probes=2)


class TestHessianPerOp:
    def _data(self):
        d = blobs(32, 2)
        return d.x, d.y

    def test_rows_and_params_restored(self, plain, tmp_path):
        x, y = self._data()
        before = {k: v.copy() for k, v in plain.state_dict().items()}
        flags = [t.requires_grad for t in plain.weights()]
        cost = count_ops(plain.spec)
        a = BitAssignment.uniform(plain.spec.searched_layers(), 4)
        rows = hessian_trace_per_op(plain, x, y, cost, assignment=a, out_path=tmp_path / "h.csv")
        assert [r["layer"] for r in rows] == plain.spec.searched_layers()
        assert all(r["trace_per_op"] == r["trace"] / r["ops"] and r["bits"] == 4 for r in rows)
        after = plain.state_dict()
        for k in before:
            np.testing.assert_array_equal(before[k], after[k], err_msg=k)
        assert [t.requires_grad for t in plain.weights()] == flags

    def test_doubling_ops_halves_trace_per_op(self, plain):
        x, y = self._data()
        cost = count_ops(plain.spec)
        doubled = CostTable([LayerCost(c.name, 2 * c.ops if c.name == "c2.conv" else c.ops, c.searched,
                                       c.depthwise) for c in cost.layers], weight_bits=cost.weight_bits)
        r1 = {r["layer"]: r for r in hessian_trace_per_op(plain, x, y, cost, seed=4)}
        r2 = {r["layer"]: r for r in hessian_trace_per_op(plain, x, y, doubled, seed=4)}
        assert r2["c2.conv"]["trace_per_op"] == pytest.approx(r1["c2.conv"]["trace_per_op"] / 2, rel=1e-12)
        assert r2["c3.conv"]["trace_per_op"] == r1["c3.conv"]["trace_per_op"]

    def test_needs_ten_probes(self, plain):
        x, y = self._data()
        with pytest.raises(ValueError, match="probes"):
            hessian_trace_per_op(plain, x, y, count_ops(plain.spec), probes=5)


def test_rank_correlation():
    rows = [{"trace_per_op": t, "bits": b} for t, b in [(1.0, 2), (2.0, 4), (3.0, 8), (4.0, 8)]]
    assert rank_correlation(rows) > 0.9
    flat = [{"trace_per_op": t, "bits": 4} for t in (1.0, 2.0)]
    assert math.isnan(rank_correlation(flat))
