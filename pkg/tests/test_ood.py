import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bowl.nn import ActivationTrace, build_mlp, save_checkpoint
from bowl.ood import (ThresholdConfig, batch_ood_score,
                      bootstrap_threshold, empirical_quantile, eta0_per_sample,
                      eta1_from_eta0, export_score_csv, filter_stream,
                      predictive_entropy, sample_eta1_scores)
from bowl.stream import StreamBatch


def _trace(z_layers):
    zs = [np.asarray(z, dtype=np.float64) for z in z_layers]
    return ActivationTrace(zs, [z.copy() for z in zs])


class TestEta0:
    def test_zero_when_at_running_mean(self):
        trace = _trace([np.zeros((4, 6))])
        np.testing.assert_array_equal(eta0_per_sample(trace), np.zeros(4))

    def test_direct_sum_of_squares(self):
        trace = _trace([np.array([[1.0, -2.0, 0.5]])])
        assert eta0_per_sample(trace)[0] == pytest.approx(5.25)

    def test_chi_squared_mean_monte_carlo(self):
        # For iid standard-normal standardized activations the score is a
        # chi-squared draw with d degrees of freedom, so its mean is d.
        rng = np.random.default_rng(123)
        d = 100
        trace = _trace([rng.normal(size=(10_000, d))])
        assert eta0_per_sample(trace).mean() == pytest.approx(100.0, abs=5.0)

    def test_sums_across_layers(self):
        trace = _trace([np.full((2, 3), 1.0), np.full((2, 2), 2.0)])
        np.testing.assert_allclose(eta0_per_sample(trace), [11.0, 11.0])

    def test_nonnegative_property(self):
        rng = np.random.default_rng(5)
        trace = _trace([rng.normal(size=(64, 7)) * 10])
        assert (eta0_per_sample(trace) >= 0).all()


class TestEta1:
    def test_d1_at_one(self):
        assert eta1_from_eta0(1.0, 1) == pytest.approx(1.0)

    def test_d4_at_four(self):
        # direct evaluation: 4 - 4*ln(4)
        assert eta1_from_eta0(4.0, 4) == pytest.approx(4.0 - 4.0 * math.log(4.0))
        assert eta1_from_eta0(4.0, 4) == pytest.approx(-1.5451774444795624)

    def test_two_sided_around_minimum(self):
        assert eta1_from_eta0(0.4, 4) > eta1_from_eta0(4.0, 4)
        assert eta1_from_eta0(40.0, 4) > eta1_from_eta0(4.0, 4)

    def test_zero_maps_to_infinity(self):
        assert eta1_from_eta0(0.0, 3) == math.inf

    @pytest.mark.parametrize("d", [1, 4, 64, 1024])
    def test_grid_minimum_at_d(self, d):
        grid = np.linspace(d / 10.0, 10.0 * d, 2001)
        vals = eta1_from_eta0(grid, d)
        k = int(np.argmin(vals))
        step = grid[1] - grid[0]
        assert abs(grid[k] - d) <= step

    def test_monotone_decreasing_then_increasing(self):
        d = 16
        low = np.linspace(0.01 * d, d, 300)
        high = np.linspace(d, 10 * d, 300)
        assert (np.diff(eta1_from_eta0(low, d)) < 0).all()
        assert (np.diff(eta1_from_eta0(high, d)) > 0).all()


@pytest.fixture(scope="module")
def toy_net():
    net = build_mlp(6, [12, 6], 3, np.random.default_rng(0))
    net.eval()
    return net


class TestBatchScore:
    def test_identical_points_equal_single_sample_score(self, toy_net):
        x = np.tile(np.random.default_rng(1).normal(size=6).astype(np.float32), (8, 1))
        batch = batch_ood_score(toy_net, x)
        single = batch_ood_score(toy_net, x[:1])
        assert batch.eta1 == pytest.approx(single.eta1, rel=1e-6)

    def test_scaled_activations_score_higher(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(8, 20))
        ref = eta1_from_eta0(eta0_per_sample(_trace([z])).mean(), 20)
        scaled = eta1_from_eta0(eta0_per_sample(_trace([10 * z])).mean(), 20)
        assert scaled > ref

    def test_empty_batch_rejected(self, toy_net):
        with pytest.raises(ValueError, match="empty"):
            batch_ood_score(toy_net, np.zeros((0, 6), dtype=np.float32))

    def test_scoring_never_mutates_network(self, toy_net, tmp_path):
        before = str(tmp_path / "before.bnt")
        after = str(tmp_path / "after.bnt")
        save_checkpoint(toy_net, before)
        x = np.random.default_rng(3).normal(size=(32, 6)).astype(np.float32)
        batch_ood_score(toy_net, x[:8])
        sample_eta1_scores(toy_net, x)
        bootstrap_threshold(toy_net, x, ThresholdConfig(20, 4, 0.9),
                            np.random.default_rng(0))
        filter_stream(toy_net, [StreamBatch(x[:8], np.zeros(8, dtype=np.int64))], 0.0)
        save_checkpoint(toy_net, after)
        assert open(before, "rb").read() == open(after, "rb").read()


class TestBootstrap:
    def test_quantile_is_ceil_alpha_k_order_statistic(self):
        values = np.arange(100.0)
        np.random.default_rng(0).shuffle(values)
        # 99th of 100 sorted ascending = second largest
        assert empirical_quantile(values, 0.99) == 98.0
        assert empirical_quantile(values, 0.5) == 49.0

    def test_repeated_point_gives_that_score(self, toy_net):
        x = np.tile(np.random.default_rng(4).normal(size=6).astype(np.float32), (32, 1))
        expected = batch_ood_score(toy_net, x[:8]).eta1
        for alpha in (0.01, 0.5, 0.99):
            tau = bootstrap_threshold(toy_net, x, ThresholdConfig(50, 8, alpha),
                                      np.random.default_rng(1))
            assert tau == pytest.approx(expected, rel=1e-9)

    def test_buffer_smaller_than_bootstrap_size_rejected(self, toy_net):
        x = np.zeros((4, 6), dtype=np.float32)
        with pytest.raises(ValueError, match="smaller"):
            bootstrap_threshold(toy_net, x, ThresholdConfig(10, 8, 0.9),
                                np.random.default_rng(0))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ThresholdConfig(0, 8, 0.9)
        with pytest.raises(ValueError):
            ThresholdConfig(10, 8, 1.0)


class TestFilterStream:
    def _batches(self, rng, n=10):
        return [StreamBatch(rng.normal(size=(8, 6)).astype(np.float32),
                            np.zeros(8, dtype=np.int64)) for _ in range(n)]

    def test_partition_and_order(self, toy_net):
        batches = self._batches(np.random.default_rng(5))
        scores = [batch_ood_score(toy_net, b.inputs).eta1 for b in batches]
        tau = float(np.median(scores))
        result = filter_stream(toy_net, batches, tau)
        assert result.rejected_count + len(result.accepted) == len(batches)
        expected = [b for b, s in zip(batches, scores) if s < tau]
        assert [id(b) for b in result.accepted] == [id(b) for b in expected]

    def test_minus_infinity_rejects_everything(self, toy_net):
        batches = self._batches(np.random.default_rng(6), n=5)
        result = filter_stream(toy_net, batches, float("-inf"))
        assert result.accepted == []
        assert result.rejected_count == 5

    def test_nan_tau_rejected(self, toy_net):
        with pytest.raises(ValueError):
            filter_stream(toy_net, [], float("nan"))

    def test_threshold_equivalence_of_score_forms(self, toy_net):
        """The posterior-log-odds scaling (eta0/2 - (d/2) ln eta0) accepts
        exactly the same batches as eta1 when each uses its own bootstrapped
        quantile: thresholding is invariant to monotone rescaling."""
        rng = np.random.default_rng(7)
        reference = rng.normal(size=(64, 6)).astype(np.float32)
        batches = [rng.normal(0, s, size=(8, 6)).astype(np.float32)
                   for s in (0.5, 1.0, 1.0, 2.0, 3.0, 5.0)]

        def log_odds_score(x):
            score = batch_ood_score(toy_net, x)
            return 0.5 * score.eta0 - (score.d / 2.0) * math.log(score.eta0)

        cfg = ThresholdConfig(100, 8, 0.99)
        tau_main = bootstrap_threshold(toy_net, reference, cfg, np.random.default_rng(8))
        # the rescaled form must see the same bootstrap draws
        rng_b = np.random.default_rng(8)
        k_scores = []
        for _ in range(cfg.k_bootstrap):
            sel = rng_b.integers(0, reference.shape[0], size=cfg.bootstrap_size)
            k_scores.append(log_odds_score(reference[sel]))
        tau_scaled = empirical_quantile(np.asarray(k_scores), cfg.alpha)

        accept_main = [batch_ood_score(toy_net, b).eta1 < tau_main for b in batches]
        accept_scaled = [log_odds_score(b) < tau_scaled for b in batches]
        assert accept_main == accept_scaled
        assert any(accept_main) and not all(accept_main)


class TestPredictiveEntropy:
    def test_uniform_logits(self):
        assert predictive_entropy(np.zeros((4, 10))) == pytest.approx(math.log(10))

    def test_one_hot_extreme(self):
        logits = np.full((3, 5), -100.0)
        logits[:, 2] = 100.0
        assert predictive_entropy(logits) == pytest.approx(0.0, abs=1e-9)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=50, deadline=None)
    def test_entropy_bounds(self, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(2, 12))
        logits = rng.normal(scale=rng.uniform(0.1, 20), size=(int(rng.integers(1, 16)), c))
        h = predictive_entropy(logits)
        assert -1e-12 <= h <= math.log(c) + 1e-12


class TestExport:
    def test_csv_shape(self, tmp_path):
        path = str(tmp_path / "hist.csv")
        export_score_csv(path, [1.0, 2.0], [3.0], value_name="eta1")
        lines = open(path).read().strip().split("\n")
        assert lines[0] == "source,eta1"
        assert len(lines) == 4
        assert lines[1].startswith("in,") and lines[3].startswith("out,")
