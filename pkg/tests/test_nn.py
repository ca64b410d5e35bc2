import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bowl.memory import MemoryBuffer, MemoryEntry
from bowl.nn import (BatchNorm, Dense, Network, ReLU, SgdOptimizer, backward_and_step,
                     build_mlp, eval_mode, expand_head, load_checkpoint,
                     save_checkpoint, softmax_cross_entropy, train_one_epoch)


def _test_loss(net, x, targets):
    """Independent cross-entropy for the finite-difference oracle."""
    logits, _ = net.forward(x)
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(targets)), targets].mean())


def numeric_gradients(net, x, targets, h=1e-3):
    """Central finite differences of the training loss w.r.t. every parameter."""
    grads = {}
    for name, p in net.named_parameters():
        flat = p.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = _test_loss(net, x, targets)
            flat[i] = orig - h
            lm = _test_loss(net, x, targets)
            flat[i] = orig
            g[i] = (lp - lm) / (2.0 * h)
        grads[name] = g.reshape(p.data.shape)
    return grads


def analytic_gradients(net, x, targets):
    logits, _ = net.forward(x)
    _, dlogits = softmax_cross_entropy(logits, targets)
    net.backward(dlogits)
    return {name: p.grad.copy() for name, p in net.named_parameters()}


def max_relative_error(analytic, numeric):
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


class TestGradients:
    def test_backprop_matches_finite_differences_many_nets(self):
        """Layer-by-layer backprop vs the central-difference oracle, 20 seeds.

        h=1e-5 keeps float64 truncation/roundoff near 1e-10 and makes ReLU
        kink crossings within the difference interval vanishingly rare.
        """
        for seed in range(20):
            rng = np.random.default_rng(seed)
            in_dim = int(rng.integers(2, 6))
            hidden = [int(rng.integers(3, 9)) for _ in range(int(rng.integers(1, 3)))]
            n_classes = int(rng.integers(2, 5))
            net = build_mlp(in_dim, hidden, n_classes, rng, dtype=np.float64)
            assert sum(p.data.size for _, p in net.named_parameters()) <= 1000
            batch = int(rng.integers(3, 7))
            x = rng.normal(size=(batch, in_dim))
            y = rng.integers(0, n_classes, size=batch)
            err = max_relative_error(analytic_gradients(net, x, y),
                                     numeric_gradients(net, x, y, h=1e-5))
            assert err <= 1e-4, f"seed {seed}: max relative error {err}"

    def test_small_net_default_step(self):
        """2-4-2 net with batch norm at the coarser h=1e-3 step."""
        rng = np.random.default_rng(0)
        net = build_mlp(2, [4], 2, rng, dtype=np.float64)
        x = rng.normal(size=(4, 2))
        y = np.array([0, 1, 1, 0])
        err = max_relative_error(analytic_gradients(net, x, y),
                                 numeric_gradients(net, x, y, h=1e-3))
        assert err <= 1e-4


class TestBatchNorm:
    def test_train_mode_standardizes(self):
        rng = np.random.default_rng(0)
        bn = BatchNorm(5)
        x = (rng.normal(2.0, 1.5, size=(64, 5))).astype(np.float32)
        z = bn.forward(x, train=True)  # gamma=1, beta=0: output is z itself
        assert np.abs(z.mean(axis=0)).max() < 1e-5
        assert np.abs(z.var(axis=0) - 1.0).max() < 1e-4

    def test_eval_at_running_mean_returns_beta(self):
        bn = BatchNorm(3)
        bn.running_mean[...] = [1.0, -2.0, 0.5]
        bn.running_var[...] = [2.0, 0.5, 1.0]
        bn.beta.data[...] = [0.3, -0.7, 0.0]
        x = np.tile(bn.running_mean, (4, 1))
        y = bn.forward(x, train=False)
        np.testing.assert_array_equal(y, np.tile(bn.beta.data, (4, 1)))

    def test_eval_one_sigma_point(self):
        bn = BatchNorm(1, eps=1e-5)
        bn.running_mean[...] = 0.5
        bn.running_var[...] = 4.0
        bn.gamma.data[...] = 2.0
        bn.beta.data[...] = 1.0
        x = np.array([[0.5 + math.sqrt(4.0 + 1e-5)]], dtype=np.float32)
        y = bn.forward(x, train=False)
        assert abs(y[0, 0] - 3.0) < 1e-5

    def test_batch_of_one_rejected_in_train_mode(self):
        bn = BatchNorm(4)
        with pytest.raises(ValueError, match="batch size"):
            bn.forward(np.zeros((1, 4), dtype=np.float32), train=True)

    def test_channel_mismatch_rejected(self):
        bn = BatchNorm(4)
        with pytest.raises(ValueError, match="channels"):
            bn.forward(np.zeros((8, 3), dtype=np.float32), train=True)

    def test_running_stats_converge_to_true_moments(self):
        rng = np.random.default_rng(7)
        bn = BatchNorm(3, stat_momentum=0.1)
        true_mean = np.array([2.0, -1.5, 3.0])
        true_std = np.array([1.5, 0.7, 2.0])
        for _ in range(500):
            x = (true_mean + true_std * rng.normal(size=(256, 3))).astype(np.float32)
            bn.forward(x, train=True)
        assert np.abs(bn.running_mean / true_mean - 1.0).max() < 0.05
        assert np.abs(bn.running_var / true_std**2 - 1.0).max() < 0.05

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=30, deadline=None)
    def test_standardization_property(self, seed):
        """Any batch with healthy per-channel variance standardizes cleanly."""
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 64))
        c = int(rng.integers(1, 8))
        x = rng.normal(rng.uniform(-3, 3), rng.uniform(0.8, 3.0),
                       size=(n, c)).astype(np.float32)
        if np.any(x.var(axis=0) < 0.5):
            return
        bn = BatchNorm(c)
        z = bn.forward(x, train=True)
        assert np.abs(z.mean(axis=0)).max() < 1e-5
        assert np.abs(z.var(axis=0) - 1.0).max() < 1e-4


class TestForward:
    def test_zero_weight_head_gives_zero_logits(self):
        rng = np.random.default_rng(1)
        net = build_mlp(4, [6], 3, rng)
        net.head.weight.data[...] = 0.0
        net.head.bias.data[...] = 0.0
        net.eval()
        logits, _ = net.forward(rng.normal(size=(5, 4)).astype(np.float32))
        np.testing.assert_array_equal(logits, np.zeros((5, 3), dtype=np.float32))

    def test_trace_total_dim_sums_bn_widths(self):
        rng = np.random.default_rng(2)
        net = build_mlp(10, [16, 8], 4, rng)
        net.eval()
        _, trace = net.forward(rng.normal(size=(3, 10)).astype(np.float32), capture=True)
        assert trace.total_dim == 24
        assert len(trace.standardized) == 2
        assert trace.n_samples == 3

    def test_eval_forward_deterministic(self):
        rng = np.random.default_rng(3)
        net = build_mlp(6, [8], 2, rng)
        net.eval()
        x = rng.normal(size=(4, 6)).astype(np.float32)
        a, _ = net.forward(x)
        b, _ = net.forward(x)
        np.testing.assert_array_equal(a, b)

    def test_shape_mismatch_rejected(self):
        net = build_mlp(6, [8], 2, np.random.default_rng(0))
        with pytest.raises(ValueError, match="dim"):
            net.forward(np.zeros((4, 5), dtype=np.float32))

    def test_network_requires_batchnorm(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="batch-norm"):
            Network([Dense(4, 3, rng), ReLU()], Dense(3, 2, rng))


class TestTraining:
    def test_zero_lr_keeps_parameters_and_returns_nll(self):
        rng = np.random.default_rng(4)
        net = build_mlp(3, [5], 2, rng)
        opt = SgdOptimizer(learning_rate=0.0, momentum=0.0, weight_decay=0.0)
        x = rng.normal(size=(2, 3)).astype(np.float32)
        y = np.array([1, 0])
        before = {n: p.data.copy() for n, p in net.named_parameters()}
        logits, _ = net.forward(x)  # train-mode logits seen by the step
        z = logits.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        expected = float(-(z[np.arange(2), y]
                           - np.log(np.exp(z).sum(axis=1))).mean())
        net2_loss = backward_and_step(net, x, y, opt)
        # BN uses batch statistics both times, so the loss is reproducible
        assert abs(net2_loss - expected) < 1e-6
        for n, p in net.named_parameters():
            np.testing.assert_array_equal(before[n], p.data)

    def test_uniform_logits_loss_is_log_n_classes(self):
        logits = np.zeros((4, 2), dtype=np.float32)
        loss, _ = softmax_cross_entropy(logits, np.array([0, 1, 0, 1]))
        assert abs(loss - math.log(2)) < 1e-7

    def _buffer_of(self, n, dim=3):
        rng = np.random.default_rng(8)
        entries = [MemoryEntry(rng.normal(size=dim).astype(np.float32), i % 2, 1.0, 0, i)
                   for i in range(n)]
        return MemoryBuffer(capacity=max(n, 1), entries=entries)

    def test_epoch_step_count_is_ceiling_division(self):
        rng = np.random.default_rng(9)
        net = build_mlp(3, [4], 2, rng)
        opt = SgdOptimizer(0.01, 0.9, 0.0)
        steps, _ = train_one_epoch(net, self._buffer_of(5000), opt, 256,
                                   np.random.default_rng(0))
        assert steps == 20

    def test_single_entry_buffer_trains_one_step(self):
        rng = np.random.default_rng(10)
        net = build_mlp(3, [4], 2, rng)
        opt = SgdOptimizer(0.01, 0.9, 0.0)
        steps, loss = train_one_epoch(net, self._buffer_of(1), opt, 256,
                                      np.random.default_rng(0))
        assert steps == 1
        assert math.isfinite(loss)

    def test_epoch_visit_order_deterministic(self):
        rng = np.random.default_rng(11)
        net1 = build_mlp(3, [4], 2, rng)
        net2 = build_mlp(3, [4], 2, np.random.default_rng(11))
        buf = self._buffer_of(40)
        opt1 = SgdOptimizer(0.05, 0.9, 0.0)
        opt2 = SgdOptimizer(0.05, 0.9, 0.0)
        train_one_epoch(net1, buf, opt1, 16, np.random.default_rng(5))
        train_one_epoch(net2, buf, opt2, 16, np.random.default_rng(5))
        for (n1, p1), (_, p2) in zip(net1.named_parameters(), net2.named_parameters()):
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_empty_buffer_rejected(self):
        net = build_mlp(3, [4], 2, np.random.default_rng(0))
        with pytest.raises(ValueError, match="empty"):
            train_one_epoch(net, MemoryBuffer(capacity=4), SgdOptimizer(), 8,
                            np.random.default_rng(0))


class TestExpandHead:
    def test_two_plus_two_classes(self):
        rng = np.random.default_rng(12)
        net = build_mlp(4, [6], 2, rng, class_ids=[2, 5])
        expand_head(net, 2, rng, new_class_ids=[0, 6])
        assert net.n_classes == 4
        assert net.class_ids == [2, 5, 0, 6]

    def test_expand_by_zero_rejected(self):
        net = build_mlp(4, [6], 2, np.random.default_rng(0))
        with pytest.raises(ValueError, match="at least one"):
            expand_head(net, 0, np.random.default_rng(0))

    def test_old_logits_preserved_exactly(self):
        rng = np.random.default_rng(13)
        net = build_mlp(4, [6], 3, rng)
        net.eval()
        x = rng.normal(size=(5, 4)).astype(np.float32)
        before, _ = net.forward(x)
        expand_head(net, 2, rng)
        after, _ = net.forward(x)
        np.testing.assert_array_equal(before, after[:, :3])


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(14)
        net = build_mlp(5, [7, 3], 4, rng, class_ids=[1, 3, 5, 7])
        opt = SgdOptimizer(0.1, 0.9, 1e-3)
        x = rng.normal(size=(16, 5)).astype(np.float32)
        y = rng.integers(0, 4, size=16)
        for _ in range(3):
            backward_and_step(net, x, y, opt)
        path = str(tmp_path / "model.bnt")
        save_checkpoint(net, path)
        other = build_mlp(5, [7, 3], 4, np.random.default_rng(99))
        load_checkpoint(other, path)
        assert other.class_ids == [1, 3, 5, 7]
        for (n1, p1), (_, p2) in zip(net.named_parameters(), other.named_parameters()):
            np.testing.assert_array_equal(p1.data, p2.data)
        net.eval()
        other.eval()
        a, _ = net.forward(x)
        b, _ = other.forward(x)
        np.testing.assert_array_equal(a, b)

    def test_eval_mode_context_restores(self):
        net = build_mlp(3, [4], 2, np.random.default_rng(0))
        assert net.training
        with eval_mode(net):
            assert not net.training
        assert net.training
