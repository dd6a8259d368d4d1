import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from smanet import tensor as T
from smanet.attention import AttentionStack, MultiChannelAttention, SmaConfig
from smanet.errors import DataError, ShapeError
from smanet.losses import (LossConfig, compute_pos_weights, cross_entropy,
                           diversity_loss, multi_attention_loss, task_loss,
                           total_loss, weighted_bce_logits)
from smanet.nn import Linear
from smanet.tensor import Tensor


class TestDiversityLoss:
    def test_full_overlap_constant_masks(self):
        masks = Tensor(np.ones((1, 2, 4, 4)))
        assert abs(diversity_loss(masks, 0.5).item() - 0.5) < 1e-12

    def test_disjoint_supports_cost_nothing(self):
        masks = np.zeros((1, 2, 4, 4))
        masks[0, 0, :2] = 0.9
        masks[0, 1, 2:] = 0.9
        assert diversity_loss(Tensor(masks), 0.5).item() == 0.0

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(0)
        m = rng.random((2, 3, 4, 4))
        got = diversity_loss(Tensor(m), 0.5).item()
        assert abs(got - oracles.diversity_loop(m, 0.5)) < 1e-12

    def test_single_channel_is_zero(self):
        assert diversity_loss(Tensor(np.random.rand(2, 1, 3, 3)), 0.3).item() == 0.0

    def test_empty_channel_axis_rejected(self):
        with pytest.raises(ShapeError):
            diversity_loss(Tensor(np.zeros((1, 0, 3, 3))), 0.5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 0.95))
    def test_nonnegative(self, seed, delta):
        m = np.random.default_rng(seed).random((1, 3, 3, 3))
        assert diversity_loss(Tensor(m), delta).item() >= 0.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        m = rng.random((2, 4, 5, 5))
        perm = rng.permutation(4)
        a = diversity_loss(Tensor(m), 0.5).item()
        b = diversity_loss(Tensor(m[:, perm]), 0.5).item()
        assert abs(a - b) < 1e-12


class TestWeightedBce:
    def test_zero_logit_positive_label(self):
        got = weighted_bce_logits(Tensor(np.zeros((1, 1))), np.ones((1, 1)), np.ones(1))
        assert abs(got.item() - math.log(2)) < 1e-12

    def test_zero_logit_negative_label(self):
        got = weighted_bce_logits(Tensor(np.zeros((1, 1))), np.zeros((1, 1)), np.ones(1))
        assert abs(got.item() - math.log(2)) < 1e-12

    def test_linear_in_weights(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(3, 4)))
        y = (rng.random((3, 4)) > 0.5).astype(float)
        w = rng.uniform(0.5, 2.0, 4)
        assert abs(weighted_bce_logits(x, y, 2 * w).item()
                   - 2 * weighted_bce_logits(x, y, w).item()) < 1e-12

    def test_finite_at_700(self):
        x = Tensor(np.array([[700.0, -700.0]]))
        y = np.array([[0.0, 1.0]])
        assert np.isfinite(weighted_bce_logits(x, y, np.ones(2)).item())

    def test_checked_mode_rejects_nonbinary(self):
        T.set_checked(True)
        try:
            with pytest.raises(DataError):
                weighted_bce_logits(Tensor(np.zeros((1, 1))), np.array([[0.5]]), np.ones(1))
        finally:
            T.set_checked(False)

    def test_matches_naive_formula(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 3))
        y = (rng.random((4, 3)) > 0.5).astype(float)
        w = rng.uniform(0.5, 3.0, 3)
        sig = 1 / (1 + np.exp(-x))
        want = (-w * (y * np.log(sig) + (1 - y) * np.log(1 - sig))).mean()
        assert abs(weighted_bce_logits(Tensor(x), y, w).item() - want) < 1e-12


class TestCrossEntropy:
    def test_uniform_logits(self):
        got = cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 3]))
        assert abs(got.item() - math.log(4)) < 1e-12

    def test_confident_correct_class(self):
        x = np.zeros((1, 3))
        x[0, 1] = 50.0
        assert cross_entropy(Tensor(x), np.array([1])).item() < 1e-20

    def test_matches_explicit_softmax_log(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 6))
        cls = rng.integers(0, 6, 5)
        got = cross_entropy(Tensor(x), cls).item()
        assert abs(got - oracles.cross_entropy_loop(x, cls)) < 1e-10

    def test_finite_at_700(self):
        x = np.array([[700.0, -700.0]])
        assert np.isfinite(cross_entropy(Tensor(x), np.array([1])).item())

    def test_out_of_range_class(self):
        with pytest.raises(DataError):
            cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


class TestMultiAttentionLoss:
    def test_degenerate_single_channel_equals_main_loss(self):
        rng = np.random.default_rng(5)
        feature = Tensor(rng.normal(size=(2, 4, 5, 5)))
        stack = AttentionStack(
            Tensor(np.zeros((2, 1, 5, 5))),
            Tensor(np.zeros((2, 1, 5, 5))),
            Tensor(np.ones((2, 1, 5, 5))),
        )
        head = Linear(4, 3, rng, init=("uniform", 0.5))
        labels = np.array([0, 2])
        cfg = LossConfig(task="multi_class")
        got = multi_attention_loss(stack, feature, labels, [head], cfg).item()
        pooled = T.reshape(T.avg_pool(feature, axes=(2, 3)), (2, 4))
        want = cross_entropy(head(pooled), labels).item()
        assert abs(got - want) < 1e-12

    def test_zero_heads_give_log_k(self):
        rng = np.random.default_rng(6)
        feature = Tensor(rng.normal(size=(2, 4, 5, 5)))
        block = MultiChannelAttention(SmaConfig(n_channels=2, in_channels=4), rng)
        stack = block.f2a(feature)
        heads = [Linear(4, 5, rng) for _ in range(2)]
        for h in heads:
            h.weight.data[...] = 0.0
            h.bias.data[...] = 0.0
        cfg = LossConfig(task="multi_class")
        got = multi_attention_loss(stack, feature, np.array([1, 4]), heads, cfg).item()
        assert abs(got - math.log(5)) < 1e-12

    def test_matches_hand_composed_pipeline(self):
        rng = np.random.default_rng(7)
        feature = Tensor(rng.normal(size=(2, 3, 4, 4)))
        block = MultiChannelAttention(SmaConfig(n_channels=2, in_channels=3), rng)
        stack = block.f2a(feature)
        heads = [Linear(3, 4, rng, init=("uniform", 0.7)) for _ in range(2)]
        labels = (rng.random((2, 4)) > 0.5).astype(float)
        w = rng.uniform(1.0, 2.0, 4)
        cfg = LossConfig(task="multi_label", pos_weights=w)
        got = multi_attention_loss(stack, feature, labels, heads, cfg).item()
        acc = 0.0
        for i, head in enumerate(heads):
            gated = T.mul(T.narrow(stack.masks, 1, i, 1), feature)
            pooled = T.reshape(T.avg_pool(gated, axes=(2, 3)), (2, 3))
            acc += weighted_bce_logits(head(pooled), labels, w).item()
        assert abs(got - acc / 2) < 1e-12

    def test_head_count_mismatch(self):
        rng = np.random.default_rng(8)
        feature = Tensor(rng.normal(size=(1, 3, 4, 4)))
        block = MultiChannelAttention(SmaConfig(n_channels=2, in_channels=3), rng)
        stack = block.f2a(feature)
        with pytest.raises(ShapeError):
            multi_attention_loss(stack, feature, np.zeros((1, 2)), [Linear(3, 2, rng)],
                                 LossConfig(task="multi_label"))


class TestTotalLoss:
    def test_zero_factors(self):
        cfg = LossConfig(alpha=0.0, lam=0.0)
        got = total_loss(Tensor(1.25), Tensor(9.0), Tensor(7.0), cfg)
        assert got.item() == 1.25

    def test_arithmetic(self):
        cfg = LossConfig(alpha=0.1, lam=0.1)
        got = total_loss(Tensor(1.0), Tensor(2.0), Tensor(3.0), cfg)
        assert abs(got.item() - 1.5) < 1e-15

    def test_gradient_linearity(self):
        rng = np.random.default_rng(9)
        cfg = LossConfig(alpha=0.3, lam=0.7)
        base = rng.normal(size=(3, 3))

        def parts(x):
            return T.sigmoid(x).sum(), T.mul(x, x).mean(), T.exp(0.1 * x).sum()

        x = Tensor(base.copy(), requires_grad=True)
        la, ld, lm = parts(x)
        total_loss(la, ld, lm, cfg).backward()
        combined = x.grad.copy()

        grads = []
        for pick in range(3):
            xi = Tensor(base.copy(), requires_grad=True)
            parts(xi)[pick].backward()
            grads.append(xi.grad.copy())
        want = grads[0] + cfg.alpha * grads[1] + cfg.lam * grads[2]
        assert np.allclose(combined, want, atol=1e-10)


class TestPosWeights:
    def test_ratio_and_clamp(self):
        labels = np.zeros((100, 3))
        labels[:50, 0] = 1   # balanced -> ratio 1
        labels[:2, 1] = 1    # rare -> ratio 49 -> clamped to 10
        # label 2 never positive -> clamped to 10
        w = compute_pos_weights(labels)
        assert np.allclose(w, [1.0, 10.0, 10.0])

    def test_task_loss_dispatch(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(2, 3)))
        y_ml = (rng.random((2, 3)) > 0.5).astype(float)
        cfg = LossConfig(task="multi_label")
        assert abs(task_loss(x, y_ml, cfg).item()
                   - weighted_bce_logits(x, y_ml, np.ones(3)).item()) < 1e-15
