import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xda import autodiff as ad
from xda import losses as L
from xda.autodiff import ShapeError, Tensor
from xda.segnet import ModelConfig, SegModel

MICRO = ModelConfig(height=8, width=8, patch=4, dim=8, layers=1, heads=2, classes=3)


def rand_maps(rng, shape):
    x = rng.normal(size=shape)
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


class TestEMA:
    def test_alpha_zero_copies(self):
        s, t = SegModel(MICRO, seed=1), SegModel(MICRO, seed=2).copy()
        L.ema_update(t, s, 0.0)
        assert all(np.array_equal(a.data, b.data) for a, b in zip(t.params(), s.params()))

    def test_alpha_one_freezes(self):
        s, t = SegModel(MICRO, seed=1), SegModel(MICRO, seed=2).copy()
        before = t.state()
        L.ema_update(t, s, 1.0)
        assert all(np.array_equal(before[n], p.data) for n, p in t.named_params())

    def test_interpolates(self):
        s, t = SegModel(MICRO, seed=1), SegModel(MICRO, seed=2).copy()
        ref = 0.9 * t["head.weight"].data + 0.1 * s["head.weight"].data
        L.ema_update(t, s, 0.9)
        np.testing.assert_allclose(t["head.weight"].data, ref, atol=1e-15)

    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_range(self, alpha):
        with pytest.raises(ValueError):
            L.ema_update(SegModel(MICRO).copy(), SegModel(MICRO), alpha)


class TestPseudoLabels:
    def test_argmax_and_ratio(self):
        logits = np.zeros((1, 2, 2, 3))
        logits[0, 0, 0] = [10, 0, 0]
        logits[0, 0, 1] = [0, 10, 0]
        logits[0, 1, 0] = [0, 0, 1]
        logits[0, 1, 1] = [0, 1, 0]
        p, q = L.pseudo_label_from_logits(logits, 0.968)
        np.testing.assert_array_equal(p.argmax(-1), [[[0, 1], [2, 1]]])
        # softmax([10,0,0]) max = 1/(1+2e^-10) > 0.968; softmax([0,0,1]) max < 0.968
        assert q.tolist() == [0.5]

    def test_threshold_inclusive(self):
        # two classes with p_max exactly 0.75
        logits = np.array([[[[math.log(3.0), 0.0]]]])
        _, q = L.pseudo_label_from_logits(logits, 0.75 - 1e-12)
        assert q.tolist() == [1.0]

    @pytest.mark.parametrize("tau", [0.0, 1.0])
    def test_tau_range(self, tau):
        with pytest.raises(ValueError):
            L.pseudo_label_from_logits(np.zeros((1, 1, 1, 2)), tau)


class TestClassMix:
    def test_half_the_classes(self):
        y = np.array([[0, 1], [2, 3]])
        for seed in range(10):
            m = L.classmix_mask(y, np.random.default_rng(seed))
            assert m.sum() == 2
            assert set(np.unique(m)) <= {0.0, 1.0}

    def test_odd_count_rounds_up(self):
        y = np.array([[0, 1, 2]])
        assert L.classmix_mask(y, np.random.default_rng(0)).sum() == 2

    def test_single_class(self):
        assert L.classmix_mask(np.zeros((3, 3), int), np.random.default_rng(0)).all()

    def test_compose(self):
        rng = np.random.default_rng(0)
        xs, xt = rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4, 3))
        ys = L.one_hot(rng.integers(0, 3, (4, 4)), 3)
        pt = L.one_hot(rng.integers(0, 3, (4, 4)), 3)
        mix = L.dacs_mix(xs, ys, xt, pt, rng, q=0.3)
        m = mix.mask.astype(bool)
        np.testing.assert_array_equal(mix.x_mix[m], xs[m])
        np.testing.assert_array_equal(mix.x_mix[~m], xt[~m])
        np.testing.assert_array_equal(mix.p_mix[m], ys[m])
        np.testing.assert_array_equal(mix.p_mix[~m], pt[~m])
        assert mix.q == 0.3

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            L.dacs_mix(np.zeros((4, 4, 3)), np.zeros((4, 4, 2)), np.zeros((5, 4, 3)), np.zeros((4, 4, 2)), None)


class TestPredictionLosses:
    def test_recombination(self):
        parts = [Tensor(np.float64(v)) for v in (0.3, 1.1, 0.7, 2.9)]
        assert L.loss_pred(*parts).item() == 0.5 * (0.3 + 1.1) + 0.5 * (0.7 + 2.9)
        assert L.total_loss(Tensor(np.float64(1.5)), Tensor(np.float64(0.25)), 2.0).item() == 2.0

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            L.total_loss(Tensor(1.0), Tensor(1.0), -1.0)

    def test_q_zero_nullifies(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.normal(size=(2, 4, 4, 3)), requires_grad=True)
        target = L.one_hot(rng.integers(0, 3, (2, 4, 4)), 3)
        loss = L.seg_ce(logits, target, np.zeros(2))
        assert loss.item() == 0.0
        loss.backward()
        assert not logits.grad.any()

    def test_q_per_image(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.normal(size=(2, 4, 4, 3)))
        target = L.one_hot(rng.integers(0, 3, (2, 4, 4)), 3)
        only_first = L.seg_ce(logits, target, np.array([1.0, 0.0])).item()
        first = L.seg_ce(Tensor(logits.data[:1]), target[:1]).item()
        # q scales pixels; the normaliser counts every labelled pixel of both images
        assert only_first == pytest.approx(first / 2, abs=1e-12)

    def test_uniform_logits(self):
        logits = Tensor(np.zeros((1, 2, 2, 4)))
        target = L.one_hot(np.array([[[0, 1], [2, 3]]]), 4)
        assert L.seg_ce(logits, target).item() == pytest.approx(math.log(4), abs=1e-15)

    def test_model_wrappers(self):
        m = SegModel(MICRO)
        rng = np.random.default_rng(0)
        xs, xm = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
        y = L.one_hot(rng.integers(0, 3, (8, 8)), 3)
        assert L.loss_sup(m, xs, y).item() == pytest.approx(L.seg_ce(m.forward(xs).logits, y).item())
        assert L.loss_tgt(m, xm, y, 0.0).item() == 0.0
        assert np.isfinite(L.loss_t2s(m, xm, xs, y).item())
        assert np.isfinite(L.loss_s2t(m, xs, xm, y, 1.0).item())


class TestMasks:
    def test_token_mask_blocks(self):
        mask = np.zeros((8, 8))
        mask[:4, :4] = 1
        np.testing.assert_array_equal(L.token_mask(mask, (2, 2)), [1, 0, 0, 0])

    def test_token_mask_batched(self):
        masks = np.stack([np.ones((8, 8)), np.zeros((8, 8))])
        tm = L.token_mask(masks, (2, 2))
        np.testing.assert_array_equal(tm, [[1, 1, 1, 1], [0, 0, 0, 0]])

    def test_all_ones_selects_source(self):
        rng = np.random.default_rng(0)
        a_s, a_t = rand_maps(rng, (2, 4, 4)), rand_maps(rng, (2, 4, 4))
        (mixed,) = L.mix_attention_maps([a_s], [a_t], np.ones(4))
        np.testing.assert_array_equal(mixed, a_s)
        (mixed,) = L.mix_attention_maps([a_s], [a_t], np.zeros(4))
        np.testing.assert_array_equal(mixed, a_t)

    def test_rowwise(self):
        rng = np.random.default_rng(0)
        a_s, a_t = rand_maps(rng, (1, 3, 3)), rand_maps(rng, (1, 3, 3))
        (mixed,) = L.mix_attention_maps([a_s], [a_t], np.array([1.0, 0.0, 1.0]))
        np.testing.assert_array_equal(mixed[0, 0], a_s[0, 0])
        np.testing.assert_array_equal(mixed[0, 1], a_t[0, 1])
        np.testing.assert_array_equal(mixed[0, 2], a_s[0, 2])

    def test_valid_mask_constant_masks(self):
        np.testing.assert_array_equal(L.valid_mask(np.ones(3)), np.ones((3, 3)))
        np.testing.assert_array_equal(L.valid_mask(np.zeros(3)), np.ones((3, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sampled_from([0.0, 1.0]), min_size=1, max_size=12))
    def test_valid_mask_complement(self, bits):
        m = np.array(bits)
        mv = L.valid_mask(m)
        assert set(np.unique(mv)) <= {0.0, 1.0}
        for j, mj in enumerate(m):
            np.testing.assert_array_equal(mv[j], m if mj == 1 else 1 - m)
        np.testing.assert_array_equal(mv, mv.T)


class TestAttentionLoss:
    def test_fixed_point(self):
        rng = np.random.default_rng(0)
        sup = [rand_maps(rng, (2, 2, 4, 4))]
        tm = np.array([[1.0, 0, 1, 0], [0, 0, 1, 1]])
        student = [Tensor(sup[0].copy(), requires_grad=True)]
        loss = L.loss_attn(student, sup, L.valid_mask(tm))
        assert loss.item() == 0.0
        loss.backward()
        assert np.isfinite(student[0].grad).all()

    def test_known_value(self):
        sup = [np.array([[[[0.5, 0.5], [0.5, 0.5]]]])]
        stu = [Tensor(np.array([[[[0.25, 0.75], [0.5, 0.5]]]]))]
        loss = L.loss_attn(stu, sup, L.valid_mask(np.ones((1, 2)))).item()
        kl = 0.5 * math.log(2.0) + 0.5 * math.log(0.5 / 0.75)
        # four valid entries, one row carries the divergence
        assert loss == pytest.approx(kl / 4, abs=1e-15)

    def test_layer_average(self):
        rng = np.random.default_rng(1)
        sup = [rand_maps(rng, (1, 1, 3, 3)) for _ in range(2)]
        stu = [Tensor(rand_maps(rng, (1, 1, 3, 3))) for _ in range(2)]
        mv = L.valid_mask(np.ones((1, 3)))
        each = [L.loss_attn([s], [p], mv).item() for s, p in zip(stu, sup)]
        assert L.loss_attn(stu, sup, mv).item() == pytest.approx(sum(each) / 2, abs=1e-15)

    def test_non_negative_full_mask(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            sup = [rand_maps(rng, (2, 2, 5, 5))]
            stu = [Tensor(rand_maps(rng, (2, 2, 5, 5)))]
            assert L.loss_attn(stu, sup, L.valid_mask(np.ones((2, 5)))).item() >= -1e-9

    def test_masked_entries_ignored(self):
        rng = np.random.default_rng(3)
        sup = [rand_maps(rng, (1, 1, 4, 4))]
        tm = np.array([[1.0, 1.0, 0.0, 0.0]])
        mv = L.valid_mask(tm)
        a = rand_maps(rng, (1, 1, 4, 4))
        # swap the two invalid keys within every row; row sums stay 1
        b = a.copy()
        b[..., :2, 2], b[..., :2, 3] = a[..., :2, 3], a[..., :2, 2]
        b[..., 2:, 0], b[..., 2:, 1] = a[..., 2:, 1], a[..., 2:, 0]
        la = L.loss_attn([Tensor(a)], sup, mv).item()
        lb = L.loss_attn([Tensor(b)], sup, mv).item()
        assert la == lb

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            L.loss_attn([Tensor(np.full((1, 1, 3, 3), 1 / 3))], [np.full((1, 1, 3, 3), 1 / 3)], np.ones((4, 4)))
