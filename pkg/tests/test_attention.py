import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xda import autodiff as ad
from xda.attention import (
    AttentionWeights,
    cross_domain_attention,
    random_perturbed_attention,
    self_attention,
    smoothed_noise_map,
    trunc_normal,
    uniform_broadcast,
)
from xda.autodiff import ShapeError, Tensor


def weights(dim=8, heads=2, seed=0, std=0.5):
    return AttentionWeights.init(dim, dim, heads, np.random.default_rng(seed), std=std)


def tokens(n=16, dim=8, seed=1, batch=None):
    shape = (n, dim) if batch is None else (batch, n, dim)
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True)


def naive_attention(x_q, x_kv, w):
    """Loop-over-heads reference: per head softmax(q k^T / sqrt(dh)) v, then W_O."""
    q = x_q @ w.w_q.data
    k = x_kv @ w.w_k.data
    v = x_kv @ w.w_v.data
    dh = w.d_head
    outs, maps = [], []
    for h in range(w.heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        maps.append(a)
        outs.append(a @ v[:, sl])
    return np.concatenate(outs, axis=1) @ w.w_o.data, np.stack(maps)


class TestWeights:
    def test_trunc_normal_bounds(self):
        x = trunc_normal(np.random.default_rng(0), (5000,), std=0.02)
        assert np.abs(x).max() <= 0.04
        assert x.std() == pytest.approx(0.0176, abs=0.001)

    def test_head_divisibility(self):
        with pytest.raises(ShapeError, match="divisible"):
            AttentionWeights.init(8, 9, 2, np.random.default_rng(0))

    def test_inconsistent_shapes(self):
        w = weights()
        with pytest.raises(ShapeError):
            AttentionWeights(w.w_q, w.w_k, w.w_v, Tensor(np.zeros((8, 4))), 2)

    def test_properties(self):
        w = AttentionWeights.init(12, 8, 4, np.random.default_rng(0))
        assert (w.dim, w.width, w.d_head) == (12, 8, 2)


class TestSelfAttention:
    def test_matches_naive(self):
        w, x = weights(), tokens()
        y, amap = self_attention(x, w)
        y_ref, a_ref = naive_attention(x.data, x.data, w)
        np.testing.assert_allclose(y.data, y_ref, atol=1e-12)
        np.testing.assert_allclose(amap.scores.data, a_ref, atol=1e-12)

    def test_batched_matches_single(self):
        w, x = weights(), tokens(batch=3)
        y, amap = self_attention(x, w)
        for b in range(3):
            y1, a1 = self_attention(Tensor(x.data[b]), w)
            np.testing.assert_allclose(y.data[b], y1.data, atol=1e-12)
            np.testing.assert_allclose(amap.scores.data[b], a1.scores.data, atol=1e-12)

    def test_zero_queries_uniform(self):
        w, x = weights(), tokens()
        w.w_q.data[:] = 0
        _, amap = self_attention(x, w)
        np.testing.assert_allclose(amap.scores.data, 1.0 / 16, atol=1e-15)

    def test_bad_token_width(self):
        with pytest.raises(ShapeError):
            self_attention(tokens(dim=6), weights())

    def test_grad_check(self):
        w, x = weights(dim=4, heads=2), tokens(n=5, dim=4)
        c = np.sin(np.arange(20.0)).reshape(5, 4)

        def f(x, wq, wk, wv, wo):
            ww = AttentionWeights(wq, wk, wv, wo, 2)
            y, amap = self_attention(x, ww)
            return ad.sum(y * c) + ad.sum(amap.scores * amap.scores)

        assert ad.grad_check(f, [x, w.w_q, w.w_k, w.w_v, w.w_o]) < 1e-5


class TestCrossAttention:
    def test_identical_streams_equal_self(self):
        w, x = weights(), tokens()
        y_s, a_s = self_attention(x, w)
        y_c, a_c = cross_domain_attention(x, x, w)
        np.testing.assert_allclose(y_c.data, y_s.data, atol=1e-10, rtol=0)
        np.testing.assert_allclose(a_c.scores.data, a_s.scores.data, atol=1e-10, rtol=0)

    def test_matches_naive(self):
        w, xq, xkv = weights(), tokens(seed=2), tokens(seed=3)
        y, amap = cross_domain_attention(xq, xkv, w)
        y_ref, a_ref = naive_attention(xq.data, xkv.data, w)
        np.testing.assert_allclose(y.data, y_ref, atol=1e-12)
        np.testing.assert_allclose(amap.scores.data, a_ref, atol=1e-12)

    def test_mismatched_streams(self):
        with pytest.raises(ShapeError, match="differ"):
            cross_domain_attention(tokens(n=16), tokens(n=9), weights())

    @pytest.mark.parametrize("stop", [True, False])
    def test_query_gradient(self, stop):
        w, xq, xkv = weights(), tokens(seed=2), tokens(seed=3)
        y, _ = cross_domain_attention(xq, xkv, w, stop_query_grad=stop)
        ad.sum(y * y).backward()
        if stop:
            assert xq.grad is None and w.w_q.grad is None
        else:
            assert np.abs(xq.grad).max() > 0 and np.abs(w.w_q.grad).max() > 0
        assert np.abs(xkv.grad).max() > 0 and np.abs(w.w_k.grad).max() > 0


class TestPerturbations:
    def test_noise_map_row_stochastic(self):
        n = smoothed_noise_map((2, 3, 16, 16), (4, 4), (2, 2), np.random.default_rng(0))
        assert n.shape == (2, 3, 16, 16)
        np.testing.assert_allclose(n.sum(axis=-1), 1.0, atol=1e-12)
        assert (n > 0).all()

    def test_noise_is_smooth(self):
        # at noise resolution 1 the field is constant, so every row is uniform
        n = smoothed_noise_map((5, 16), (4, 4), (1, 1), np.random.default_rng(0))
        np.testing.assert_allclose(n, 1.0 / 16, atol=1e-15)

    def test_noise_res_must_divide(self):
        with pytest.raises(ShapeError):
            smoothed_noise_map((4, 16), (4, 4), (3, 3), np.random.default_rng(0))

    def test_random_is_average(self):
        w, x = weights(), tokens()
        _, amap = self_attention(x, w)
        rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
        mixed = random_perturbed_attention(amap, (4, 4), (2, 2), rng_a)
        noise = smoothed_noise_map(amap.scores.shape, (4, 4), (2, 2), rng_b)
        np.testing.assert_allclose(mixed.scores.data, 0.5 * (amap.scores.data + noise), atol=1e-15)

    def test_self_attention_returns_clean_map(self):
        w, x = weights(), tokens()
        rng = np.random.default_rng(1)
        y_p, a_p = self_attention(x, w, perturb=lambda a: random_perturbed_attention(a, (4, 4), (2, 2), rng))
        y, a = self_attention(x, w)
        np.testing.assert_array_equal(a_p.scores.data, a.scores.data)
        assert not np.allclose(y_p.data, y.data)

    def test_uniform_broadcast_tokens(self):
        np.testing.assert_array_equal(uniform_broadcast(Tensor([[2.0], [0.0]])).data, [[1.5], [0.5]])
        const = Tensor(np.full((4, 3), 0.3))
        np.testing.assert_allclose(uniform_broadcast(const).data, const.data, atol=1e-16)

    def test_uniform_broadcast(self):
        y = Tensor(np.arange(12.0).reshape(2, 3, 2))
        out = uniform_broadcast(y).data
        np.testing.assert_allclose(out, (y.data + y.data.mean(axis=1, keepdims=True)) / 2)
        np.testing.assert_allclose(out.mean(axis=1), y.data.mean(axis=1))


@settings(max_examples=25, deadline=None)
@given(
    st.integers(0, 2**31 - 1),
    st.sampled_from([1, 2, 4]),
    st.sampled_from(["self", "cross", "random"]),
    st.floats(0.01, 3.0),
)
def test_maps_row_stochastic(seed, heads, kind, std):
    rng = np.random.default_rng(seed)
    w = AttentionWeights.init(8, 8, heads, rng, std=std)
    x = Tensor(rng.normal(size=(2, 16, 8)) * 3)
    if kind == "self":
        _, amap = self_attention(x, w)
    elif kind == "cross":
        _, amap = cross_domain_attention(Tensor(rng.normal(size=(2, 16, 8))), x, w)
    else:
        _, clean = self_attention(x, w)
        amap = random_perturbed_attention(clean, (4, 4), (2, 2), rng)
    s = amap.scores.data
    assert s.shape == (2, heads, 16, 16)
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_key_permutation(seed):
    rng = np.random.default_rng(seed)
    w = AttentionWeights.init(8, 8, 2, rng, std=0.7)
    xq, xkv = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    y, amap = cross_domain_attention(Tensor(xq), Tensor(xkv), w)
    y_p, amap_p = cross_domain_attention(Tensor(xq), Tensor(xkv[perm]), w)
    np.testing.assert_allclose(y_p.data, y.data, atol=1e-12)
    np.testing.assert_allclose(amap_p.scores.data, amap.scores.data[..., perm], atol=1e-12)
    y_ref, a_ref = naive_attention(xq, xkv[perm], w)
    np.testing.assert_allclose(amap_p.scores.data, a_ref, atol=1e-12)
