"""Multi-head self-attention, query-swapped cross-domain attention, and the
two attention-perturbation baselines (smoothed random noise and uniform
context broadcasting).

Token tensors are laid out as (..., N, d); attention maps as (..., H, N_q, N_k).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from xda import autodiff as ad
from xda.autodiff import ShapeError, Tensor


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) samples redrawn until they fall within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class AttentionWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self):
        d, c = self.w_q.shape
        if self.w_k.shape != (d, c) or self.w_v.shape != (d, c) or self.w_o.shape != (c, d):
            raise ShapeError(
                f"inconsistent attention weights: Q{self.w_q.shape} K{self.w_k.shape} "
                f"V{self.w_v.shape} O{self.w_o.shape}"
            )
        if self.heads < 1 or c % self.heads:
            raise ShapeError(f"attention width {c} is not divisible by {self.heads} heads")

    @property
    def dim(self):
        return self.w_q.shape[0]

    @property
    def width(self):
        return self.w_q.shape[1]

    @property
    def d_head(self):
        return self.width // self.heads

    @classmethod
    def init(cls, dim, width, heads, rng, std=0.02, dtype=np.float64):
        mk = lambda shape: Tensor(trunc_normal(rng, shape, std), requires_grad=True, dtype=dtype)
        return cls(mk((dim, width)), mk((dim, width)), mk((dim, width)), mk((width, dim)), heads)


@dataclass
class AttentionMap:
    """Row-stochastic scores of shape (..., heads, N_q, N_k)."""

    scores: Tensor
    layer: int = 0

    def numpy(self):
        return self.scores.data


def _split_heads(t, heads):
    *lead, n, c = t.shape
    t = ad.reshape(t, (*lead, n, heads, c // heads))
    k = len(lead)
    return ad.transpose(t, (*range(k), k + 1, k, k + 2))


def _merge_heads(t):
    *lead, h, n, dh = t.shape
    k = len(lead)
    t = ad.transpose(t, (*range(k), k + 1, k, k + 2))
    return ad.reshape(t, (*lead, n, h * dh))


def _check_tokens(x, w, what):
    if x.ndim < 2 or x.shape[-1] != w.dim:
        raise ShapeError(f"{what} has shape {x.shape}; expected (..., N, {w.dim})")


def _attend(q, k, v, w, perturb=None):
    """Softmax(Q K^T / sqrt(d_head)) V per head, then the output projection."""
    qh = _split_heads(q, w.heads)
    kh = _split_heads(k, w.heads)
    vh = _split_heads(v, w.heads)
    logits = ad.matmul(qh, ad.transpose(kh, (*range(kh.ndim - 2), kh.ndim - 1, kh.ndim - 2)))
    scores = ad.softmax_rows(logits, 1.0 / math.sqrt(w.d_head))
    amap = AttentionMap(scores)
    mixed = perturb(amap).scores if perturb is not None else scores
    y = ad.matmul(_merge_heads(ad.matmul(mixed, vh)), w.w_o)
    return y, amap


def self_attention(x, w, perturb=None):
    """Scaled dot-product attention with Q, K and V taken from ``x``.

    ``perturb``, when given, maps the AttentionMap to the one actually used
    to aggregate values; the returned map is always the clean one.
    """
    _check_tokens(x, w, "x")
    return _attend(ad.matmul(x, w.w_q), ad.matmul(x, w.w_k), ad.matmul(x, w.w_v), w, perturb)


def cross_domain_attention(x_query, x_kv, w, stop_query_grad=True):
    """Attention with queries from ``x_query`` and keys/values from ``x_kv``.

    With ``stop_query_grad`` the projected queries are detached, so no
    gradient reaches ``x_query`` or ``w.w_q`` through this call.
    """
    _check_tokens(x_query, w, "x_query")
    _check_tokens(x_kv, w, "x_kv")
    if x_query.shape != x_kv.shape:
        raise ShapeError(f"query stream {x_query.shape} and key/value stream {x_kv.shape} differ")
    q = ad.matmul(x_query, w.w_q)
    if stop_query_grad:
        q = ad.stop_gradient(q)
    return _attend(q, ad.matmul(x_kv, w.w_k), ad.matmul(x_kv, w.w_v), w)


def smoothed_noise_map(shape, grid, noise_res, rng, std=1.0, dtype=np.float64):
    """Row-stochastic noise map: low-res Gaussian field, bilinearly
    upsampled over the key grid, then softmaxed per query row.

    ``shape`` is (..., N_q, N_k) with N_k == grid[0] * grid[1].
    """
    gh, gw = grid
    nh, nw = noise_res
    if gh % nh or gw % nw:
        raise ShapeError(f"noise resolution {noise_res} does not divide the token grid {grid}")
    *lead, nq, nk = shape
    if nk != gh * gw:
        raise ShapeError(f"key count {nk} does not match token grid {grid}")
    field = (std * rng.standard_normal((int(np.prod(lead, dtype=int)) * nq, nh, nw, 1))).astype(dtype)
    with ad.no_grad():
        up = ad.bilinear_resize(Tensor(field), gh, gw).data
        noise = ad.softmax_rows(Tensor(up.reshape(*lead, nq, nk))).data
    return noise


def random_perturbed_attention(amap, grid, noise_res, rng, std=1.0):
    """Average an attention map with a smoothed random attention map."""
    noise = smoothed_noise_map(amap.scores.shape, grid, noise_res, rng, std, amap.scores.dtype)
    return AttentionMap(ad.mul(ad.add(amap.scores, noise), 0.5), amap.layer)


def uniform_broadcast(y):
    """Context broadcasting: average every token with the token mean."""
    return ad.mul(ad.add(y, ad.mean(y, axis=-2, keepdims=True)), 0.5)
