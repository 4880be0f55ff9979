"""Teacher EMA, pseudo-labels, class-mix augmentation and the training losses.

The prediction losses are pixel cross-entropies on the student's self
forward (source image, mixed image) and on its two cross-domain forwards.
The attention loss pulls the student's attention on the mixed image toward
the teacher's attention on the clean source/target images, row-mixed with
the same mask that built the mixed image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from xda import autodiff as ad
from xda.autodiff import ShapeError, Tensor

PSEUDO_THRESHOLD = 0.968


# -- teacher ------------------------------------------------------------------


def ema_update(teacher, student, alpha):
    """In-place ``phi <- alpha * phi + (1 - alpha) * theta``; returns ``teacher``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {alpha}")
    t_params = teacher.named_params()
    s_params = student.named_params()
    if [n for n, _ in t_params] != [n for n, _ in s_params]:
        raise ShapeError("teacher and student parameter lists differ")
    for (name, phi), (_, theta) in zip(t_params, s_params):
        if phi.shape != theta.shape:
            raise ShapeError(f"{name}: teacher {phi.shape} vs student {theta.shape}")
        phi.data = (alpha * phi.data + (1.0 - alpha) * theta.data).astype(phi.dtype, copy=False)
        phi.grad = None
    return teacher


# -- pseudo labels ------------------------------------------------------------


def one_hot(labels, classes, dtype=np.float64):
    labels = np.asarray(labels)
    return np.eye(classes, dtype=dtype)[labels]


def pseudo_label_from_logits(logits, tau=PSEUDO_THRESHOLD):
    """Argmax one-hot labels and the per-image confident-pixel ratio.

    ``logits`` is (..., H, W, C); the ratio has the leading shape.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"pseudo-label threshold must lie in (0, 1), got {tau}")
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=-1, keepdims=True)
    conf = prob.max(axis=-1)
    labels = prob.argmax(axis=-1)
    q = (conf >= tau).mean(axis=(-2, -1))
    return one_hot(labels, logits.shape[-1]), q


def pseudo_label(teacher, x_t, tau=PSEUDO_THRESHOLD):
    with ad.no_grad():
        logits = teacher.forward(x_t).logits
    return pseudo_label_from_logits(logits, tau)


# -- class mix ----------------------------------------------------------------


@dataclass
class MixBatch:
    x_s: np.ndarray
    y_s: np.ndarray  # one-hot (H, W, C)
    x_t: np.ndarray
    p_t: np.ndarray  # one-hot (H, W, C)
    x_mix: np.ndarray
    p_mix: np.ndarray
    mask: np.ndarray  # (H, W) in {0, 1}
    q: float


def classmix_mask(y_s, rng):
    """Binary mask over the pixels of ceil(K/2) randomly chosen source classes."""
    labels = np.asarray(y_s)
    if labels.ndim == 3:
        labels = labels.argmax(axis=-1)
    present = np.unique(labels)
    k = math.ceil(len(present) / 2)
    chosen = rng.choice(present, size=k, replace=False)
    return np.isin(labels, chosen).astype(np.float64)


def compose(mask, x_s, y_s, x_t, p_t, q=1.0):
    m = np.asarray(mask, dtype=np.float64)[..., None]
    x_mix = m * x_s + (1.0 - m) * x_t
    p_mix = m * y_s + (1.0 - m) * p_t
    return MixBatch(x_s, y_s, x_t, p_t, x_mix, p_mix, np.asarray(mask, dtype=np.float64), float(q))


def dacs_mix(x_s, y_s, x_t, p_t, rng, q=1.0):
    """Paste the source pixels of half the source classes onto the target image."""
    x_s, x_t = np.asarray(x_s), np.asarray(x_t)
    if x_s.shape != x_t.shape or np.shape(y_s) != np.shape(p_t):
        raise ShapeError(f"mix inputs disagree: {x_s.shape}/{x_t.shape}, {np.shape(y_s)}/{np.shape(p_t)}")
    mask = classmix_mask(y_s, rng)
    return compose(mask, x_s, np.asarray(y_s), x_t, np.asarray(p_t), q)


# -- prediction losses --------------------------------------------------------


def seg_ce(logits, target, q=None):
    """Pixel CE of (..., H, W, C) logits against one-hot targets.

    ``q`` is one weight per image (leading shape) broadcast over its pixels.
    """
    c = logits.shape[-1]
    target = np.asarray(target)
    if target.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} vs target {target.shape}")
    flat = ad.reshape(logits, (-1, c))
    if q is None:
        weight = np.ones(flat.shape[0])
    else:
        per_image = int(np.prod(logits.shape[-3:-1]))
        weight = np.repeat(np.atleast_1d(np.asarray(q, dtype=np.float64)), per_image)
    return ad.cross_entropy(flat, target.reshape(-1, c), weight)


def loss_sup(model, x_s, y_s):
    return seg_ce(model.forward(x_s).logits, y_s)


def loss_tgt(model, x_mix, p_mix, q):
    return seg_ce(model.forward(x_mix).logits, p_mix, q)


def loss_t2s(model, x_mix, x_s, y_s, stop_query_grad=True):
    """Queries from the mixed target image, keys/values from the source image."""
    logits, _ = model.forward_cross(x_mix, x_s, stop_query_grad)
    return seg_ce(logits, y_s)


def loss_s2t(model, x_s, x_mix, p_mix, q, stop_query_grad=True):
    """Queries from the source image, keys/values from the mixed target image."""
    logits, _ = model.forward_cross(x_s, x_mix, stop_query_grad)
    return seg_ce(logits, p_mix, q)


def loss_pred(l_s, l_t2s, l_t, l_s2t):
    return 0.5 * (l_s + l_t2s) + 0.5 * (l_t + l_s2t)


def total_loss(l_pred, l_attn, lambda_attn=1.0):
    if lambda_attn < 0:
        raise ValueError(f"lambda_attn must be non-negative, got {lambda_attn}")
    return l_pred + lambda_attn * l_attn


# -- attention consistency ----------------------------------------------------


def token_mask(mask, grid):
    """Resize a pixel mask (..., H, W) to the token grid and binarise at 0.5."""
    m = np.asarray(mask, dtype=np.float64)
    with ad.no_grad():
        small = ad.bilinear_resize(Tensor(m[..., None]), *grid).data[..., 0]
    return (small >= 0.5).astype(np.float64).reshape(*m.shape[:-2], grid[0] * grid[1])


def mix_attention_maps(maps_s, maps_t, token_m):
    """Row-wise selection: query rows inside the pasted region come from the
    source maps, the rest from the target maps.

    Maps are arrays (..., H, N, N) per layer; ``token_m`` is (..., N).
    """
    tm = np.asarray(token_m)
    out = []
    for a_s, a_t in zip(maps_s, maps_t):
        a_s = np.asarray(a_s.data if isinstance(a_s, Tensor) else a_s)
        a_t = np.asarray(a_t.data if isinstance(a_t, Tensor) else a_t)
        if a_s.shape != a_t.shape or a_s.shape[-2] != tm.shape[-1]:
            raise ShapeError(f"maps {a_s.shape}/{a_t.shape} do not match token mask {tm.shape}")
        sel = tm[..., None, :, None] == 1
        out.append(np.where(sel, a_s, a_t))
    return out


def valid_mask(token_m):
    """Row j keeps the keys from the same image region as query j."""
    tm = np.asarray(token_m, dtype=np.float64)
    row = tm[..., :, None] == 1
    return np.where(row, tm[..., None, :], 1.0 - tm[..., None, :])


def loss_attn(maps_m, maps_sup, m_valid):
    """Masked KL(sup || student) over valid (query, key) entries.

    Each (image, head) sum is divided by its count of valid entries; the
    result is averaged over images, heads and layers.
    """
    if len(maps_m) != len(maps_sup):
        raise ShapeError(f"{len(maps_m)} student maps vs {len(maps_sup)} supervision maps")
    mv = np.asarray(m_valid, dtype=np.float64)
    total = None
    for m, sup in zip(maps_m, maps_sup):
        scores = m.scores if hasattr(m, "scores") else m
        if scores.shape[-2:] != mv.shape[-2:]:
            raise ShapeError(f"attention {scores.shape} vs valid mask {mv.shape}")
        lead = scores.shape[:-3]
        heads = scores.shape[-3]
        count = mv.sum(axis=(-2, -1))
        inv = np.divide(1.0, count, out=np.zeros_like(count), where=count > 0)
        weight = (mv * inv[..., None, None])[..., None, :, :]
        weight = weight / (heads * max(int(np.prod(lead)), 1))
        term = ad.sum(ad.kl_rows(sup, scores) * weight.astype(scores.dtype))
        total = term if total is None else total + term
    return total / len(maps_m)
