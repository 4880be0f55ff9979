"""Tiny pre-norm transformer segmenter.

Patchify -> linear embed -> L x [LN, MHSA, residual, LN, ReLU MLP, residual]
-> LN -> per-token linear classifier -> bilinear upsample to input size.

``forward`` is the ordinary self-attention model. ``forward_cross`` runs the
same weights with queries taken from another image's self-attention stream
at the same depth, while keys, values and the residual stream come from the
key/value image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from xda import autodiff as ad
from xda.attention import (
    AttentionMap,
    AttentionWeights,
    cross_domain_attention,
    random_perturbed_attention,
    self_attention,
    trunc_normal,
    uniform_broadcast,
)
from xda.autodiff import ShapeError, Tensor

PERTURBATIONS = ("none", "random", "uniform")


@dataclass(frozen=True)
class ModelConfig:
    height: int = 32
    width: int = 32
    patch: int = 4
    dim: int = 32
    layers: int = 2
    heads: int = 2
    classes: int = 4
    mlp_ratio: int = 4
    noise_res: int = 4

    def __post_init__(self):
        for name in ("height", "width", "patch", "dim", "layers", "heads", "classes", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"input {self.height}x{self.width} is not divisible by patch {self.patch}")

    @property
    def grid(self):
        return self.height // self.patch, self.width // self.patch

    @property
    def tokens(self):
        gh, gw = self.grid
        return gh * gw


class Forward(NamedTuple):
    logits: Tensor
    maps: list
    features: list


class SegModel:
    def __init__(self, config, seed=0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = config
        patch_in = c.patch * c.patch * 3
        hidden = c.mlp_ratio * c.dim

        def w(*shape):
            return Tensor(trunc_normal(rng, shape), requires_grad=True, dtype=self.dtype)

        def const(value, *shape):
            return Tensor(np.full(shape, value), requires_grad=True, dtype=self.dtype)

        p = {}
        p["patch_embed.weight"] = w(patch_in, c.dim)
        p["patch_embed.bias"] = const(0.0, c.dim)
        for i in range(c.layers):
            b = f"blocks.{i}."
            p[b + "norm1.weight"] = const(1.0, c.dim)
            p[b + "norm1.bias"] = const(0.0, c.dim)
            p[b + "attn.w_q"] = w(c.dim, c.dim)
            p[b + "attn.w_k"] = w(c.dim, c.dim)
            p[b + "attn.w_v"] = w(c.dim, c.dim)
            p[b + "attn.w_o"] = w(c.dim, c.dim)
            p[b + "norm2.weight"] = const(1.0, c.dim)
            p[b + "norm2.bias"] = const(0.0, c.dim)
            p[b + "mlp.fc1.weight"] = w(c.dim, hidden)
            p[b + "mlp.fc1.bias"] = const(0.0, hidden)
            p[b + "mlp.fc2.weight"] = w(hidden, c.dim)
            p[b + "mlp.fc2.bias"] = const(0.0, c.dim)
        p["norm.weight"] = const(1.0, c.dim)
        p["norm.bias"] = const(0.0, c.dim)
        p["head.weight"] = w(c.dim, c.classes)
        p["head.bias"] = const(0.0, c.classes)
        for name, t in p.items():
            t.name = name
        self._p = p

    # -- parameters ---------------------------------------------------------

    def named_params(self):
        return list(self._p.items())

    def params(self):
        return list(self._p.values())

    def __getitem__(self, name):
        return self._p[name]

    def num_params(self):
        return int(sum(t.size for t in self._p.values()))

    def state(self):
        """Name -> array copy, in parameter order."""
        return {k: t.data.copy() for k, t in self._p.items()}

    def load_params(self, arrays):
        """Overwrite parameter values from a name->array mapping or a list in parameter order."""
        if isinstance(arrays, dict):
            if list(arrays) != list(self._p):
                missing = set(self._p) ^ set(arrays)
                raise ShapeError(f"parameter names do not match: {sorted(missing)[:5]}")
            arrays = list(arrays.values())
        if len(arrays) != len(self._p):
            raise ShapeError(f"expected {len(self._p)} parameter arrays, got {len(arrays)}")
        for (name, t), a in zip(self._p.items(), arrays):
            a = np.asarray(a)
            if a.shape != t.shape:
                raise ShapeError(f"{name}: shape {a.shape} does not match {t.shape}")
            t.data = a.astype(self.dtype, copy=True)

    def copy(self, trainable=False):
        other = SegModel.__new__(SegModel)
        other.config = self.config
        other.dtype = self.dtype
        other._p = {
            k: Tensor(t.data.copy(), requires_grad=trainable, dtype=self.dtype, name=k)
            for k, t in self._p.items()
        }
        return other

    def zero_grad(self):
        for t in self._p.values():
            t.grad = None

    def is_encoder(self, name):
        return not name.startswith("head.")

    # -- layers -------------------------------------------------------------

    def attn_weights(self, i):
        b = f"blocks.{i}.attn."
        p = self._p
        return AttentionWeights(p[b + "w_q"], p[b + "w_k"], p[b + "w_v"], p[b + "w_o"], self.config.heads)

    def _as_batch(self, image):
        image = ad.as_tensor(image)
        if image.dtype != self.dtype:
            image = Tensor(image.data.astype(self.dtype), requires_grad=image.requires_grad)
        single = image.ndim == 3
        if single:
            image = ad.reshape(image, (1, *image.shape))
        c = self.config
        if image.shape[1:] != (c.height, c.width, 3):
            raise ShapeError(f"image shape {image.shape[1:]} does not match config ({c.height}, {c.width}, 3)")
        return image, single

    def embed(self, images):
        c = self.config
        b = images.shape[0]
        gh, gw = c.grid
        x = ad.reshape(images, (b, gh, c.patch, gw, c.patch, 3))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        x = ad.reshape(x, (b, gh * gw, c.patch * c.patch * 3))
        return ad.matmul(x, self._p["patch_embed.weight"]) + self._p["patch_embed.bias"]

    def _mlp(self, h, i):
        p = self._p
        b = f"blocks.{i}."
        z = ad.layer_norm(h, p[b + "norm2.weight"], p[b + "norm2.bias"])
        z = ad.relu(ad.matmul(z, p[b + "mlp.fc1.weight"]) + p[b + "mlp.fc1.bias"])
        return h + (ad.matmul(z, p[b + "mlp.fc2.weight"]) + p[b + "mlp.fc2.bias"])

    def _norm1(self, h, i):
        b = f"blocks.{i}."
        return ad.layer_norm(h, self._p[b + "norm1.weight"], self._p[b + "norm1.bias"])

    def decode(self, h):
        c = self.config
        p = self._p
        z = ad.layer_norm(h, p["norm.weight"], p["norm.bias"])
        z = ad.matmul(z, p["head.weight"]) + p["head.bias"]
        gh, gw = c.grid
        z = ad.reshape(z, (h.shape[0], gh, gw, c.classes))
        return ad.bilinear_resize(z, c.height, c.width)

    # -- passes -------------------------------------------------------------

    def forward(self, image, perturbation="none", rng=None):
        """Self-attention forward.

        ``image`` is (H, W, 3) or (B, H, W, 3). Returns logits with the same
        leading layout, one AttentionMap per block and the per-block
        attention inputs (post-norm tokens) used as cross-branch queries.
        """
        if perturbation not in PERTURBATIONS:
            raise ValueError(f"unknown perturbation {perturbation!r}")
        images, single = self._as_batch(image)
        perturb = None
        if perturbation == "random":
            if rng is None:
                raise ValueError("random perturbation needs an rng")
            nr = self.config.noise_res
            grid = self.config.grid
            perturb = lambda amap: random_perturbed_attention(amap, grid, (nr, nr), rng)
        h = self.embed(images)
        maps, feats = [], []
        for i in range(self.config.layers):
            xn = self._norm1(h, i)
            y, amap = self_attention(xn, self.attn_weights(i), perturb=perturb)
            if perturbation == "uniform":
                y = uniform_broadcast(y)
            amap.layer = i
            maps.append(amap)
            feats.append(xn)
            h = self._mlp(h + y, i)
        logits = self.decode(h)
        return Forward(*_unbatch(logits, maps, feats, single))

    def forward_cross(self, query_image, kv_image, stop_query_grad=True, query_features=None):
        """Cross-domain forward: queries from ``query_image``'s self stream,
        keys/values and residuals from ``kv_image``.

        ``query_features`` may pass the ``features`` of an earlier
        ``forward(query_image)`` to avoid recomputing them.
        """
        if query_features is None:
            query_features = self.forward(query_image).features
        kv, single = self._as_batch(kv_image)
        if single:
            query_features = [ad.reshape(f, (1, *f.shape)) for f in query_features]
        if len(query_features) != self.config.layers:
            raise ShapeError("need one query feature tensor per block")
        h = self.embed(kv)
        maps = []
        for i in range(self.config.layers):
            xn = self._norm1(h, i)
            y, amap = cross_domain_attention(query_features[i], xn, self.attn_weights(i), stop_query_grad)
            amap.layer = i
            maps.append(amap)
            h = self._mlp(h + y, i)
        logits = self.decode(h)
        logits, maps, _ = _unbatch(logits, maps, [], single)
        return logits, maps

    def predict(self, images, batch=16):
        """Argmax class map(s) from the self-attention path only."""
        images = np.asarray(images)
        single = images.ndim == 3
        if single:
            images = images[None]
        out = []
        with ad.no_grad():
            for s in range(0, len(images), batch):
                out.append(self.forward(images[s : s + batch]).logits.data.argmax(axis=-1))
        pred = np.concatenate(out).astype(np.int64)
        return pred[0] if single else pred


def _unbatch(logits, maps, feats, single):
    if not single:
        return logits, maps, feats
    sq = lambda t: ad.reshape(t, t.shape[1:])
    return (
        sq(logits),
        [AttentionMap(sq(m.scores), m.layer) for m in maps],
        [sq(f) for f in feats],
    )
