"""Gradient checks and attention invariants run by ``xda selftest``.

Each check returns a ``Check`` so the same code backs the CLI report and
the acceptance tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from xda import autodiff as ad
from xda.attention import (
    AttentionWeights,
    cross_domain_attention,
    random_perturbed_attention,
    self_attention,
)
from xda.autodiff import Tensor
from xda.segnet import ModelConfig, SegModel

OP_TOL = 1e-5
MODEL_TOL = 1e-4
ROW_TOL = 1e-6
MICRO = ModelConfig(height=8, width=8, patch=4, dim=8, layers=1, heads=2, classes=3)


@dataclass
class Check:
    name: str
    value: float
    limit: float

    @property
    def ok(self):
        return bool(self.value < self.limit) if not math.isnan(self.value) else False

    def __str__(self):
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name:<34s} {self.value:.3e}  (< {self.limit:.0e})"


def _leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def op_checks(seed=0):
    """Finite-difference check of every differentiable op at 64-bit."""
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    batch = _leaf(rng, 2, 3, 4)
    c35 = rng.normal(size=(3, 5))
    c34 = rng.normal(size=(3, 4))
    gamma, beta = _leaf(rng, 4), _leaf(rng, 4)
    target = np.eye(5)[rng.integers(0, 5, size=3)]
    target[1] = 0.0
    weight = rng.uniform(0.2, 1.0, size=3)
    p = ad.softmax_rows(Tensor(rng.normal(size=(3, 5)))).data
    img = _leaf(rng, 2, 3, 3, 2)
    c_img = rng.normal(size=(2, 5, 4, 2))
    cases = {
        "add": (lambda x, y: ad.sum((x + y) * c34), [a, _leaf(rng, 4)]),
        "sub": (lambda x, y: ad.sum((x - y) * c34), [a, _leaf(rng, 3, 1)]),
        "mul": (lambda x, y: ad.sum(x * y * c34), [a, _leaf(rng, 3, 4)]),
        "matmul": (lambda x, y: ad.sum(ad.matmul(x, y) * c35), [a, b]),
        "matmul (batched)": (lambda x, y: ad.sum(ad.matmul(x, y) * ad.matmul(x, y)), [batch, b]),
        "reshape/transpose": (
            lambda x: ad.sum(ad.transpose(ad.reshape(x, (2, 6)), (1, 0)) * c34.reshape(6, 2)),
            [a],
        ),
        "take": (lambda x: ad.sum(ad.take(x, [2, 0, 2]) * c34), [a]),
        "sum/mean": (lambda x: ad.mean(ad.sum(x * c34, axis=1) * ad.sum(x, axis=1)), [a]),
        "relu": (lambda x: ad.sum(ad.relu(x) * c34), [a]),
        "softmax_rows": (lambda x: ad.sum(ad.softmax_rows(x, 0.7) * c34), [a]),
        "layer_norm": (lambda x, g, h: ad.sum(ad.layer_norm(x, g, h) * c34), [a, gamma, beta]),
        "cross_entropy": (lambda x, y: ad.cross_entropy(ad.matmul(x, y), target, weight), [a, b]),
        "kl_rows": (lambda x, y: ad.sum(ad.kl_rows(p, ad.softmax_rows(ad.matmul(x, y)))), [a, b]),
        "stop_gradient": (lambda x, y: ad.sum(ad.matmul(x, ad.stop_gradient(y)) * c35), [a, b]),
        "bilinear_resize": (lambda x: ad.sum(ad.bilinear_resize(x, 5, 4) * c_img), [img]),
    }
    out = []
    for name, (f, inputs) in cases.items():
        out.append(Check(f"grad {name}", ad.grad_check(f, inputs), OP_TOL))
    return out


def _attention_case(rng, heads=2):
    w = AttentionWeights.init(8, 8, heads, rng, std=0.5)
    x = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    c = rng.normal(size=(5, 8))

    def f(x, wq, wk, wv, wo):
        y, amap = self_attention(x, AttentionWeights(wq, wk, wv, wo, heads))
        return ad.sum(y * c) + ad.sum(amap.scores * amap.scores)

    return f, [x, w.w_q, w.w_k, w.w_v, w.w_o]


def model_check(seed=0):
    """Full micro-model (8x8 input, one block, d=8) against finite differences."""
    rng = np.random.default_rng(seed)
    m = SegModel(MICRO, seed=seed)
    # larger weights keep gradients away from zero; much larger ones make the
    # loss big enough for central differences to lose digits
    for t in m.params():
        t.data = t.data * 5 + rng.normal(size=t.shape) * 0.1
    xs, xq = rng.uniform(size=(2, 8, 8, 3)), rng.uniform(size=(2, 8, 8, 3))
    y = np.eye(3)[rng.integers(0, 3, size=2 * 64)]
    names = [n for n, _ in m.named_params()]

    def f(*params):
        m._p.update(zip(names, params))
        logits = m.forward(xs).logits
        cross, maps = m.forward_cross(xq, xs)
        loss = ad.cross_entropy(ad.reshape(logits, (-1, 3)), y)
        loss = loss + ad.cross_entropy(ad.reshape(cross, (-1, 3)), y)
        return loss + ad.sum(maps[0].scores * maps[0].scores)

    f_att, att_inputs = _attention_case(rng)
    return [
        Check("grad attention block", ad.grad_check(f_att, att_inputs), OP_TOL),
        Check("grad full micro-model", ad.grad_check(f, m.params(), eps=1e-5), MODEL_TOL),
    ]


def attention_row_checks(n=1000, seed=0):
    """Worst row-sum deviation (or -entry) over ``n`` random self, cross and perturbed maps."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    kinds = ("self", "cross", "random")
    for i in range(n):
        kind = kinds[i % 3]
        heads = int(rng.choice([1, 2, 4]))
        w = AttentionWeights.init(8, 8, heads, rng, std=float(rng.uniform(0.01, 3.0)))
        x = Tensor(rng.normal(size=(16, 8)) * rng.uniform(0.1, 5.0))
        with ad.no_grad():
            if kind == "self":
                _, amap = self_attention(x, w)
            elif kind == "cross":
                _, amap = cross_domain_attention(Tensor(rng.normal(size=(16, 8))), x, w)
            else:
                _, clean = self_attention(x, w)
                amap = random_perturbed_attention(clean, (4, 4), (2, 2), rng)
        s = amap.scores.data
        worst = max(worst, float(np.abs(s.sum(axis=-1) - 1.0).max()), float(-s.min()))
    return Check(f"row-stochastic maps (n={n})", worst, ROW_TOL)


def cross_equals_self(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        w = AttentionWeights.init(8, 8, 2, rng, std=1.0)
        x = Tensor(rng.normal(size=(2, 16, 8)))
        y_s, a_s = self_attention(x, w)
        y_c, a_c = cross_domain_attention(x, x, w)
        worst = max(worst, float(np.abs(y_s.data - y_c.data).max()), float(np.abs(a_s.scores.data - a_c.scores.data).max()))
    m = SegModel(MICRO, seed=seed)
    img = rng.uniform(size=(2, 8, 8, 3))
    logits_c, maps_c = m.forward_cross(img, img)
    f = m.forward(img)
    worst = max(worst, float(np.abs(logits_c.data - f.logits.data).max()))
    worst = max(worst, float(np.abs(maps_c[0].scores.data - f.maps[0].scores.data).max()))
    return Check("cross(x, x) == self(x)", worst, 1e-10)


def query_path_grads(stop_query_grad, seed=0):
    """Largest |gradient| reaching the query image and W_Q through cross forwards.

    Probe losses are CE on both cross directions, with queries taken from a
    separate image whose only route into the loss is the swapped query.
    """
    rng = np.random.default_rng(seed)
    m = SegModel(MICRO, seed=seed)
    for t in m.params():
        t.data = t.data * 25
    x_q = Tensor(rng.uniform(size=(2, 8, 8, 3)), requires_grad=True)
    x_kv = rng.uniform(size=(2, 8, 8, 3))
    y = np.eye(3)[rng.integers(0, 3, size=2 * 64)]
    logits, _ = m.forward_cross(x_q, x_kv, stop_query_grad)
    ad.cross_entropy(ad.reshape(logits, (-1, 3)), y).backward()
    g_img = 0.0 if x_q.grad is None else float(np.abs(x_q.grad).max())
    wq = m["blocks.0.attn.w_q"].grad
    g_wq = 0.0 if wq is None else float(np.abs(wq).max())
    return g_img, g_wq


def stop_gradient_checks(seed=0):
    on = query_path_grads(True, seed)
    off = query_path_grads(False, seed)
    return [
        Check("stop-grad: query grad (on) == 0", max(on), np.finfo(float).tiny),
        Check("stop-grad: query grad (off) > 0", 0.0 if min(off) > 0 else 1.0, 0.5),
    ]


def run_all(report=print):
    checks = op_checks() + model_check() + [attention_row_checks(), cross_equals_self()] + stop_gradient_checks()
    for c in checks:
        report(str(c))
    return all(c.ok for c in checks), checks
