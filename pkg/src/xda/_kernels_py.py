"""Pure-numpy reference kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature.
Inputs are C-contiguous 2-D arrays of rows; all reductions run along the last
axis.
"""

import numpy as np


def softmax_fwd(x, scale):
    z = x * scale
    z = z - z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_bwd(y, g, scale):
    dot = np.einsum("ij,ij->i", g, y)[:, None]
    return (g - dot) * y * scale


def layernorm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.einsum("ij,ij->i", xc, xc) / x.shape[1]
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * gamma + beta, xhat, rstd.astype(x.dtype, copy=False)


def layernorm_bwd(g, xhat, rstd, gamma):
    n = xhat.shape[1]
    gxhat = g * gamma
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = np.einsum("ij,ij->i", gxhat, xhat)[:, None] / n
    gx = (gxhat - m1 - xhat * m2) * rstd[:, None]
    dgamma = np.einsum("ij,ij->j", g, xhat)
    dbeta = g.sum(axis=0)
    return gx, dgamma, dbeta


def log_softmax_ce(logits, target, weight):
    """Weighted CE summed over rows, plus d(sum)/d(logits).

    Rows whose target is all-zero contribute nothing.
    """
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    tw = target * weight[:, None]
    total = -np.einsum("ij,ij->", tw, logp)
    p = e / s
    grad = p * tw.sum(axis=1, keepdims=True) - tw
    return float(total), grad


def kl_terms(p, q, eps):
    """Elementwise p * (log p - log q) with both sides clamped below by eps."""
    return p * (np.log(np.maximum(p, eps)) - np.log(np.maximum(q, eps)))


def kl_grad_q(p, q, g, eps):
    return np.where(q > eps, -g * p / np.maximum(q, eps), 0.0).astype(q.dtype, copy=False)

