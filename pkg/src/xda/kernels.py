"""Hot-kernel dispatch.

The compiled extension ``xda._ckernels`` is used when it imports; otherwise
the numpy implementations in ``xda._kernels_py`` are used. Setting
``XDA_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from xda import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("XDA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from xda import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py


def _rows(a):
    a = np.ascontiguousarray(a)
    return a.reshape(-1, a.shape[-1])


def softmax_fwd(x, scale):
    y = _impl.softmax_fwd(_rows(x), scale)
    return np.asarray(y).reshape(x.shape)


def softmax_bwd(y, g, scale):
    gx = _impl.softmax_bwd(_rows(y), _rows(g.astype(y.dtype, copy=False)), scale)
    return np.asarray(gx).reshape(y.shape)


def layernorm_fwd(x, gamma, beta, eps):
    out, xhat, rstd = _impl.layernorm_fwd(
        _rows(x), gamma.astype(x.dtype, copy=False), beta.astype(x.dtype, copy=False), eps
    )
    return np.asarray(out).reshape(x.shape), np.asarray(xhat), np.asarray(rstd)


def layernorm_bwd(g, xhat, rstd, gamma):
    gx, dgamma, dbeta = _impl.layernorm_bwd(
        _rows(g.astype(xhat.dtype, copy=False)), xhat, rstd, gamma.astype(xhat.dtype, copy=False)
    )
    return np.asarray(gx), np.asarray(dgamma), np.asarray(dbeta)


def log_softmax_ce(logits, target, weight):
    total, grad = _impl.log_softmax_ce(
        _rows(logits),
        _rows(target.astype(logits.dtype, copy=False)),
        np.ascontiguousarray(weight, dtype=logits.dtype),
    )
    return float(total), np.asarray(grad)


def kl_terms(p, q, eps):
    t = _impl.kl_terms(_rows(p.astype(q.dtype, copy=False)), _rows(q), eps)
    return np.asarray(t).reshape(q.shape)


def kl_grad_q(p, q, g, eps):
    gq = _impl.kl_grad_q(
        _rows(p.astype(q.dtype, copy=False)), _rows(q), _rows(g.astype(q.dtype, copy=False)), eps
    )
    return np.asarray(gq).reshape(q.shape)
