"""Row-kernel dispatch.

The compiled ``_ckernels`` extension is used when it imports; otherwise
the numpy fallback in ``_kernels_py`` is used.  Setting the environment
variable ``VITAPES_PURE_PYTHON=1`` forces the fallback.  Both backends
accept arrays of any rank and reduce over the last axis.
"""

import os

import numpy as np

from . import _kernels_py

_backend = _kernels_py
if os.environ.get("VITAPES_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _backend  # type: ignore[no-redef]
    except ImportError:  # extension not built
        _backend = _kernels_py


def backend_name():
    return _backend.BACKEND


def use_backend(name):
    """Switch backend at runtime ('cython' or 'python'); returns the previous name."""
    global _backend
    previous = _backend.BACKEND
    if name == "python":
        _backend = _kernels_py
    elif name == "cython":
        from . import _ckernels

        _backend = _ckernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    return previous


def _rows(a):
    a = np.ascontiguousarray(a)
    return a.reshape(-1, a.shape[-1]) if a.ndim != 2 else a


def softmax(x):
    return _backend.softmax_fwd(_rows(x)).reshape(x.shape)


def softmax_grad(y, gy):
    return _backend.softmax_bwd(_rows(y), _rows(gy.astype(y.dtype, copy=False))).reshape(y.shape)


def log_softmax(x):
    return _backend.log_softmax_fwd(_rows(x)).reshape(x.shape)


def layer_norm(x, gamma, beta, eps):
    g = np.ascontiguousarray(gamma, dtype=x.dtype)
    b = np.ascontiguousarray(beta, dtype=x.dtype)
    y, mean, rstd = _backend.layernorm_fwd(_rows(x), g, b, float(eps))
    return y.reshape(x.shape), mean, rstd


def layer_norm_grad(gy, x, mean, rstd, gamma):
    g = np.ascontiguousarray(gamma, dtype=x.dtype)
    gx, gg, gb = _backend.layernorm_bwd(
        _rows(gy.astype(x.dtype, copy=False)), _rows(x), mean, rstd, g
    )
    return gx.reshape(x.shape), gg, gb


def gelu(x):
    return _backend.gelu_fwd(_rows(x)).reshape(x.shape)


def gelu_grad(x, gy):
    return _backend.gelu_bwd(_rows(x), _rows(gy.astype(x.dtype, copy=False))).reshape(x.shape)


def leaky_relu(x, alpha):
    return _backend.leaky_relu_fwd(_rows(x), float(alpha)).reshape(x.shape)


def leaky_relu_grad(x, gy, alpha):
    return _backend.leaky_relu_bwd(
        _rows(x), _rows(gy.astype(x.dtype, copy=False)), float(alpha)
    ).reshape(x.shape)
