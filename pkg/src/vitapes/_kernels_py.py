"""Vectorised numpy implementations of the fused row kernels.

Every function takes C-contiguous 2-D arrays whose rows are the
reduction axis, and returns freshly allocated arrays of the same dtype.
The compiled module ``_ckernels`` exposes the identical signatures.
"""

import numpy as np
from scipy.special import erf

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

BACKEND = "python"


def softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_bwd(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def log_softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def layernorm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    y = xc * rstd[:, None] * gamma + beta
    return y.astype(x.dtype, copy=False), mean, rstd


def layernorm_bwd(gy, x, mean, rstd, gamma):
    xhat = (x - mean[:, None]) * rstd[:, None]
    gxhat = gy * gamma
    n = x.shape[1]
    a = gxhat.sum(axis=1, keepdims=True) / n
    b = (gxhat * xhat).sum(axis=1, keepdims=True) / n
    gx = rstd[:, None] * (gxhat - a - xhat * b)
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    return gx.astype(x.dtype, copy=False), ggamma, gbeta


def gelu_fwd(x):
    return (0.5 * x * (1.0 + erf(x * _SQRT1_2))).astype(x.dtype, copy=False)


def gelu_bwd(x, gy):
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (gy * (cdf + x * pdf)).astype(x.dtype, copy=False)


def leaky_relu_fwd(x, alpha):
    return np.where(x >= 0, x, x * x.dtype.type(alpha))


def leaky_relu_bwd(x, gy, alpha):
    return np.where(x >= 0, gy, gy * gy.dtype.type(alpha))
