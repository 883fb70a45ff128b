"""Pure-numpy reference implementations of the hot kernels."""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def sigmoid_fwd(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bwd(y, g):
    return y * (1.0 - y) * g


def gelu_fwd(x):
    # exact (erf) variant
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(x, g):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return (cdf + x * pdf) * g


def softmax_fwd(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_masked_fwd(x, mask):
    """Softmax over the unmasked (True) columns of each row.

    Masked columns get exactly 0. A row with no unmasked column comes
    back all-zero instead of NaN.
    """
    neg = np.where(mask, x, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    e = np.exp(np.where(mask, x - m, -np.inf))
    e[~mask] = 0.0
    denom = e.sum(axis=-1, keepdims=True)
    np.maximum(denom, np.finfo(x.dtype).tiny, out=denom)
    return e / denom


def softmax_bwd(y, g):
    dot = (y * g).sum(axis=-1, keepdims=True)
    return y * (g - dot)


def layernorm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=-1)
    var = x.var(axis=-1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[:, None]) * rstd[:, None]
    return xhat * gain + bias, mu, rstd


def layernorm_bwd(x, gain, mu, rstd, g):
    xhat = (x - mu[:, None]) * rstd[:, None]
    gg = g * gain
    m1 = gg.mean(axis=-1, keepdims=True)
    m2 = (gg * xhat).mean(axis=-1, keepdims=True)
    gx = rstd[:, None] * (gg - m1 - xhat * m2)
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    return gx, dgain, dbias
