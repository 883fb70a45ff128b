"""Numba-compiled kernels. Same contracts as numpy_backend.

All loops are sequential (parallel=False) so results are reproducible
run to run; compiled artifacts are cached on disk.
"""

import math

import numpy as np
from numba import njit

_JIT = {"cache": True, "fastmath": False}

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


@njit(**_JIT)
def sigmoid_fwd(x):
    out = np.empty_like(x)
    f = x.ravel()
    o = out.ravel()
    for i in range(f.size):
        v = f[i]
        if v >= 0.0:
            o[i] = 1.0 / (1.0 + math.exp(-v))
        else:
            e = math.exp(v)
            o[i] = e / (1.0 + e)
    return out


@njit(**_JIT)
def sigmoid_bwd(y, g):
    out = np.empty_like(y)
    yf = y.ravel()
    gf = g.ravel()
    o = out.ravel()
    for i in range(yf.size):
        o[i] = yf[i] * (1.0 - yf[i]) * gf[i]
    return out


@njit(**_JIT)
def gelu_fwd(x):
    out = np.empty_like(x)
    f = x.ravel()
    o = out.ravel()
    for i in range(f.size):
        v = f[i]
        o[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
    return out


@njit(**_JIT)
def gelu_bwd(x, g):
    out = np.empty_like(x)
    f = x.ravel()
    gf = g.ravel()
    o = out.ravel()
    for i in range(f.size):
        v = f[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        pdf = _INV_SQRT2PI * math.exp(-0.5 * v * v)
        o[i] = (cdf + v * pdf) * gf[i]
    return out


@njit(**_JIT)
def softmax_fwd(x):
    rows, cols = x.shape
    out = np.empty_like(x)
    for r in range(rows):
        m = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(cols):
            e = math.exp(x[r, c] - m)
            out[r, c] = e
            s += e
        inv = 1.0 / s
        for c in range(cols):
            out[r, c] *= inv
    return out


@njit(**_JIT)
def softmax_masked_fwd(x, mask):
    rows, cols = x.shape
    out = np.zeros_like(x)
    for r in range(rows):
        m = -np.inf
        for c in range(cols):
            if mask[r, c] and x[r, c] > m:
                m = x[r, c]
        if m == -np.inf:
            continue  # fully masked row stays zero
        s = 0.0
        for c in range(cols):
            if mask[r, c]:
                e = math.exp(x[r, c] - m)
                out[r, c] = e
                s += e
        inv = 1.0 / s
        for c in range(cols):
            out[r, c] *= inv
    return out


@njit(**_JIT)
def softmax_bwd(y, g):
    rows, cols = y.shape
    out = np.empty_like(y)
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += y[r, c] * g[r, c]
        for c in range(cols):
            out[r, c] = y[r, c] * (g[r, c] - dot)
    return out


@njit(**_JIT)
def layernorm_fwd(x, gain, bias, eps):
    rows, cols = x.shape
    y = np.empty_like(x)
    mu = np.empty(rows, dtype=x.dtype)
    rstd = np.empty(rows, dtype=x.dtype)
    for r in range(rows):
        s = 0.0
        for c in range(cols):
            s += x[r, c]
        m = s / cols
        v = 0.0
        for c in range(cols):
            d = x[r, c] - m
            v += d * d
        rs = 1.0 / math.sqrt(v / cols + eps)
        mu[r] = m
        rstd[r] = rs
        for c in range(cols):
            y[r, c] = (x[r, c] - m) * rs * gain[c] + bias[c]
    return y, mu, rstd


@njit(**_JIT)
def layernorm_bwd(x, gain, mu, rstd, g):
    rows, cols = x.shape
    gx = np.empty_like(x)
    dgain = np.zeros(cols, dtype=x.dtype)
    dbias = np.zeros(cols, dtype=x.dtype)
    for r in range(rows):
        m = mu[r]
        rs = rstd[r]
        m1 = 0.0
        m2 = 0.0
        for c in range(cols):
            xhat = (x[r, c] - m) * rs
            gg = g[r, c] * gain[c]
            m1 += gg
            m2 += gg * xhat
            dgain[c] += g[r, c] * xhat
            dbias[c] += g[r, c]
        m1 /= cols
        m2 /= cols
        for c in range(cols):
            xhat = (x[r, c] - m) * rs
            gg = g[r, c] * gain[c]
            gx[r, c] = rs * (gg - m1 - xhat * m2)
    return gx, dgain, dbias
