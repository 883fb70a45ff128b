"""Joint and divided space-time attention blocks.

All blocks are pre-norm residual (ViT convention): x + Attn(LN(x)),
then x + MLP(LN(x)), MLP hidden = 4*D with GELU. Attention scales
scores by 1/sqrt(d_head).

Scopes:

* ``all``:      one softmax over every alive token (joint space-time).
  Takes an optional per-sample boolean key mask; masked keys get
  exactly zero weight, which is what makes masking equivalent to
  physically deleting rows.
* ``temporal``: per spatial position, across frames. The class token
  has no spatial position, so it skips this sub-step unchanged.
* ``spatial``:  per frame. The class token joins every frame's group
  as an extra query/key; its T per-frame outputs are averaged before
  the output projection (the projection is linear, so order does not
  matter). The per-frame class attention rows are returned as well;
  the glimpse filter ranks tokens by them.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .engine import EngineError, Tensor


@dataclass
class AttnParams:
    ln_g: Tensor
    ln_b: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    out_w: Tensor
    out_b: Tensor
    heads: int


@dataclass
class MlpParams:
    ln_g: Tensor
    ln_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


@dataclass
class JointBlockParams:
    attn: AttnParams
    mlp: MlpParams


@dataclass
class DividedBlockParams:
    temporal: AttnParams
    spatial: AttnParams
    mlp: MlpParams


def _project_qkv(x, p):
    """(B, n, D) -> q, k, v each (B, heads, n, d_head)."""
    b, n, d = x.shape
    h = p.heads
    dh = d // h
    qkv = eng.matmul(eng.reshape(x, (b * n, d)), p.qkv_w) + p.qkv_b
    qkv = eng.transpose(eng.reshape(qkv, (b, n, 3, h, dh)), (2, 0, 3, 1, 4))
    q = eng.reshape(eng.gather(qkv, [0], axis=0), (b, h, n, dh))
    k = eng.reshape(eng.gather(qkv, [1], axis=0), (b, h, n, dh))
    v = eng.reshape(eng.gather(qkv, [2], axis=0), (b, h, n, dh))
    return q, k, v


def _attend(q, k, v, key_mask=None):
    """Scaled dot-product attention over the last two axes.

    q, k, v: (..., heads, n, d_head); key_mask: (lead, n) bool or None.
    Returns (out, weights).
    """
    dh = q.shape[-1]
    scores = eng.matmul(q, eng.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    mask4 = None
    if key_mask is not None:
        if not key_mask.any(axis=-1).all():
            raise EngineError("attention: a query group has an empty key set")
        mask4 = key_mask[:, None, None, :]
    w = eng.softmax(scores, axis=-1, mask=mask4)
    return eng.matmul(w, v), w


def _merge_heads(x, p):
    """(B, heads, n, d_head) -> output projection applied per row."""
    b, h, n, dh = x.shape
    merged = eng.reshape(eng.transpose(x, (0, 2, 1, 3)), (b * n, h * dh))
    out = eng.matmul(merged, p.out_w) + p.out_b
    return eng.reshape(out, (b, n, h * dh))


def _repeat_rows(x, times, axis):
    return eng.concat([x] * times, axis=axis)


def multihead_attention(x, p, scope="all", key_mask=None, grid=None):
    """Scoped multi-head attention on (B, 1+K, D) tokens (row 0 = class).

    Returns (out, class_rows) where class_rows is the head-averaged
    per-frame class attention (B, T, 1+S) for the spatial scope, else
    None. Out rows for the class token are zero in the temporal scope.
    """
    b, n, d = x.shape
    if scope == "all":
        q, k, v = _project_qkv(x, p)
        o, _ = _attend(q, k, v, key_mask=key_mask)
        return _merge_heads(o, p), None

    if key_mask is not None:
        raise EngineError(f"attention: scope {scope!r} runs dense, before any halting")
    t, rows, cols = grid
    s = rows * cols
    if n != 1 + t * s:
        raise EngineError(f"attention: {n} rows do not tile a ({t},{s}) grid plus class")
    h = p.heads
    dh = d // h

    if scope == "temporal":
        patches = eng.gather(x, np.arange(1, n), axis=1)
        q, k, v = _project_qkv(patches, p)  # (B, h, K, dh)

        def regroup(z):
            z = eng.reshape(z, (b, h, t, s, dh))
            return eng.reshape(eng.transpose(z, (0, 3, 1, 2, 4)), (b * s, h, t, dh))

        o, _ = _attend(regroup(q), regroup(k), regroup(v))
        o = eng.transpose(eng.reshape(o, (b, s, h, t, dh)), (0, 2, 3, 1, 4))
        o = _merge_heads(eng.reshape(o, (b, h, t * s, dh)), p)
        return eng.concat([eng.zeros((b, 1, d), dtype=x.dtype), o], axis=1), None

    if scope == "spatial":
        q, k, v = _project_qkv(x, p)  # (B, h, 1+K, dh)

        def regroup(z):
            zc = eng.gather(z, [0], axis=2)                      # (B, h, 1, dh)
            zc = _repeat_rows(zc, t, axis=2)                     # (B, h, T, dh)
            zc = eng.reshape(eng.transpose(zc, (0, 2, 1, 3)), (b, t, h, 1, dh))
            zp = eng.gather(z, np.arange(1, n), axis=2)
            zp = eng.transpose(eng.reshape(zp, (b, h, t, s, dh)), (0, 2, 1, 3, 4))
            g = eng.concat([zc, zp], axis=3)                     # (B, T, h, 1+S, dh)
            return eng.reshape(g, (b * t, h, 1 + s, dh))

        o, w = _attend(regroup(q), regroup(k), regroup(v))
        o = eng.reshape(o, (b, t, h, 1 + s, dh))
        oc = eng.gather(o, [0], axis=3).mean(axis=1)             # (B, h, 1, dh)
        op = eng.gather(o, np.arange(1, 1 + s), axis=3)
        op = eng.transpose(op, (0, 2, 1, 3, 4))                  # (B, h, T, S, dh)
        merged = eng.concat([oc, eng.reshape(op, (b, h, t * s, dh))], axis=2)
        out = _merge_heads(merged, p)
        class_rows = w.data.reshape(b, t, h, 1 + s, 1 + s)[:, :, :, 0, :].mean(axis=2)
        return out, class_rows

    raise EngineError(f"attention: unknown scope {scope!r}")


def _mlp(x, p):
    b, n, d = x.shape
    u = eng.reshape(x, (b * n, d))
    u = eng.gelu(eng.matmul(u, p.fc1_w) + p.fc1_b)
    u = eng.matmul(u, p.fc2_w) + p.fc2_b
    return eng.reshape(u, (b, n, d))


def joint_block(x, bp, key_mask=None):
    """Pre-norm joint space-time block over all alive tokens."""
    a, _ = multihead_attention(
        eng.layernorm(x, bp.attn.ln_g, bp.attn.ln_b), bp.attn, "all", key_mask=key_mask
    )
    x = x + a
    return x + _mlp(eng.layernorm(x, bp.mlp.ln_g, bp.mlp.ln_b), bp.mlp)


def divided_block(x, bp, grid):
    """Temporal-then-spatial divided block; needs equal per-frame counts.

    Returns (out, class_rows): the spatial sub-step's per-frame class
    attention rows, head-averaged, shape (B, T, 1+S) with the class
    self-weight at column 0.
    """
    a, _ = multihead_attention(
        eng.layernorm(x, bp.temporal.ln_g, bp.temporal.ln_b), bp.temporal, "temporal", grid=grid
    )
    x = x + a
    a, class_rows = multihead_attention(
        eng.layernorm(x, bp.spatial.ln_g, bp.spatial.ln_b), bp.spatial, "spatial", grid=grid
    )
    x = x + a
    x = x + _mlp(eng.layernorm(x, bp.mlp.ln_g, bp.mlp.ln_b), bp.mlp)
    return x, class_rows
