"""Two divided layers that score token relevance and drop the tail.

A patch token's score is the class token's spatial attention weight on
it in the second divided layer, averaged over heads. Per frame, the
``keep_count = max(1, round_half_up(R * patches_per_frame))`` highest
scoring tokens survive (ties broken toward the lower token index);
everything else is dropped before the joint transformer, which shrinks
its quadratic attention term by roughly R^2. Selection is hard: no
gradient flows through the keep/drop decision itself, only through the
kept tokens' values.
"""

from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .blocks import divided_block
from .video import TokenBatch


@dataclass
class GlimpseConfig:
    ratio: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"glimpse ratio must be in (0, 1], got {self.ratio}")


@dataclass
class Attentiveness:
    """Per-frame class-attention mass over alive patch tokens.

    ``scores`` is (B, T, S); ``class_self`` (B, T) is the class token's
    own weight, so scores.sum(-1) + class_self == 1 per frame.
    """

    scores: np.ndarray
    class_self: np.ndarray

    def frame_of(self, spatial_index, grid):
        return spatial_index // (grid[1] * grid[2])


def keep_count(ratio, patches_per_frame):
    return max(1, int(np.floor(ratio * patches_per_frame + 0.5)))


def attentiveness(x, second_layer_params, grid):
    """Run the second divided layer; returns (Attentiveness, new tokens)."""
    out, class_rows = divided_block(x, second_layer_params, grid)
    return Attentiveness(class_rows[:, :, 1:], class_rows[:, :, 0]), out


def select_keep(scores, ratio):
    """Per-frame top-k keep mask, (B, T, S) scores -> (B, T, S) bool."""
    b, t, s = scores.shape
    kc = keep_count(ratio, s)
    keep = np.zeros((b, t, s), dtype=bool)
    for bi in range(b):
        for ti in range(t):
            order = np.argsort(-scores[bi, ti], kind="stable")
            keep[bi, ti, order[:kc]] = True
    return keep


def glimpse(batch, cfg, layer_params, mode="mask"):
    """Filter a fresh TokenBatch down to the top-R tokens per frame.

    Returns (new TokenBatch, kept) where kept is the (B, K) keep mask in
    original token order (the halting map reports dropped tokens as
    layer 0). Gather mode physically removes rows and requires B == 1.
    """
    if not batch.alive.all():
        raise ValueError("glimpse expects a fresh batch, before any halting")
    grid = batch.grid
    t = grid[0]
    s = grid[1] * grid[2]
    x, _ = divided_block(batch.tokens, layer_params[0], grid)
    att, x = attentiveness(x, layer_params[1], grid)
    keep = select_keep(att.scores, cfg.ratio)
    kept_rows = keep.reshape(batch.batch_size, t * s)

    if mode == "mask":
        alive = batch.alive.copy()
        alive[:, 1:] &= kept_rows
        out = TokenBatch(x, batch.positions, batch.orig_ids, alive, grid)
        return out, kept_rows

    if mode == "gather":
        if batch.batch_size != 1:
            raise ValueError("gather-mode glimpse runs one sample at a time")
        patch_idx = np.flatnonzero(kept_rows[0])
        rows = np.concatenate(([0], patch_idx + 1))
        xg = eng.gather(x, rows, axis=1)
        alive = np.ones((1, len(rows)), dtype=bool)
        out = TokenBatch(xg, batch.positions[patch_idx], batch.orig_ids[patch_idx], alive, grid)
        return out, kept_rows

    raise ValueError(f"glimpse: unknown mode {mode!r}")
