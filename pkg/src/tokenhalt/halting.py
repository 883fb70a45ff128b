"""Per-token halting: scores, cumulative stopping rule, remainder,
ponder penalty, weighted class readout, and the layer loop that applies
them to the joint transformer.

The rule, per token k: score h_k^l = sigmoid(gamma * x_{k,0}^l + beta)
on the first embedding channel after layer l; the token halts at the
first layer where the running sum of its scores reaches 1 - epsilon,
keeping remainder r_k = 1 - (sum before the halting layer). The final
layer forces h = 1 so nothing survives past depth L. When the *class*
token halts, the whole forward stops: still-running patch tokens are
assigned that layer with their own accumulated-score remainders, since
nothing computed later could reach the readout.

Bookkeeping (which token halted where) lives in float64 numpy arrays.
The differentiable pieces, the remainders inside the ponder loss and
the score-weighted class readout, are rebuilt on the tape from the
stored per-layer score tensors, so training sees exact gradients
through h and r while the halting decisions themselves stay hard.
"""

from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .blocks import joint_block
from .engine import Tensor


class HaltingError(Exception):
    pass


@dataclass
class HaltingConfig:
    gamma: float = 10.0
    beta: float = 10.0
    epsilon: float = 0.01
    layers: int = 4
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise HaltingError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.layers < 1:
            raise HaltingError(f"need at least one layer, got {self.layers}")


@dataclass
class HeadParams:
    cls_w: Tensor
    cls_b: Tensor
    motion_w: Tensor
    motion_b: Tensor


class HaltingState:
    """Per-sample halting bookkeeping over one forward pass.

    Token axis order matches the TokenBatch rows given to the forward
    (class token at column 0). ``eligible`` marks the tokens that
    participate at all (glimpse-dropped rows in mask mode never do).
    """

    def __init__(self, eligible, layers):
        eligible = np.asarray(eligible, dtype=bool)
        b, n = eligible.shape
        if not eligible[:, 0].all():
            raise HaltingError("class token must be eligible in every sample")
        self.layers = layers
        self.eligible = eligible.copy()
        self.running = eligible.copy()
        self.cumulative = np.zeros((b, n), dtype=np.float64)
        self.halted_at = np.zeros((b, n), dtype=np.int64)
        self.remainder = np.zeros((b, n), dtype=np.float64)
        self.done = np.zeros(b, dtype=bool)
        self.class_halt_layer = np.zeros(b, dtype=np.int64)
        self.snapshots = []      # Tensor (B, D) per executed layer
        self.class_scores = []   # Tensor (B, 1) or None (forced final layer)
        self.ponder_terms = []   # (score Tensor (B, m), weight ndarray (B, m))
        self.readout = None
        self._cum_before = None

    @property
    def batch_size(self):
        return self.eligible.shape[0]

    @property
    def ponder_count(self):
        return self.eligible[:, 1:].sum(axis=1)

    @property
    def class_remainder(self):
        return self.remainder[:, 0]


def halting_score(x, cfg):
    """sigmoid(gamma * first channel + beta) for every token row."""
    b, n, _ = x.shape
    x0 = eng.reshape(eng.gather(x, [0], axis=2), (b, n))
    return eng.sigmoid(x0 * cfg.gamma + cfg.beta)


def update_halting(state, h, layer, cfg):
    """Apply one layer's scores to the cumulative halting rule.

    ``h`` is a plain (B, n) float array; at the final layer it is
    overridden to 1 for every running token. Returns the newly-halted
    boolean mask. Remainders are taken against the cumulative sum
    *before* this layer, which is exactly the empty-sum convention for
    first-layer halts.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape != state.running.shape:
        raise HaltingError(f"scores shape {h.shape} != state shape {state.running.shape}")
    if ((h <= 0.0) | (h > 1.0)).any():
        raise HaltingError("halting score outside (0, 1]: corrupt upstream activation")
    if not 1 <= layer <= state.layers:
        raise HaltingError(f"layer {layer} outside [1, {state.layers}]")
    if layer == state.layers:
        h = np.ones_like(h)
    state._cum_before = state.cumulative.copy()
    was_running = state.running.copy()
    newly = was_running & (state.cumulative + h >= 1.0 - cfg.epsilon)
    state.remainder[newly] = 1.0 - state.cumulative[newly]
    state.halted_at[newly] = layer
    state.cumulative[was_running] += h[was_running]
    state.running[newly] = False
    return newly


def force_halt(state, samples, layer):
    """Whole-network early exit: halt every running token of ``samples``
    at ``layer`` with remainders from their pre-layer accumulated scores."""
    mask = state.running & samples[:, None]
    state.remainder[mask] = 1.0 - state._cum_before[mask]
    state.halted_at[mask] = layer
    state.running[mask] = False


def ponder_loss(state):
    """Mean of (halting layer + remainder) over participating patch tokens.

    Differentiable through the remainders only: r_k = 1 - sum of scores
    before the halt, so each stored score tensor enters with a negative
    per-token weight and the integer halting depths enter as constants.
    """
    participants = state.eligible.copy()
    participants[:, 0] = False
    k = participants.sum(axis=1)
    if (k == 0).any():
        raise HaltingError("ponder loss needs at least one patch token per sample")
    if (state.halted_at[participants] == 0).any():
        raise HaltingError("ponder loss before every token halted")
    mean_depth = (state.halted_at * participants).sum(axis=1) / k
    dtype = state.snapshots[0].dtype.type if state.snapshots else np.float64
    base = Tensor((mean_depth + 1.0).astype(dtype))
    acc = None
    for h, weight in state.ponder_terms:
        term = eng.reduce_sum(h * Tensor(weight.astype(h.dtype.type)), axis=1)
        acc = term if acc is None else acc + term
    if acc is None:
        return base.mean()
    return (base - acc).mean()


def class_readout(state):
    """Score-weighted sum of class-token snapshots (Eq.-style convex mix).

    Weight of layer l is h_c^l before the class halt and the remainder
    at the halting layer, so the weights sum to exactly 1.
    """
    if not state.snapshots:
        raise HaltingError("readout before any layer ran")
    b, d = state.snapshots[0].shape
    dtype = state.snapshots[0].dtype
    n_c = state.class_halt_layer
    one = Tensor(np.ones((b, 1), dtype=dtype))
    cc = eng.zeros((b, 1), dtype=dtype)
    x_o = eng.zeros((b, d), dtype=dtype)
    for i, (snap, hc) in enumerate(zip(state.snapshots, state.class_scores), start=1):
        m_halt = Tensor((n_c == i).astype(dtype).reshape(b, 1))
        if hc is None:
            w = (one - cc) * m_halt
        else:
            m_run = Tensor((n_c > i).astype(dtype).reshape(b, 1))
            w = hc * m_run + (one - cc) * m_halt
            cc = cc + hc * m_run
        x_o = x_o + w * snap
    state.readout = x_o
    return x_o


@dataclass
class ForwardResult:
    logits: Tensor
    motion_logits: Tensor
    state: HaltingState
    alive: list    # per executed joint layer: (B,) tokens entering (0 = sample already exited)
    scored: list   # per executed joint layer: halting head ran


def _heads(x_o, heads):
    logits = eng.matmul(x_o, heads.cls_w) + heads.cls_b
    motion = eng.matmul(x_o, heads.motion_w) + heads.motion_b
    return logits, motion


def _class_snapshot(x):
    b, _, d = x.shape
    return eng.reshape(eng.gather(x, [0], axis=1), (b, d))


def forward(batch, joint_params, heads, cfg, mode="mask"):
    """Run the halting joint transformer on an embedded (possibly
    glimpse-filtered) TokenBatch and return logits plus full state.

    mask mode keeps every row and hides halted tokens behind attention
    masks (uniform shapes, used for batched training); gather mode
    physically deletes rows layer by layer and stops the whole forward
    at the class halt (true compute savings, used for evaluation and
    profiling). Both produce the same outputs up to float rounding.
    """
    if mode == "mask":
        return _forward_mask(batch, joint_params, heads, cfg)
    if mode == "gather":
        return _forward_gather(batch, joint_params, heads, cfg)
    raise HaltingError(f"unknown forward mode {mode!r}")


def _forward_disabled(batch, joint_params, heads, cfg):
    """Plain transformer: every token forced to depth L, readout = x_c^L."""
    x = batch.tokens
    b, n, d = x.shape
    state = HaltingState(batch.alive, cfg.layers)
    key_mask = None if batch.alive.all() else batch.alive
    alive = []
    for bp in joint_params:
        alive.append(state.eligible.sum(axis=1))
        x = joint_block(x, bp, key_mask=key_mask)
        state.snapshots.append(_class_snapshot(x))
        state.class_scores.append(None)
    state.halted_at[state.eligible] = cfg.layers
    state.remainder[state.eligible] = 1.0
    state.running[:] = False
    state.class_halt_layer[:] = cfg.layers
    state.done[:] = True
    x_o = state.snapshots[-1]
    state.readout = x_o
    logits, motion = _heads(x_o, heads)
    return ForwardResult(logits, motion, state, alive, [False] * cfg.layers)


def _ponder_weights(state, dtype):
    """Per-token ponder weight for the layer just applied: -1/K for every
    participant still running (their remainder shrinks as h grows)."""
    w = (state.running & state.eligible).astype(np.float64)
    w[:, 0] = 0.0
    k = state.ponder_count
    return (w / k[:, None]).astype(dtype)


def _forward_mask(batch, joint_params, heads, cfg):
    if not cfg.enabled:
        return _forward_disabled(batch, joint_params, heads, cfg)
    x = batch.tokens
    b, n, d = x.shape
    dtype = x.dtype.type
    state = HaltingState(batch.alive, cfg.layers)
    alive, scored = [], []
    for l in range(1, cfg.layers + 1):
        alive.append(np.where(state.done, 0, state.running.sum(axis=1)))
        key_mask = state.running.copy()
        key_mask[state.done, 0] = True  # dummy: exited samples compute junk, unused
        x = joint_block(x, joint_params[l - 1], key_mask=key_mask)
        state.snapshots.append(_class_snapshot(x))
        if l < cfg.layers:
            h_t = halting_score(x, cfg)
            state.class_scores.append(eng.gather(h_t, [0], axis=1))
            h_np = h_t.data.astype(np.float64)
            scored.append(True)
        else:
            h_t = None
            h_np = np.ones((b, n))
            state.class_scores.append(None)
            scored.append(False)
        newly = update_halting(state, h_np, l, cfg)
        class_newly = newly[:, 0]
        if class_newly.any():
            state.class_halt_layer[class_newly] = l
            force_halt(state, class_newly, l)
            state.done |= class_newly
        if h_t is not None:
            state.ponder_terms.append((h_t, _ponder_weights(state, dtype)))
        if state.done.all():
            break
    x_o = class_readout(state)
    logits, motion = _heads(x_o, heads)
    return ForwardResult(logits, motion, state, alive, scored)


def _forward_gather(batch, joint_params, heads, cfg):
    if batch.batch_size != 1:
        raise HaltingError("gather-mode forward runs one sample at a time")
    if not cfg.enabled:
        return _forward_disabled(batch, joint_params, heads, cfg)
    if not batch.alive.all():
        raise HaltingError("gather-mode forward expects physically filtered tokens")
    x = batch.tokens
    _, n0, d = x.shape
    state = HaltingState(batch.alive, cfg.layers)
    cur = np.arange(n0)  # state index of each current row; class stays at 0
    alive, scored = [], []
    for l in range(1, cfg.layers + 1):
        alive.append(np.array([cur.size]))
        x = joint_block(x, joint_params[l - 1])
        state.snapshots.append(_class_snapshot(x))
        if l < cfg.layers:
            h_t = halting_score(x, cfg)
            state.class_scores.append(eng.gather(h_t, [0], axis=1))
            h_full = np.ones((1, n0))
            h_full[0, cur] = h_t.data
            scored.append(True)
        else:
            h_t = None
            h_full = np.ones((1, n0))
            state.class_scores.append(None)
            scored.append(False)
        newly = update_halting(state, h_full, l, cfg)
        if newly[0, 0]:
            state.class_halt_layer[0] = l
            force_halt(state, np.array([True]), l)
            state.done[0] = True
        if h_t is not None:
            weights = _ponder_weights(state, x.dtype.type)
            state.ponder_terms.append((h_t, weights[:, cur]))
        if state.done[0]:
            break
        if l < cfg.layers:
            keep = np.flatnonzero(state.running[0, cur])
            if keep.size < cur.size:
                x = eng.gather(x, keep, axis=1)
                cur = cur[keep]
    state.done[0] = True
    x_o = class_readout(state)
    logits, motion = _heads(x_o, heads)
    return ForwardResult(logits, motion, state, alive, scored)
