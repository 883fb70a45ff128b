"""Clips, patch tokens, real/fake training pairs, synthetic motion data.

The synthetic dataset is four-way motion classification: a bright
square drifts up, down, left or right over a noisy background, with
wraparound. Every single frame is class-uninformative because the
square's start position is uniform random per clip; only inter-frame
displacement carries the label.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine as eng
from .engine import Tensor

# (dy, dx) per class: up, down, left, right
DIRECTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))


class VideoError(Exception):
    pass


@dataclass
class VideoClip:
    """Frame stack (T, H, W, C) with values in [0, 1] plus class label."""

    frames: np.ndarray
    label: int
    source_id: str = ""

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise VideoError(f"clip {self.source_id!r}: frames must be (T, H, W, C)")
        if self.frames.shape[0] < 2:
            raise VideoError(f"clip {self.source_id!r}: need T >= 2 frames to carry motion")

    @property
    def shape(self):
        return self.frames.shape


@dataclass
class SamplePair:
    """A real clip and its duplicated-frame negative, sharing the class label."""

    real: VideoClip
    fake: VideoClip

    def __post_init__(self):
        if self.real.shape != self.fake.shape or self.real.label != self.fake.label:
            raise VideoError("pair members must share shape and class label")

    @property
    def label(self):
        return self.real.label


class TokenBatch:
    """Embedded tokens for a batch of clips.

    ``tokens`` is (B, 1+K, D) with the class token at row 0. ``positions``
    holds (frame, row, col) for each *current* patch row; ``orig_ids``
    maps patch rows back to original token indices so halting maps can
    be reported in clip coordinates after tokens get removed. ``alive``
    marks which rows are still visible to attention (mask mode keeps
    dropped rows around, gather mode deletes them).
    """

    def __init__(self, tokens, positions, orig_ids, alive, grid):
        self.tokens = tokens
        self.positions = positions
        self.orig_ids = orig_ids
        self.alive = alive
        self.grid = grid  # (T, rows, cols) patch grid of the original clip

    @property
    def batch_size(self):
        return self.tokens.shape[0]

    @property
    def n_rows(self):
        return self.tokens.shape[1]

    @property
    def class_token(self):
        return eng.gather(self.tokens, [0], axis=1)

    @property
    def patch_tokens(self):
        return eng.gather(self.tokens, np.arange(1, self.n_rows), axis=1)

    def frame_token_counts(self):
        """Alive patch tokens per (sample, frame)."""
        t_frames = self.grid[0]
        counts = np.zeros((self.batch_size, t_frames), dtype=np.int64)
        frames = self.positions[:, 0]
        for b in range(self.batch_size):
            alive_rows = self.alive[b, 1:]
            np.add.at(counts[b], frames[alive_rows], 1)
        return counts


def patch_grid(shape, patch):
    t, h, w, _ = shape
    if h % patch or w % patch:
        raise VideoError(f"spatial dims {h}x{w} not divisible by patch size {patch}")
    return t, h // patch, w // patch


def grid_positions(grid):
    t, rows, cols = grid
    pos = np.stack(np.meshgrid(np.arange(t), np.arange(rows), np.arange(cols), indexing="ij"), axis=-1)
    return pos.reshape(-1, 3)


def extract_patches(frames_batch, patch):
    """(B, T, H, W, C) -> (B, K, P*P*C) in (frame, row, col) token order."""
    b, t, h, w, c = frames_batch.shape
    rows, cols = h // patch, w // patch
    x = frames_batch.reshape(b, t, rows, patch, cols, patch, c)
    x = x.transpose(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(b, t * rows * cols, patch * patch * c)


def patch_embed(clips, patch, dim, params, dtype=np.float32):
    """Embed clips into a TokenBatch: linear patch projection + learned positions."""
    if not clips:
        raise VideoError("patch_embed: need at least one clip")
    shape = clips[0].shape
    for c in clips:
        if c.shape != shape:
            raise VideoError("patch_embed: clips in a batch must share shape")
    grid = patch_grid(shape, patch)
    k = grid[0] * grid[1] * grid[2]
    frames = np.stack([c.frames for c in clips]).astype(dtype)
    flat = extract_patches(frames, patch)
    b = len(clips)
    x = Tensor(flat.reshape(b * k, -1))
    proj = eng.matmul(x, params.embed_w) + params.embed_b
    patches = eng.reshape(proj, (b, k, dim)) + params.pos_patch
    cls = eng.zeros((b, 1, dim), dtype=dtype) + (params.cls_token + params.pos_cls)
    tokens = eng.concat([cls, patches], axis=1)
    alive = np.ones((b, 1 + k), dtype=bool)
    return TokenBatch(tokens, grid_positions(grid), np.arange(k), alive, grid)


def make_fake(clip, rng):
    """Duplicate one uniformly drawn frame across the whole clip."""
    t = clip.frames.shape[0]
    u = int(rng.integers(0, t))
    frames = np.repeat(clip.frames[u:u + 1], t, axis=0)
    return VideoClip(frames, clip.label, source_id=f"{clip.source_id}|fake@{u}")


@dataclass
class DatasetSpec:
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1
    classes: int = 4
    per_class: int = 8
    square: int = 12
    speed: int = 3
    noise: float = 0.05
    align: int = 1  # start positions drawn from this stride's grid

    def __post_init__(self):
        if self.frames < 2:
            raise VideoError("dataset: motion needs frames >= 2")
        if not 2 <= self.classes <= len(DIRECTIONS):
            raise VideoError(f"dataset: classes must be in [2, {len(DIRECTIONS)}]")
        if self.square >= min(self.height, self.width):
            raise VideoError("dataset: square must be smaller than the frame")
        if self.align < 1 or self.height % self.align or self.width % self.align:
            raise VideoError("dataset: align must divide height and width")


def _render_square(h, w, c, y, x, size):
    frame = np.zeros((h, w, c), dtype=np.float32)
    rows = (np.arange(size) + y) % h
    cols = (np.arange(size) + x) % w
    frame[np.ix_(rows, cols)] = 1.0
    return frame


def synth_dataset(spec, rng):
    """Deterministic moving-square clips; label = drift direction."""
    clips = []
    for label in range(spec.classes):
        dy, dx = (d * spec.speed for d in DIRECTIONS[label])
        for i in range(spec.per_class):
            y0 = int(rng.integers(0, spec.height // spec.align)) * spec.align
            x0 = int(rng.integers(0, spec.width // spec.align)) * spec.align
            frames = np.stack([
                _render_square(spec.height, spec.width, spec.channels,
                               (y0 + t * dy) % spec.height, (x0 + t * dx) % spec.width,
                               spec.square)
                for t in range(spec.frames)
            ])
            if spec.noise > 0:
                frames = frames + rng.normal(0.0, spec.noise, frames.shape)
            frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
            clips.append(VideoClip(frames, label, source_id=f"synth-{label}-{i}"))
    return clips


def save_clips(clips, directory, seed=None):
    """Persist clips as raw little-endian float32 files plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": seed, "clips": []}
    for i, clip in enumerate(clips):
        name = f"clip_{i:05d}.bin"
        data = np.ascontiguousarray(clip.frames, dtype="<f4")
        (directory / name).write_bytes(data.tobytes())
        manifest["clips"].append({
            "file": name,
            "shape": list(clip.shape),
            "dtype": "<f4",
            "label": clip.label,
            "source_id": clip.source_id,
        })
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_clips(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    clips = []
    for rec in manifest["clips"]:
        raw = (directory / rec["file"]).read_bytes()
        frames = np.frombuffer(raw, dtype=rec["dtype"]).reshape(rec["shape"]).astype(np.float32)
        clips.append(VideoClip(frames, rec["label"], rec["source_id"]))
    return clips
