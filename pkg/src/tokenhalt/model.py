"""Full pipeline: patch embedding -> optional glimpse filter -> halting
joint transformer -> classifier/motion heads, plus parameter creation,
checkpointing, trace assembly and halting-map export."""

from dataclasses import dataclass, replace
from types import SimpleNamespace

import numpy as np

from . import checkpoint as ckpt
from . import flops, halting
from .blocks import AttnParams, DividedBlockParams, JointBlockParams, MlpParams
from .engine import Tensor
from .glimpser import GlimpseConfig, glimpse
from .halting import HeadParams
from .video import patch_embed


@dataclass
class ModelConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    patch: int = 8
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1
    classes: int = 4

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("model: layers must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"model: heads ({self.heads}) must divide dim ({self.dim})")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("model: patch size must divide height and width")
        if self.frames < 2:
            raise ValueError("model: frames must be >= 2")
        if self.classes < 2:
            raise ValueError("model: classes must be >= 2")

    @property
    def patches_per_frame(self):
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_tokens(self):
        return self.frames * self.patches_per_frame

    @property
    def patch_dim(self):
        return self.patch * self.patch * self.channels


class _Store:
    """Ordered parameter registry; the order fixes checkpoint layout."""

    def __init__(self, dtype):
        self.dtype = dtype
        self.tensors = {}

    def add(self, name, shape, init):
        t = Tensor(init(shape).astype(self.dtype), requires_grad=True)
        self.tensors[name] = t
        return t


def _init_fns(rng):
    return {
        "normal": lambda s: rng.normal(0.0, 0.02, s),
        "zeros": lambda s: np.zeros(s),
        "ones": lambda s: np.ones(s),
    }


def _attn_params(store, fns, prefix, dim, heads):
    return AttnParams(
        ln_g=store.add(f"{prefix}.ln_g", (dim,), fns["ones"]),
        ln_b=store.add(f"{prefix}.ln_b", (dim,), fns["zeros"]),
        qkv_w=store.add(f"{prefix}.qkv_w", (dim, 3 * dim), fns["normal"]),
        qkv_b=store.add(f"{prefix}.qkv_b", (3 * dim,), fns["zeros"]),
        out_w=store.add(f"{prefix}.out_w", (dim, dim), fns["normal"]),
        out_b=store.add(f"{prefix}.out_b", (dim,), fns["zeros"]),
        heads=heads,
    )


def _mlp_params(store, fns, prefix, dim):
    return MlpParams(
        ln_g=store.add(f"{prefix}.ln_g", (dim,), fns["ones"]),
        ln_b=store.add(f"{prefix}.ln_b", (dim,), fns["zeros"]),
        fc1_w=store.add(f"{prefix}.fc1_w", (dim, 4 * dim), fns["normal"]),
        fc1_b=store.add(f"{prefix}.fc1_b", (4 * dim,), fns["zeros"]),
        fc2_w=store.add(f"{prefix}.fc2_w", (4 * dim, dim), fns["normal"]),
        fc2_b=store.add(f"{prefix}.fc2_b", (dim,), fns["zeros"]),
    )


class Model:
    def __init__(self, cfg, hcfg, gcfg=None, dtype=np.float32):
        self.cfg = cfg
        self.hcfg = replace(hcfg, layers=cfg.layers)
        self.gcfg = gcfg
        self.dtype = dtype
        self.params = {}
        self.embed = None
        self.glimpser_blocks = []
        self.joint_blocks = []
        self.heads = None

    @classmethod
    def build(cls, cfg, hcfg, gcfg=None, rng=None, dtype=np.float32):
        m = cls(cfg, hcfg, gcfg, dtype)
        fns = _init_fns(rng)
        store = _Store(dtype)
        m.embed = SimpleNamespace(
            embed_w=store.add("embed.w", (cfg.patch_dim, cfg.dim), fns["normal"]),
            embed_b=store.add("embed.b", (cfg.dim,), fns["zeros"]),
            cls_token=store.add("cls.token", (1, cfg.dim), fns["normal"]),
            pos_cls=store.add("pos.cls", (1, cfg.dim), fns["normal"]),
            pos_patch=store.add("pos.patch", (cfg.patch_tokens, cfg.dim), fns["normal"]),
        )
        if gcfg is not None:
            for g in range(2):
                m.glimpser_blocks.append(DividedBlockParams(
                    temporal=_attn_params(store, fns, f"glimpser.{g}.temporal", cfg.dim, cfg.heads),
                    spatial=_attn_params(store, fns, f"glimpser.{g}.spatial", cfg.dim, cfg.heads),
                    mlp=_mlp_params(store, fns, f"glimpser.{g}.mlp", cfg.dim),
                ))
        for l in range(cfg.layers):
            m.joint_blocks.append(JointBlockParams(
                attn=_attn_params(store, fns, f"joint.{l}.attn", cfg.dim, cfg.heads),
                mlp=_mlp_params(store, fns, f"joint.{l}.mlp", cfg.dim),
            ))
        m.heads = HeadParams(
            cls_w=store.add("head.cls.w", (cfg.dim, cfg.classes), fns["normal"]),
            cls_b=store.add("head.cls.b", (cfg.classes,), fns["zeros"]),
            motion_w=store.add("head.motion.w", (cfg.dim, 2), fns["normal"]),
            motion_b=store.add("head.motion.b", (2,), fns["zeros"]),
        )
        m.params = store.tensors
        return m

    def parameters(self):
        return self.params

    def save(self, path):
        ckpt.save(path, self.params)

    def load_state(self, path):
        arrays, dtype = ckpt.load(path)
        if dtype != self.dtype:
            raise ckpt.CheckpointError(
                f"checkpoint precision {np.dtype(dtype)} != model precision {np.dtype(self.dtype)}"
            )
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ckpt.CheckpointError(
                f"checkpoint/config mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, t in self.params.items():
            if arrays[name].shape != t.shape:
                raise ckpt.CheckpointError(
                    f"checkpoint/config mismatch: {name} is {arrays[name].shape}, expected {t.shape}"
                )
            t.data = arrays[name].astype(self.dtype)

    @classmethod
    def from_checkpoint(cls, path, cfg, hcfg, gcfg=None, dtype=np.float32):
        m = cls.build(cfg, hcfg, gcfg, rng=_ZeroRng(), dtype=dtype)
        m.load_state(path)
        return m

    # ------------------------------------------------------------------
    def forward_clips(self, clips, mode="mask", hcfg=None, halting_enabled=None, glimpse_ratio=None):
        """Embed, glimpse (if configured) and run the halting forward.

        ``hcfg`` overrides the model's halting config wholesale (beta
        sweeps on fixed weights); ``halting_enabled`` flips just the
        enable bit (stage-base training, no-halt baselines).
        """
        cfg = self.cfg
        batch = patch_embed(clips, cfg.patch, cfg.dim, self.embed, dtype=self.dtype)
        kept = np.ones((len(clips), cfg.patch_tokens), dtype=bool)
        if self.gcfg is not None:
            gcfg = self.gcfg if glimpse_ratio is None else GlimpseConfig(glimpse_ratio)
            batch, kept = glimpse(batch, gcfg, self.glimpser_blocks, mode=mode)
        run_cfg = replace(self.hcfg if hcfg is None else hcfg, layers=cfg.layers)
        if halting_enabled is not None:
            run_cfg = replace(run_cfg, enabled=halting_enabled)
        res = halting.forward(batch, self.joint_blocks, self.heads, run_cfg, mode=mode)
        return ModelOutput(self, res, batch, kept)


class _ZeroRng:
    def normal(self, loc, scale, shape):
        return np.zeros(shape)


class ModelOutput:
    """Forward result plus the bookkeeping to build reports and maps."""

    def __init__(self, model, result, batch, kept):
        self.model = model
        self.result = result
        self.batch = batch
        self.kept = kept

    @property
    def logits(self):
        return self.result.logits

    @property
    def motion_logits(self):
        return self.result.motion_logits

    @property
    def state(self):
        return self.result.state

    def trace(self, b):
        cfg = self.model.cfg
        pairs = [(int(a[b]), s) for a, s in zip(self.result.alive, self.result.scored) if a[b] > 0]
        return flops.ForwardTrace(
            dim=cfg.dim,
            heads=cfg.heads,
            frames=cfg.frames,
            patches_per_frame=cfg.patches_per_frame,
            patch_dim=cfg.patch_dim,
            classes=cfg.classes,
            glimpser_layers=2 if self.model.gcfg is not None else 0,
            joint_alive=[n for n, _ in pairs],
            scored=[s for _, s in pairs],
            total_layers=cfg.layers,
        )

    def reports(self):
        return [flops.profile(self.trace(b)) for b in range(self.batch.batch_size)]

    def halt_map(self, b):
        """Per original patch token: 0 = dropped by the glimpse filter,
        1..L = halting layer. Shape (frames * patches_per_frame,)."""
        k0 = self.model.cfg.patch_tokens
        out = np.zeros(k0, dtype=np.int64)
        out[self.batch.orig_ids] = self.result.state.halted_at[b, 1:]
        return out

    def mean_halt_depth(self, b):
        state = self.result.state
        participants = state.eligible[b, 1:]
        return float(state.halted_at[b, 1:][participants].mean())
