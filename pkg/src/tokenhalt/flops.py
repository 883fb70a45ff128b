"""Closed-form floating-point-operation accounting.

Conventions, frozen and shared by every report:

* A multiply-add counts as 2 ops; only matrix multiplies are counted.
* Softmax, layer normalization, GELU, residual adds and the halting
  sigmoid are excluded, matching how transformer costs are usually
  quoted. The halting head's affine read (one multiply-add per alive
  token per scored layer) is the only non-matmul item kept, because the
  report schema carries a per-layer halting column.
* Attention at n tokens of width D:
  qkv 6nD^2, scores 2n^2 D, weighted values 2n^2 D, output 2nD^2.
* MLP at hidden 4D: 16nD^2.
* Divided layer on a (T frames) x (S patches) grid: temporal attention
  runs per spatial position over the patches only (class exempt),
  spatial attention per frame with the class token joining each group.

The engine meters actual multiply-adds in matmul; an instrumented
gather-mode forward agrees with these formulas up to the halting-head
term, and the test suite pins that agreement at 2%.
"""

import json
from dataclasses import dataclass, field


def attention_flops(n, dim, heads=1):
    """Joint attention cost at n alive tokens (class included)."""
    if n < 1:
        raise ValueError("attention_flops: need at least one token")
    if heads < 1 or dim % heads:
        raise ValueError(f"attention_flops: {heads} heads do not divide dim {dim}")
    return 6 * n * dim * dim + 4 * n * n * dim + 2 * n * dim * dim


def mlp_flops(n, dim):
    if n < 1:
        raise ValueError("mlp_flops: need at least one token")
    return 16 * n * dim * dim


def halting_flops(n):
    return 2 * n


def divided_attention_flops(t, s, dim):
    """Both scoped attentions of one divided layer (K = t*s patches)."""
    k = t * s
    temporal = 6 * k * dim * dim + 4 * s * t * t * dim + 2 * k * dim * dim
    spatial = 6 * (k + 1) * dim * dim + 4 * t * (s + 1) * (s + 1) * dim + 2 * (k + 1) * dim * dim
    return temporal + spatial


def divided_mlp_flops(t, s, dim):
    return mlp_flops(t * s + 1, dim)


def embed_flops(k, patch_dim, dim):
    return 2 * k * patch_dim * dim


def head_flops(dim, classes):
    """Classifier plus the binary motion head, both on the readout."""
    return 2 * dim * classes + 2 * dim * 2


@dataclass
class LayerFlops:
    stage: str  # "glimpser" | "joint"
    layer: int  # 1-based inside its stage
    tokens: int
    attention: int
    mlp: int
    halting: int

    @property
    def total(self):
        return self.attention + self.mlp + self.halting


@dataclass
class ForwardTrace:
    """What a single clip's forward actually touched.

    ``joint_alive`` lists tokens (class included) entering each joint
    layer that ran; a whole-network early exit just truncates the list.
    ``scored`` marks the layers where the halting head ran (all but a
    forced final layer).
    """

    dim: int
    heads: int
    frames: int
    patches_per_frame: int
    patch_dim: int
    classes: int
    glimpser_layers: int
    joint_alive: list
    scored: list
    total_layers: int

    def validate(self):
        if len(self.joint_alive) > self.total_layers:
            raise ValueError("trace: more executed layers than the model has")
        if len(self.scored) != len(self.joint_alive):
            raise ValueError("trace: scored flags must match executed layers")
        k = self.frames * self.patches_per_frame
        for n in self.joint_alive:
            if not 1 <= n <= k + 1:
                raise ValueError(f"trace: alive count {n} outside [1, {k + 1}]")


@dataclass
class FlopReport:
    """Per-clip ledger; serializes to a frozen JSON schema."""

    embed: int
    heads: int
    layers: list = field(default_factory=list)

    @property
    def total(self):
        return self.embed + self.heads + sum(l.total for l in self.layers)

    @property
    def gflops_per_clip(self):
        return self.total / 1e9

    def to_dict(self):
        return {
            "schema": 1,
            "gflops_per_clip": self.gflops_per_clip,
            "total_flops": self.total,
            "embed_flops": self.embed,
            "head_flops": self.heads,
            "layers": [
                {
                    "stage": l.stage,
                    "layer": l.layer,
                    "tokens": l.tokens,
                    "attention_flops": l.attention,
                    "mlp_flops": l.mlp,
                    "halting_flops": l.halting,
                }
                for l in self.layers
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)


def profile(trace):
    """Closed-form FlopReport for one clip's forward trace."""
    trace.validate()
    t, s, d = trace.frames, trace.patches_per_frame, trace.dim
    k = t * s
    layers = []
    for i in range(trace.glimpser_layers):
        layers.append(LayerFlops(
            stage="glimpser", layer=i + 1, tokens=k + 1,
            attention=divided_attention_flops(t, s, d),
            mlp=divided_mlp_flops(t, s, d), halting=0,
        ))
    for i, (n, scored) in enumerate(zip(trace.joint_alive, trace.scored)):
        layers.append(LayerFlops(
            stage="joint", layer=i + 1, tokens=n,
            attention=attention_flops(n, d, trace.heads),
            mlp=mlp_flops(n, d),
            halting=halting_flops(n) if scored else 0,
        ))
    return FlopReport(
        embed=embed_flops(k, trace.patch_dim, d),
        heads=head_flops(d, trace.classes),
        layers=layers,
    )
