"""Loss assembly, Adam with cosine annealing, the two-stage training
loop, and evaluation.

Stage "base" trains a plain (optionally glimpse-filtered) transformer:
halting disabled, task loss only, real clips only. Stage "halting"
trains the full objective on real/fake pairs: task loss on the real
member, ponder loss averaged over both members (fakes ponder too),
motion loss on the pair. Fake clips are re-drawn every epoch.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine as eng
from .engine import Tape, Tensor
from .halting import ponder_loss
from .video import SamplePair, make_fake


class TrainingError(Exception):
    pass


class TrainingDiverged(TrainingError):
    """Loss went non-finite; the model was restored to the last good epoch."""


@dataclass
class TrainConfig:
    lr: float = 1e-5
    lr_min: float = 0.0
    epochs: int = 10
    batch_size: int = 8
    stage: str = "halting"
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise TrainingError("lr must be positive")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.stage not in ("base", "halting"):
            raise TrainingError(f"stage must be base|halting, got {self.stage!r}")


@dataclass
class LossConfig:
    alpha_p: float = 5e-4
    alpha_m: float = 0.01


@dataclass
class LossBundle:
    task: Tensor
    ponder: Tensor
    motion: Tensor
    overall: Tensor
    alpha_p: float
    alpha_m: float


def task_loss(logits, labels):
    return eng.cross_entropy(logits, np.asarray(labels, dtype=np.int64))


def motion_loss(motion_logits_real, motion_logits_fake):
    """Mean binary cross-entropy: real clips target class 1, fakes 0."""
    n_r = motion_logits_real.shape[0]
    n_f = motion_logits_fake.shape[0]
    pos = eng.cross_entropy(motion_logits_real, np.ones(n_r, dtype=np.int64))
    neg = eng.cross_entropy(motion_logits_fake, np.zeros(n_f, dtype=np.int64))
    return (pos + neg) * 0.5


def overall_loss(task, ponder, motion, alpha_p, alpha_m):
    for name, t in (("task", task), ("ponder", ponder), ("motion", motion)):
        if not np.isfinite(t.data).all():
            raise TrainingError(f"overall loss: non-finite {name} component")
    overall = task + ponder * alpha_p + motion * alpha_m
    return LossBundle(task, ponder, motion, overall, alpha_p, alpha_m)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads):
        """Apply one update from a uid-keyed gradient map; parameters the
        loss never touched are left alone."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(p.uid)
            if g is None:
                continue
            g = g.data
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[name] / c1
            vhat = self.v[name] / c2
            p.data = p.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


def cosine_lr(base, floor, epoch, total):
    if total <= 1:
        return base
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * epoch / (total - 1)))


def clip_gradients(grads, max_norm):
    """Scale the whole gradient map so its global L2 norm is <= max_norm."""
    if not max_norm:
        return grads
    sq = 0.0
    for g in grads.values():
        sq += float((g.data.astype(np.float64) ** 2).sum())
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g.data = g.data * np.asarray(scale, dtype=g.dtype)
    return grads


@dataclass
class MetricsRow:
    stage: str
    epoch: int
    task_loss: float
    ponder_loss: float
    motion_loss: float
    train_acc: float
    gflops_per_clip: float

    def values(self):
        return [self.stage, self.epoch, self.task_loss, self.ponder_loss,
                self.motion_loss, self.train_acc, self.gflops_per_clip]


METRICS_COLUMNS = ["stage", "epoch", "task_loss", "ponder_loss",
                   "motion_loss", "train_acc", "gflops_per_clip"]


def _batches(n, size, order):
    for i in range(0, n, size):
        yield order[i:i + size]


def _snapshot(model):
    return {n: p.data.copy() for n, p in model.params.items()}


def _restore(model, snap):
    for n, p in model.params.items():
        p.data = snap[n].copy()


def train(model, clips, tcfg, lcfg=None, rng=None, log=None):
    """One training stage. Returns per-epoch metric rows; on divergence
    restores the last finite-loss epoch and raises TrainingDiverged."""
    if not clips:
        raise TrainingError("train: empty dataset")
    lcfg = lcfg or LossConfig()
    opt = Adam(model.params, tcfg.lr)
    rows = []
    last_good = _snapshot(model)
    zero = Tensor(np.zeros((), dtype=model.dtype))
    for epoch in range(tcfg.epochs):
        opt.lr = cosine_lr(tcfg.lr, tcfg.lr_min, epoch, tcfg.epochs)
        erng = rng.child(f"{tcfg.stage}:epoch:{epoch}")
        order = erng.permutation(len(clips))
        sums = np.zeros(4)  # task, ponder, motion, gflops weighted by clip count
        correct = 0
        seen = 0
        for idx in _batches(len(clips), tcfg.batch_size, order):
            batch_clips = [clips[i] for i in idx]
            labels = [c.label for c in batch_clips]
            nb = len(batch_clips)
            with Tape():
                if tcfg.stage == "base":
                    out = model.forward_clips(batch_clips, mode="mask", halting_enabled=False)
                    t_l = task_loss(out.logits, labels)
                    bundle = LossBundle(t_l, zero, zero, t_l, 0.0, 0.0)
                    real_logits = out.logits
                else:
                    pairs = [SamplePair(c, make_fake(c, erng)) for c in batch_clips]
                    out = model.forward_clips([p.real for p in pairs] + [p.fake for p in pairs],
                                              mode="mask")
                    real_rows = np.arange(nb)
                    fake_rows = np.arange(nb, 2 * nb)
                    real_logits = eng.gather(out.logits, real_rows, axis=0)
                    t_l = task_loss(real_logits, labels)
                    p_l = ponder_loss(out.state)
                    m_l = motion_loss(eng.gather(out.motion_logits, real_rows, axis=0),
                                      eng.gather(out.motion_logits, fake_rows, axis=0))
                    bundle = overall_loss(t_l, p_l, m_l, lcfg.alpha_p, lcfg.alpha_m)
                if not np.isfinite(bundle.overall.data):
                    _restore(model, last_good)
                    raise TrainingDiverged(f"non-finite loss at {tcfg.stage} epoch {epoch}")
                grads = eng.backward(bundle.overall)
            opt.step(clip_gradients(grads, tcfg.grad_clip))
            pred = np.argmax(real_logits.data, axis=1)
            correct += int((pred == np.asarray(labels)).sum())
            gf = [r.gflops_per_clip for r in out.reports()[:nb]]
            sums += nb * np.array([bundle.task.item(), bundle.ponder.item(),
                                   bundle.motion.item(), float(np.mean(gf))])
            seen += nb
        row = MetricsRow(tcfg.stage, epoch, sums[0] / seen, sums[1] / seen,
                         sums[2] / seen, correct / seen, sums[3] / seen)
        rows.append(row)
        last_good = _snapshot(model)
        if log:
            log(row)
    return rows


@dataclass
class EvalResult:
    accuracy: float
    mean_gflops: float
    mean_halt_depth: float
    per_sample: list = field(default_factory=list)
    halt_maps: list = field(default_factory=list)


def evaluate(model, clips, hcfg=None, glimpse_ratio=None):
    """Gather-mode evaluation on real clips; the motion head is ignored."""
    if not clips:
        raise TrainingError("evaluate: empty dataset")
    correct = 0
    gflops = []
    depths = []
    per_sample = []
    maps = []
    for i, clip in enumerate(clips):
        out = model.forward_clips([clip], mode="gather", hcfg=hcfg, glimpse_ratio=glimpse_ratio)
        pred = int(np.argmax(out.logits.data[0]))
        report = out.reports()[0]
        depth = out.mean_halt_depth(0)
        correct += int(pred == clip.label)
        gflops.append(report.gflops_per_clip)
        depths.append(depth)
        per_sample.append({"index": i, "label": clip.label, "prediction": pred,
                           "gflops_per_clip": report.gflops_per_clip,
                           "mean_halt_depth": depth})
        maps.append(out.halt_map(0))
    return EvalResult(correct / len(clips), float(np.mean(gflops)),
                      float(np.mean(depths)), per_sample, maps)


def readout_features(model, clips, batch_size=16, hcfg=None):
    """x_o features for a list of clips (no tape, mask mode, batched)."""
    feats = []
    for i in range(0, len(clips), batch_size):
        out = model.forward_clips(clips[i:i + batch_size], mode="mask", hcfg=hcfg)
        feats.append(out.state.readout.data.copy())
    return np.concatenate(feats, axis=0)


def fit_linear_probe(features, labels, classes, epochs=200, lr=0.05, seed=0):
    """Train a fresh linear head on frozen features (the motion-probe
    comparison for backbones trained without the motion objective)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d = features.shape[1]
    w = Tensor(rng.normal(0, 0.02, (d, classes)).astype(features.dtype), requires_grad=True)
    b = Tensor(np.zeros(classes, dtype=features.dtype), requires_grad=True)
    x = Tensor(features)
    y = np.asarray(labels, dtype=np.int64)
    opt = Adam({"w": w, "b": b}, lr)
    for _ in range(epochs):
        with Tape():
            loss = eng.cross_entropy(eng.matmul(x, w) + b, y)
            grads = eng.backward(loss)
        opt.step(grads)
    return w.data, b.data


def probe_accuracy(features, labels, w, b):
    pred = np.argmax(features @ w + b, axis=1)
    return float((pred == np.asarray(labels)).mean())
