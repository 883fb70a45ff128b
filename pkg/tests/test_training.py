"""Losses, optimizer behavior, training-loop contracts."""

import numpy as np
import pytest

from tokenhalt import engine as eng
from tokenhalt.engine import Tensor
from tokenhalt.halting import HaltingConfig
from tokenhalt.model import Model, ModelConfig
from tokenhalt.rng import SeededRng
from tokenhalt.training import (LossConfig, TrainConfig, TrainingError,
                                cosine_lr, evaluate, motion_loss, overall_loss,
                                task_loss, train)
from tokenhalt.video import DatasetSpec, synth_dataset


def test_task_loss_uniform_logits():
    logits = Tensor(np.zeros((3, 4)))
    assert task_loss(logits, [0, 1, 2]).item() == pytest.approx(np.log(4), abs=1e-6)


def test_task_loss_goes_to_zero_with_margin():
    prev = None
    for margin in (2.0, 6.0, 15.0):
        logits = np.zeros((1, 4), dtype=np.float32)
        logits[0, 1] = margin
        v = task_loss(Tensor(logits), [1]).item()
        assert prev is None or v < prev
        prev = v
    assert prev < 1e-4


def test_task_loss_class_permutation_symmetry():
    r = np.random.Generator(np.random.PCG64(2))
    logits = r.normal(size=(2, 4)).astype(np.float32)
    labels = np.array([1, 3])
    perm = np.array([2, 0, 3, 1])
    base = task_loss(Tensor(logits), labels).item()
    permuted = task_loss(Tensor(logits[:, perm]), np.argsort(perm)[labels]).item()
    assert permuted == pytest.approx(base, abs=1e-6)


def test_task_loss_label_out_of_range():
    with pytest.raises(eng.EngineError, match="out of range"):
        task_loss(Tensor(np.zeros((1, 4))), [4])


def test_motion_loss_uniform():
    z = Tensor(np.zeros((2, 2)))
    assert motion_loss(z, z).item() == pytest.approx(np.log(2), abs=1e-6)


def test_motion_loss_perfect_discrimination():
    real = np.array([[-20.0, 20.0]], dtype=np.float32)   # class 1 = real
    fake = np.array([[20.0, -20.0]], dtype=np.float32)
    assert motion_loss(Tensor(real), Tensor(fake)).item() < 1e-6


def test_motion_loss_swap_is_worse_when_correct():
    real = np.array([[-3.0, 3.0]], dtype=np.float32)
    fake = np.array([[3.0, -3.0]], dtype=np.float32)
    good = motion_loss(Tensor(real), Tensor(fake)).item()
    swapped = motion_loss(Tensor(fake), Tensor(real)).item()
    assert swapped > good


def test_overall_loss_weighted_sum():
    t, p, m = Tensor(np.float32(1.0)), Tensor(np.float32(4.0)), Tensor(np.float32(0.5))
    bundle = overall_loss(t, p, m, 5e-4, 0.01)
    assert bundle.overall.item() == pytest.approx(1.0 + 0.002 + 0.005, abs=1e-7)
    zero = overall_loss(t, p, m, 0.0, 0.0)
    assert zero.overall.item() == pytest.approx(1.0)


def test_overall_loss_decomposition_invariant():
    r = np.random.Generator(np.random.PCG64(3))
    for _ in range(10):
        t, p, m = (Tensor(np.float64(v)) for v in r.uniform(0, 3, size=3))
        ap, am = r.uniform(0, 1, size=2)
        bundle = overall_loss(t, p, m, ap, am)
        recomputed = bundle.task.item() + ap * bundle.ponder.item() + am * bundle.motion.item()
        assert bundle.overall.item() == pytest.approx(recomputed, abs=1e-6)


def test_overall_loss_rejects_non_finite():
    t = Tensor(np.float32(np.nan))
    with pytest.raises(TrainingError, match="task"):
        overall_loss(t, Tensor(np.float32(0)), Tensor(np.float32(0)), 1.0, 1.0)


def test_cosine_schedule_endpoints():
    assert cosine_lr(1e-3, 0.0, 0, 10) == pytest.approx(1e-3)
    assert cosine_lr(1e-3, 1e-5, 9, 10) == pytest.approx(1e-5)
    assert cosine_lr(1e-3, 0.0, 0, 1) == 1e-3


# --- loop-level contracts ----------------------------------------------------

def toy_setup(seed=0, per_class=2, layers=2, glimpse=None, beta=-4.0):
    rng = SeededRng(seed)
    spec = DatasetSpec(frames=2, height=16, width=16, per_class=per_class,
                       square=6, speed=2)
    clips = synth_dataset(spec, rng.child("ds"))
    cfg = ModelConfig(layers=layers, dim=16, heads=2, patch=8, frames=2,
                      height=16, width=16, channels=1, classes=4)
    model = Model.build(cfg, HaltingConfig(gamma=10.0, beta=beta, epsilon=0.01,
                                           layers=layers), glimpse, rng=rng.child("i"))
    return model, clips, rng


def test_zero_effective_lr_keeps_parameters():
    model, clips, rng = toy_setup()
    before = {n: p.data.copy() for n, p in model.params.items()}
    # lr must be positive by contract; make the update vanish via clipping
    tcfg = TrainConfig(lr=1e-30, epochs=1, batch_size=4, stage="base", grad_clip=1e-30)
    train(model, clips, tcfg, rng=rng.child("t"))
    for n, p in model.params.items():
        np.testing.assert_allclose(p.data, before[n], atol=1e-25)


def test_overfit_single_sample():
    model, clips, rng = toy_setup(seed=5)
    one = [clips[0]]
    tcfg = TrainConfig(lr=3e-3, epochs=60, batch_size=1, stage="base")
    rows = train(model, one, tcfg, rng=rng.child("t"))
    assert rows[-1].task_loss < 0.01


def test_training_deterministic():
    rows = []
    for _ in range(2):
        model, clips, rng = toy_setup(seed=9)
        tcfg = TrainConfig(lr=1e-3, epochs=2, batch_size=4, stage="halting")
        rows.append(train(model, clips, tcfg, LossConfig(alpha_p=0.01), rng=rng.child("t")))
    for a, b in zip(rows[0], rows[1]):
        assert a.values() == b.values()


def test_two_runs_bit_identical_parameters():
    params = []
    for _ in range(2):
        model, clips, rng = toy_setup(seed=11)
        tcfg = TrainConfig(lr=1e-3, epochs=2, batch_size=4, stage="halting")
        train(model, clips, tcfg, LossConfig(), rng=rng.child("t"))
        params.append({n: p.data.copy() for n, p in model.params.items()})
    for n in params[0]:
        np.testing.assert_array_equal(params[0][n], params[1][n])


def test_base_stage_has_no_ponder_or_motion():
    model, clips, rng = toy_setup()
    rows = train(model, clips, TrainConfig(lr=1e-3, epochs=1, batch_size=4, stage="base"),
                 rng=rng.child("t"))
    assert rows[0].ponder_loss == 0.0 and rows[0].motion_loss == 0.0


def test_empty_dataset_rejected():
    model, _, rng = toy_setup()
    with pytest.raises(TrainingError, match="empty"):
        train(model, [], TrainConfig(epochs=1, lr=1e-3), rng=rng)


def test_untrained_accuracy_near_chance():
    model, clips, rng = toy_setup(per_class=6)
    result = evaluate(model, clips)
    assert abs(result.accuracy - 0.25) <= 0.1


def test_halting_never_costs_more_than_disabled():
    model, clips, rng = toy_setup(beta=1.0, layers=3)
    on = evaluate(model, clips)
    off = evaluate(model, clips, hcfg=HaltingConfig(gamma=10.0, beta=1.0, layers=3, enabled=False))
    assert on.mean_gflops <= off.mean_gflops + 1e-12


def test_evaluate_deterministic():
    model, clips, _ = toy_setup(beta=0.0)
    a = evaluate(model, clips)
    b = evaluate(model, clips)
    assert a.accuracy == b.accuracy and a.mean_gflops == b.mean_gflops
    for ma, mb in zip(a.halt_maps, b.halt_maps):
        np.testing.assert_array_equal(ma, mb)


def test_stage_base_matches_plain_reference():
    """Halting disabled: logits equal a hand-rolled plain transformer."""
    from tokenhalt.blocks import joint_block
    from tokenhalt.video import patch_embed

    model, clips, _ = toy_setup(glimpse=None)
    out = model.forward_clips(clips[:2], mode="mask", halting_enabled=False)
    batch = patch_embed(clips[:2], model.cfg.patch, model.cfg.dim, model.embed)
    x = batch.tokens
    for bp in model.joint_blocks:
        x = joint_block(x, bp)
    x_o = x.data[:, 0, :]
    logits = x_o @ model.heads.cls_w.data + model.heads.cls_b.data
    np.testing.assert_allclose(out.logits.data, logits, atol=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # inf poisoning is the point
def test_divergence_restores_last_good(monkeypatch):
    """Blowing up in epoch 1 leaves the model at its end-of-epoch-0 state."""
    from tokenhalt import training as tr

    clean_model, clips, rng = toy_setup()
    train(clean_model, clips, TrainConfig(lr=1e-3, epochs=1, batch_size=8, stage="base"),
          rng=rng.child("t"))
    good = {n: p.data.copy() for n, p in clean_model.params.items()}

    model, clips, rng = toy_setup()
    calls = {"n": 0}
    orig = tr.task_loss

    def poisoned(logits, labels):
        calls["n"] += 1
        if calls["n"] > 1:
            return orig(logits * np.float32(np.inf), labels)
        return orig(logits, labels)

    monkeypatch.setattr(tr, "task_loss", poisoned)
    with pytest.raises(tr.TrainingDiverged):
        train(model, clips, TrainConfig(lr=1e-3, epochs=2, batch_size=8, stage="base"),
              rng=rng.child("t"))
    for n, p in model.params.items():
        np.testing.assert_array_equal(p.data, good[n])
