"""FLOP accounting: frozen formulas, reports, instrumented cross-check."""

import json

import numpy as np
import pytest

from tokenhalt import engine as eng
from tokenhalt import flops
from tokenhalt.glimpser import GlimpseConfig, keep_count
from tokenhalt.halting import HaltingConfig
from tokenhalt.model import Model, ModelConfig
from tokenhalt.rng import SeededRng
from tokenhalt.video import DatasetSpec, synth_dataset


def test_attention_formula_hand_value():
    # n=1, D=2: qkv 24 + scores 4 + values 4 + out 8 (multiply-add = 2 ops)
    assert flops.attention_flops(1, 2) == 40


def test_attention_quadratic_term_scaling():
    d = 16
    quad = lambda n: flops.attention_flops(n, d) - flops.attention_flops(n, d) % 1
    n2 = flops.attention_flops(2, d) - 8 * 2 * d * d   # strip linear terms
    n4 = flops.attention_flops(4, d) - 8 * 4 * d * d
    assert n4 == 4 * n2  # doubling n quadruples the quadratic term


def test_attention_preconditions():
    with pytest.raises(ValueError):
        flops.attention_flops(0, 4)
    with pytest.raises(ValueError):
        flops.attention_flops(2, 6, heads=4)


def test_mlp_formula_hand_value():
    assert flops.mlp_flops(1, 2) == 64
    assert flops.mlp_flops(3, 2) == 3 * 64          # linear in n
    assert flops.mlp_flops(1, 4) == 4 * 64          # D doubling quadruples


def build_trace(layers_alive, scored=None, dim=16, heads=2, frames=2, s=4,
                glimpser=0, total=None, classes=4, patch_dim=64):
    return flops.ForwardTrace(
        dim=dim, heads=heads, frames=frames, patches_per_frame=s,
        patch_dim=patch_dim, classes=classes, glimpser_layers=glimpser,
        joint_alive=layers_alive,
        scored=scored if scored is not None else [True] * (len(layers_alive) - 1) + [False],
        total_layers=total or len(layers_alive),
    )


def test_profile_static_closed_form():
    """No halting, no glimpse: L identical layers plus embed and heads."""
    n = 2 * 4 + 1
    trace = build_trace([n, n, n], total=3)
    report = flops.profile(trace)
    per_layer = flops.attention_flops(n, 16, 2) + flops.mlp_flops(n, 16)
    expected = (3 * per_layer + 2 * flops.halting_flops(n)
                + flops.embed_flops(8, 64, 16) + flops.head_flops(16, 4))
    assert report.total == expected


def test_profile_single_layer_exit():
    trace = build_trace([9], scored=[True], total=4)
    report = flops.profile(trace)
    assert len([l for l in report.layers if l.stage == "joint"]) == 1


def test_profile_monotone_in_token_removal():
    full = flops.profile(build_trace([9, 9, 9], total=3))
    pruned = flops.profile(build_trace([9, 6, 4], total=3))
    assert pruned.total < full.total
    for a, b in zip(pruned.layers, full.layers):
        assert a.total <= b.total


def test_profile_validates_trace():
    bad = build_trace([9, 99], total=2)
    with pytest.raises(ValueError, match="alive count"):
        flops.profile(bad)
    with pytest.raises(ValueError, match="more executed"):
        flops.profile(build_trace([9, 9, 9], total=2))


def test_report_json_schema_frozen():
    report = flops.profile(build_trace([9, 5], total=2, glimpser=2))
    d = json.loads(report.to_json())
    assert set(d) == {"schema", "gflops_per_clip", "total_flops", "embed_flops",
                      "head_flops", "layers"}
    assert d["schema"] == 1
    assert [l["stage"] for l in d["layers"]] == ["glimpser", "glimpser", "joint", "joint"]
    assert set(d["layers"][0]) == {"stage", "layer", "tokens", "attention_flops",
                                   "mlp_flops", "halting_flops"}
    assert d["total_flops"] == report.total
    assert d["gflops_per_clip"] == pytest.approx(report.total / 1e9)


def test_glimpse_ratio_squares_the_quadratic_term():
    """keep ratio R shrinks the joint n^2 term by ~R^2 (within rounding)."""
    s, t, d = 196, 8, 64
    full_n = t * s + 1
    for ratio in (0.3, 0.5, 0.7):
        kc = keep_count(ratio, s)
        kept_n = t * kc + 1
        quad = lambda n: 4 * n * n * d
        measured = quad(kept_n) / quad(full_n)
        assert measured == pytest.approx((kc / s) ** 2, rel=0.02)
        assert measured == pytest.approx(ratio ** 2, rel=0.05)


def test_instrumented_forward_matches_closed_form():
    """Engine-metered multiply-adds vs the closed-form report, 10 random
    configurations, within 2% (the halting-head affine term is the only
    item the meter cannot see)."""
    r = np.random.Generator(np.random.PCG64(51))
    for trial in range(10):
        layers = int(r.integers(2, 5))
        dim = int(r.choice([16, 32, 64]))
        heads = int(r.choice([2, 4]))
        frames = int(r.integers(2, 5))
        hw = int(r.choice([16, 32]))
        use_glimpse = bool(r.integers(0, 2))
        beta = float(r.uniform(-6, 3))
        rng = SeededRng(trial)
        spec = DatasetSpec(frames=frames, height=hw, width=hw, per_class=1,
                           square=6, speed=2)
        clip = synth_dataset(spec, rng.child("ds"))[0]
        cfg = ModelConfig(layers=layers, dim=dim, heads=heads, patch=8, frames=frames,
                          height=hw, width=hw, channels=1, classes=4)
        m = Model.build(cfg, HaltingConfig(gamma=5.0, beta=beta, epsilon=0.01, layers=layers),
                        GlimpseConfig(0.5) if use_glimpse else None, rng=rng.child("i"))
        with eng.meter_flops() as meter:
            out = m.forward_clips([clip], mode="gather")
        closed = out.reports()[0].total
        assert abs(meter.flops - closed) / closed < 0.02
