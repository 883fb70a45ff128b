"""Attention blocks: scopes, masking-vs-deletion oracle, leak checks."""

import numpy as np
import pytest

from tokenhalt import engine as eng
from tokenhalt.blocks import (AttnParams, DividedBlockParams, JointBlockParams,
                              MlpParams, divided_block, joint_block,
                              multihead_attention)
from tokenhalt.engine import EngineError, Tensor

R = np.random.Generator(np.random.PCG64(21))


def make_attn(d, heads, zero_out=False, rng=R):
    def t(shape, zero=False):
        return Tensor((np.zeros(shape) if zero else rng.normal(0, 0.2, shape)).astype(np.float64))

    return AttnParams(ln_g=Tensor(np.ones(d, dtype=np.float64)), ln_b=t((d,), zero=True),
                      qkv_w=t((d, 3 * d)), qkv_b=t((3 * d,), zero=True),
                      out_w=t((d, d), zero=zero_out), out_b=t((d,), zero=True), heads=heads)


def make_mlp(d, zero_out=False, rng=R):
    def t(shape, zero=False):
        return Tensor((np.zeros(shape) if zero else rng.normal(0, 0.2, shape)).astype(np.float64))

    return MlpParams(ln_g=Tensor(np.ones(d, dtype=np.float64)), ln_b=t((d,), zero=True),
                     fc1_w=t((d, 4 * d)), fc1_b=t((4 * d,), zero=True),
                     fc2_w=t((4 * d, d), zero=zero_out), fc2_b=t((d,), zero=True))


def make_joint(d, heads, zero_out=False):
    return JointBlockParams(make_attn(d, heads, zero_out), make_mlp(d, zero_out))


def make_divided(d, heads, zero_out=False):
    return DividedBlockParams(make_attn(d, heads, zero_out), make_attn(d, heads, zero_out),
                              make_mlp(d, zero_out))


def tokens(b, n, d):
    return Tensor(R.normal(size=(b, n, d)))


def test_single_alive_token_attends_to_itself():
    d, h = 8, 2
    p = make_attn(d, h)
    x = Tensor(R.normal(size=(1, 3, d)).astype(np.float64))
    mask = np.array([[True, False, False]])
    out, _ = multihead_attention(x, p, "all", key_mask=mask)
    # token 0 sees only itself: softmax over a singleton is 1, so the output
    # equals its own value row pushed through the output projection
    q, k, v = np.split(x.data[0] @ p.qkv_w.data + p.qkv_b.data, 3, axis=-1)
    expect = (v[0].reshape(h, d // h).reshape(d) @ p.out_w.data) + p.out_b.data
    np.testing.assert_allclose(out.data[0, 0], expect, atol=1e-10)


def test_all_keys_equal_gives_value_mean():
    d = 8
    p = make_attn(d, 2)
    row = R.normal(size=(1, 1, d)).astype(np.float64)
    x = Tensor(np.repeat(row, 5, axis=1))
    out, _ = multihead_attention(x, p, "all")
    np.testing.assert_allclose(out.data[0], np.repeat(out.data[:, :1], 5, axis=1)[0], atol=1e-10)


def test_zero_out_projections_make_blocks_identity():
    d = 8
    x = tokens(2, 6, d)
    out = joint_block(x, make_joint(d, 2, zero_out=True))
    np.testing.assert_allclose(out.data, x.data, atol=1e-7)
    xd = Tensor(R.normal(size=(2, 1 + 2 * 2, d)))
    outd, _ = divided_block(xd, make_divided(d, 2, zero_out=True), (2, 2, 1))
    np.testing.assert_allclose(outd.data, xd.data, atol=1e-7)


def test_joint_block_permutation_equivariance():
    d = 8
    bp = make_joint(d, 2)
    x = Tensor(R.normal(size=(1, 5, d)).astype(np.float64))
    perm = np.array([0, 3, 2, 1, 4])  # keep class row, swap two patch rows
    out = joint_block(x, bp).data[0]
    out_p = joint_block(eng.gather(x, perm, axis=1), bp).data[0]
    np.testing.assert_allclose(out_p, out[perm], atol=1e-10)


def test_mask_equals_physical_deletion():
    """The gather-mode oracle: masked attention == attention on gathered rows."""
    d = 12
    bp = make_joint(d, 3)
    x = Tensor(R.normal(size=(1, 9, d)).astype(np.float64))
    alive = np.array([[True, True, False, True, False, True, True, False, True]])
    masked = joint_block(x, bp, key_mask=alive).data[0][alive[0]]
    gathered = joint_block(eng.gather(x, np.flatnonzero(alive[0]), axis=1), bp).data[0]
    np.testing.assert_allclose(masked, gathered, atol=1e-10)


def test_mask_gather_equivalence_float32_tolerance():
    d = 16
    rng = np.random.Generator(np.random.PCG64(3)).normal
    bp = make_joint(d, 4)
    for p in (bp.attn.qkv_w, bp.attn.out_w, bp.mlp.fc1_w, bp.mlp.fc2_w):
        p.data = p.data.astype(np.float32)
    for p in (bp.attn.ln_g, bp.attn.ln_b, bp.attn.qkv_b, bp.attn.out_b,
              bp.mlp.ln_g, bp.mlp.ln_b, bp.mlp.fc1_b, bp.mlp.fc2_b):
        p.data = p.data.astype(np.float32)
    x = Tensor(rng(size=(1, 20, d)).astype(np.float32))
    alive = np.ones((1, 20), dtype=bool)
    alive[0, [2, 5, 6, 11, 17]] = False
    masked = joint_block(x, bp, key_mask=alive).data[0][alive[0]]
    gathered = joint_block(eng.gather(x, np.flatnonzero(alive[0]), axis=1), bp).data[0]
    assert np.abs(masked - gathered).max() < 1e-5


def test_no_leak_from_dead_tokens():
    """Rewriting a masked token's content changes no alive output."""
    d = 8
    bp = make_joint(d, 2)
    x = R.normal(size=(1, 7, d)).astype(np.float64)
    alive = np.array([[True, True, True, False, True, True, False]])
    base = joint_block(Tensor(x), bp, key_mask=alive).data[0][alive[0]]
    x2 = x.copy()
    x2[0, [3, 6]] = 1e3 * R.normal(size=(2, d))
    pert = joint_block(Tensor(x2), bp, key_mask=alive).data[0][alive[0]]
    np.testing.assert_array_equal(base, pert)


def test_attention_rows_are_distributions_over_alive_keys():
    d = 8
    p = make_attn(d, 2)
    x = Tensor(R.normal(size=(2, 6, d)))
    alive = np.array([[True, True, False, True, True, False],
                      [True, False, True, True, True, True]])
    u = eng.layernorm(x, p.ln_g, p.ln_b)
    from tokenhalt.blocks import _attend, _project_qkv
    q, k, v = _project_qkv(u, p)
    _, w = _attend(q, k, v, key_mask=alive)
    weights = w.data
    assert (weights >= 0).all()
    np.testing.assert_allclose(weights.sum(-1), 1.0, atol=1e-6)
    assert (weights[~np.broadcast_to(alive[:, None, None, :], weights.shape)] == 0).all()


def test_empty_key_group_raises():
    d = 8
    p = make_attn(d, 2)
    x = Tensor(R.normal(size=(1, 4, d)))
    with pytest.raises(EngineError, match="empty key set"):
        multihead_attention(x, p, "all", key_mask=np.zeros((1, 4), dtype=bool))


def test_divided_scopes_reject_masks():
    d = 8
    p = make_attn(d, 2)
    x = Tensor(R.normal(size=(1, 5, d)))
    with pytest.raises(EngineError, match="dense"):
        multihead_attention(x, p, "temporal", key_mask=np.ones((1, 5), bool), grid=(2, 2, 1))


def test_divided_class_token_unchanged_by_temporal_step():
    d = 8
    p = make_attn(d, 2)
    x = Tensor(R.normal(size=(2, 1 + 6, d)))
    out, _ = multihead_attention(x, p, "temporal", grid=(3, 2, 1))
    np.testing.assert_allclose(out.data[:, 0], 0.0)  # residual delta is zero


def test_divided_single_frame_temporal_is_value_passthrough():
    """T=1: each temporal group is a singleton softmax."""
    d = 8
    p = make_attn(d, 2)
    grid = (1, 2, 2)
    x = Tensor(R.normal(size=(1, 5, d)).astype(np.float64))
    out, _ = multihead_attention(x, p, "temporal", grid=grid)
    q, k, v = np.split(x.data[0, 1:] @ p.qkv_w.data + p.qkv_b.data, 3, axis=-1)
    expect = v @ p.out_w.data + p.out_b.data
    np.testing.assert_allclose(out.data[0, 1:], expect, atol=1e-10)


def test_divided_class_spatial_weights_normalized():
    d = 8
    bp = make_divided(d, 2)
    x = Tensor(R.normal(size=(2, 1 + 8, d)))
    _, class_rows = divided_block(x, bp, (2, 2, 2))
    assert class_rows.shape == (2, 2, 1 + 4)
    assert (class_rows >= 0).all()
    np.testing.assert_allclose(class_rows.sum(-1), 1.0, atol=1e-6)
