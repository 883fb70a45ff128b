"""Checkpoint container and seeded RNG contracts."""

import numpy as np
import pytest

from tokenhalt import checkpoint as ckpt
from tokenhalt.engine import Tensor
from tokenhalt.rng import SeededRng


def test_roundtrip_preserves_order_shapes_values(tmp_path):
    r = np.random.Generator(np.random.PCG64(1))
    params = {
        "embed.w": Tensor(r.normal(size=(5, 3)).astype(np.float32)),
        "head.b": Tensor(r.normal(size=(4,)).astype(np.float32)),
        "scalar": Tensor(np.float32(2.5)),
    }
    path = tmp_path / "c.bin"
    ckpt.save(path, params)
    loaded, dtype = ckpt.load(path)
    assert dtype == np.float32
    assert list(loaded) == list(params)
    for name, t in params.items():
        np.testing.assert_array_equal(loaded[name], t.data)


def test_roundtrip_float64(tmp_path):
    params = {"w": Tensor(np.linspace(0, 1, 7), dtype=np.float64)}
    ckpt.save(tmp_path / "c.bin", params)
    loaded, dtype = ckpt.load(tmp_path / "c.bin")
    assert dtype == np.float64
    np.testing.assert_array_equal(loaded["w"], params["w"].data)


def test_bytes_are_deterministic(tmp_path):
    params = {"a": Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))}
    ckpt.save(tmp_path / "one.bin", params)
    ckpt.save(tmp_path / "two.bin", params)
    assert (tmp_path / "one.bin").read_bytes() == (tmp_path / "two.bin").read_bytes()


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.load(p)


def test_mixed_dtypes_rejected(tmp_path):
    params = {"a": Tensor(np.ones(2, dtype=np.float32)),
              "b": Tensor(np.ones(2), dtype=np.float64)}
    with pytest.raises(ckpt.CheckpointError, match="mixed"):
        ckpt.save(tmp_path / "c.bin", params)


def test_rng_same_seed_same_sequence():
    a = SeededRng(123)
    b = SeededRng(123)
    np.testing.assert_array_equal(a.normal(size=10), b.normal(size=10))
    np.testing.assert_array_equal(a.permutation(20), b.permutation(20))


def test_rng_children_are_independent_and_stable():
    r = SeededRng(9)
    c1 = r.child("dataset").normal(size=5)
    c2 = r.child("train").normal(size=5)
    assert not np.allclose(c1, c2)
    np.testing.assert_array_equal(c1, SeededRng(9).child("dataset").normal(size=5))


def test_rng_algorithm_is_documented():
    assert SeededRng(0).algorithm == "pcg64"
