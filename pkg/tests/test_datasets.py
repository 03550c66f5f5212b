import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lazyntk.datasets import interval_toy, load_parity_idx, read_idx, synthetic_blobs, unit_rows


def _write_idx(path, arr, compress=False):
    arr = np.asarray(arr, dtype=np.uint8)
    header = struct.pack(">I", 0x801 if arr.ndim == 1 else 0x803) + struct.pack(f">{arr.ndim}I", *arr.shape)
    opener = gzip.open if compress else open
    with opener(path, "wb") as fh:
        fh.write(header + arr.tobytes())


@pytest.mark.parametrize("compress", [False, True])
def test_idx_round_trip(tmp_path, compress):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (5, 4, 3), dtype=np.uint8)
    labs = np.array([3, 0, 7, 2, 9], dtype=np.uint8)
    suffix = ".gz" if compress else ""
    _write_idx(tmp_path / f"i{suffix}", imgs, compress)
    _write_idx(tmp_path / f"l{suffix}", labs, compress)
    assert np.array_equal(read_idx(tmp_path / f"i{suffix}"), imgs)
    assert np.array_equal(read_idx(tmp_path / f"l{suffix}"), labs)
    X, y = load_parity_idx(tmp_path / f"i{suffix}", tmp_path / f"l{suffix}", 3, offset=1)
    assert X.shape == (3, 12)
    assert np.allclose(np.linalg.norm(X, axis=1), 1.0)
    assert y.tolist() == [0, 1, 0]
    with pytest.raises(ValueError):
        load_parity_idx(tmp_path / f"i{suffix}", tmp_path / f"l{suffix}", 5, offset=1)


def test_idx_rejects_bad_files(tmp_path):
    (tmp_path / "short").write_bytes(b"\x00\x00")
    (tmp_path / "magic").write_bytes(struct.pack(">II", 0x1234, 1) + b"\x00")
    (tmp_path / "trunc").write_bytes(struct.pack(">II", 0x801, 10) + b"\x00" * 3)
    for name in ("short", "magic", "trunc"):
        with pytest.raises(ValueError):
            read_idx(tmp_path / name)


def test_mismatched_idx_pair(tmp_path):
    _write_idx(tmp_path / "i", np.zeros((3, 2, 2)) + 1)
    _write_idx(tmp_path / "l", np.zeros(4))
    with pytest.raises(ValueError):
        load_parity_idx(tmp_path / "i", tmp_path / "l", 2)


@given(st.integers(2, 50), st.integers(1, 30), st.floats(0.0, 3.0), st.integers(0, 1000))
def test_blobs_are_unit_norm_and_alternate(n, dim, sep, seed):
    X, y = synthetic_blobs(n, dim, sep, seed)
    assert X.shape == (n, dim)
    assert np.allclose(np.linalg.norm(X, axis=1), 1.0)
    assert y.tolist() == [i % 2 for i in range(n)]
    assert np.array_equal(X, synthetic_blobs(n, dim, sep, seed)[0])


def test_interval_toy_labels():
    x, y = interval_toy(7, 3, -3.0, 3.0)
    assert x.shape == (7, 1)
    assert y.tolist() == [0, 0, 1, 1, 2, 2, 2]  # intervals are closed on the left
    with pytest.raises(ValueError):
        interval_toy(0)


def test_unit_rows():
    assert np.allclose(unit_rows([[3.0, 4.0]]), [[0.6, 0.8]])
    with pytest.raises(ValueError):
        unit_rows([[0.0, 0.0]])
