import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gleak import data
from gleak.models import Dataset


def test_blobs_class_separation_statistics():
    ds = data.synth_dataset("gaussian_blobs", 16, 2, 400, seed=0, noise=0.05)
    a, b = ds.x[ds.y == 0], ds.x[ds.y == 1]
    between = np.linalg.norm(a.mean(axis=0) - b.mean(axis=0))
    within = max(np.mean(np.sum((a - a.mean(axis=0)) ** 2, axis=1)),
                 np.mean(np.sum((b - b.mean(axis=0)) ** 2, axis=1)))
    assert between > 0
    assert within < between


@pytest.mark.parametrize("kind", data.KINDS)
def test_same_seed_same_dataset(kind):
    a = data.synth_dataset(kind, 16, 4, 40, seed=3)
    b = data.synth_dataset(kind, 16, 4, 40, seed=3)
    c = data.synth_dataset(kind, 16, 4, 40, seed=4)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.x, c.x)
    assert a.x.min() >= 0 and a.x.max() <= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(0, 200), st.integers(0, 10_000))
def test_labels_balanced_within_one(C, extra, seed):
    n = C + extra
    ds = data.synth_dataset("random_uniform", 4, C, n, seed=seed)
    counts = np.bincount(ds.y, minlength=C)
    assert counts.max() - counts.min() <= 1


def test_structure_seed_separates_distribution_from_draw():
    a = data.synth_dataset("gaussian_blobs", 8, 3, 30, seed=1, structure_seed=7)
    b = data.synth_dataset("gaussian_blobs", 8, 3, 30, seed=2, structure_seed=7)
    c = data.synth_dataset("gaussian_blobs", 8, 3, 30, seed=1, structure_seed=8)
    assert np.array_equal(a.meta["means"], b.meta["means"])
    assert not np.array_equal(a.meta["means"], c.meta["means"])


def test_invalid_synth_arguments():
    with pytest.raises(ValueError):
        data.synth_dataset("spirals", 4, 2, 10, 0)
    with pytest.raises(ValueError):
        data.synth_dataset("random_uniform", 4, 5, 3, 0)
    with pytest.raises(ValueError):
        data.synth_dataset("random_uniform", 0, 2, 10, 0)
    with pytest.raises(ValueError):
        data.synth_dataset("stripe_patterns", 15, 2, 10, 0)


def test_stripes_with_explicit_shape():
    ds = data.synth_dataset("stripe_patterns", 12, 3, 9, seed=0, image_shape=(3, 4))
    assert ds.x.shape == (9, 12)


def test_hand_written_csv(tmp_path):
    p = tmp_path / "two.csv"
    p.write_text("1,0.25,0.5,1.0\n0,0.0,0.125,0.75\n")
    ds = data.ingest_dataset(p)
    assert np.array_equal(ds.x, [[0.25, 0.5, 1.0], [0.0, 0.125, 0.75]])
    assert ds.y.tolist() == [1, 0] and ds.num_classes == 2


def test_csv_values_clamped(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("0,-0.5,1.5\n1,0.5,0.5\n")
    assert np.array_equal(data.ingest_dataset(p).x, [[0.0, 1.0], [0.5, 0.5]])


def test_csv_raw_roundtrip(tmp_path):
    ds = data.synth_dataset("gaussian_blobs", 16, 4, 20, seed=0)
    data.write_csv_dataset(tmp_path / "d.csv", ds)
    data.write_raw_f32(tmp_path / "d.f32", ds)
    from_csv = data.ingest_dataset(tmp_path / "d.csv", num_classes=4)
    from_raw = data.ingest_dataset(tmp_path / "d.f32")
    assert np.array_equal(from_csv.x, ds.x)
    assert np.array_equal(from_raw.y, ds.y) and from_raw.num_classes == 4
    assert np.max(np.abs(from_raw.x - ds.x)) <= np.finfo(np.float32).eps


def test_raw_layout_by_hand(tmp_path):
    p = tmp_path / "h.f32"
    payload = struct.pack("<4I", data.RAW_MAGIC, 2, 2, 3)
    payload += struct.pack("<4f", 0.5, 0.25, 1.0, 0.0) + struct.pack("<2I", 2, 0)
    p.write_bytes(payload)
    ds = data.ingest_dataset(p)
    assert np.array_equal(ds.x, [[0.5, 0.25], [1.0, 0.0]])
    assert ds.y.tolist() == [2, 0] and ds.num_classes == 3


def test_empty_files_rejected(tmp_path):
    (tmp_path / "e.csv").write_text("")
    (tmp_path / "e.f32").write_bytes(b"")
    with pytest.raises(ValueError, match="empty"):
        data.ingest_dataset(tmp_path / "e.csv")
    with pytest.raises(ValueError, match="header"):
        data.ingest_dataset(tmp_path / "e.f32")


@pytest.mark.parametrize("text,where", [
    ("0,0.1,0.2\n1,0.3\n", ":2:"),
    ("0,0.1\nx,0.2\n", ":2:"),
    ("0,0.1\n1,nan\n", ":2:"),
    ("0,0.1\n-1,0.2\n", ":2:"),
    ("3\n", ":1:"),
])
def test_csv_errors_name_line(tmp_path, text, where):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(ValueError, match=where):
        data.ingest_dataset(p)


def _raw(tmp_path, magic=data.RAW_MAGIC, n=1, m=2, C=2, xs=(0.1, 0.2), ys=(1,), trim=0):
    p = tmp_path / "r.f32"
    b = struct.pack("<4I", magic, n, m, C) + struct.pack(f"<{len(xs)}f", *xs)
    b += struct.pack(f"<{len(ys)}I", *ys)
    p.write_bytes(b[:len(b) - trim] if trim else b)
    return p


def test_raw_errors_name_byte_offset(tmp_path):
    with pytest.raises(ValueError, match="byte 0"):
        data.ingest_dataset(_raw(tmp_path, magic=7))
    with pytest.raises(ValueError, match="byte 26"):
        data.ingest_dataset(_raw(tmp_path, trim=2))
    with pytest.raises(ValueError, match="byte 20"):
        data.ingest_dataset(_raw(tmp_path, xs=(0.1, float("inf"))))
    with pytest.raises(ValueError, match="byte 24"):
        data.ingest_dataset(_raw(tmp_path, ys=(5,)))


def test_label_range_checked_against_declared_classes(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("4,0.1\n0,0.2\n")
    with pytest.raises(ValueError, match="label"):
        data.ingest_dataset(p, num_classes=3)


def test_unknown_format_rejected(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("0,0.1\n")
    with pytest.raises(ValueError):
        data.ingest_dataset(p, format="parquet")


def test_written_csv_is_plain_rows(tmp_path):
    ds = Dataset(np.array([[0.5, 0.25]]), [1], 2)
    data.write_csv_dataset(tmp_path / "o.csv", ds)
    assert (tmp_path / "o.csv").read_text() == "1,0.5,0.25\n"
