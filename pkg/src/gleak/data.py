"""Synthetic datasets and file ingestion (CSV and a raw float32 container)."""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .models import Dataset

KINDS = ("gaussian_blobs", "stripe_patterns", "random_uniform")
RAW_MAGIC = 0x31444C47  # b"GLD1" little-endian
RAW_HEADER = struct.Struct("<4I")


def balanced_labels(n: int, C: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % C)


def synth_dataset(kind: str, m: int, C: int, n: int, seed: int,
                  structure_seed: int | None = None, noise: float = 0.05,
                  image_shape=None) -> Dataset:
    """Labelled samples in [0, 1]^m with class-conditional structure.

    ``structure_seed`` fixes the class prototypes (blob means, stripe
    orientation/frequency/phase) independently of the sample draw, so two
    datasets can share a distribution while holding different samples, or
    differ in distribution under the same sample seed.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {KINDS}")
    if m < 1 or C < 2:
        raise ValueError(f"need m >= 1 and C >= 2, got m={m}, C={C}")
    if n < C:
        raise ValueError(f"need at least one sample per class: n={n} < C={C}")
    rng = np.random.default_rng(seed)
    srng = np.random.default_rng(seed if structure_seed is None else structure_seed)
    y = balanced_labels(n, C, rng)
    meta = {"kind": kind, "seed": seed,
            "structure_seed": seed if structure_seed is None else structure_seed,
            "noise": noise}
    if kind == "random_uniform":
        x = rng.uniform(0.0, 1.0, (n, m))
    elif kind == "gaussian_blobs":
        means = srng.uniform(0.15, 0.85, (C, m))
        x = means[y] + rng.normal(0.0, noise, (n, m))
        meta["means"] = means
    else:
        x = _stripes(y, m, C, rng, srng, noise, image_shape)
    return Dataset(np.clip(x, 0.0, 1.0), y, C, name=kind, meta=meta)


def _stripes(y, m, C, rng, srng, noise, image_shape):
    if image_shape is None:
        side = int(round(math.sqrt(m)))
        if side * side != m:
            raise ValueError(f"stripe_patterns needs a square m or an image_shape, got m={m}")
        H = W = side
    else:
        H, W = int(image_shape[0]), int(image_shape[1])
        if H * W != m:
            raise ValueError(f"image shape {image_shape} does not hold {m} features")
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    angles = srng.uniform(0.0, np.pi, C)
    freqs = srng.uniform(0.15, 0.45, C)
    phases = srng.uniform(0.0, 2 * np.pi, C)
    n = y.size
    x = np.empty((n, m))
    jitter = rng.normal(0.0, 0.3, n)
    for i, k in enumerate(y):
        proj = rows * np.sin(angles[k]) + cols * np.cos(angles[k])
        img = 0.5 + 0.4 * np.sin(2 * np.pi * freqs[k] * proj + phases[k] + jitter[i])
        x[i] = img.reshape(-1)
    return x + rng.normal(0.0, noise, (n, m))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_csv_dataset(path, ds: Dataset) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for xi, yi in zip(ds.x, ds.y):
            f.write(",".join([str(int(yi))] + [repr(float(v)) for v in xi]) + "\n")
    return path


def write_raw_f32(path, ds: Dataset) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, m = ds.x.shape
    with path.open("wb") as f:
        f.write(RAW_HEADER.pack(RAW_MAGIC, n, m, ds.num_classes))
        f.write(np.ascontiguousarray(ds.x, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(ds.y, dtype="<u4").tobytes())
    return path


def ingest_dataset(path, format: str | None = None, num_classes: int | None = None) -> Dataset:
    """Read a CSV (``label,v1..vm`` per line) or raw_f32 file; values are clamped to [0, 1]."""
    path = Path(path)
    if format is None:
        format = "raw_f32" if path.suffix in (".f32", ".raw", ".bin") else "csv"
    if format == "csv":
        x, y = _read_csv(path)
        C = num_classes if num_classes is not None else int(y.max()) + 1
    elif format == "raw_f32":
        x, y, C = _read_raw(path)
        if num_classes is not None and num_classes != C:
            raise ValueError(f"{path}: header declares {C} classes, expected {num_classes}")
    else:
        raise ValueError(f"unknown dataset format {format!r}; choose csv or raw_f32")
    if y.size and (y.max() >= C or y.min() < 0):
        raise ValueError(f"{path}: label {int(y.max())} outside [0, {C})")
    C = max(C, 2)
    return Dataset(np.clip(x, 0.0, 1.0), y, C, name=path.stem, meta={"path": str(path)})


def _read_csv(path: Path):
    xs, ys = [], []
    width = None
    with path.open() as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                label = int(parts[0])
                vals = [float(v) for v in parts[1:]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed row {line[:60]!r}") from None
            if not vals:
                raise ValueError(f"{path}:{lineno}: row has a label but no values")
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise ValueError(f"{path}:{lineno}: expected {width} values, got {len(vals)}")
            if label < 0:
                raise ValueError(f"{path}:{lineno}: negative label {label}")
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            xs.append(vals)
            ys.append(label)
    if not xs:
        raise ValueError(f"{path}: empty dataset file")
    return np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.int64)


def _read_raw(path: Path):
    raw = path.read_bytes()
    if len(raw) < RAW_HEADER.size:
        raise ValueError(f"{path}: file too short for the 16-byte header ({len(raw)} bytes)")
    magic, n, m, C = RAW_HEADER.unpack_from(raw, 0)
    if magic != RAW_MAGIC:
        raise ValueError(f"{path}: bad magic 0x{magic:08x} at byte 0")
    if n == 0 or m == 0:
        raise ValueError(f"{path}: header declares an empty dataset (n={n}, m={m}) at byte 4")
    need = RAW_HEADER.size + 4 * n * m + 4 * n
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes for n={n}, m={m}, got {len(raw)} "
                         f"(mismatch from byte {min(len(raw), need)})")
    off = RAW_HEADER.size
    x = np.frombuffer(raw, dtype="<f4", count=n * m, offset=off).astype(np.float64).reshape(n, m)
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(x.reshape(-1)))[0])
        raise ValueError(f"{path}: non-finite value at byte {off + 4 * bad}")
    y = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 4 * n * m).astype(np.int64)
    bad = np.flatnonzero(y >= C)
    if bad.size:
        raise ValueError(f"{path}: label {int(y[bad[0]])} >= {C} at byte "
                         f"{off + 4 * n * m + 4 * int(bad[0])}")
    return x, y, int(C)
