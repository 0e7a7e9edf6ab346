"""Flat little-endian float files with ``key = value`` text sidecar headers."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

_DTYPES = {"f64": "<f8", "f32": "<f4"}


def write_flat(path, values, header: dict | None = None, dtype: str = "f64") -> Path:
    """Write ``values`` as ``<path>.bin`` plus a ``<path>.hdr`` text header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(np.asarray(values, dtype=_DTYPES[dtype]).reshape(-1))
    bin_path = path.with_suffix(".bin")
    bin_path.write_bytes(arr.tobytes())
    hdr = {"dtype": dtype, "count": arr.size}
    hdr.update(header or {})
    lines = [f"{k} = {_fmt(v)}" for k, v in hdr.items()]
    path.with_suffix(".hdr").write_text("\n".join(lines) + "\n")
    return bin_path


def _fmt(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_header(path) -> dict:
    path = Path(path).with_suffix(".hdr")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: malformed header line {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_flat(path) -> tuple[np.ndarray, dict]:
    hdr = read_header(path)
    dtype = _DTYPES[hdr.get("dtype", "f64")]
    raw = Path(path).with_suffix(".bin").read_bytes()
    arr = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    if "count" in hdr and arr.size != int(hdr["count"]):
        raise ValueError(f"{path}: header count {hdr['count']} but file holds {arr.size} values")
    return arr, hdr


def ints(value: str) -> list[int]:
    return [int(v) for v in value.split()] if value else []


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(c) for c in r])
    return path


def _cell(c):
    if isinstance(c, (float, np.floating)):
        return repr(float(c))
    if isinstance(c, (np.integer,)):
        return int(c)
    return c


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        return [], []
    return rows[0], rows[1:]
