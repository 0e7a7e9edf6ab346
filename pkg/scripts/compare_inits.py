"""Run one config under several initialisations and poisoners and compare them.

    python3 scripts/compare_inits.py scripts/configs/reference.yaml --seeds 0 1

Prints, per variant and seed, the median per-sample PSNR of the configured
attack and the median D-SNR and gradient-norm variance of the captures.
"""
from __future__ import annotations

import argparse
import copy
from pathlib import Path

import numpy as np
import yaml

from gleak.config import from_dict
from gleak.harness import run_experiment

VARIANTS = {
    "eggv": {},
    "random": {"poison": {"kind": "none"}},
    "xavier": {"poison": {"kind": "none"}, "init": {"scheme": "xavier"}},
    "he": {"poison": {"kind": "none"}, "init": {"scheme": "he"}},
    "fishing": {"poison": {"kind": "fishing", "target_class": 0}},
}


def merged(base: dict, changes: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in changes.items():
        if isinstance(val, dict):
            out[key] = {**out.get(key, {}), **val}
        else:
            out[key] = val
    return out


def median(report, metric: str) -> float:
    vals = report.values(metric)
    return float(np.median(vals)) if len(vals) else float("nan")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", type=Path)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    ap.add_argument("--out", type=Path, default=Path("runs/compare"))
    args = ap.parse_args()

    base = yaml.safe_load(args.config.read_text())
    print(f"{'variant':<8} {'seed':>4} {'psnr':>8} {'dsnr':>8} {'norm var':>10}")
    for name in args.variants:
        for seed in args.seeds:
            raw = merged(base, VARIANTS[name])
            raw.update(master_seed=seed, run_id=f"{name}-{seed}",
                       output_dir=str(args.out / f"{name}-{seed}"))
            rep = run_experiment(from_dict(raw))
            failed = rep.failed_stages()
            if failed:
                print(f"{name:<8} {seed:>4} failed: {failed}")
                continue
            print(f"{name:<8} {seed:>4} {median(rep, 'psnr'):8.2f} {median(rep, 'dsnr'):8.3f} "
                  f"{median(rep, 'grad_norm_var'):10.3g}")


if __name__ == "__main__":
    main()
