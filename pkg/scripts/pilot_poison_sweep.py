"""Pilot sweep: poisoning step sizes and decoder shape vs. DLG reconstruction quality.

Prints one line per setting with the decoder-loss reduction and the median
per-sample PSNR of a 200-step DLG attack on held-out batches, next to the
unpoisoned baseline. Used to pick the poisoning defaults.
"""
from __future__ import annotations

import argparse
import itertools

import numpy as np

from gleak import data, eggv, fl, metrics, models, pgla


def median_psnr(spec, params, batches, iterations, step):
    vals = []
    for i, b in enumerate(batches):
        cap = fl.client_gradient(spec, params, b, False)
        cfg = pgla.AttackConfig(iterations=iterations, step_size=step, seed=i)
        res = pgla.reconstruct(cap, spec, params, cfg, truth=b)
        vals += list(metrics.quality_report(res.x_hat, b.x, (4, 4)).per_sample_psnr)
    return float(np.median(vals))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rho", type=float, default=0.004)
    ap.add_argument("--alpha-theta", type=float, nargs="+", default=[1e-3, 1e-2, 3e-2, 0.1])
    ap.add_argument("--hidden", type=int, nargs="+", default=[0, 64])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    ap.add_argument("--batches", type=int, default=10)
    ap.add_argument("--noise", type=float, default=0.1)
    args = ap.parse_args()

    spec = models.mlp(16, 32, 4)
    for seed in args.seeds:
        aux = data.synth_dataset("gaussian_blobs", 16, 4, 400, seed=100 + seed,
                                 structure_seed=seed, noise=args.noise)
        tgt = data.synth_dataset("gaussian_blobs", 16, 4, 4 * args.batches, seed=200 + seed,
                                 structure_seed=seed, noise=args.noise)
        aux_b = aux.batches(4, stratified=True)
        tgt_b = tgt.batches(4, stratified=True)
        theta0 = models.init(spec, "random", seed)
        base = median_psnr(spec, theta0, tgt_b, 200, 0.1)
        print(f"seed={seed} baseline median PSNR {base:.2f}", flush=True)
        for a1, hidden in itertools.product(args.alpha_theta, args.hidden):
            cfg = eggv.PoisonConfig(seed=seed, rho=args.rho, alpha_theta=a1, decoder_hidden=hidden,
                                    decoder_init_scale=0.1 if hidden else 0.01)
            run = eggv.poison_model(spec, theta0, aux_b, cfg)
            p = median_psnr(spec, run.theta_star, tgt_b, 200, 0.1)
            print(f"  alpha_theta={a1:g} hidden={hidden} L {run.initial_loss:.3f}->{run.final_loss:.3f} "
                  f"({run.stopped}) PSNR {p:.2f} ({p - base:+.2f})", flush=True)


if __name__ == "__main__":
    main()
