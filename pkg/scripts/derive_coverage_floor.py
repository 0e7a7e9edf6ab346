"""Reconstruction floor for the coverage check, computed without the package.

A reconstruction that carries no information about the sample can do no
better on average than the mid-gray image (0.5 everywhere) when pixel values
are symmetric around 0.5. Its expected PSNR on the reference distribution
(blob means uniform on [0.15, 0.85], Gaussian pixel noise, values clipped to
[0, 1]) is the floor every reconstructed sample has to clear.

    python3 scripts/derive_coverage_floor.py --noise 0.1
"""
import argparse
import math

import numpy as np


def expected_midgray_mse(lo: float, hi: float, noise: float, nodes: int = 200) -> float:
    # Gauss-Legendre over the uniform mean, Gauss-Hermite over the noise
    u, wu = np.polynomial.legendre.leggauss(nodes)
    mu = 0.5 * (hi - lo) * u + 0.5 * (hi + lo)
    wu = wu / 2.0
    z, wz = np.polynomial.hermite_e.hermegauss(nodes)
    wz = wz / math.sqrt(2 * math.pi)
    x = np.clip(mu[:, None] + noise * z[None, :], 0.0, 1.0)
    return float(np.sum(wu[:, None] * wz[None, :] * (x - 0.5) ** 2))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--noise", type=float, default=0.1)
    ap.add_argument("--lo", type=float, default=0.15)
    ap.add_argument("--hi", type=float, default=0.85)
    ap.add_argument("--mc", type=int, default=2_000_000, help="Monte Carlo cross-check draws")
    args = ap.parse_args()

    mse = expected_midgray_mse(args.lo, args.hi, args.noise)
    unclipped = (args.hi - args.lo) ** 2 / 12 + args.noise**2
    rng = np.random.default_rng(0)
    x = np.clip(rng.uniform(args.lo, args.hi, args.mc) + rng.normal(0, args.noise, args.mc), 0, 1)
    mc = float(np.mean((x - 0.5) ** 2))
    print(f"quadrature MSE {mse:.6f}  monte-carlo {mc:.6f}  unclipped closed form {unclipped:.6f}")
    print(f"floor PSNR {10 * math.log10(1 / mse):.4f} dB")


if __name__ == "__main__":
    main()
