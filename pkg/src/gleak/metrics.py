"""Client-side detectability (D-SNR, gradient-norm variance) and reconstruction quality."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 100.0
DENOM_EPS = 1e-12
MSE_EPS = 1e-12


@dataclass
class DsnrReport:
    value: float
    per_layer: dict
    argmax_layer: str
    degenerate: bool = False
    batch_meta: dict = field(default_factory=dict)


def _dense_weights(per_sample_grads, weight_names=None):
    first = per_sample_grads[0]
    names = weight_names or [n for n in first.names if n.endswith(".weight")]
    if not names:
        raise ValueError("d_snr: no dense weight segments found")
    return names


def d_snr(per_sample_grads, spec=None, batch_meta: dict | None = None) -> DsnrReport:
    """Max over dense weight matrices of max_i ||g_i|| / (sum_i ||g_i|| - max_i ||g_i||).

    A vanishing denominator yields ``inf`` and sets ``degenerate``.
    """
    grads = list(per_sample_grads)
    if len(grads) < 2:
        raise ValueError("d_snr: need at least two per-sample gradients")
    names = spec.weight_names() if spec is not None else _dense_weights(grads)
    per_layer = {}
    degenerate = False
    for name in names:
        norms = np.array([np.linalg.norm(g.get(name)) for g in grads])
        k = int(np.argmax(norms))
        top = norms[k]
        # in units of the largest norm, so equal norms sum to an exact integer
        rest_rel = math.fsum(np.delete(norms, k) / top) if top > 0 else 0.0
        if rest_rel * top < DENOM_EPS:
            per_layer[name] = math.inf
            degenerate = True
        else:
            per_layer[name] = 1.0 / rest_rel
    arg = max(per_layer, key=lambda k: per_layer[k])
    return DsnrReport(per_layer[arg], per_layer, arg, degenerate, dict(batch_meta or {}))


def grad_norm_variance(per_sample_grads) -> tuple[float, float]:
    """Population variance and mean of whole-vector per-sample gradient norms."""
    grads = list(per_sample_grads)
    if not grads:
        raise ValueError("grad_norm_variance: need at least one sample")
    norms = np.array([np.linalg.norm(getattr(g, "values", g)) for g in grads])
    mu = norms.mean()
    return float(np.mean((norms - mu) ** 2)), float(mu)


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(x_hat, x_true, peak: float = 1.0) -> float:
    m = mse(x_hat, x_true)
    if m < MSE_EPS:
        return PSNR_CAP
    return float(10.0 * np.log10(peak**2 / m))


def ssim(x_hat, x_true, shape_meta=None, data_range: float = 1.0,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-window (global) SSIM over the whole image.

    ``shape_meta`` (e.g. ``(H, W)`` or ``(H, W, ch)``) only has to be
    consistent with the element count; the statistic is global.
    """
    a = np.asarray(x_hat, dtype=np.float64)
    b = np.asarray(x_true, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if shape_meta is not None and int(np.prod(shape_meta)) != a.size:
        raise ValueError(f"ssim: shape {tuple(shape_meta)} does not hold {a.size} values")
    a = a.reshape(-1)
    b = b.reshape(-1)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = a.mean(), b.mean()
    var_a = ((a - mu_a) ** 2).mean()
    var_b = ((b - mu_b) ** 2).mean()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(num / den)


def greedy_alignment(x_hat, x_true) -> np.ndarray:
    """perm[i] = row of ``x_hat`` matched to true row ``i`` (greedy minimal MSE)."""
    x_hat = np.asarray(x_hat)
    x_true = np.asarray(x_true)
    B = x_true.shape[0]
    cost = ((x_hat[:, None, :] - x_true[None, :, :]) ** 2).mean(axis=2)  # [hat x true]
    perm = np.full(B, -1)
    used_hat = np.zeros(B, bool)
    used_true = np.zeros(B, bool)
    flat_order = np.argsort(cost, axis=None, kind="stable")
    for f in flat_order:
        h, t = divmod(int(f), B)
        if used_hat[h] or used_true[t]:
            continue
        perm[t] = h
        used_hat[h] = used_true[t] = True
    return perm


def pruned_mean(values) -> float:
    """Mean after dropping one minimum and one maximum (plain mean if fewer than 3)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size < 3:
        return float(v.mean())
    return float(v[1:-1].mean())


@dataclass
class QualityReport:
    per_sample_psnr: list
    per_sample_ssim: list
    min_psnr: float
    pruned_psnr: float
    max_psnr: float
    reconstructed: bool = True


def quality_report(x_hat, x_true, image_shape=None, align: bool = True,
                   reconstructed: bool = True) -> QualityReport:
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_true = np.asarray(x_true, dtype=np.float64)
    if align:
        x_hat = x_hat[greedy_alignment(x_hat, x_true)]
    ps = [psnr(h, t) for h, t in zip(x_hat, x_true)]
    ss = [ssim(h, t, image_shape) for h, t in zip(x_hat, x_true)]
    return QualityReport(ps, ss, float(min(ps)), pruned_mean(ps), float(max(ps)), reconstructed)


def table_psnr(report: QualityReport) -> tuple[float, float, float]:
    """(min, pruned, max) PSNR with "not reconstructed" mapped to 0 for comparison tables."""
    if not report.reconstructed:
        return 0.0, 0.0, 0.0
    return report.min_psnr, report.pruned_psnr, report.max_psnr
