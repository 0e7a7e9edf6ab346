"""Per-sample, per-class contribution weights of a classifier's output-layer gradient.

For a dense output layer ``logits = h W + b`` trained with softmax
cross-entropy, the gradient quotient ``dW[:, k] / db[k]`` is a weighted
average of the layer inputs ``h_i`` whose weights are the normalised
logit residuals. On a linear head ``h_i`` is the input itself; on a deeper
model it is the last hidden representation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io
from .fl import GradientCapture
from .models import Batch, ModelSpec, forward

COND_EPS = 1e-12


@dataclass(frozen=True)
class LambdaMatrix:
    values: np.ndarray  # [C x B], NaN rows where invalid
    valid: np.ndarray  # [C] bool

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def batch_size(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WeightedAverage:
    per_class: np.ndarray  # [C x d], NaN rows where invalid
    valid: np.ndarray  # [C] bool
    quantity: str  # "input" or "features"


def logit_residuals(spec: ModelSpec, params, batch: Batch) -> np.ndarray:
    """d loss_i / d logits_i = softmax(logits_i) - onehot(y_i), shape [B x C]."""
    from . import autodiff as ad

    with ad.no_grad():
        z = forward(spec, params, batch.x).data
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(batch.size), batch.y] -= 1.0
    return p


def lambda_from_residuals(resid: np.ndarray) -> LambdaMatrix:
    col = resid.T  # [C x B]
    denom = col.sum(axis=1)
    valid = np.abs(denom) >= COND_EPS
    vals = np.full(col.shape, np.nan)
    vals[valid] = col[valid] / denom[valid, None]
    return LambdaMatrix(vals, valid)


def compute_lambda(spec: ModelSpec, params, batch: Batch) -> LambdaMatrix:
    return lambda_from_residuals(logit_residuals(spec, params, batch))


def weighted_average_from_grads(
    capture: GradientCapture, layer: str | int, spec: ModelSpec | None = None
) -> WeightedAverage:
    """Quotient of weight-gradient columns by bias-gradient entries for one layer.

    ``layer`` is a layer index or a name like ``"layer1"``. Classes whose bias
    gradient is below the conditioning threshold are marked invalid.
    """
    name = layer if isinstance(layer, str) else f"layer{layer}"
    name = name.split(".")[0]
    g = capture.batch_grad
    try:
        dW = g.get(f"{name}.weight")
    except KeyError:
        raise ValueError(f"unknown layer {name!r}") from None
    try:
        db = g.get(f"{name}.bias")
    except KeyError:
        raise ValueError(f"layer {name!r} has no bias; the quotient is undefined") from None
    valid = np.abs(db) >= COND_EPS
    out = np.full((db.size, dW.shape[0]), np.nan)
    out[valid] = dW[:, valid].T / db[valid, None]
    quantity = "input" if name == "layer0" else "features"
    return WeightedAverage(out, valid, quantity)


def lambda_bias_profile(lam: LambdaMatrix) -> dict:
    """Per-class concentration of lambda mass: max weight and entropy of |lambda|."""
    C = lam.num_classes
    max_l = np.full(C, np.nan)
    ent = np.full(C, np.nan)
    for k in np.flatnonzero(lam.valid):
        row = lam.values[k]
        a = np.abs(row)
        max_l[k] = row.max()
        q = a / a.sum()
        nz = q[q > 0]
        ent[k] = float(-(nz * np.log(nz)).sum())
    return {"max_lambda": max_l, "entropy": ent, "valid": lam.valid.copy()}


def export_lambda_csv(path, lam: LambdaMatrix, key: dict | None = None):
    key = key or {}
    kcols = list(key)
    rows = []
    for k in range(lam.num_classes):
        for i in range(lam.batch_size):
            rows.append([*key.values(), k, i, int(lam.valid[k]), lam.values[k, i]])
    return io.write_csv(path, kcols + ["class", "sample", "valid", "lambda"], rows)


def export_profile_csv(path, profile: dict, key: dict | None = None):
    key = key or {}
    rows = []
    for k in range(len(profile["valid"])):
        rows.append([*key.values(), k, int(profile["valid"][k]),
                     profile["max_lambda"][k], profile["entropy"][k]])
    return io.write_csv(path, list(key) + ["class", "valid", "max_lambda", "entropy"], rows)
