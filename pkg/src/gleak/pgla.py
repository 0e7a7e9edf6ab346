"""Passive reconstruction from captured gradients by gradient matching."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io
from .autodiff import ParamVector, Tensor
from .fl import GradientCapture
from .metrics import greedy_alignment, psnr
from .models import Batch, ModelSpec, batch_loss

METHODS = ("dlg", "ig")
DISTANCES = ("squared_l2", "negative_cosine")
STEP_RULES = ("normalized", "absolute")


@dataclass(frozen=True)
class AttackConfig:
    """Gradient-matching attack settings.

    ``step_rule="normalized"`` divides ``step_size`` by the infinity norm of
    the first input-gradient of the run, so the first update moves the
    largest coordinate by ``step_size``; the resulting step is then held
    constant (optionally cosine-decayed) for the whole run.
    """

    method: str = "dlg"
    iterations: int = 200
    step_size: float = 0.1
    tv_weight: float = 0.0
    distance: str | None = None
    restarts: int = 2
    seed: int = 0
    step_rule: str = "normalized"
    cosine_decay: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}; choose from {METHODS}")
        if self.distance is None:
            object.__setattr__(
                self, "distance", "squared_l2" if self.method == "dlg" else "negative_cosine"
            )
        if self.distance not in DISTANCES:
            raise ValueError(f"unknown distance {self.distance!r}; choose from {DISTANCES}")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"unknown step rule {self.step_rule!r}; choose from {STEP_RULES}")
        if int(self.iterations) < 1:
            raise ValueError("iterations must be >= 1")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReconstructionResult:
    x_hat: np.ndarray
    y_hat: np.ndarray
    trajectory: list = field(default_factory=list)  # (iteration, match_loss, psnr | nan)
    iterations_used: int = 0
    best_iteration: int = 0
    best_loss: float = math.inf
    failed: bool = False
    reason: str = ""
    seed: int = 0
    low_confidence_labels: bool = False


# ---------------------------------------------------------------------------
# label inference
# ---------------------------------------------------------------------------


def idlg_infer_labels(capture: GradientCapture, spec: ModelSpec) -> tuple[np.ndarray, bool]:
    """Labels whose output-layer gradient is most negative.

    Cross-entropy residuals are negative only at a sample's true class, so a
    batch with unique labels has exactly B negative output-bias entries.
    Returns ``(labels, low_confidence)``; the flag is raised when fewer than
    B entries are negative (duplicate labels, or saturated samples).
    """
    last = spec.last_layer()
    g = capture.batch_grad
    if spec.has_bias[last]:
        score = g.get(f"layer{last}.bias")
    else:
        # with non-negative features the column sum carries the residual sign
        score = g.get(f"layer{last}.weight").sum(axis=0)
    B = capture.batch_size or len(capture.labels)
    order = np.argsort(score, kind="stable")
    n_neg = int(np.sum(score < 0))
    labels = np.sort(order[:B])
    return labels.astype(np.int64), n_neg < B


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def _factor_shape(m: int, image_shape) -> tuple[int, int, int]:
    if image_shape is None:
        side = int(round(math.sqrt(m)))
        if side * side != m:
            raise ValueError(f"cannot interpret {m} features as a square image; pass image_shape")
        return side, side, 1
    shape = tuple(int(s) for s in image_shape)
    if len(shape) == 2:
        shape = shape + (1,)
    if len(shape) != 3 or int(np.prod(shape)) != m:
        raise ValueError(f"image shape {shape} does not factor {m} features")
    return shape


def total_variation(x, image_shape=None) -> Tensor:
    """Anisotropic TV: summed absolute horizontal and vertical neighbour differences.

    ``x`` holds B flattened H x W (x ch) images in row-major order.
    """
    x = ad.as_tensor(x)
    if x.ndim == 1:
        x = ad.reshape(x, (1, x.shape[0]))
    B, m = x.shape
    H, W, ch = _factor_shape(m, image_shape)
    img = ad.reshape(x, (B, H, W, ch))
    tv = ad._const(np.zeros(()))
    if W > 1:
        dh = img[:, :, 1:, :] - img[:, :, :-1, :]
        tv = tv + ad.abs_(dh).sum()
    if H > 1:
        dv = img[:, 1:, :, :] - img[:, :-1, :, :]
        tv = tv + ad.abs_(dv).sum()
    return tv


def gradient_distance(g: Tensor, target: np.ndarray, distance: str) -> Tensor:
    if distance == "squared_l2":
        return ad.l2_norm_sq(g - ad._const(target))
    tnorm = float(np.linalg.norm(target))
    if tnorm == 0.0:
        return ad.l2_norm_sq(g)
    gnorm = ad.sqrt(ad.l2_norm_sq(g) + 1e-30)
    cos = ad.dot(g, ad._const(target / tnorm)) / gnorm
    return 1.0 - cos


def matching_loss(spec: ModelSpec, params: ParamVector, x: Tensor, labels,
                  target: np.ndarray, config: AttackConfig, image_shape=None) -> Tensor:
    theta = params.tensor()
    g = ad.grad(batch_loss(spec, theta, x, labels), theta, create_graph=True)
    loss = gradient_distance(g, target, config.distance)
    if config.method == "ig" and config.tv_weight > 0:
        loss = loss + config.tv_weight * total_variation(x, image_shape)
    return loss


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


def reconstruct(
    capture: GradientCapture,
    spec: ModelSpec,
    params: ParamVector,
    config: AttackConfig,
    truth: Batch | None = None,
    image_shape=None,
    labels=None,
) -> ReconstructionResult:
    """Descend the gradient-matching objective from a seeded U(0, 1) start.

    Labels come from ``labels`` if given, else from ``truth``, else from
    iDLG inference. Returns the best iterate by match loss. Divergence
    triggers a restart with a fresh seed, at most ``config.restarts`` times.
    """
    B = capture.batch_size or len(capture.labels)
    low_conf = False
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
    elif truth is not None:
        labels = np.asarray(truth.y)
    else:
        labels, low_conf = idlg_infer_labels(capture, spec)
    target = capture.batch_grad.values
    result = None
    for attempt in range(config.restarts + 1):
        seed = int(config.seed) + attempt * 7919
        result = _descend(spec, params, labels, target, config, B, seed, truth, image_shape)
        if result.reason != "diverged":
            break
    result.low_confidence_labels = low_conf
    return result


def _descend(spec, params, labels, target, config, B, seed, truth, image_shape):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, (B, spec.input_dim))
    best_x, best_loss, best_it = x.copy(), math.inf, 0
    traj = []
    lr = None
    flat = True
    n = int(config.iterations)
    for it in range(n + 1):
        xt = Tensor(x, requires_grad=True) if np.all(np.isfinite(x)) else None
        if xt is None:
            return _failed(x, labels, traj, it, seed, "diverged")
        loss = matching_loss(spec, params, xt, labels, target, config, image_shape)
        value = float(loss.data)
        if not math.isfinite(value):
            return _failed(best_x, labels, traj, it, seed, "diverged")
        p = _psnr_aligned(x, truth) if truth is not None else math.nan
        traj.append((it, value, p))
        if value < best_loss:
            best_x, best_loss, best_it = x.copy(), value, it
        if it == n:
            break
        gx = ad.grad(loss, xt).data
        if not np.all(np.isfinite(gx)):
            return _failed(best_x, labels, traj, it, seed, "diverged")
        gmax = float(np.max(np.abs(gx)))
        if gmax == 0.0:
            # x can no longer move, so every later iterate is identical
            break
        flat = False
        if lr is None:
            lr = config.step_size if config.step_rule == "absolute" else config.step_size / gmax
        step = lr
        if config.cosine_decay:
            step = lr * 0.5 * (1.0 + math.cos(math.pi * it / n))
        x = np.clip(x - step * gx, 0.0, 1.0)
    res = ReconstructionResult(
        x_hat=np.clip(best_x, 0.0, 1.0),
        y_hat=np.asarray(labels),
        trajectory=traj,
        iterations_used=traj[-1][0],
        best_iteration=best_it,
        best_loss=best_loss,
        seed=seed,
    )
    if flat:
        res.failed = True
        res.reason = "flat"
    return res


def _failed(x, labels, traj, it, seed, reason):
    best = min(traj, key=lambda t: t[1]) if traj else (0, math.inf, math.nan)
    return ReconstructionResult(
        x_hat=np.clip(np.nan_to_num(x, nan=0.5), 0.0, 1.0),
        y_hat=np.asarray(labels),
        trajectory=traj,
        iterations_used=it,
        best_iteration=best[0],
        best_loss=best[1],
        failed=True,
        reason=reason,
        seed=seed,
    )


def _psnr_aligned(x, truth: Batch) -> float:
    perm = greedy_alignment(x, truth.x)
    return float(np.mean([psnr(x[perm[i]], truth.x[i]) for i in range(truth.size)]))


def match_loss_at(capture: GradientCapture, spec: ModelSpec, params: ParamVector,
                  x, labels, config: AttackConfig, image_shape=None) -> float:
    """Matching objective evaluated at a given candidate input."""
    xt = Tensor(np.asarray(x, dtype=np.float64))
    loss = matching_loss(spec, params, xt, labels, capture.batch_grad.values, config, image_shape)
    return float(loss.data)


def save_result(directory, stem: str, res: ReconstructionResult, key: dict | None = None) -> None:
    directory = Path(directory)
    header = dict(key or {})
    header.update({
        "B": res.x_hat.shape[0],
        "m": res.x_hat.shape[1],
        "labels": list(res.y_hat),
        "best_iteration": res.best_iteration,
        "best_loss": res.best_loss,
        "failed": int(res.failed),
        "reason": res.reason or "-",
        "seed": res.seed,
    })
    io.write_flat(directory / f"{stem}_xhat", res.x_hat, header)
    io.write_csv(directory / f"{stem}_trajectory.csv", ["iteration", "match_loss", "psnr"],
                 res.trajectory)
