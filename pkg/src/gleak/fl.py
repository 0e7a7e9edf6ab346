"""One-step federated rounds: client gradients, size-weighted aggregation, SGD."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io
from .autodiff import ParamVector
from .models import Batch, ModelSpec, batch_loss


@dataclass
class ClientState:
    id: int
    dataset: list  # list[Batch]
    size: int = -1

    def __post_init__(self):
        total = sum(b.size for b in self.dataset)
        if self.size < 0:
            self.size = total
        elif self.size != total:
            raise ValueError(f"client {self.id}: size {self.size} != {total} samples held")


@dataclass
class GradientCapture:
    round: int
    client_id: int
    batch_grad: ParamVector
    per_sample: list | None = None
    batch_size: int = 0
    labels: tuple = ()
    batch_index: int = 0

    @property
    def label_counts(self) -> dict:
        return dict(sorted(Counter(self.labels).items()))

    def check(self, tol: float = 1e-9) -> None:
        if self.per_sample is not None:
            mean = np.mean([g.values for g in self.per_sample], axis=0)
            err = np.max(np.abs(mean - self.batch_grad.values))
            if err > tol:
                raise ValueError(f"per-sample mean differs from batch gradient by {err:.3g}")


def client_gradient(
    spec: ModelSpec,
    params: ParamVector,
    batch: Batch,
    capture_per_sample: bool = False,
    round: int = 0,
    client_id: int = 0,
    batch_index: int = 0,
) -> GradientCapture:
    """Gradient of the batch-mean loss at ``params`` (optionally per sample too)."""
    theta = params.tensor()
    g = ad.grad(batch_loss(spec, theta, batch.x, batch.y), theta)
    per = None
    if capture_per_sample:
        per = ad.per_sample_grads(
            lambda th, x, y: batch_loss(spec, th, x, y), params, batch.x, batch.y
        )
    return GradientCapture(
        round=round,
        client_id=client_id,
        batch_grad=params.replace(g.data),
        per_sample=per,
        batch_size=batch.size,
        labels=tuple(int(v) for v in batch.y),
        batch_index=batch_index,
    )


def aggregate(captures, client_sizes) -> ParamVector:
    """Dataset-size weighted sum of client gradients."""
    captures = list(captures)
    sizes = np.asarray(client_sizes, dtype=np.float64)
    if not captures:
        raise ValueError("aggregate: no captures")
    if sizes.shape != (len(captures),):
        raise ValueError(f"aggregate: {len(captures)} captures but {sizes.size} sizes")
    if np.any(sizes < 0) or sizes.sum() <= 0:
        raise ValueError("aggregate: client sizes must be non-negative with a positive total")
    grads = [c.batch_grad if isinstance(c, GradientCapture) else c for c in captures]
    n = len(grads[0])
    for g in grads:
        if len(g) != n:
            raise ValueError(f"aggregate: gradient lengths differ ({len(g)} vs {n})")
    rounds = {c.round for c in captures if isinstance(c, GradientCapture)}
    if len(rounds) > 1:
        raise ValueError(f"aggregate: captures span rounds {sorted(rounds)}")
    w = sizes / sizes.sum()
    total = np.zeros(n)
    for wi, g in zip(w, grads):
        total += wi * g.values
    return grads[0].replace(total)


def sgd_step(params: ParamVector, update: ParamVector, lr: float) -> ParamVector:
    if len(update) != len(params):
        raise ValueError(f"sgd_step: update length {len(update)} != params {len(params)}")
    return params.replace(params.values - lr * update.values)


@dataclass
class RoundResult:
    round: int
    params_in: ParamVector
    params_out: ParamVector
    captures: list = field(default_factory=list)


def run_round(
    spec: ModelSpec,
    params: ParamVector,
    clients: list,
    lr: float,
    round: int = 0,
    batch_choice=None,
    capture_per_sample: bool = False,
) -> RoundResult:
    """Every client computes one gradient on one of its batches; the server averages and steps.

    ``batch_choice(client)`` picks the batch index a client trains on this
    round (default: ``round`` modulo the number of batches).
    """
    captures = []
    for c in clients:
        bi = batch_choice(c) if batch_choice else round % len(c.dataset)
        captures.append(
            client_gradient(spec, params, c.dataset[bi], capture_per_sample, round, c.id, bi)
        )
    update = aggregate(captures, [c.size for c in clients])
    return RoundResult(round, params, sgd_step(params, update, lr), captures)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def capture_stem(c: GradientCapture) -> str:
    return f"grad_r{c.round:03d}_c{c.client_id:03d}_b{c.batch_index:03d}"


def save_capture(directory, c: GradientCapture) -> Path:
    directory = Path(directory)
    stem = capture_stem(c)
    header = {
        "round": c.round,
        "client": c.client_id,
        "batch": c.batch_index,
        "B": c.batch_size,
        "params": len(c.batch_grad),
        "labels": list(c.labels),
        "per_sample": 0 if c.per_sample is None else len(c.per_sample),
    }
    io.write_flat(directory / stem, c.batch_grad.values, header)
    if c.per_sample is not None:
        stacked = np.concatenate([g.values for g in c.per_sample])
        io.write_flat(directory / f"{stem}_per_sample", stacked, header)
    return directory / stem


def load_capture(path, spec: ModelSpec) -> GradientCapture:
    path = Path(path)
    values, hdr = io.read_flat(path)
    layout = spec.empty_params()
    if int(hdr["params"]) != len(layout) or values.size != len(layout):
        raise ValueError(f"{path}: {hdr['params']} parameters, model has {len(layout)}")
    per = None
    n_per = int(hdr.get("per_sample", 0))
    if n_per:
        stacked, _ = io.read_flat(path.parent / f"{path.name}_per_sample")
        per = [layout.replace(v) for v in stacked.reshape(n_per, -1)]
    return GradientCapture(
        round=int(hdr["round"]),
        client_id=int(hdr["client"]),
        batch_grad=layout.replace(values),
        per_sample=per,
        batch_size=int(hdr["B"]),
        labels=tuple(io.ints(hdr["labels"])),
        batch_index=int(hdr.get("batch", 0)),
    )
