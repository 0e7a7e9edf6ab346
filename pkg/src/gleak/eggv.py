"""Gradient-vulnerability poisoning: projector, decoder and the joint training loop.

The server trains the model parameters theta together with a decoder phi so
that a fixed-position sample of the client gradient decodes back into the
client batch. The objective is

    L(theta, phi) = || x - D(P(d loss(F(x, theta), y) / d theta), phi) ||^2

and its theta-gradient runs through the client gradient, i.e. it is a
second-order quantity.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io
from .autodiff import ParamVector, Tensor
from .models import Batch, Dataset, ModelSpec, batch_loss, evaluate_accuracy


# ---------------------------------------------------------------------------
# projector
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProjectionPlan:
    """Fixed gradient positions per parameter segment.

    ``per_layer_positions[l]`` holds sorted indices local to segment ``l``;
    ``offsets`` and ``sizes`` describe the segments of the model it was
    built for.
    """

    names: tuple
    offsets: tuple
    sizes: tuple
    per_layer_positions: tuple
    rho: float
    seed: int

    @property
    def global_indices(self) -> np.ndarray:
        return np.concatenate(
            [off + np.asarray(p, dtype=np.intp)
             for off, p in zip(self.offsets, self.per_layer_positions)]
        )

    @property
    def dim(self) -> int:
        return int(sum(len(p) for p in self.per_layer_positions))

    @property
    def num_params(self) -> int:
        return int(sum(self.sizes))


def positions_per_segment(n: int, rho: float) -> int:
    return max(1, int(round(rho * n)))


def build_projection_plan(spec_or_params, rho: float, seed: int) -> ProjectionPlan:
    """Uniformly sample ``max(1, round(rho * n_l))`` positions inside each segment."""
    if not (0.0 < rho <= 1.0):
        raise ValueError(f"projection ratio must lie in (0, 1], got {rho}")
    params = (spec_or_params if isinstance(spec_or_params, ParamVector)
              else spec_or_params.empty_params())
    rng = np.random.default_rng(seed)
    names, offsets, sizes, positions = [], [], [], []
    for seg in params.segments:
        k = positions_per_segment(seg.size, rho)
        if k >= seg.size:
            pos = np.arange(seg.size)
        else:
            pos = np.sort(rng.choice(seg.size, size=k, replace=False))
        pos = pos.astype(np.int64)
        pos.setflags(write=False)
        names.append(seg.name)
        offsets.append(seg.offset)
        sizes.append(seg.size)
        positions.append(pos)
    return ProjectionPlan(tuple(names), tuple(offsets), tuple(sizes), tuple(positions),
                          float(rho), int(seed))


def project(grad, plan: ProjectionPlan):
    """Selected gradient entries in segment order, then index order.

    Accepts a ParamVector, an ndarray or a Tensor; a Tensor input stays on
    the graph (selection is linear).
    """
    if isinstance(grad, ParamVector):
        grad = grad.values
    n = grad.shape[0] if isinstance(grad, Tensor) else np.asarray(grad).shape[0]
    if n != plan.num_params:
        raise ValueError(f"project: gradient length {n} != plan's {plan.num_params}")
    idx = plan.global_indices
    if isinstance(grad, Tensor):
        return grad[idx]
    return np.asarray(grad, dtype=np.float64)[idx]


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Decoder:
    """Affine map (optionally with one ReLU hidden layer) from projected gradient to a flat batch."""

    in_dim: int
    out_dim: int
    hidden: int = 0

    def layout(self) -> list[tuple]:
        if self.hidden:
            return [("hidden.weight", (self.in_dim, self.hidden)), ("hidden.bias", (self.hidden,)),
                    ("out.weight", (self.hidden, self.out_dim)), ("out.bias", (self.out_dim,))]
        return [("out.weight", (self.in_dim, self.out_dim)), ("out.bias", (self.out_dim,))]

    def init(self, seed, scale: float = 0.01) -> ParamVector:
        rng = np.random.default_rng(seed)
        phi = ParamVector.from_layout(self.layout())
        vals = np.zeros(len(phi))
        for seg in phi.segments:
            if seg.name.endswith("weight"):
                vals[seg.offset:seg.stop] = rng.normal(0.0, scale, seg.size)
        return phi.replace(vals)

    def __call__(self, phi, g_tilde):
        phi_t = ad.as_tensor(phi.values if isinstance(phi, ParamVector) else phi)
        h = ad.reshape(ad.as_tensor(g_tilde), (1, self.in_dim))
        off = 0
        if self.hidden:
            W = ad.reshape(phi_t[off:off + self.in_dim * self.hidden], (self.in_dim, self.hidden))
            off += self.in_dim * self.hidden
            h = ad.relu(ad.matmul(h, W) + phi_t[off:off + self.hidden])
            off += self.hidden
            d = self.hidden
        else:
            d = self.in_dim
        W = ad.reshape(phi_t[off:off + d * self.out_dim], (d, self.out_dim))
        off += d * self.out_dim
        out = ad.matmul(h, W) + phi_t[off:off + self.out_dim]
        return ad.reshape(out, (self.out_dim,))


def decoder_loss(spec: ModelSpec, theta: Tensor, phi: Tensor, decoder: Decoder,
                 plan: ProjectionPlan, batch: Batch) -> Tensor:
    """Squared reconstruction error of the batch decoded from its projected gradient."""
    g = ad.grad(batch_loss(spec, theta, batch.x, batch.y), theta, create_graph=True)
    rec = decoder(phi, project(g, plan))
    return ad.l2_norm_sq(rec - ad._const(batch.x.reshape(-1)))


# ---------------------------------------------------------------------------
# poisoning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoisonConfig:
    iterations: int = 2000
    alpha_theta: float = 1e-3
    alpha_phi: float = 1e-2
    epsilon: float = 1e-3
    rho: float = 0.004
    seed: int = 0
    decoder_hidden: int = 0
    decoder_init_scale: float = 0.01
    window: int = 50
    max_retries: int = 5

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PoisonRun:
    theta_star: ParamVector
    phi_star: ParamVector
    plan: ProjectionPlan
    decoder: Decoder
    loss_curve: list
    config: PoisonConfig
    theta0: ParamVector | None = None
    aux_id: str = ""
    stopped: str = "iterations"

    @property
    def initial_loss(self) -> float:
        return moving_average(self.loss_curve, self.config.window, head=True)

    @property
    def final_loss(self) -> float:
        return moving_average(self.loss_curve, self.config.window)


def moving_average(curve, window: int, head: bool = False) -> float:
    if not curve:
        return math.nan
    w = max(1, min(window, len(curve)))
    part = curve[:w] if head else curve[-w:]
    return float(np.mean(part))


def poison_model(spec: ModelSpec, theta0: ParamVector, aux, config: PoisonConfig,
                 aux_id: str = "") -> PoisonRun:
    """Jointly descend L(theta, phi) over the auxiliary batches.

    ``aux`` is a sequence of equal-size Batches, visited cyclically in a
    per-epoch seeded order. Stops after ``config.iterations`` steps or once
    the trailing moving average of L reaches ``config.epsilon``. A
    non-finite loss rolls back one step and halves both step sizes, at most
    ``config.max_retries`` times before aborting with the partial curve.
    """
    batches = list(aux)
    if not batches:
        raise ValueError("poison_model: empty auxiliary set")
    B = batches[0].size
    if any(b.size != B for b in batches):
        raise ValueError("poison_model: auxiliary batches must share one batch size")
    plan = build_projection_plan(spec, config.rho, config.seed)
    decoder = Decoder(plan.dim, B * spec.input_dim, config.decoder_hidden)
    phi0 = decoder.init(config.seed + 1, config.decoder_init_scale)
    rng = np.random.default_rng(config.seed + 2)

    theta = theta0.values.copy()
    phi = phi0.values.copy()
    a1, a2 = float(config.alpha_theta), float(config.alpha_phi)
    curve: list[float] = []
    order = rng.permutation(len(batches))
    pos = 0
    last_step = None  # (theta, phi, d theta, d phi) of the last accepted update
    retries = 0
    stopped = "iterations"
    n = int(config.iterations)

    def evaluate(th, ph, batch, need_grad):
        th_t = ad.leaf(th, need_grad)
        ph_t = ad.leaf(ph, need_grad)
        L = decoder_loss(spec, th_t, ph_t, decoder, plan, batch)
        if not need_grad:
            return float(L.data), None, None
        gt, gp = ad.grad(L, [th_t, ph_t])
        return float(L.data), gt.data, gp.data

    if n == 0:
        curve.append(evaluate(theta, phi, batches[order[0]], False)[0])
    t = 0
    while t < n:
        batch = batches[order[pos]]
        value, gt, gp = evaluate(theta, phi, batch, True)
        if not (math.isfinite(value) and np.all(np.isfinite(gt)) and np.all(np.isfinite(gp))):
            if last_step is None or retries >= config.max_retries:
                stopped = "non-finite"
                if last_step is not None:
                    theta, phi = last_step[0], last_step[1]
                break
            retries += 1
            a1, a2 = a1 / 2.0, a2 / 2.0
            th0, ph0, dth, dph = last_step
            theta, phi = th0 - a1 * dth, ph0 - a2 * dph
            continue
        curve.append(value)
        last_step = (theta, phi, gt, gp)
        theta = theta - a1 * gt
        phi = phi - a2 * gp
        t += 1
        pos += 1
        if pos == len(batches):
            pos = 0
            order = rng.permutation(len(batches))
        if len(curve) >= config.window and moving_average(curve, config.window) <= config.epsilon:
            stopped = "epsilon"
            break
    return PoisonRun(
        theta_star=theta0.replace(theta),
        phi_star=phi0.replace(phi),
        plan=plan,
        decoder=decoder,
        loss_curve=curve,
        config=config,
        theta0=theta0,
        aux_id=aux_id,
        stopped=stopped,
    )


def vulnerability_score(spec: ModelSpec, params: ParamVector, phi: ParamVector,
                        plan: ProjectionPlan, batch: Batch, decoder: Decoder | None = None) -> float:
    """Decoder loss L(theta, phi) on ``batch``; lower means more leakage-prone."""
    if len(params) != plan.num_params:
        raise ValueError(f"model has {len(params)} parameters, plan expects {plan.num_params}")
    if decoder is None:
        hidden = 0
        if len(phi) != plan.dim * batch.size * spec.input_dim + batch.size * spec.input_dim:
            raise ValueError("decoder parameters do not match plan and batch; pass decoder=")
        decoder = Decoder(plan.dim, batch.size * spec.input_dim, hidden)
    if decoder.in_dim != plan.dim or decoder.out_dim != batch.size * spec.input_dim:
        raise ValueError(
            f"decoder maps {decoder.in_dim} -> {decoder.out_dim}, "
            f"need {plan.dim} -> {batch.size * spec.input_dim}"
        )
    theta = params.tensor()
    L = decoder_loss(spec, theta, ad._const(phi.values), decoder, plan, batch)
    return float(L.data)


# ---------------------------------------------------------------------------
# landscape probes
# ---------------------------------------------------------------------------


@dataclass
class LandscapeGrid:
    coords: np.ndarray
    scores: np.ndarray  # [steps x steps], scores[i, j] at (coords[i], coords[j])
    accuracy: np.ndarray | None = None
    directions: tuple = field(default=(), repr=False)

    def rows(self):
        for i, a in enumerate(self.coords):
            for j, b in enumerate(self.coords):
                row = [float(a), float(b), float(self.scores[i, j])]
                if self.accuracy is not None:
                    row.append(float(self.accuracy[i, j]))
                yield row

    def header(self) -> list[str]:
        return ["a", "b", "score"] + (["accuracy"] if self.accuracy is not None else [])

    @property
    def center(self) -> tuple[int, int]:
        c = (len(self.coords) - 1) // 2
        return c, c


def grid_coords(extent: float, steps: int) -> np.ndarray:
    """Symmetric coordinates; with odd ``steps`` the middle entry is exactly 0."""
    if steps < 2:
        raise ValueError("landscape grid needs at least 2 steps")
    c = (steps - 1) / 2.0
    return extent * (np.arange(steps) - c) / c


def filter_normalized_direction(params: ParamVector, rng) -> np.ndarray:
    """Gaussian direction rescaled per segment to that segment's parameter norm."""
    d = rng.standard_normal(len(params))
    for seg in params.segments:
        part = d[seg.offset:seg.stop]
        pn = np.linalg.norm(params.values[seg.offset:seg.stop])
        dn = np.linalg.norm(part)
        part *= (pn / dn) if dn > 0 else 0.0
    return d


def landscape_grid(spec: ModelSpec, theta_star: ParamVector, phi: ParamVector,
                   plan: ProjectionPlan, eval_batch: Batch, extent: float = 1.0,
                   steps: int = 21, seed: int = 0, decoder: Decoder | None = None,
                   accuracy_data: Dataset | None = None) -> LandscapeGrid:
    """Vulnerability (and optionally accuracy) over theta* + a dx + b dy."""
    coords = grid_coords(extent, steps)
    rng = np.random.default_rng(seed)
    dx = filter_normalized_direction(theta_star, rng)
    dy = filter_normalized_direction(theta_star, rng)
    scores = np.empty((steps, steps))
    acc = np.empty((steps, steps)) if accuracy_data is not None else None
    base = theta_star.values
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            p = theta_star.replace(base + a * dx + b * dy)
            scores[i, j] = vulnerability_score(spec, p, phi, plan, eval_batch, decoder)
            if acc is not None:
                acc[i, j] = evaluate_accuracy(spec, p, accuracy_data)
    return LandscapeGrid(coords, scores, acc, (dx, dy))


# ---------------------------------------------------------------------------
# fishing-style contrast baseline
# ---------------------------------------------------------------------------

FISHING_SATURATION = 40.0


def fishing_baseline_poison(spec: ModelSpec, params: ParamVector, target_class: int,
                            saturation: float = FISHING_SATURATION, seed: int = 0) -> ParamVector:
    """Overwrite the output layer so the target-class gradient is dominated by one sample.

    The target column of the output weights becomes a random 0/1 pattern, all
    other columns are zeroed, and the non-target biases are raised to
    ``saturation`` so the target logit's softmax mass is negligible for every
    sample. Only samples labelled ``target_class`` then carry a residual on
    that logit, and only they back-propagate into earlier layers.
    """
    C = spec.num_classes
    if not (0 <= int(target_class) < C):
        raise ValueError(f"target class {target_class} outside [0, {C})")
    last = spec.last_layer()
    wname = f"layer{last}.weight"
    W = np.zeros(params.get(wname).shape)
    rng = np.random.default_rng(seed)
    pattern = rng.integers(0, 2, W.shape[0]).astype(np.float64)
    if not pattern.any():
        pattern[0] = 1.0
    W[:, target_class] = pattern
    out = params.with_segment(wname, W)
    if spec.has_bias[last]:
        b = np.full(C, float(saturation))
        b[target_class] = 0.0
        out = out.with_segment(f"layer{last}.bias", b)
    return out


def fishing_capture_empty(capture, spec: ModelSpec, target_class: int, tol: float = 1e-9) -> bool:
    """True when a capture from a fishing model carries no target-class signal.

    Checks the target column and bias of the output layer plus every earlier
    layer. Non-target output columns still move, since non-target samples
    spread their residual over the saturated non-target logits.
    """
    g = capture.batch_grad
    last = spec.last_layer()
    parts = [g.get(f"layer{last}.weight")[:, target_class]]
    if spec.has_bias[last]:
        parts.append(g.get(f"layer{last}.bias")[[target_class]])
    parts += [g.get(seg.name).ravel() for seg in g.segments
              if not seg.name.startswith(f"layer{last}.")]
    return bool(np.max(np.abs(np.concatenate(parts))) <= tol)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_poison_run(directory, run: PoisonRun) -> Path:
    directory = Path(directory)
    cfg = run.config.to_dict()
    io.write_flat(directory / "theta_star", run.theta_star.values,
                  {"params": len(run.theta_star), "stopped": run.stopped, "aux": run.aux_id or "-"})
    io.write_flat(directory / "phi_star", run.phi_star.values,
                  {"in_dim": run.decoder.in_dim, "out_dim": run.decoder.out_dim,
                   "hidden": run.decoder.hidden})
    if run.theta0 is not None:
        io.write_flat(directory / "theta0", run.theta0.values, {"params": len(run.theta0)})
    plan_hdr = {"rho": run.plan.rho, "seed": run.plan.seed, "names": list(run.plan.names),
                "offsets": list(run.plan.offsets), "sizes": list(run.plan.sizes),
                "counts": [len(p) for p in run.plan.per_layer_positions]}
    io.write_flat(directory / "plan", run.plan.global_indices.astype(np.float64), plan_hdr)
    io.write_csv(directory / "poison_config.csv", ["key", "value"], sorted(cfg.items()))
    io.write_csv(directory / "loss_curve.csv", ["iteration", "loss"], enumerate(run.loss_curve))
    return directory


def load_poison_run(directory, spec: ModelSpec) -> PoisonRun:
    directory = Path(directory)
    layout = spec.empty_params()
    theta, hdr = io.read_flat(directory / "theta_star")
    phi_vals, phdr = io.read_flat(directory / "phi_star")
    decoder = Decoder(int(phdr["in_dim"]), int(phdr["out_dim"]), int(phdr["hidden"]))
    phi = ParamVector.from_layout(decoder.layout(), phi_vals)
    gidx, plan_hdr = io.read_flat(directory / "plan")
    offsets = io.ints(plan_hdr["offsets"])
    counts = io.ints(plan_hdr["counts"])
    gidx = gidx.astype(np.int64)
    per, start = [], 0
    for off, k in zip(offsets, counts):
        per.append(gidx[start:start + k] - off)
        start += k
    plan = ProjectionPlan(tuple(plan_hdr["names"].split()), tuple(offsets),
                          tuple(io.ints(plan_hdr["sizes"])), tuple(per),
                          float(plan_hdr["rho"]), int(plan_hdr["seed"]))
    _, cfg_rows = io.read_csv(directory / "poison_config.csv")
    cfg = {}
    for k, v in cfg_rows:
        field_type = type(getattr(PoisonConfig(), k))
        cfg[k] = field_type(float(v)) if field_type is int else field_type(v)
    _, curve_rows = io.read_csv(directory / "loss_curve.csv")
    theta0 = None
    if (directory / "theta0.bin").exists():
        theta0 = layout.replace(io.read_flat(directory / "theta0")[0])
    return PoisonRun(
        theta_star=layout.replace(theta),
        phi_star=phi,
        plan=plan,
        decoder=decoder,
        loss_curve=[float(r[1]) for r in curve_rows],
        config=PoisonConfig(**cfg),
        theta0=theta0,
        aux_id="" if hdr.get("aux", "-") == "-" else hdr["aux"],
        stopped=hdr.get("stopped", "iterations"),
    )
