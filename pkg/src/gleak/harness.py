"""Experiment pipeline: data, poison, capture, attack, detect, lambda, landscape, report.

Each stage reads what earlier stages persisted under the run directory and
writes its own artifacts plus a ``rows/<stage>.jsonl`` fragment of metric
rows, so stages can be re-run one at a time from the CLI.
"""
from __future__ import annotations

import json
import math
import re
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import eggv, fl, io, lambda_analysis, metrics, pgla
from .autodiff import ParamVector
from .config import ExperimentConfig, from_dict, parse_text
from .data import ingest_dataset, synth_dataset, write_csv_dataset
from .models import Batch, Dataset, ModelSpec, evaluate_accuracy, init
from .seeding import derive_seed, rng_for

STAGES = ("data", "poison", "capture", "attack", "detect", "lambda", "landscape")
COLUMNS = ("run_id", "round", "client", "batch", "metric", "sample", "value")
SERVER = -1  # client id used for server-side rows (poisoning)
_CAPTURE_STEM = re.compile(r"grad_r\d+_c\d+_b\d+")

__all__ = ["RunReport", "run_experiment", "run_stage", "emit_report", "load_report",
           "evaluate_accuracy", "STAGES", "COLUMNS"]


@dataclass
class RunReport:
    config: dict
    rows: list = field(default_factory=list)
    stages: list = field(default_factory=list)  # (stage, status, message)
    loss_curves: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def metric(self, name: str) -> list:
        return [r for r in self.rows if r[4] == name]

    def values(self, name: str) -> np.ndarray:
        return np.array([r[6] for r in self.metric(name)], dtype=np.float64)

    def failed_stages(self) -> list:
        return [s for s in self.stages if s[1] == "failed"]


class Run:
    """Shared context of one experiment: config, run directory, seeds."""

    def __init__(self, cfg: ExperimentConfig, out: Path | str | None = None):
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.output_dir)
        self.spec: ModelSpec = cfg.spec()
        self.master = int(cfg.master_seed)

    def seed(self, stage: str, index: int = 0) -> int:
        return derive_seed(self.master, stage, index)

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def write_rows(self, stage: str, rows) -> None:
        p = self.path("rows", f"{stage}.jsonl")
        p.parent.mkdir(parents=True, exist_ok=True)
        with p.open("w") as f:
            for r in rows:
                f.write(_row_json(r) + "\n")

    # -- persisted handoff -------------------------------------------------

    def dataset(self, name: str) -> Dataset:
        p = self.path("data", f"{name}.csv")
        if not p.exists():
            raise FileNotFoundError(f"{p} missing; run the data stage first")
        return ingest_dataset(p, "csv", self.spec.num_classes)

    def params(self, name: str) -> ParamVector:
        vals, _ = io.read_flat(self.path("model", name))
        return self.spec.empty_params().replace(vals)

    def captures(self) -> list[fl.GradientCapture]:
        d = self.path("captures")
        stems = sorted(p.with_suffix("") for p in d.glob("grad_*.hdr")
                       if _CAPTURE_STEM.fullmatch(p.stem))
        if not stems:
            raise FileNotFoundError(f"no captures under {d}; run the capture stage first")
        return [fl.load_capture(s, self.spec) for s in stems]

    def truth(self, cap: fl.GradientCapture) -> Batch:
        x, hdr = io.read_flat(self.path("captures", fl.capture_stem(cap) + "_truth"))
        return Batch(x.reshape(int(hdr["B"]), -1), io.ints(hdr["labels"]), self.spec.num_classes)

    def image_shape(self):
        if self.cfg.image_shape is not None:
            return tuple(self.cfg.image_shape)
        side = int(round(math.sqrt(self.spec.input_dim)))
        return (side, side) if side * side == self.spec.input_dim else (1, self.spec.input_dim)


def _row(run: Run, rnd, client, batch, metric, sample, value) -> tuple:
    return (run.cfg.run_id, int(rnd), int(client), int(batch), metric, int(sample), float(value))


def _row_json(r) -> str:
    return json.dumps(dict(zip(COLUMNS, r)))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _make_dataset(run: Run, section, name: str, structure_default: int) -> Dataset:
    if section.path is not None:
        return ingest_dataset(section.path, section.format, run.spec.num_classes)
    seed = section.seed if section.seed is not None else run.seed(name)
    structure = section.structure_seed if section.structure_seed is not None else structure_default
    return synth_dataset(section.kind, run.spec.input_dim, run.spec.num_classes, section.n,
                         seed, structure_seed=structure, noise=section.noise,
                         image_shape=run.cfg.image_shape)


def stage_data(run: Run) -> list:
    cfg = run.cfg
    structure = (cfg.dataset.structure_seed if cfg.dataset.structure_seed is not None
                 else run.seed("structure"))
    target = _make_dataset(run, cfg.dataset, "dataset", structure)
    _check_classes(run, target, "dataset")
    write_csv_dataset(run.path("data", "target.csv"), target)
    if cfg.aux_dataset is not None:
        aux = _make_dataset(run, cfg.aux_dataset, "aux_dataset", structure)
        _check_classes(run, aux, "aux_dataset")
        write_csv_dataset(run.path("data", "aux.csv"), aux)
    return []


def _check_classes(run: Run, ds: Dataset, name: str) -> None:
    if ds.num_classes != run.spec.num_classes or ds.dim != run.spec.input_dim:
        raise ValueError(f"{name}: {ds.dim} features / {ds.num_classes} classes, model expects "
                         f"{run.spec.input_dim} / {run.spec.num_classes}")


def stage_poison(run: Run) -> list:
    cfg = run.cfg
    seed = cfg.init.seed if cfg.init.seed is not None else run.seed("init")
    theta0 = init(run.spec, cfg.init.scheme, seed)
    io.write_flat(run.path("model", "theta0"), theta0.values, {"scheme": cfg.init.scheme})
    poisoned = theta0
    rows = []
    kind = cfg.poison.kind
    rnd = cfg.poison.round
    if kind == "eggv":
        aux = run.dataset("aux")
        batches = aux.batches(cfg.batch_size, stratified=True, rng=rng_for(run.master, "aux_batches"))
        pr = eggv.poison_model(run.spec, theta0, batches, cfg.poison.poison_config(run.seed("poison")),
                               aux_id="aux")
        eggv.save_poison_run(run.path("poison"), pr)
        poisoned = pr.theta_star
        rows += [_row(run, rnd, SERVER, -1, "poison_initial_loss", -1, pr.initial_loss),
                 _row(run, rnd, SERVER, -1, "poison_final_loss", -1, pr.final_loss),
                 _row(run, rnd, SERVER, -1, "poison_iterations", -1, len(pr.loss_curve))]
    elif kind == "fishing":
        poisoned = eggv.fishing_baseline_poison(run.spec, theta0, cfg.poison.target_class,
                                                seed=run.seed("fishing"))
    io.write_flat(run.path("model", "poisoned"), poisoned.values, {"kind": kind, "round": rnd})
    return rows


def client_split(run: Run, target: Dataset) -> list[fl.ClientState]:
    cfg = run.cfg
    n = len(target)
    count = cfg.clients.count
    sizes = list(cfg.clients.sizes) if cfg.clients.sizes is not None else [n // count] * count
    if sum(sizes) > n:
        raise ValueError(f"client sizes {sizes} exceed the {n} target samples")
    order = rng_for(run.master, "clients").permutation(n)
    clients, start = [], 0
    for cid, size in enumerate(sizes):
        part = target.subset(order[start:start + size])
        start += size
        batches = part.batches(cfg.batch_size, stratified=True, rng=rng_for(run.master, "batches", cid))
        if not batches:
            raise ValueError(f"client {cid}: {size} samples cannot fill one batch of {cfg.batch_size}")
        clients.append(fl.ClientState(cid, batches))
    return clients


def stage_capture(run: Run) -> list:
    cfg = run.cfg
    target = run.dataset("target")
    clients = client_split(run, target)
    theta = run.params("theta0")
    poisoned = run.params("poisoned")
    per_sample = cfg.detect.dsnr or cfg.detect.variance
    shutil.rmtree(run.path("captures"), ignore_errors=True)
    rows = []
    for rnd in range(cfg.rounds):
        if rnd == cfg.poison.round:
            theta = poisoned
        io.write_flat(run.path("model", f"theta_r{rnd:03d}"), theta.values, {"round": rnd})
        client_grads = []
        for c in clients:
            caps = []
            for bi in range(min(cfg.repetitions, len(c.dataset))):
                batch = c.dataset[bi]
                cap = fl.client_gradient(run.spec, theta, batch, per_sample, rnd, c.id, bi)
                fl.save_capture(run.path("captures"), cap)
                io.write_flat(run.path("captures", fl.capture_stem(cap) + "_truth"), batch.x,
                              {"B": batch.size, "labels": list(batch.y)})
                rows.append(_row(run, rnd, c.id, bi, "capture_grad_norm", -1,
                                 np.linalg.norm(cap.batch_grad.values)))
                if cfg.poison.kind == "fishing" and rnd >= cfg.poison.round:
                    empty = eggv.fishing_capture_empty(cap, run.spec, cfg.poison.target_class)
                    rows.append(_row(run, rnd, c.id, bi, "fishing_empty", -1, float(empty)))
                caps.append(cap)
            mean = np.mean([k.batch_grad.values for k in caps], axis=0)
            client_grads.append(theta.replace(mean))
        update = fl.aggregate(client_grads, [c.size for c in clients])
        theta = fl.sgd_step(theta, update, cfg.lr)
    return rows


def stage_attack(run: Run) -> list:
    cfg = run.cfg
    if cfg.attack is None:
        return []
    rows = []
    shape = run.image_shape()
    for idx, cap in enumerate(run.captures()):
        theta = run.params(f"theta_r{cap.round:03d}")
        truth = run.truth(cap)
        seed = cfg.attack.seed if cfg.attack.seed is not None else run.seed("attack", idx)
        labels = truth.y if cfg.attack.use_true_labels else pgla.idlg_infer_labels(cap, run.spec)[0]
        res = pgla.reconstruct(cap, run.spec, theta, cfg.attack.attack_config(seed), truth=truth,
                               image_shape=shape, labels=labels)
        key = (cap.round, cap.client_id, cap.batch_index)
        pgla.save_result(run.path("attack"), fl.capture_stem(cap), res,
                         {"round": key[0], "client": key[1], "batch": key[2]})
        q = metrics.quality_report(res.x_hat, truth.x, shape, reconstructed=not res.failed)
        for i, (p, s) in enumerate(zip(q.per_sample_psnr, q.per_sample_ssim)):
            rows.append(_row(run, *key, "psnr", i, p))
            rows.append(_row(run, *key, "ssim", i, s))
        tmin, tpruned, tmax = metrics.table_psnr(q)
        rows += [_row(run, *key, "psnr_min", -1, tmin),
                 _row(run, *key, "psnr_pruned", -1, tpruned),
                 _row(run, *key, "psnr_max", -1, tmax),
                 _row(run, *key, "reconstructed", -1, float(not res.failed)),
                 _row(run, *key, "label_low_confidence", -1, float(res.low_confidence_labels)),
                 _row(run, *key, "match_loss", -1, res.best_loss)]
    return rows


def stage_detect(run: Run) -> list:
    cfg = run.cfg
    rows = []
    if not (cfg.detect.dsnr or cfg.detect.variance):
        return rows
    for cap in run.captures():
        key = (cap.round, cap.client_id, cap.batch_index)
        if cap.per_sample is None:
            raise ValueError(f"capture {fl.capture_stem(cap)} has no per-sample gradients")
        if cfg.detect.dsnr and len(cap.per_sample) >= 2:
            rep = metrics.d_snr(cap.per_sample, run.spec)
            rows.append(_row(run, *key, "dsnr", -1, rep.value))
            rows.append(_row(run, *key, "dsnr_degenerate", -1, float(rep.degenerate)))
            for li, name in enumerate(run.spec.weight_names()):
                rows.append(_row(run, *key, "dsnr_layer", li, rep.per_layer[name]))
        if cfg.detect.variance:
            var, mu = metrics.grad_norm_variance(cap.per_sample)
            rows.append(_row(run, *key, "grad_norm_var", -1, var))
            rows.append(_row(run, *key, "grad_norm_mean", -1, mu))
    return rows


def stage_lambda(run: Run) -> list:
    if not run.cfg.detect.lambda_profile:
        return []
    rows = []
    for cap in run.captures():
        key = (cap.round, cap.client_id, cap.batch_index)
        theta = run.params(f"theta_r{cap.round:03d}")
        lam = lambda_analysis.compute_lambda(run.spec, theta, run.truth(cap))
        prof = lambda_analysis.lambda_bias_profile(lam)
        lambda_analysis.export_lambda_csv(run.path("lambda", fl.capture_stem(cap) + ".csv"), lam)
        for k in range(lam.num_classes):
            rows.append(_row(run, *key, "lambda_max", k, prof["max_lambda"][k]))
            rows.append(_row(run, *key, "lambda_entropy", k, prof["entropy"][k]))
    return rows


def stage_landscape(run: Run) -> list:
    cfg = run.cfg
    if cfg.landscape is None:
        return []
    if cfg.poison.kind != "eggv":
        raise ValueError("landscape probing needs an eggv poisoning run (a trained decoder)")
    pr = eggv.load_poison_run(run.path("poison"), run.spec)
    aux = run.dataset("aux")
    eval_batch = aux.batches(cfg.batch_size, stratified=True, rng=rng_for(run.master, "aux_batches"))[0]
    acc_data = run.dataset("target") if cfg.landscape.accuracy else None
    grid = eggv.landscape_grid(run.spec, pr.theta_star, pr.phi_star, pr.plan, eval_batch,
                               cfg.landscape.extent, cfg.landscape.steps,
                               seed=run.seed("landscape"), decoder=pr.decoder,
                               accuracy_data=acc_data)
    io.write_csv(run.path("landscape.csv"), grid.header(), grid.rows())
    c = grid.center
    return [_row(run, cfg.poison.round, SERVER, -1, "landscape_center_score", -1, grid.scores[c])]


STAGE_FUNCS = {
    "data": stage_data,
    "poison": stage_poison,
    "capture": stage_capture,
    "attack": stage_attack,
    "detect": stage_detect,
    "lambda": stage_lambda,
    "landscape": stage_landscape,
}


def run_stage(run: Run, stage: str) -> tuple[str, str]:
    """Run one stage, persist its rows, return (status, message)."""
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    t0 = time.perf_counter()
    try:
        rows = STAGE_FUNCS[stage](run)
    except Exception as e:  # a failing stage is reported, not raised
        run.write_rows(stage, [])
        _record_timing(run, stage, time.perf_counter() - t0)
        return "failed", f"{type(e).__name__}: {e}"
    run.write_rows(stage, rows)
    _record_timing(run, stage, time.perf_counter() - t0)
    return "ok", ""


def _record_timing(run: Run, stage: str, seconds: float) -> None:
    p = run.path("timings.csv")
    p.parent.mkdir(parents=True, exist_ok=True)
    new = not p.exists()
    with p.open("a") as f:
        if new:
            f.write("stage,seconds\n")
        f.write(f"{stage},{seconds!r}\n")


def run_experiment(cfg: ExperimentConfig, out=None, stages=STAGES) -> RunReport:
    """Execute the stages in order; after a failure the remaining stages are skipped."""
    run = Run(cfg, out)
    run.out.mkdir(parents=True, exist_ok=True)
    (run.path("timings.csv")).unlink(missing_ok=True)
    run.path("config.yaml").write_text(cfg.dump())
    status = []
    failed = False
    for stage in stages:
        if failed:
            status.append((stage, "skipped", "upstream stage failed"))
            run.write_rows(stage, [])
            continue
        st, msg = run_stage(run, stage)
        status.append((stage, st, msg))
        failed = st == "failed"
    io.write_csv(run.path("stages.csv"), ["stage", "status", "message"], status)
    report = load_report(run.out)
    emit_report(report, run.out)
    return report


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def load_report(run_dir) -> RunReport:
    run_dir = Path(run_dir)
    cfg_text = (run_dir / "config.yaml").read_text() if (run_dir / "config.yaml").exists() else "{}"
    config = yaml.safe_load(cfg_text) or {}
    rows = []
    for stage in STAGES:
        p = run_dir / "rows" / f"{stage}.jsonl"
        if not p.exists():
            continue
        for line in p.read_text().splitlines():
            d = json.loads(line)
            rows.append(tuple(d[c] for c in COLUMNS))
    stages = []
    if (run_dir / "stages.csv").exists():
        _, stages = io.read_csv(run_dir / "stages.csv")
        stages = [tuple(s) for s in stages]
    curves = {}
    if (run_dir / "poison" / "loss_curve.csv").exists():
        _, curve = io.read_csv(run_dir / "poison" / "loss_curve.csv")
        curves["poison"] = [float(r[1]) for r in curve]
    timings = {}
    if (run_dir / "timings.csv").exists():
        _, t = io.read_csv(run_dir / "timings.csv")
        timings = {s: float(v) for s, v in t}
    return RunReport(config, rows, stages, curves, timings)


def emit_report(report: RunReport, out_dir, formats=("csv", "json-lines")) -> list[Path]:
    """Write report.csv / report.jsonl with a fixed column order, one row per observation.

    Timings are deliberately not part of these files, so identical runs
    produce identical bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            written.append(io.write_csv(out_dir / "report.csv", list(COLUMNS), report.rows))
        elif fmt in ("json-lines", "jsonl"):
            p = out_dir / "report.jsonl"
            with p.open("w") as f:
                for r in report.rows:
                    f.write(_row_json(r) + "\n")
            written.append(p)
        else:
            raise ValueError(f"unknown report format {fmt!r}; choose csv or json-lines")
    return written


def config_from_run(run_dir) -> ExperimentConfig:
    text = (Path(run_dir) / "config.yaml").read_text()
    raw, lines = parse_text(text, str(Path(run_dir) / "config.yaml"))
    return from_dict(raw, lines, check_paths=False)
