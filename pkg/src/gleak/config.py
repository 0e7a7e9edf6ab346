"""Experiment configuration: nested YAML, strict keys, defaults, GL_ env overrides."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import KINDS
from .eggv import PoisonConfig
from .models import INIT_SCHEMES, ModelSpec
from .pgla import AttackConfig

ENV_PREFIX = "GL_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSection:
    layer_dims: tuple = (16, 32, 4)
    activations: tuple | None = None
    has_bias: tuple | None = None

    def spec(self) -> ModelSpec:
        acts = self.activations
        if acts is None:
            acts = ("relu",) * (len(self.layer_dims) - 2)
        return ModelSpec(tuple(self.layer_dims), tuple(acts), tuple(self.has_bias or ()))


@dataclass(frozen=True)
class InitSection:
    scheme: str = "random"
    seed: int | None = None


@dataclass(frozen=True)
class DataSection:
    """Either a synthetic description (``kind``) or a file (``path``)."""

    kind: str | None = None
    m: int | None = None
    C: int | None = None
    n: int = 200
    seed: int | None = None
    structure_seed: int | None = None
    noise: float = 0.1
    path: str | None = None
    format: str | None = None

    @property
    def is_file(self) -> bool:
        return self.path is not None


@dataclass(frozen=True)
class ClientsSection:
    count: int = 1
    sizes: tuple | None = None


@dataclass(frozen=True)
class PoisonSection:
    kind: str = "none"
    iterations: int = 2000
    alpha_theta: float = 1e-3
    alpha_phi: float = 1e-2
    epsilon: float = 1e-3
    rho: float = 0.004
    decoder_hidden: int = 0
    decoder_init_scale: float = 0.01
    window: int = 50
    target_class: int = 0
    round: int = 0

    def poison_config(self, seed: int) -> PoisonConfig:
        return PoisonConfig(iterations=self.iterations, alpha_theta=self.alpha_theta,
                            alpha_phi=self.alpha_phi, epsilon=self.epsilon, rho=self.rho,
                            seed=seed, decoder_hidden=self.decoder_hidden,
                            decoder_init_scale=self.decoder_init_scale, window=self.window)


@dataclass(frozen=True)
class AttackSection:
    method: str = "dlg"
    iterations: int = 200
    step_size: float = 0.1
    tv_weight: float = 0.0
    distance: str | None = None
    restarts: int = 2
    seed: int | None = None
    step_rule: str = "normalized"
    cosine_decay: bool = True
    use_true_labels: bool = False

    def attack_config(self, seed: int) -> AttackConfig:
        return AttackConfig(method=self.method, iterations=self.iterations,
                            step_size=self.step_size, tv_weight=self.tv_weight,
                            distance=self.distance, restarts=self.restarts, seed=seed,
                            step_rule=self.step_rule, cosine_decay=self.cosine_decay)


@dataclass(frozen=True)
class DetectSection:
    dsnr: bool = True
    variance: bool = True
    lambda_profile: bool = False


@dataclass(frozen=True)
class LandscapeSection:
    extent: float = 1.0
    steps: int = 21
    accuracy: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection
    dataset: DataSection
    init: InitSection = field(default_factory=InitSection)
    aux_dataset: DataSection | None = None
    batch_size: int = 8
    clients: ClientsSection = field(default_factory=ClientsSection)
    poison: PoisonSection = field(default_factory=PoisonSection)
    attack: AttackSection | None = None
    detect: DetectSection = field(default_factory=DetectSection)
    landscape: LandscapeSection | None = None
    rounds: int = 1
    repetitions: int = 100
    lr: float = 0.1
    image_shape: tuple | None = None
    output_dir: str = "runs/default"
    master_seed: int = 0
    run_id: str = "run"

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def spec(self) -> ModelSpec:
        return self.model.spec()


SECTIONS = {
    "model": ModelSection,
    "init": InitSection,
    "dataset": DataSection,
    "aux_dataset": DataSection,
    "clients": ClientsSection,
    "poison": PoisonSection,
    "attack": AttackSection,
    "detect": DetectSection,
    "landscape": LandscapeSection,
}
REQUIRED = ("model", "dataset")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _node_to_py(node, lines: dict, path: tuple):
    """Convert a composed YAML node, recording the source line of every key path."""
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = yaml.safe_load(yaml.serialize(k))
            if key in out:
                raise ConfigError(f"line {k.start_mark.line + 1}: duplicate key {'.'.join(path + (str(key),))!r}")
            lines[path + (key,)] = k.start_mark.line + 1
            out[key] = _node_to_py(v, lines, path + (key,))
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_node_to_py(v, lines, path + (i,)) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def parse_text(text: str, source: str = "<config>") -> tuple[dict, dict]:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "unknown line"
        raise ConfigError(f"{source}: {where}: YAML parse error: {getattr(e, 'problem', e)}") from None
    lines: dict = {}
    if root is None:
        return {}, lines
    raw = _node_to_py(root, lines, ())
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: line 1: top level must be a mapping")
    return raw, lines


def _where(lines, path, source) -> str:
    line = lines.get(tuple(path))
    return f"{source}: line {line}" if line else f"{source}"


def _coerce(value, default, path, lines, source):
    """Type-check a leaf against the field's default value type."""
    where = _where(lines, path, source)
    name = ".".join(str(p) for p in path)
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: {name} must be true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: {name} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent literals without a dot ("1e-3") as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: {name} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple) or isinstance(value, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: {name} must be a list, got {value!r}")
        return tuple(value)
    return value


def _build(cls, raw, path, lines, source):
    if not isinstance(raw, dict):
        raise ConfigError(f"{_where(lines, path, source)}: {'.'.join(path)} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        kpath = path + (key,)
        if key not in fields:
            raise ConfigError(
                f"{_where(lines, kpath, source)}: unknown key {'.'.join(map(str, kpath))!r}; "
                f"allowed: {sorted(fields)}"
            )
        f = fields[key]
        if key in SECTIONS and path == ():
            if value is None and key not in REQUIRED:
                kwargs[key] = None
                continue
            kwargs[key] = _build(SECTIONS[key], value, kpath, lines, source)
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        if default is None:
            default = _FIELD_HINTS.get((cls.__name__, key))
        kwargs[key] = _coerce(value, default, kpath, lines, source)
    for name in REQUIRED if cls is ExperimentConfig else ():
        if name not in kwargs:
            raise ConfigError(f"{source}: missing required section {name!r}")
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{_where(lines, path, source)}: {e}") from None


# type hints for fields whose default is None
_FIELD_HINTS = {
    ("ModelSection", "activations"): (),
    ("ModelSection", "has_bias"): (),
    ("InitSection", "seed"): 0,
    ("DataSection", "m"): 0,
    ("DataSection", "C"): 0,
    ("DataSection", "seed"): 0,
    ("DataSection", "structure_seed"): 0,
    ("DataSection", "kind"): "",
    ("DataSection", "path"): "",
    ("DataSection", "format"): "",
    ("ClientsSection", "sizes"): (),
    ("AttackSection", "distance"): "",
    ("AttackSection", "seed"): 0,
    ("ExperimentConfig", "image_shape"): (),
}


def apply_env(raw: dict, env=None) -> dict:
    """Override keys from ``GL_SECTION__KEY=value`` (top-level: ``GL_KEY``); values parse as YAML."""
    env = os.environ if env is None else env
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for name, text in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        parts = [_env_key(p) for p in parts]
        value = yaml.safe_load(text) if text != "" else None
        target = raw
        for p in parts[:-1]:
            if not isinstance(target.get(p), dict):
                target[p] = {}
            target = target[p]
        target[parts[-1]] = value
    return raw


def _env_key(p: str) -> str:
    # C is the only upper-case key
    return "C" if p == "c" else p


def from_dict(raw: dict, lines: dict | None = None, source: str = "<config>",
              base_dir: Path | None = None, check_paths: bool = True) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, (), lines or {}, source)
    validate(cfg, lines or {}, source, base_dir, check_paths)
    return cfg


def load_config(path, env=None, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror}") from None
    raw, lines = parse_text(text, str(path))
    raw = apply_env(raw, env)
    return from_dict(raw, lines, str(path), path.parent, check_paths)


def loads_config(text: str, env=None, check_paths: bool = True) -> ExperimentConfig:
    raw, lines = parse_text(text)
    return from_dict(apply_env(raw, env if env is not None else {}), lines,
                     check_paths=check_paths)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate(cfg: ExperimentConfig, lines, source, base_dir=None, check_paths=True):
    def fail(path, msg):
        raise ConfigError(f"{_where(lines, path, source)}: {'.'.join(path)}: {msg}")

    try:
        spec = cfg.spec()
    except ValueError as e:
        fail(("model",), str(e))
    if cfg.batch_size < 1:
        fail(("batch_size",), f"must be >= 1, got {cfg.batch_size}")
    if not (0.0 < cfg.poison.rho <= 1.0):
        fail(("poison", "rho"), f"projection ratio must lie in (0, 1], got {cfg.poison.rho}")
    if cfg.poison.kind not in ("none", "eggv", "fishing"):
        fail(("poison", "kind"), f"must be none, eggv or fishing, got {cfg.poison.kind!r}")
    if cfg.poison.kind == "fishing" and not (0 <= cfg.poison.target_class < spec.num_classes):
        fail(("poison", "target_class"), f"outside [0, {spec.num_classes})")
    if cfg.poison.kind == "eggv" and cfg.aux_dataset is None:
        fail(("aux_dataset",), "eggv poisoning needs an auxiliary dataset")
    if cfg.init.scheme not in INIT_SCHEMES:
        fail(("init", "scheme"), f"unknown scheme {cfg.init.scheme!r}; choose from {INIT_SCHEMES}")
    if cfg.attack is not None:
        try:
            cfg.attack.attack_config(0)
        except ValueError as e:
            fail(("attack",), str(e))
    if cfg.rounds < 1:
        fail(("rounds",), "must be >= 1")
    if cfg.repetitions < 1:
        fail(("repetitions",), "must be >= 1")
    if cfg.clients.count < 1:
        fail(("clients", "count"), "must be >= 1")
    if cfg.clients.sizes is not None and len(cfg.clients.sizes) != cfg.clients.count:
        fail(("clients", "sizes"), f"needs {cfg.clients.count} entries")
    if cfg.landscape is not None and cfg.landscape.steps < 2:
        fail(("landscape", "steps"), "must be >= 2")
    for name in ("dataset", "aux_dataset"):
        ds = getattr(cfg, name)
        if ds is None:
            continue
        if (ds.kind is None) == (ds.path is None):
            fail((name,), "give exactly one of kind (synthetic) or path (file)")
        if ds.kind is not None:
            if ds.kind not in KINDS:
                fail((name, "kind"), f"unknown kind {ds.kind!r}; choose from {KINDS}")
            m = ds.m if ds.m is not None else spec.input_dim
            C = ds.C if ds.C is not None else spec.num_classes
            if m != spec.input_dim or C != spec.num_classes:
                fail((name,), f"dataset m={m}, C={C} does not match model {spec.input_dim}->{spec.num_classes}")
            if ds.n < C:
                fail((name, "n"), f"need n >= C ({ds.n} < {C})")
        elif check_paths:
            p = resolve(ds.path, base_dir)
            if not p.exists():
                fail((name, "path"), f"file not found: {p}")
            if ds.format not in (None, "csv", "raw_f32"):
                fail((name, "format"), f"must be csv or raw_f32, got {ds.format!r}")
    if check_paths:
        out = Path(cfg.output_dir)
        probe = out
        while not probe.exists():
            probe = probe.parent
        if not probe.is_dir() or not os.access(probe, os.W_OK | os.X_OK):
            fail(("output_dir",), f"not writable: {out}")


def resolve(p, base_dir=None) -> Path:
    """Relative data paths are looked up next to the config file first, then in the cwd."""
    p = Path(p)
    if not p.is_absolute() and base_dir is not None and (Path(base_dir) / p).exists():
        return Path(base_dir) / p
    return p
