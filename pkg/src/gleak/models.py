"""Small dense classifiers: linear heads and MLPs over a flat parameter vector."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Tensor

ACTIVATIONS = ("relu", "tanh")
INIT_SCHEMES = ("random", "xavier", "he", "zero")
LEAKY_SLOPE = 0.01
RANDOM_STD = 0.02


@dataclass(frozen=True)
class ModelSpec:
    layer_dims: tuple
    activations: tuple = ()
    has_bias: tuple = ()

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        n_layers = len(dims) - 1
        if n_layers < 1:
            raise ValueError("ModelSpec needs at least one layer (two widths)")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer widths must be positive, got {dims}")
        if dims[-1] < 2:
            raise ValueError(f"class count must be >= 2, got {dims[-1]}")
        acts = tuple(self.activations)
        if len(acts) != n_layers - 1:
            raise ValueError(
                f"expected {n_layers - 1} hidden activations, got {len(acts)}"
            )
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}; choose from {ACTIVATIONS}")
        object.__setattr__(self, "activations", acts)
        bias = tuple(bool(b) for b in self.has_bias) if self.has_bias else (True,) * n_layers
        if len(bias) != n_layers:
            raise ValueError(f"has_bias needs {n_layers} flags, got {len(bias)}")
        object.__setattr__(self, "has_bias", bias)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def layout(self) -> list[tuple]:
        out = []
        for l in range(self.n_layers):
            din, dout = self.layer_dims[l], self.layer_dims[l + 1]
            out.append((f"layer{l}.weight", (din, dout)))
            if self.has_bias[l]:
                out.append((f"layer{l}.bias", (dout,)))
        return out

    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())

    def weight_names(self) -> list[str]:
        return [f"layer{l}.weight" for l in range(self.n_layers)]

    def last_layer(self) -> int:
        return self.n_layers - 1

    def empty_params(self) -> ParamVector:
        return ParamVector.from_layout(self.layout())

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "activations": list(self.activations),
            "has_bias": list(self.has_bias),
        }


def linear_head(m: int, C: int) -> ModelSpec:
    return ModelSpec((m, C))


def mlp(*dims: int, activation: str = "relu") -> ModelSpec:
    return ModelSpec(tuple(dims), (activation,) * (len(dims) - 2))


@dataclass(frozen=True)
class Batch:
    """B samples in [0, 1]^m with integer labels."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        x = np.clip(np.array(self.x, dtype=np.float64), 0.0, 1.0)
        if x.ndim != 2:
            raise ValueError(f"batch x must be [B x m], got shape {x.shape}")
        y = np.array(self.y, dtype=np.int64).reshape(-1)
        if x.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")
        if y.shape[0] != x.shape[0]:
            raise ValueError(f"{x.shape[0]} samples but {y.shape[0]} labels")
        if y.min() < 0 or (self.num_classes is not None and y.max() >= self.num_classes):
            raise ValueError(f"label out of range [0, {self.num_classes})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    def __len__(self):
        return self.size


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = "dataset"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.clip(np.array(self.x, dtype=np.float64), 0.0, 1.0)
        y = np.array(self.y, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError(f"dataset shapes disagree: x {x.shape}, y {y.shape}")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"label out of range [0, {self.num_classes})")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.name, dict(self.meta))

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(self.x[idx], self.y[idx], self.num_classes)

    def batches(self, B: int, stratified: bool = False, rng=None) -> list[Batch]:
        """Split into full batches of ``B`` (a trailing partial batch is dropped).

        ``stratified`` draws each batch round-robin over classes so that
        batches with ``B <= C`` carry unique labels.
        """
        order = batch_indices(self.y, B, self.num_classes, stratified, rng)
        return [self.batch(ix) for ix in order]


def batch_indices(y, B: int, C: int, stratified: bool, rng=None) -> list[np.ndarray]:
    y = np.asarray(y)
    n = y.size
    if B < 1:
        raise ValueError("batch size must be >= 1")
    if not stratified:
        idx = np.arange(n) if rng is None else rng.permutation(n)
        return [idx[i:i + B] for i in range(0, n - B + 1, B)]
    pools = []
    for k in range(C):
        members = np.flatnonzero(y == k)
        if rng is not None:
            members = rng.permutation(members)
        pools.append(list(members))
    out = []
    k0 = 0
    while True:
        batch = []
        k = k0
        tries = 0
        while len(batch) < B and tries < C * B:
            if pools[k % C]:
                batch.append(pools[k % C].pop(0))
            k += 1
            tries += 1
        if len(batch) < B:
            break
        out.append(np.asarray(batch))
        k0 = (k0 + B) % C
    return out


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def he_gain(slope: float = LEAKY_SLOPE) -> float:
    return float(np.sqrt(2.0 / (1.0 + slope**2)))


def init(spec: ModelSpec, scheme: str, seed) -> ParamVector:
    """Draw initial parameters. Biases start at zero under every scheme.

    random: N(0, 0.02^2); xavier: U(-a, a) with a = sqrt(6 / (fan_in + fan_out));
    he: N(0, (2 / fan_in) * gain^2) with the leaky-ReLU gain sqrt(2 / (1 + 0.01^2));
    zero: all zeros.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = spec.empty_params()
    vals = np.zeros(len(params))
    for seg in params.segments:
        if not seg.name.endswith(".weight"):
            continue
        fan_in, fan_out = seg.shape
        if scheme == "random":
            w = rng.normal(0.0, RANDOM_STD, seg.shape)
        elif scheme == "xavier":
            a = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-a, a, seg.shape)
        elif scheme == "he":
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in) * he_gain(), seg.shape)
        else:
            w = np.zeros(seg.shape)
        vals[seg.offset:seg.stop] = w.reshape(-1)
    return params.replace(vals)


# ---------------------------------------------------------------------------
# forward / loss
# ---------------------------------------------------------------------------


def _theta(params) -> Tensor:
    if isinstance(params, ParamVector):
        return ad._const(params.values)
    return ad.as_tensor(params)


def forward(spec: ModelSpec, params, x) -> Tensor:
    """Logits [B x C] of the affine + activation chain.

    ``params`` is a ParamVector or a flat Tensor laid out as ``spec.layout()``.
    """
    theta = _theta(params)
    if theta.shape != (spec.num_params(),):
        raise ValueError(
            f"forward: parameter vector has shape {theta.shape}, model needs ({spec.num_params()},)"
        )
    h = ad.as_tensor(x)
    if h.ndim != 2 or h.shape[1] != spec.input_dim:
        raise ValueError(f"forward: input shape {h.shape} does not match input dim {spec.input_dim}")
    off = 0
    for l in range(spec.n_layers):
        din, dout = spec.layer_dims[l], spec.layer_dims[l + 1]
        W = ad.reshape(theta[off:off + din * dout], (din, dout))
        off += din * dout
        h = ad.matmul(h, W)
        if spec.has_bias[l]:
            h = h + theta[off:off + dout]
            off += dout
        if l < spec.n_layers - 1:
            h = ad.relu(h) if spec.activations[l] == "relu" else ad.tanh(h)
    return h


def loss(logits, y) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    return ad.softmax_cross_entropy(logits, y)


def batch_loss(spec: ModelSpec, params, x, y) -> Tensor:
    return loss(forward(spec, params, x), y)


def predict(spec: ModelSpec, params, x) -> np.ndarray:
    with ad.no_grad():
        logits = forward(spec, params, x).data
    # argmax picks the lowest index among ties
    return np.argmax(logits, axis=1)


def evaluate_accuracy(spec: ModelSpec, params, dataset) -> float:
    """Fraction of samples whose argmax logit equals the label (ties -> lowest class)."""
    x = dataset.x
    y = np.asarray(dataset.y)
    if y.size == 0:
        return float("nan")
    if y.max() >= spec.num_classes:
        raise ValueError("dataset labels exceed the model's class count")
    return float(np.mean(predict(spec, params, x) == y))
