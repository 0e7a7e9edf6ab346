"""Reverse-mode automatic differentiation over dense float64 arrays.

Every vector-Jacobian product is itself written in terms of ``Tensor`` ops,
so calling :func:`grad` with ``create_graph=True`` yields gradients that are
nodes of the graph and can be differentiated again (gradients of functions
of gradients, Hessian-vector products, gradient-matching objectives).

The graph is implicit: each non-leaf tensor keeps links to the tensors it
was computed from together with the vjp closures for each link. A
topological order is materialised on demand by :func:`topological_order`.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _enable_grad(flag: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = flag
    return prev


class Tensor:
    """Dense float64 array with an optional link into the differentiation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "op", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor data must be finite (got NaN or Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self.op = "leaf"

    @classmethod
    def _node(cls, data: np.ndarray, op: str, links) -> "Tensor":
        # internal fast path: no copy, no finiteness check
        t = cls.__new__(cls)
        t.data = data
        t.op = op
        if _GRAD_ENABLED:
            links = tuple((p, fn) for p, fn in links if p.requires_grad)
        else:
            links = ()
        t._parents = links
        t.requires_grad = bool(links)
        return t

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def parents(self) -> tuple:
        return tuple(p for p, _ in self._parents)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t._parents = ()
        t.op = "leaf"
        return t

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _const(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t._parents = ()
    t.op = "const"
    return t


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and x.shape[lead + i] != 1
    )
    out = x.data.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    out = out.reshape(shape)
    src_shape = x.shape
    return Tensor._node(out, "sum_to", ((x, lambda g: broadcast_to(g, src_shape)),))


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    out = np.broadcast_to(x.data, shape).copy()
    src_shape = x.shape
    return Tensor._node(out, "broadcast_to", ((x, lambda g: sum_to(g, src_shape)),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    src_shape = x.shape
    return Tensor._node(out, "reshape", ((x, lambda g: reshape(g, src_shape)),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError(f"transpose: expected a 2-D tensor, got shape {x.shape}")
    return Tensor._node(x.data.T.copy(), "transpose", ((x, lambda g: transpose(g)),))


def _normalize_key(key):
    if isinstance(key, list):
        return np.asarray(key, dtype=np.intp)
    return key


def getitem(x: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; the vjp scatters back into zeros."""
    key = _normalize_key(key)
    out = x.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    else:
        out = out.copy()
    src_shape = x.shape
    return Tensor._node(out, "getitem", ((x, lambda g: scatter(g, key, src_shape)),))


def _is_basic(key) -> bool:
    if isinstance(key, tuple):
        return all(isinstance(k, (slice, int)) for k in key)
    return isinstance(key, (slice, int))


def scatter(x: Tensor, key, shape: tuple) -> Tensor:
    """Place ``x`` into a zero array of ``shape`` at ``key`` (adjoint of indexing)."""
    out = np.zeros(shape)
    if _is_basic(key):
        out[key] = x.data
    else:
        np.add.at(out, key, x.data)
    return Tensor._node(out, "scatter", ((x, lambda g: getitem(g, key)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    links = []
    start = 0
    for t in tensors:
        n = t.shape[axis]
        key = (slice(None),) * (axis % out.ndim) + (slice(start, start + n),)
        links.append((t, (lambda k: lambda g: getitem(g, k))(key)))
        start += n
    return Tensor._node(out, "concat", links)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._node(
        a.data + b.data,
        "add",
        ((a, lambda g: sum_to(g, sa)), (b, lambda g: sum_to(g, sb))),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._node(
        a.data - b.data,
        "sub",
        ((a, lambda g: sum_to(g, sa)), (b, lambda g: sum_to(scale(g, -1.0), sb))),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._node(
        a.data * b.data,
        "mul",
        ((a, lambda g: sum_to(mul(g, b), sa)), (b, lambda g: sum_to(mul(g, a), sb))),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    sa, sb = a.shape, b.shape
    out = Tensor._node(a.data / b.data, "div", ())
    out._parents = ()
    links = ((a, lambda g: sum_to(div(g, b), sa)),
             (b, lambda g: sum_to(scale(div(mul(g, out), b), -1.0), sb)))
    return _attach(out, links)


def _attach(out: Tensor, links) -> Tensor:
    # used by ops whose vjp needs the output tensor itself
    if _GRAD_ENABLED:
        links = tuple((p, fn) for p, fn in links if p.requires_grad)
    else:
        links = ()
    out._parents = links
    out.requires_grad = bool(links)
    return out


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return Tensor._node(x.data * c, "scale", ((x, lambda g: scale(g, c)),))


def mul_const(x: Tensor, arr: np.ndarray) -> Tensor:
    """Elementwise product with a constant array (no gradient to the constant)."""
    return Tensor._node(x.data * arr, "mul_const", ((x, lambda g: mul_const(g, arr)),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return Tensor._node(
        a.data @ b.data,
        "matmul",
        ((a, lambda g: matmul(g, transpose(b))), (b, lambda g: matmul(transpose(a), g))),
    )


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    kept = x.data.sum(axis=axis, keepdims=True).shape
    src_shape = x.shape
    return Tensor._node(
        out, "sum", ((x, lambda g: broadcast_to(reshape(g, kept), src_shape)),)
    )


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def l2_norm_sq(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._node(
        np.asarray(np.sum(x.data * x.data)),
        "l2_norm_sq",
        ((x, lambda g: mul(scale(x, 2.0), g)),),
    )


def dot(a, b) -> Tensor:
    return sum_(mul(a, b))


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = (x.data > 0).astype(np.float64)
    return Tensor._node(x.data * mask, "relu", ((x, lambda g: mul_const(g, mask)),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor._node(np.tanh(x.data), "tanh", ())
    return _attach(out, ((x, lambda g: mul(g, sub(1.0, mul(out, out)))),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor._node(np.exp(x.data), "exp", ())
    return _attach(out, ((x, lambda g: mul(g, out)),))


def log(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._node(np.log(x.data), "log", ((x, lambda g: div(g, x)),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor._node(np.sqrt(x.data), "sqrt", ())
    return _attach(out, ((x, lambda g: scale(div(g, out), 0.5)),))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return Tensor._node(np.abs(x.data), "abs", ((x, lambda g: mul_const(g, sign)),))


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = Tensor._node(e / e.sum(axis=-1, keepdims=True), "softmax", ())

    def vjp(g):
        inner = sum_(mul(g, out), axis=-1, keepdims=True)
        return mul(out, sub(g, inner))

    return _attach(out, ((x, vjp),))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` [B x C] against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: logits must be [B x C], got {logits.shape}")
    B, C = logits.shape
    if labels.shape != (B,):
        raise ValueError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match batch {B}"
        )
    if B and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {C})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    value = np.asarray(np.mean(lse - z[np.arange(B), labels]))
    onehot = np.zeros((B, C))
    onehot[np.arange(B), labels] = 1.0

    def vjp(g):
        resid = sub(softmax(logits), _const(onehot))
        return mul(resid, scale(g, 1.0 / B))

    return Tensor._node(value, "softmax_cross_entropy", ((logits, vjp),))


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def topological_order(output: Tensor) -> list[Tensor]:
    """Nodes reachable from ``output`` that require grad, inputs before users."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, _ in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt, create_graph: bool = False, grad_output=None):
    """Gradient of the scalar ``output`` with respect to ``wrt``.

    ``wrt`` may be a single tensor or a sequence; the return value mirrors
    it. Tensors that do not influence ``output`` get zero gradients. With
    ``create_graph=True`` the returned gradients are recorded and can be
    differentiated again.
    """
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    if grad_output is None and output.shape != ():
        raise ValueError(f"grad: output must be a scalar, got shape {output.shape}")
    prev = _enable_grad(create_graph and _GRAD_ENABLED)
    try:
        seed = _const(np.ones(output.shape)) if grad_output is None else as_tensor(grad_output)
        grads: dict[int, Tensor] = {}
        if output.requires_grad or any(t is output for t in targets):
            grads[id(output)] = seed
        if output.requires_grad:
            for node in reversed(topological_order(output)):
                g = grads.get(id(node))
                if g is None:
                    continue
                for parent, fn in node._parents:
                    gp = fn(g)
                    key = id(parent)
                    if key in grads:
                        grads[key] = add(grads[key], gp)
                    else:
                        grads[key] = gp
        result = []
        for t in targets:
            g = grads.get(id(t))
            result.append(g if g is not None else _const(np.zeros(t.shape)))
    finally:
        _enable_grad(prev)
    return result[0] if single else result


def hvp(output: Tensor, wrt: Tensor, direction) -> np.ndarray:
    """Hessian-vector product (d^2 output / d wrt^2) . direction.

    ``output`` must have been computed from ``wrt`` with recording enabled.
    Computed by differentiating <grad(output, wrt), direction>.
    """
    v = np.asarray(direction, dtype=np.float64)
    if v.shape != wrt.shape:
        raise ValueError(f"hvp: direction shape {v.shape} does not match {wrt.shape}")
    g = grad(output, wrt, create_graph=True)
    inner = dot(g, _const(v))
    return grad(inner, wrt).data.copy()


# ---------------------------------------------------------------------------
# flat parameter vectors
# ---------------------------------------------------------------------------


class Segment(NamedTuple):
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 vector indexed by ordered, contiguous named segments."""

    segments: tuple
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        segs = tuple(Segment(s[0], tuple(s[1]), int(s[2])) for s in self.segments)
        object.__setattr__(self, "segments", segs)
        vals = np.array(self.values, dtype=np.float64).reshape(-1)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        pos = 0
        for s in segs:
            if s.offset != pos:
                raise ValueError(f"segment {s.name!r} starts at {s.offset}, expected {pos}")
            pos = s.stop
        if pos != vals.size:
            raise ValueError(f"segments cover {pos} entries but vector has {vals.size}")

    @classmethod
    def from_layout(cls, layout: Iterable[tuple], values=None) -> "ParamVector":
        segs, off = [], 0
        for name, shape in layout:
            seg = Segment(name, tuple(shape), off)
            segs.append(seg)
            off = seg.stop
        vals = np.zeros(off) if values is None else values
        return cls(tuple(segs), vals)

    def __len__(self) -> int:
        return self.values.size

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def segment(self, name: str) -> Segment:
        for s in self.segments:
            if s.name == name:
                return s
        raise KeyError(name)

    def get(self, name: str) -> np.ndarray:
        s = self.segment(name)
        return self.values[s.offset:s.stop].reshape(s.shape)

    def replace(self, values) -> "ParamVector":
        return ParamVector(self.segments, values)

    def with_segment(self, name: str, arr) -> "ParamVector":
        s = self.segment(name)
        vals = self.values.copy()
        vals[s.offset:s.stop] = np.asarray(arr, dtype=np.float64).reshape(-1)
        return self.replace(vals)

    def tensor(self, requires_grad: bool = True) -> Tensor:
        return Tensor(self.values, requires_grad=requires_grad)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.segments == other.segments


def param_grad(fn: Callable[[Tensor], Tensor], params: ParamVector) -> ParamVector:
    """Evaluate ``fn`` at ``params`` and return its gradient as a ParamVector."""
    theta = params.tensor()
    out = fn(theta)
    return params.replace(grad(out, theta).data)


def per_sample_grads(loss_fn, params: ParamVector, x, y) -> list[ParamVector]:
    """Gradients of ``loss_fn(theta, x_i, y_i)`` for each row, one backward pass each."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise ValueError("per_sample_grads: empty batch")
    out = []
    for i in range(x.shape[0]):
        theta = params.tensor()
        loss = loss_fn(theta, _const(x[i:i + 1]), y[i:i + 1])
        out.append(params.replace(grad(loss, theta).data))
    return out


def leaf(arr: np.ndarray, requires_grad: bool = True) -> Tensor:
    """Leaf over ``arr`` without copying or validation (internal hot paths)."""
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = bool(requires_grad)
    t._parents = ()
    t.op = "leaf"
    return t
