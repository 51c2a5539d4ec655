"""Dense tensors with reverse-mode automatic differentiation.

The primitive set is small on purpose: it is exactly what the MLP fields,
the volume-rendering quadrature and every training loss need.  Values live
in numpy arrays; shape rules follow numpy broadcasting for elementwise ops
and ``np.matmul`` for ``matmul``.

A graph is recorded only when at least one operand requires a gradient.
``backward`` walks the recorded graph once in reverse topological order and
then releases it, so a second call on the same root raises
:class:`GraphConsumedError`.
"""

from __future__ import annotations

import contextlib
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_log = logging.getLogger(__name__)

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    """A forward op produced NaN or inf from its inputs."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


class GraphConsumedError(AutodiffError, RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r}{label})"

    __hash__ = object.__hash__

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_finite(out: np.ndarray, op: str) -> None:
    # a single reduction catches NaN/inf; re-check exactly only on a hit (overflow in the sum)
    if out.size == 0:
        return
    with np.errstate(over="ignore", invalid="ignore"):
        total = out.sum()
    if not np.isfinite(total) and not np.isfinite(out).all():
        raise NonFiniteError(op)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(out: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(out, op)
    t = Tensor(out)
    t.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, "mul", (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def back(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, "div", (a, b), back)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const(b, a)
    if isinstance(b, Tensor):
        return _const(a, b), b
    return as_tensor(a), as_tensor(b)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul supports 2-D operands only")
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, "matmul", (a, b), back)


# -- elementwise unary ----------------------------------------------------

def sin(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.sin(xd), "sin", (x,), lambda g: (g * np.cos(xd),))


def cos(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.cos(xd), "cos", (x,), lambda g: (-g * np.sin(xd),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make(out, "log", (x,), lambda g: (g / xd,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return _make(out, "relu", (x,), lambda g: (g * (out > 0),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1 - out),))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    sgn = np.sign(x.data)  # subgradient 0 at 0
    return _make(np.abs(x.data), "abs", (x,), lambda g: (g * sgn,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, "square", (x,), lambda g: (2 * g * xd,))


def sqrt(x) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1), 0)
        return (g * d,)

    return _make(out, "sqrt", (x,), back)


# -- reductions -------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g: np.ndarray, shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims))
    return _make(out, "sum", (x,), lambda g: (_expand(g, shape, axes, keepdims),))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    n = int(np.prod([shape[a] for a in axes])) if axes else 1
    out = np.asarray(x.data.mean(axis=axes, keepdims=keepdims))
    return _make(out, "mean", (x,), lambda g: (_expand(g, shape, axes, keepdims) / n,))


def _extreme(x, axis, keepdims, fn, name) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = np.asarray(fn(x.data, axis=axes, keepdims=keepdims))
    shape = x.shape

    def back(g):
        full = out if keepdims else np.expand_dims(out, axes)
        hit = x.data == full
        # ties share the gradient evenly
        count = hit.sum(axis=axes, keepdims=True)
        return (_expand(g, shape, axes, keepdims) * hit / count,)

    return _make(out, name, (x,), back)


def max_(x, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(x, axis, keepdims, np.max, "max")


def min_(x, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(x, axis, keepdims, np.min, "min")


# -- structural ---------------------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].ndim
    if any(t.ndim != ref for t in ts):
        raise ShapeError("concat: operands differ in rank")
    ax = axis % ref
    try:
        out = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for i, t in enumerate(ts):
            if not t.requires_grad:
                grads.append(None)
                continue
            idx[ax] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(idx)])
        return grads

    return _make(out, "concat", tuple(ts), back)


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data
    out = x.data[index]
    shape = x.shape
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), "slice", (x,), back)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast: {x.shape} -> {shape}") from exc
    src = x.shape
    return _make(np.array(out), "broadcast", (x,), lambda g: (_unbroadcast(g, src),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {src} -> {shape}") from exc
    return _make(out, "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, "transpose", (x,), lambda g: (np.transpose(g, inv),))


# -- composites (not primitives, built from the set above) ------------------

def softplus(x) -> Tensor:
    """log(1 + e^x), evaluated as max(x, 0) + log1p(e^{-|x|}); derivative sigmoid(x)."""
    x = as_tensor(x)
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = (np.maximum(xd, 0) + np.log1p(e)).astype(x.dtype, copy=False)
    # a composite of relu and abs would take the 0 subgradient at x == 0
    sig = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _make(out, "softplus", (x,), lambda g: (g * sig,))


# -- backward -----------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) for every leaf that requires a gradient.

    Returns a map from leaf tensor to gradient array (also stored on
    ``leaf.grad``).  The recorded graph is released afterwards.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise GraphConsumedError("graph for this root was already consumed by backward()")
    if not root.requires_grad:
        return {}

    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.asarray(pg, dtype=parent.dtype)
        # release the graph as we go
        node._parents = ()
        node._backward = None
        node._consumed = True
    root._consumed = True
    return leaves


def grad(fn: Callable[..., Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    """Convenience: zero grads, evaluate ``fn()``, return gradients of params."""
    for p in params:
        p.grad = None
    out = fn()
    backward(out)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``param`` (in place)."""
    out = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2 * h)
    return out


# -- optimizer ----------------------------------------------------------------

def exponential_decay(lr_init: float, lr_final: float, total_steps: int) -> Callable[[int], float]:
    """Log-linear interpolation from lr_init to lr_final over total_steps."""

    def schedule(step: int) -> float:
        if total_steps <= 0 or lr_init == 0:
            return lr_init
        frac = min(max(step / total_steps, 0.0), 1.0)
        return float(math.exp((1 - frac) * math.log(lr_init) + frac * math.log(lr_final)))

    return schedule


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    skipped: int = 0
    schedule: Callable[[int], float] = field(default=lambda step: 1e-3)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Sequence[Tensor], schedule: Callable[[int], float] | float = 1e-3, **kw) -> OptimizerState:
    if not callable(schedule):
        lr = float(schedule)
        schedule = lambda step: lr  # noqa: E731
    return OptimizerState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
        schedule=schedule,
        **kw,
    )


def optimizer_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState) -> bool:
    """One bias-corrected Adam update, in place.

        m <- b1 m + (1 - b1) g
        v <- b2 v + (1 - b2) g^2
        p <- p - lr(step) * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)

    where t is the step count after increment.  A step whose gradients
    contain NaN/inf is skipped entirely (params, moments and the step count
    stay untouched) and ``False`` is returned.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    gs = []
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        gs.append(g)
    if not all(np.isfinite(g).all() for g in gs):
        state.skipped += 1
        _log.warning("non-finite gradient at step %d; update skipped", state.step)
        return False

    lr = state.schedule(state.step)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for p, g, m, v in zip(params, gs, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        upd = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= upd.astype(p.dtype, copy=False)
    return True


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"SLCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")


def save_checkpoint(path, params: Iterable[Tensor]) -> None:
    """Write parameters as ``<magic, u32 version, u64 count, u32 bytes-per-value>``
    followed by every value, little-endian, in declaration order (C order
    within each tensor)."""
    params = list(params)
    dtypes = {p.dtype for p in params}
    if len(dtypes) > 1:
        raise ValueError(f"mixed parameter precisions: {dtypes}")
    dt = np.dtype(dtypes.pop() if dtypes else TRAIN_DTYPE)
    count = sum(p.size for p in params)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, count, dt.itemsize))
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype=dt.newbyteorder("<")).tobytes())


def load_checkpoint(path, params: Sequence[Tensor]) -> None:
    """Fill ``params`` (whose shapes define the layout) from a checkpoint."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, version, count, width = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    expected = sum(p.size for p in params)
    if count != expected:
        raise ValueError(f"{path}: holds {count} values, parameters need {expected}")
    dt = np.dtype({4: "<f4", 8: "<f8"}[width])
    values = np.frombuffer(blob, dtype=dt, offset=_HEADER.size, count=count)
    pos = 0
    for p in params:
        p.data = values[pos:pos + p.size].reshape(p.shape).astype(dt.newbyteorder("="), copy=True)
        pos += p.size
