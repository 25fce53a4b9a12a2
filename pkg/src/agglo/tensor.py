"""Dense tensors with tape-based reverse-mode automatic differentiation.

Operations are pure functions of their inputs. When a :class:`GradTape` is
active and at least one operand requires a gradient, the operation is appended
to the tape together with a closure that maps the output adjoint to input
adjoints. :func:`backward` replays the tape in reverse.

Outside of any tape nothing is recorded, so inference and benchmarking pay no
bookkeeping cost.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

EPS_DIV = 1e-9
MASK_VALUE = -1e9

FLOAT_DTYPES = (np.float32, np.float64)

_tapes: list["GradTape"] = []
_alloc_trackers: list["AllocationTracker"] = []


class Tensor:
    """Immutable dense array optionally participating in gradient tracking.

    Attributes:
        data: the row-major ``numpy`` buffer (float32 or float64).
        requires_grad: whether gradients should flow to this tensor.
        grad: adjoint buffer filled by :func:`backward` for leaf tensors.
        name: optional label, used in diagnostics and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True
        if _alloc_trackers:
            for tracker in _alloc_trackers:
                tracker.observe(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False, dtype=None, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


@dataclass(eq=False)
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass(eq=False)
class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded. ``elements`` accumulates the number of output elements produced,
    a work measure used by complexity checks.
    """

    nodes: list[_Node] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)
    elements: int = 0
    op_elements: dict[str, int] = field(default_factory=dict)

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: _Node):
        self.nodes.append(node)
        n = node.out.data.size
        self.elements += n
        self.op_elements[node.op] = self.op_elements.get(node.op, 0) + n
        for t in node.inputs:
            if t._leaf and t.requires_grad:
                self.leaves.setdefault(id(t), t)


@contextlib.contextmanager
def no_grad():
    """Suspend recording on all active tapes."""
    saved = list(_tapes)
    _tapes.clear()
    try:
        yield
    finally:
        _tapes.extend(saved)


def active_tape() -> GradTape | None:
    return _tapes[-1] if _tapes else None


class AllocationTracker:
    """Records the shape of every tensor created while active."""

    def __init__(self):
        self.shapes: list[tuple[int, ...]] = []

    def observe(self, shape):
        self.shapes.append(tuple(shape))

    @property
    def max_elements(self) -> int:
        return max((math.prod(s) for s in self.shapes), default=0)

    def __enter__(self):
        _alloc_trackers.append(self)
        return self

    def __exit__(self, *exc):
        _alloc_trackers.remove(self)
        return False


def track_allocations() -> AllocationTracker:
    return AllocationTracker()


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``out_data`` as a tensor and record it on the active tape.

    ``vjp`` receives the output adjoint and returns one adjoint (or ``None``)
    per input. It is only retained when a tape is active and some input
    requires a gradient.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        tape.record(_Node(out, tuple(inputs), vjp, op))
    return out


def _check_dtypes(*ts: Tensor):
    dts = {t.dtype for t in ts}
    if len(dts) > 1:
        raise ContractError(f"dtype mismatch: {sorted(str(d) for d in dts)}")


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Trailing-dimension broadcast of two shapes."""
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"shapes {a} and {b} are not broadcastable")
        out.append(max(da, db))
    return tuple(reversed(out))


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise -----------------------------------------------------------


def _ub(grad, t: Tensor):
    return unbroadcast(grad, t.shape) if t.requires_grad else None


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    _check_dtypes(a, b)
    broadcast_shape(a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_op(
        "add", a.data + b.data, (a, b),
        lambda g: (_ub(g, a), _ub(g, b)),
    )


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_op(
        "sub", a.data - b.data, (a, b),
        lambda g: (_ub(g, a), _ub(-g, b) if b.requires_grad else None),
    )


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_op(
        "mul", a.data * b.data, (a, b),
        lambda g: (
            _ub(g * b.data, a) if a.requires_grad else None,
            _ub(g * a.data, b) if b.requires_grad else None,
        ),
    )


def div(a, b, eps: float = EPS_DIV) -> Tensor:
    """Guarded division ``a / (b + eps)``; never produces Inf for ``b == 0``."""
    a, b = _binary_operands(a, b)
    den = b.data + b.dtype.type(eps)
    q = a.data / den

    def vjp(g):
        ga = g / den
        return _ub(ga, a), (_ub(-ga * q, b) if b.requires_grad else None)

    return make_op("div", q, (a, b), vjp)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_op("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return make_op("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    return make_op("square", x.data * x.data, (x,), lambda g: (2 * g * x.data,))


# --- shape ------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return make_op("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))
    return make_op("transpose", y, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; the adjoint is split back per input."""
    if not tensors:
        raise DimensionError("concat of an empty list")
    _check_dtypes(*tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and s != r for i, (s, r) in enumerate(zip(t.shape, ref))
        ):
            raise DimensionError(f"cannot concat shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in tensors], axis=ax)
    return make_op("concat", y, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax)))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return make_op("slice", np.ascontiguousarray(x.data[idx]), (x,), vjp)


def split(x: Tensor, n: int, axis: int = -1) -> list[Tensor]:
    ax = axis % x.ndim
    if x.shape[ax] % n:
        raise DimensionError(f"axis {axis} of {x.shape} not divisible into {n} parts")
    w = x.shape[ax] // n
    return [slice_axis(x, ax, i * w, (i + 1) * w) for i in range(n)]


# --- reductions -------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return make_op("sum", y, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else math.prod(
        x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))
    )
    return mul(sum_(x, axis, keepdims), x.dtype.type(1.0 / n))


def cumsum(x: Tensor, axis: int) -> Tensor:
    """Inclusive prefix sum; the adjoint is the reversed suffix sum."""
    ax = _check_axis(x, axis)
    y = np.cumsum(x.data, axis=ax, dtype=x.dtype)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, ax), axis=ax), ax).copy(),)

    return make_op("cumsum", y, (x,), vjp)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


# --- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., p, q] @ b[..., q, r]``."""
    a, b = _binary_matmul_operands(a, b)
    y = a.data @ b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_op("matmul", y, (a, b), vjp)


def _binary_matmul_operands(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    _check_dtypes(a, b)
    return a, b


# --- nonlinearities with stable forms ----------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; rows sum to one for any finite input."""
    ax = _check_axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (z * (g - (g * z).sum(axis=ax, keepdims=True)),)

    return make_op("softmax", z, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=ax, keepdims=True))

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=ax, keepdims=True),)

    return make_op("log_softmax", y, (x,), vjp)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood (nats) of integer ``targets``.

    ``logits`` has shape ``[..., v]`` and ``targets`` the leading shape.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} do not match targets {targets.shape}")
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    idx = targets.reshape(-1).astype(np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise DimensionError(f"target id outside [0, {v})")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(idx.size)
    nll = lse - z[rows, idx]
    n = idx.size
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, idx] -= 1
        p *= g / n
        return (p.reshape(logits.shape).astype(logits.dtype, copy=False),)

    return make_op("cross_entropy", loss, (logits,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} vs input {x.shape}")
    _check_dtypes(x, gain, bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def vjp(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op("layer_norm", y, (x, gain, bias), vjp)


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    """Gather rows of ``table`` for each integer id."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError("embedding ids must be integers")
    y = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return make_op("embedding", y, (table,), vjp)


def causal_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Causal 1-D convolution over the time axis.

    ``x`` is ``[b, t, c_in]`` and ``kernel`` is ``[w, c_in, c_out]``; tap ``j``
    reads position ``i - (w - 1) + j``, left-padded with zeros, so output ``i``
    never sees inputs after ``i``.
    """
    if x.ndim != 3 or kernel.ndim != 3 or kernel.shape[1] != x.shape[2]:
        raise DimensionError(f"causal_conv1d shapes {x.shape} and {kernel.shape}")
    _check_dtypes(x, kernel)
    b, t, c = x.shape
    w = kernel.shape[0]
    padded = np.concatenate([np.zeros((b, w - 1, c), x.dtype), x.data], axis=1)
    # cols[b, i, j, c] = padded[b, i + j, c]
    cols = np.lib.stride_tricks.sliding_window_view(padded, w, axis=1).transpose(0, 1, 3, 2)
    cols = np.ascontiguousarray(cols).reshape(b, t, w * c)
    kmat = kernel.data.reshape(w * c, -1)
    y = cols @ kmat
    inputs = (x, kernel)
    if bias is not None:
        _check_dtypes(x, bias)
        y = y + bias.data
        inputs = (x, kernel, bias)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gk = (cols.reshape(-1, w * c).T @ g2).reshape(kernel.shape)
        gcols = (g @ kmat.T).reshape(b, t, w, c)
        gpad = np.zeros_like(padded)
        for j in range(w):
            gpad[:, j:j + t] += gcols[:, :, j]
        grads = [gpad[:, w - 1:], gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make_op("causal_conv1d", y, inputs, vjp)


# --- differentiation --------------------------------------------------------


def backward(loss: Tensor, tape: GradTape | None = None, wrt: Iterable[Tensor] = ()) -> None:
    """Populate ``grad`` on every gradient-requiring leaf reachable from ``loss``.

    Leaves recorded on the tape (and any extra tensors in ``wrt``) that the
    loss does not depend on receive a zero gradient. Existing gradients are
    overwritten, not accumulated.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = active_tape()
    if tape is None:
        raise ContractError("backward called without a tape")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_adj: dict[int, np.ndarray] = {}
    if loss._leaf and loss.requires_grad:
        leaf_adj[id(loss)] = adj[id(loss)]
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            store = leaf_adj if inp._leaf else adj
            key = id(inp)
            if key in store:
                store[key] = store[key] + gi
            else:
                store[key] = gi
    targets = dict(tape.leaves)
    for t in wrt:
        targets.setdefault(id(t), t)
    if loss._leaf and loss.requires_grad:
        targets.setdefault(id(loss), loss)
    for key, leaf in targets.items():
        g = leaf_adj.get(key)
        leaf.grad = (
            np.zeros_like(leaf.data) if g is None
            else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        )


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of scalar ``f`` at ``x``."""
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = _scalar(f(Tensor(base.copy())))
        flat[i] = orig - step
        fm = _scalar(f(Tensor(base.copy())))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return float(v.data.reshape(-1)[0])
    return float(v)


def rel_error(approx: np.ndarray, exact: np.ndarray) -> float:
    """Relative error ``||approx - exact|| / max(||approx||, ||exact||)`` (2-norms)."""
    a = np.asarray(approx, np.float64).reshape(-1)
    b = np.asarray(exact, np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
