"""Hot kernels behind a backend switch.

The compiled extension ``agglo._kernels`` is used when it imports; otherwise
the numpy implementation below is selected. ``AGGLO_BACKEND`` (``auto``,
``compiled`` or ``numpy``) overrides the choice at import time and
:func:`use_backend` overrides it at run time.
"""
from __future__ import annotations

import contextlib
import os

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import EPS_DIV, Tensor, _check_dtypes, make_op

try:
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover - exercised when the extension is not built
    _compiled = None

BACKENDS = ("compiled", "numpy")


def _initial_backend() -> str:
    want = os.environ.get("AGGLO_BACKEND", "auto").lower()
    if want == "numpy" or (want == "auto" and _compiled is None):
        return "numpy"
    if want in ("auto", "compiled"):
        if _compiled is None:
            raise ImportError("AGGLO_BACKEND=compiled but agglo._kernels is not built")
        return "compiled"
    raise ValueError(f"unknown AGGLO_BACKEND {want!r}")


_backend = _initial_backend()


def compiled_available() -> bool:
    return _compiled is not None


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in BACKENDS:
        raise ContractError(f"backend must be one of {BACKENDS}, got {name!r}")
    if name == "compiled" and _compiled is None:
        raise ContractError("compiled backend requested but agglo._kernels is not built")
    _backend = name


@contextlib.contextmanager
def use_backend(name: str):
    prev = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


# --- numpy reference kernels --------------------------------------------------


def _np_forward(cr, v, cq, eps):
    n = np.cumsum(cr, axis=1, dtype=cr.dtype)
    n += cr.dtype.type(eps)
    acc = np.cumsum(cr[..., None] * v, axis=1, dtype=v.dtype)
    a = acc / n[..., None]
    out = cq[..., None] * a
    return a, out, n


def _np_backward(grad, cr, v, cq, a, n):
    dcq = (grad * a).sum(axis=-1)
    ga = grad * (cq / n)[..., None]
    racc = np.flip(np.cumsum(np.flip(ga, 1), axis=1), 1)
    gn = -(ga * a).sum(axis=-1)
    rmass = np.flip(np.cumsum(np.flip(gn, 1), axis=1), 1)
    dcr = rmass + (racc * v).sum(axis=-1)
    dv = racc * cr[..., None]
    return dcr, dv, dcq


# --- dispatch -------------------------------------------------------------------


def prefix_average_arrays(cr: np.ndarray, v: np.ndarray, cq: np.ndarray, eps: float = EPS_DIV):
    """Return ``(a, out, n)`` for raw arrays using the active backend."""
    if _backend == "compiled":
        a = np.empty_like(v)
        out = np.empty_like(v)
        n = np.empty_like(cr)
        _compiled.prefix_average_forward(cr, v, cq, eps, a, out, n)
        return a, out, n
    return _np_forward(cr, v, cq, eps)


def prefix_average_backward_arrays(grad, cr, v, cq, a, n):
    if _backend == "compiled":
        dcr = np.empty_like(cr)
        dv = np.empty_like(v)
        dcq = np.empty_like(cq)
        _compiled.prefix_average_backward(
            np.ascontiguousarray(grad), cr, v, cq, a, n, dcr, dv, dcq
        )
        return dcr, dv, dcq
    return _np_backward(grad, cr, v, cq, a, n)


def class_prefix_average(cr: Tensor, v: Tensor, cq: Tensor, eps: float = EPS_DIV) -> Tensor:
    """Causal class-weighted running average, scaled by query assignments.

    Args:
        cr: reference class assignments ``[b, t, m]``.
        v: per-class projected inputs ``[b, t, m, dm]``.
        cq: query class assignments ``[b, t, m]``.

    Returns:
        ``[b, t, m, dm]`` tensor whose entry ``(i, k)`` is ``cq[i, k]`` times the
        ``cr``-weighted mean of ``v[:i+1, k]`` (guarded by ``eps``).
    """
    if v.ndim != 4 or cr.shape != v.shape[:3] or cq.shape != cr.shape:
        raise DimensionError(
            f"class_prefix_average shapes cr={cr.shape} v={v.shape} cq={cq.shape}"
        )
    _check_dtypes(cr, v, cq)
    a, out, n = prefix_average_arrays(cr.data, v.data, cq.data, eps)

    def vjp(g):
        return prefix_average_backward_arrays(g, cr.data, v.data, cq.data, a, n)

    return make_op("class_prefix_average", out, (cr, v, cq), vjp)
