"""Agglomerative attention and multi-head dot-product attention layers.

Agglomerative attention soft-assigns every position to one of ``m`` classes,
averages the class members' projected representations (over the prefix
``tau <= i`` in the masked variant, over the whole reference sequence in the
full variant), hands each query position the class averages weighted by its
own class assignment, and recombines the classes with a ``d x d`` matrix.
Cost is linear in sequence length.

All layer functions take row-vector inputs ``[batch, time, width]`` and apply
weights on the right (``x @ W``).
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .kernels import class_prefix_average
from .tensor import EPS_DIV, MASK_VALUE, Tensor

_masking_broken = False


@contextlib.contextmanager
def broken_masking():
    """Fault injection: drop the causal restriction in both attention kinds.

    Only used by the verification harness as a negative control.
    """
    global _masking_broken
    prev = _masking_broken
    _masking_broken = True
    try:
        yield
    finally:
        _masking_broken = prev


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass(eq=False)
class AggloAttentionParams:
    """Learned weights of one agglomerative attention layer.

    ``P`` holds the ``m`` per-class projections stacked as ``[m, d, d // m]``.
    Reference and query classifiers are separate tensors.
    """

    W_ref: Tensor
    b_ref: Tensor
    W_query: Tensor
    b_query: Tensor
    P: Tensor
    Q: Tensor

    def __post_init__(self):
        d, m = self.W_ref.shape
        if d % m:
            raise ContractError(f"model width {d} is not divisible by class count {m}")
        expected = {
            "b_ref": (m,),
            "W_query": (d, m),
            "b_query": (m,),
            "P": (m, d, d // m),
            "Q": (d, d),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.W_ref is self.W_query or self.b_ref is self.b_query:
            raise ContractError("reference and query classifiers must be separate tensors")

    @property
    def m(self) -> int:
        return self.W_ref.shape[1]

    @property
    def d(self) -> int:
        return self.W_ref.shape[0]

    @classmethod
    def init(cls, d: int, m: int, rng: np.random.Generator, dtype=np.float32,
             requires_grad: bool = True) -> "AggloAttentionParams":
        if d % m:
            raise ContractError(f"model width {d} is not divisible by class count {m}")
        dm = d // m

        def leaf(arr, name):
            return Tensor(arr, requires_grad=requires_grad, name=name)

        return cls(
            W_ref=leaf(glorot_uniform(rng, (d, m), d, m, dtype), "W_ref"),
            b_ref=leaf(np.zeros(m, dtype), "b_ref"),
            W_query=leaf(glorot_uniform(rng, (d, m), d, m, dtype), "W_query"),
            b_query=leaf(np.zeros(m, dtype), "b_query"),
            P=leaf(glorot_uniform(rng, (m, d, dm), d, dm, dtype), "P"),
            Q=leaf(glorot_uniform(rng, (d, d), d, d, dtype), "Q"),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {
            "W_ref": self.W_ref, "b_ref": self.b_ref, "W_query": self.W_query,
            "b_query": self.b_query, "P": self.P, "Q": self.Q,
        }


@dataclass(eq=False)
class FullAttentionParams:
    """Key/query/value/output projections of multi-head dot-product attention."""

    W_k: Tensor
    W_q: Tensor
    W_v: Tensor
    W_o: Tensor
    h: int

    def __post_init__(self):
        d = self.W_k.shape[0]
        if d % self.h:
            raise ContractError(f"model width {d} is not divisible by head count {self.h}")
        for name in ("W_k", "W_q", "W_v", "W_o"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(d, d)}")

    @property
    def d(self) -> int:
        return self.W_k.shape[0]

    @classmethod
    def init(cls, d: int, h: int, rng: np.random.Generator, dtype=np.float32,
             requires_grad: bool = True) -> "FullAttentionParams":
        if d % h:
            raise ContractError(f"model width {d} is not divisible by head count {h}")
        mats = {
            name: Tensor(glorot_uniform(rng, (d, d), d, d, dtype), requires_grad=requires_grad, name=name)
            for name in ("W_k", "W_q", "W_v", "W_o")
        }
        return cls(h=h, **mats)

    def tensors(self) -> dict[str, Tensor]:
        return {"W_k": self.W_k, "W_q": self.W_q, "W_v": self.W_v, "W_o": self.W_o}


# --- agglomerative ------------------------------------------------------------


def assign_classes(x: Tensor, W: Tensor, b_vec: Tensor) -> Tensor:
    """Soft class assignments ``softmax(x @ W + b)`` over the class axis."""
    if x.shape[-1] != W.shape[0] or b_vec.shape != (W.shape[1],):
        raise DimensionError(f"assign_classes shapes x={x.shape} W={W.shape} b={b_vec.shape}")
    return T.softmax(T.add(T.matmul(x, W), b_vec), axis=-1)


def _check_inputs(x_ref: Tensor, x_query: Tensor, d: int, same_time: bool):
    if x_ref.ndim != 3 or x_query.ndim != 3:
        raise DimensionError(f"expected [batch, time, width] inputs, got {x_ref.shape} and {x_query.shape}")
    if x_ref.shape[-1] != d or x_query.shape[-1] != d:
        raise DimensionError(f"input widths {x_ref.shape[-1]}/{x_query.shape[-1]} do not match layer width {d}")
    if x_ref.shape[0] != x_query.shape[0]:
        raise DimensionError(f"batch extents differ: {x_ref.shape} vs {x_query.shape}")
    if same_time and x_ref.shape[1] != x_query.shape[1]:
        raise DimensionError(f"time extents differ: {x_ref.shape} vs {x_query.shape}")


def project_classes(x: Tensor, P: Tensor) -> Tensor:
    """Apply every class projection at once: ``[b, t, d] -> [b, t, m, d/m]``."""
    m, d, dm = P.shape
    P_cat = T.reshape(T.transpose(P, (1, 0, 2)), (d, m * dm))
    b, t, _ = x.shape
    return T.reshape(T.matmul(x, P_cat), (b, t, m, dm))


def _recombine(weighted: Tensor, Q: Tensor) -> Tensor:
    b, t, m, dm = weighted.shape
    return T.matmul(T.reshape(weighted, (b, t, m * dm)), Q)


def class_averages_masked(x_ref: Tensor, params: AggloAttentionParams) -> Tensor:
    """Per-class running averages ``a[b, i, k, :]`` over positions ``tau <= i``."""
    cr = assign_classes(x_ref, params.W_ref, params.b_ref)
    v = project_classes(x_ref, params.P)
    ones = Tensor(np.ones(cr.shape, cr.dtype))
    return class_prefix_average(cr, v, ones)


def class_averages_full(x_ref: Tensor, params: AggloAttentionParams) -> Tensor:
    """Per-class averages over the whole reference sequence, ``[b, m, d/m]``."""
    cr = assign_classes(x_ref, params.W_ref, params.b_ref)
    v = project_classes(x_ref, params.P)
    b, t, m, dm = v.shape
    weighted = T.sum_(T.mul(T.reshape(cr, (b, t, m, 1)), v), axis=1)
    mass = T.reshape(T.sum_(cr, axis=1), (b, m, 1))
    return T.div(weighted, mass, EPS_DIV)


def agglo_masked(x_ref: Tensor, x_query: Tensor, params: AggloAttentionParams) -> Tensor:
    """Causal agglomerative self-attention; position ``i`` sees ``tau <= i``.

    Runs in ``O(t * d^2 / m + t * d * m)``; no tensor is quadratic in ``t``.
    """
    _check_inputs(x_ref, x_query, params.d, same_time=True)
    if _masking_broken:
        return _agglo_unmasked_broadcast(x_ref, x_query, params)
    cr = assign_classes(x_ref, params.W_ref, params.b_ref)
    cq = assign_classes(x_query, params.W_query, params.b_query)
    v = project_classes(x_ref, params.P)
    return _recombine(class_prefix_average(cr, v, cq), params.Q)


def agglo_full(x_ref: Tensor, x_query: Tensor, params: AggloAttentionParams) -> Tensor:
    """Non-causal agglomerative attention; ``x_ref`` and ``x_query`` lengths may differ."""
    _check_inputs(x_ref, x_query, params.d, same_time=False)
    return _agglo_unmasked_broadcast(x_ref, x_query, params)


def _agglo_unmasked_broadcast(x_ref, x_query, params):
    a = class_averages_full(x_ref, params)
    cq = assign_classes(x_query, params.W_query, params.b_query)
    b, m, dm = a.shape
    tq = x_query.shape[1]
    weighted = T.mul(T.reshape(cq, (b, tq, m, 1)), T.reshape(a, (b, 1, m, dm)))
    return _recombine(weighted, params.Q)


# --- full dot-product ----------------------------------------------------------


def causal_mask(t: int, dtype) -> np.ndarray:
    """``[t, t]`` additive mask: 0 where ``tau <= i``, a large negative value elsewhere."""
    mask = np.zeros((t, t), dtype=dtype)
    mask[np.triu_indices(t, 1)] = MASK_VALUE
    return mask


def _heads(x: Tensor, W: Tensor, h: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(T.matmul(x, W), (b, t, h, d // h)), (0, 2, 1, 3))


def _full_attention_chunk(x_ref, x_query, params, mask):
    h = params.h
    b, tq, d = x_query.shape
    # scaling q instead of the logits is exact and touches t*d rather than t*t elements
    q = T.mul(_heads(x_query, params.W_q, h), x_query.dtype.type(1.0 / math.sqrt(d // h)))
    k = _heads(x_ref, params.W_k, h)
    v = _heads(x_ref, params.W_v, h)
    logits = T.matmul(q, T.swap_last(k))
    if mask is not None:
        logits = T.add(logits, mask)
    weights = T.softmax(logits, axis=-1)
    heads = T.transpose(T.matmul(weights, v), (0, 2, 1, 3))
    return T.matmul(T.reshape(heads, (b, tq, d)), params.W_o)


def full_attention(x_ref: Tensor, x_query: Tensor, params: FullAttentionParams, causal: bool,
                   max_logit_elements: int = 1 << 24) -> Tensor:
    """Multi-head scaled dot-product attention, optionally causal.

    The batch is processed in chunks so that one chunk's ``[b, h, t_q, t_r]``
    logit tensor stays under ``max_logit_elements`` (at least one sequence per
    chunk); the result does not depend on the chunking.
    """
    _check_inputs(x_ref, x_query, params.d, same_time=False)
    tr, tq = x_ref.shape[1], x_query.shape[1]
    if causal and tr != tq:
        raise ContractError(f"causal attention needs equal lengths, got t_ref={tr}, t_query={tq}")
    mask = None
    if causal and not _masking_broken:
        mask = Tensor(causal_mask(tq, x_query.dtype))
    b = x_query.shape[0]
    per_seq = params.h * tq * tr
    chunk = max(1, max_logit_elements // per_seq)
    if chunk >= b:
        return _full_attention_chunk(x_ref, x_query, params, mask)
    parts = [
        _full_attention_chunk(
            T.slice_axis(x_ref, 0, s, min(s + chunk, b)),
            T.slice_axis(x_query, 0, s, min(s + chunk, b)),
            params, mask,
        )
        for s in range(0, b, chunk)
    ]
    return T.concat(parts, axis=0)
