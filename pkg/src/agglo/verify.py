"""Self-checks bundled with the package: oracles, causality and gradients.

Every check returns a :class:`CheckResult`; :func:`run_all` collects them and
:func:`format_table` renders the pass/fail table printed by ``agglo verify``.
The reference computations here recompute each position from scratch and
share no code with the layers under test beyond parameter containers.
"""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from . import tensor as T
from .attention import (
    AggloAttentionParams,
    FullAttentionParams,
    agglo_masked,
    broken_masking,
    full_attention,
)
from .model import DecoderModel, ModelConfig, decoder_forward, lm_loss
from .tensor import EPS_DIV, GradTape, Tensor, backward, finite_diff_grad, rel_error

ORACLE_LENGTHS = (1, 2, 3, 17, 128, 256)
ORACLE_SEEDS = 20
CAUSAL_TRIALS = 50
CAUSAL_TOL = 1e-6


@dataclass(frozen=True)
class Tolerances:
    oracle: float
    grad_step: float
    grad_attention: float
    grad_decoder: float


TOLERANCES = {
    "float64": Tolerances(oracle=1e-10, grad_step=1e-6, grad_attention=1e-5, grad_decoder=1e-4),
    # single-precision analytic gradients against float64 differences
    "float32": Tolerances(oracle=1e-5, grad_step=1e-6, grad_attention=1e-4, grad_decoder=1e-4),
}


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def reference_agglo_masked(x: np.ndarray, p: dict[str, np.ndarray]) -> np.ndarray:
    """Masked agglomerative attention, every position summed over its own prefix."""
    b, t, d = x.shape
    m, _, dm = p["P"].shape
    cr = _softmax(x @ p["W_ref"] + p["b_ref"])
    cq = _softmax(x @ p["W_query"] + p["b_query"])
    proj = np.einsum("btd,kde->btke", x, p["P"])
    out = np.empty((b, t, d))
    for i in range(t):
        w = cr[:, : i + 1, :, None]
        avg = (w * proj[:, : i + 1]).sum(axis=1) / (w.sum(axis=1) + EPS_DIV)
        out[:, i] = (cq[:, i, :, None] * avg).reshape(b, d) @ p["Q"]
    return out


def reference_full_attention(x: np.ndarray, p: dict[str, np.ndarray], h: int, causal: bool) -> np.ndarray:
    """Multi-head attention evaluated one query position at a time."""
    b, t, d = x.shape
    dh = d // h
    q = (x @ p["W_q"]).reshape(b, t, h, dh)
    k = (x @ p["W_k"]).reshape(b, t, h, dh)
    v = (x @ p["W_v"]).reshape(b, t, h, dh)
    out = np.empty((b, t, d))
    for i in range(t):
        stop = i + 1 if causal else t
        logits = np.einsum("bhe,bjhe->bhj", q[:, i], k[:, :stop]) / math.sqrt(dh)
        w = _softmax(logits)
        out[:, i] = np.einsum("bhj,bjhe->bhe", w, v[:, :stop]).reshape(b, d)
    return out @ p["W_o"]


def _arrays(params) -> dict[str, np.ndarray]:
    return {k: v.data.astype(np.float64) for k, v in params.tensors().items()}


# --- oracle suite --------------------------------------------------------------------


def check_agglo_oracle(dtype="float64", lengths=ORACLE_LENGTHS, seeds=ORACLE_SEEDS,
                       d=16, m=4, batch=2) -> CheckResult:
    tol = TOLERANCES[dtype].oracle
    t0 = time.perf_counter()
    worst = 0.0
    for t in lengths:
        for seed in range(seeds):
            rng = np.random.default_rng((seed, t))
            params = AggloAttentionParams.init(d, m, rng, dtype, requires_grad=False)
            for name in ("b_ref", "b_query"):
                getattr(params, name).data = rng.standard_normal(m).astype(dtype)
            x = rng.standard_normal((batch, t, d)).astype(dtype)
            got = agglo_masked(Tensor(x), Tensor(x), params).data
            want = reference_agglo_masked(x.astype(np.float64), _arrays(params))
            worst = max(worst, float(np.abs(got - want).max()))
    return CheckResult("oracle", "agglomerative masked vs per-position sums", worst <= tol,
                       f"max abs diff {worst:.2e} (tol {tol:.0e}, t in {list(lengths)}, {seeds} seeds)",
                       time.perf_counter() - t0)


def check_full_oracle(dtype="float64", lengths=(1, 2, 17, 64), seeds=5, d=16, h=4, batch=2) -> CheckResult:
    tol = max(TOLERANCES[dtype].oracle, 1e-12) * 10
    t0 = time.perf_counter()
    worst = 0.0
    for t in lengths:
        for seed in range(seeds):
            rng = np.random.default_rng((seed, t, 1))
            params = FullAttentionParams.init(d, h, rng, dtype, requires_grad=False)
            x = rng.standard_normal((batch, t, d)).astype(dtype)
            for causal in (True, False):
                got = full_attention(Tensor(x), Tensor(x), params, causal=causal).data
                want = reference_full_attention(x.astype(np.float64), _arrays(params), h, causal)
                worst = max(worst, float(np.abs(got - want).max()))
    return CheckResult("oracle", "full attention vs per-query loop", worst <= tol,
                       f"max abs diff {worst:.2e} (tol {tol:.0e})", time.perf_counter() - t0)


def check_m1_collapse(dtype="float64", t=64, d=8) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    params = AggloAttentionParams.init(d, 1, rng, dtype, requires_grad=False)
    x = rng.standard_normal((2, t, d)).astype(dtype)
    got = agglo_masked(Tensor(x), Tensor(x), params).data
    running = np.cumsum(x.astype(np.float64), axis=1) / np.arange(1, t + 1)[None, :, None]
    want = running @ params.P.data[0].astype(np.float64) @ params.Q.data.astype(np.float64)
    diff = float(np.abs(got - want).max())
    return CheckResult("oracle", "single class equals running mean", diff <= 1e-6,
                       f"max abs diff {diff:.2e} (tol 1e-06)", time.perf_counter() - t0)


def check_backend_parity(dtype="float64") -> CheckResult:
    t0 = time.perf_counter()
    if not kernels.compiled_available():
        return CheckResult("oracle", "compiled vs numpy prefix kernel", True,
                           "compiled kernel not built; numpy fallback in use", 0.0)
    rng = np.random.default_rng(5)
    cr = _softmax(rng.standard_normal((3, 50, 4))).astype(dtype)
    cq = _softmax(rng.standard_normal((3, 50, 4))).astype(dtype)
    v = rng.standard_normal((3, 50, 4, 6)).astype(dtype)
    g = rng.standard_normal((3, 50, 4, 6)).astype(dtype)
    results = {}
    for name in kernels.BACKENDS:
        with kernels.use_backend(name):
            out, a, n = kernels.prefix_average_arrays(cr, v, cq)
            results[name] = (out, *kernels.prefix_average_backward_arrays(g, cr, v, cq, a, n))
    diff = max(float(np.abs(x - y).max()) for x, y in zip(results["compiled"], results["numpy"]))
    tol = 1e-12 if dtype == "float64" else 1e-4
    return CheckResult("oracle", "compiled vs numpy prefix kernel", diff <= tol,
                       f"max abs diff {diff:.2e} (tol {tol:.0e})", time.perf_counter() - t0)


# --- causality suite -------------------------------------------------------------------


CAUSAL_MODEL = dict(n_blocks=2, seq_len=24, d_model=16, heads_or_classes=4, vocab_size=11,
                    ffn_multiplier=2, conv_width=4)


def check_causality(attention: str, encoding: str, trials=CAUSAL_TRIALS, dtype="float64") -> CheckResult:
    t0 = time.perf_counter()
    cfg = ModelConfig(attention_kind=attention, encoding_kind=encoding, **CAUSAL_MODEL)
    model = DecoderModel.init(cfg, seed=3, dtype=np.dtype(dtype))
    rng = np.random.default_rng(17)
    for p in model.params.values():
        p.data = (p.data + 0.3 * rng.standard_normal(p.shape)).astype(p.dtype)
    worst = 0.0
    for _ in range(trials):
        tokens = rng.integers(0, cfg.vocab_size, (2, cfg.seq_len))
        pos = int(rng.integers(0, cfg.seq_len))
        moved = tokens.copy()
        moved[:, pos] = (moved[:, pos] + rng.integers(1, cfg.vocab_size, 2)) % cfg.vocab_size
        a = decoder_forward(tokens, model).data
        b = decoder_forward(moved, model).data
        if pos:
            worst = max(worst, float(np.abs(a[:, :pos] - b[:, :pos]).max()))
    return CheckResult("causality", f"{attention} + {encoding}", worst <= CAUSAL_TOL,
                       f"max change before perturbed position {worst:.2e} over {trials} trials",
                       time.perf_counter() - t0)


# --- gradient suite ------------------------------------------------------------------------


def _grad_errors(params: dict[str, Tensor], loss_of: Callable[[dict[str, Tensor]], Tensor],
                 step: float) -> dict[str, float]:
    """Relative error of each analytic gradient against central differences.

    Differences are always taken on a float64 copy of ``params`` so that
    single-precision backward passes are judged against an accurate reference.
    """
    with GradTape() as tape:
        loss = loss_of(params)
    backward(loss, tape, wrt=params.values())
    ref = {k: Tensor(p.data.astype(np.float64)) for k, p in params.items()}
    errors = {}
    for name, p in params.items():
        saved = ref[name]

        def f(v, name=name, saved=saved):
            ref[name] = v
            try:
                return loss_of(ref)
            finally:
                ref[name] = saved

        errors[name] = rel_error(p.grad, finite_diff_grad(f, saved, step))
    return errors


def _grad_result(suite_name: str, errors: dict[str, float], tol: float, seconds: float) -> CheckResult:
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    return CheckResult("gradients", suite_name, worst < tol,
                       f"{len(errors)} tensors, worst rel err {worst:.2e} ({worst_name}), tol {tol:.0e}", seconds)


def check_attention_grads(kind: str, dtype="float64", d=8, m=2, t=5, batch=2) -> CheckResult:
    t0 = time.perf_counter()
    tol = TOLERANCES[dtype]
    rng = np.random.default_rng(23)
    x = Tensor(rng.standard_normal((batch, t, d)).astype(dtype), requires_grad=True, name="x")
    weights = rng.standard_normal((batch, t, d))
    if kind == "agglomerative":
        params = AggloAttentionParams.init(d, m, rng, dtype)
        for name in ("b_ref", "b_query"):
            getattr(params, name).data = rng.standard_normal(m).astype(dtype)

        def layer(ts):
            p = AggloAttentionParams(**{k: ts[k] for k in params.tensors()})
            return agglo_masked(ts["x"], ts["x"], p)
    else:
        params = FullAttentionParams.init(d, m, rng, dtype)

        def layer(ts):
            p = FullAttentionParams(h=m, **{k: ts[k] for k in params.tensors()})
            return full_attention(ts["x"], ts["x"], p, causal=True)

    def loss_of(ts):
        return T.sum_(T.mul(layer(ts), Tensor(weights.astype(ts["x"].dtype))))

    errors = _grad_errors({**params.tensors(), "x": x}, loss_of, tol.grad_step)
    return _grad_result(f"{kind} attention layer", errors, tol.grad_attention, time.perf_counter() - t0)


def check_decoder_grads(attention: str, encoding: str, dtype="float64") -> CheckResult:
    t0 = time.perf_counter()
    tol = TOLERANCES[dtype]
    cfg = ModelConfig(attention_kind=attention, encoding_kind=encoding, n_blocks=2, seq_len=6,
                      d_model=8, heads_or_classes=2, vocab_size=5, ffn_multiplier=2, conv_width=3)
    model = DecoderModel.init(cfg, seed=4, dtype=np.dtype(dtype))
    rng = np.random.default_rng(29)
    for p in model.params.values():
        p.data = (p.data + 0.2 * rng.standard_normal(p.shape)).astype(p.dtype)
    seq = rng.integers(0, cfg.vocab_size, (2, cfg.seq_len + 1))

    def loss_of(ts):
        return lm_loss(decoder_forward(seq[:, :-1], DecoderModel(cfg, ts)), seq[:, 1:])

    errors = _grad_errors(model.params, loss_of, tol.grad_step)
    return _grad_result(f"decoder {attention} + {encoding}", errors, tol.grad_decoder, time.perf_counter() - t0)


# --- driver -------------------------------------------------------------------------------


PAIRS = [(a, e) for a in ("full", "agglomerative") for e in ("embedding", "convolution")]


def run_all(dtype: str = "float64", break_masking: bool = False,
            on_result: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    """Run every suite; with ``break_masking`` the causal restriction is removed."""
    if dtype not in TOLERANCES:
        raise ValueError(f"dtype must be one of {sorted(TOLERANCES)}")
    checks: list[Callable[[], CheckResult]] = [
        lambda: check_agglo_oracle(dtype),
        lambda: check_full_oracle(dtype),
        lambda: check_m1_collapse(dtype),
        lambda: check_backend_parity(dtype),
        *[(lambda a=a, e=e: check_causality(a, e, dtype=dtype)) for a, e in PAIRS],
        lambda: check_attention_grads("agglomerative", dtype),
        lambda: check_attention_grads("full", dtype),
        *[(lambda a=a, e=e: check_decoder_grads(a, e, dtype)) for a, e in PAIRS],
    ]
    results = []
    ctx = broken_masking() if break_masking else contextlib.nullcontext()
    with ctx:
        for check in checks:
            r = check()
            results.append(r)
            if on_result is not None:
                on_result(r)
    return results


def format_row(r: CheckResult) -> str:
    return f"{'PASS' if r.passed else 'FAIL'}  {r.suite:<10} {r.name:<42} {r.detail} [{r.seconds:.1f}s]"


def format_table(results: list[CheckResult]) -> str:
    lines = [format_row(r) for r in results]
    failed = [r for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
