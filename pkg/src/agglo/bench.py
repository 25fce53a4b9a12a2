"""Single-core runtime scaling of isolated attention layers.

Each record times the forward pass of one freshly initialised layer on fresh
random inputs. Inputs for a given ``(seed, seq_len, replica)`` are identical
across attention kinds. Slopes come from a least-squares fit of
``log(mean seconds)`` against ``log(seq_len)`` over the largest lengths.
"""
from __future__ import annotations

import csv
import gc
import logging
import math
import os
import platform
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from . import kernels
from . import tensor as T
from .attention import AggloAttentionParams, FullAttentionParams, agglo_full, agglo_masked, full_attention
from .errors import ContractError
from .tensor import GradTape, Tensor, backward

logger = logging.getLogger(__name__)

KINDS = ("full", "agglomerative")
CSV_HEADER = ("kind", "masked", "seq_len", "replica", "seconds")
FULL_SLOPE_BAND = (1.7, 2.3)
AGGLO_SLOPE_BAND = (0.7, 1.3)
MIN_TIMED_SECONDS = 0.01


@dataclass(frozen=True)
class BenchConfig:
    batch: int = 32
    d_model: int = 512
    heads_or_classes: int = 8
    seq_lengths: tuple[int, ...] = (64, 128, 256, 512, 1024, 2048)
    replicas: int = 5
    warmup: int = 1
    masked: bool = True
    kinds: tuple[str, ...] = KINDS
    seed: int = 0
    dtype: str = "float32"
    backward: bool = False

    def __post_init__(self):
        lengths = tuple(int(n) for n in self.seq_lengths)
        object.__setattr__(self, "seq_lengths", lengths)
        if not lengths or any(n < 1 for n in lengths):
            raise ContractError("seq_lengths must be a non-empty list of positive lengths")
        if any(b <= a for a, b in zip(lengths, lengths[1:])):
            raise ContractError(f"seq_lengths must be strictly increasing, got {lengths}")
        if self.replicas < 2:
            raise ContractError(f"replicas must be >= 2, got {self.replicas}")
        if self.warmup < 0:
            raise ContractError("warmup must be >= 0")
        if self.d_model % self.heads_or_classes:
            raise ContractError(f"d_model {self.d_model} is not divisible by {self.heads_or_classes}")
        unknown = set(self.kinds) - set(KINDS)
        if unknown or not self.kinds:
            raise ContractError(f"kinds must be drawn from {KINDS}, got {self.kinds}")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype}")


@dataclass(frozen=True)
class BenchRecord:
    kind: str
    masked: bool
    seq_len: int
    replica: int
    seconds: float

    def __post_init__(self):
        if not self.seconds > 0:
            raise ContractError(f"non-positive timing {self.seconds} for {self.kind} at {self.seq_len}")


@dataclass(frozen=True)
class ScalingFit:
    slope: float
    stderr: float
    lengths: tuple[int, ...]


@dataclass
class PinStatus:
    pinned: bool
    cpu: int | None
    detail: str


def pin_to_one_core() -> PinStatus:
    """Restrict this process to a single logical CPU when the platform allows it."""
    if not hasattr(os, "sched_setaffinity"):
        return PinStatus(False, None, "sched_setaffinity unavailable on this platform")
    try:
        cpu = min(os.sched_getaffinity(0))
        os.sched_setaffinity(0, {cpu})
    except OSError as exc:
        return PinStatus(False, None, f"pinning failed: {exc}")
    return PinStatus(True, cpu, f"pinned to cpu {cpu}")


def case_inputs(config: BenchConfig, seq_len: int, replica: int) -> np.ndarray:
    """The layer input for one record; independent of the attention kind."""
    rng = np.random.default_rng((config.seed, seq_len, replica))
    return rng.standard_normal((config.batch, seq_len, config.d_model)).astype(config.dtype)


def make_case(config: BenchConfig, kind: str, seq_len: int, replica: int) -> Callable[[], Tensor]:
    """Build a zero-argument callable running one forward (or forward+backward) pass."""
    dtype = np.dtype(config.dtype)
    x = Tensor(case_inputs(config, seq_len, replica))
    rng = np.random.default_rng((config.seed, seq_len, replica, KINDS.index(kind) + 1))
    d, m = config.d_model, config.heads_or_classes
    if kind == "agglomerative":
        params = AggloAttentionParams.init(d, m, rng, dtype, requires_grad=config.backward)
        layer = agglo_masked if config.masked else agglo_full

        def forward():
            return layer(x, x, params)
    else:
        params = FullAttentionParams.init(d, m, rng, dtype, requires_grad=config.backward)

        def forward():
            return full_attention(x, x, params, causal=config.masked)

    if not config.backward:
        return forward

    def forward_backward():
        with GradTape() as tape:
            loss = T.sum_(forward())
        backward(loss, tape, wrt=params.tensors().values())
        return loss

    return forward_backward


def time_call(fn: Callable[[], object], min_seconds: float = MIN_TIMED_SECONDS) -> float:
    """Mean seconds per call; fast calls are repeated at least three times."""
    t0 = time.perf_counter_ns()
    fn()
    single = (time.perf_counter_ns() - t0) / 1e9
    if single >= min_seconds:
        return single
    reps = max(3, math.ceil(5 * min_seconds / max(single, 1e-9)))
    t0 = time.perf_counter_ns()
    for _ in range(reps):
        fn()
    return (time.perf_counter_ns() - t0) / 1e9 / reps


def run_bench(config: BenchConfig, skipped: list[str] | None = None,
              progress: Callable[[BenchRecord], None] | None = None) -> list[BenchRecord]:
    """Time every ``(kind, seq_len, replica)`` combination single-threaded.

    Records that fail with ``MemoryError`` are skipped; a reason is appended to
    ``skipped`` when given.
    """
    records: list[BenchRecord] = []
    with threadpool_limits(limits=1):
        gc_was_enabled = gc.isenabled()
        try:
            for seq_len in config.seq_lengths:
                for kind in config.kinds:
                    for replica in range(config.replicas):
                        try:
                            fn = make_case(config, kind, seq_len, replica)
                            if replica == 0:
                                for _ in range(config.warmup):
                                    fn()
                            gc.collect()
                            gc.disable()
                            try:
                                seconds = time_call(fn)
                            finally:
                                if gc_was_enabled:
                                    gc.enable()
                        except MemoryError:
                            reason = f"{kind} seq_len={seq_len} replica={replica}: out of memory"
                            logger.warning("skipping %s", reason)
                            if skipped is not None:
                                skipped.append(reason)
                            continue
                        rec = BenchRecord(kind, config.masked, seq_len, replica, seconds)
                        records.append(rec)
                        if progress is not None:
                            progress(rec)
        finally:
            if gc_was_enabled:
                gc.enable()
    return records


def mean_times(records: Iterable[BenchRecord]) -> dict[str, dict[int, float]]:
    """``{kind: {seq_len: mean seconds}}`` with lengths in increasing order."""
    acc: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        acc[r.kind][r.seq_len].append(r.seconds)
    return {k: {n: float(np.mean(v[n])) for n in sorted(v)} for k, v in acc.items()}


def fit_scaling(records: Iterable[BenchRecord]) -> dict[str, ScalingFit]:
    """Per-kind log-log slope over the largest half of the measured lengths."""
    fits = {}
    for kind, by_len in mean_times(records).items():
        lengths = list(by_len)
        if len(lengths) < 3:
            raise ContractError(f"{kind}: need at least 3 distinct sequence lengths, got {len(lengths)}")
        top = lengths[-max(3, math.ceil(len(lengths) / 2)):]
        res = stats.linregress(np.log(top), np.log([by_len[n] for n in top]))
        fits[kind] = ScalingFit(float(res.slope), float(res.stderr), tuple(top))
    return fits


def crossover(records: Iterable[BenchRecord]) -> int | None:
    """Smallest length where agglomerative is no slower than full; None if never."""
    means = mean_times(records)
    missing = [k for k in KINDS if k not in means]
    if missing:
        raise ContractError(f"crossover needs both attention kinds, missing {missing}")
    for n in sorted(set(means["full"]) & set(means["agglomerative"])):
        if means["agglomerative"][n] <= means["full"][n]:
            return n
    return None


def monotone_inversions(records: Iterable[BenchRecord], kind: str, tolerance: float = 0.05) -> list[int]:
    """Lengths whose mean time drops more than ``tolerance`` below the previous length."""
    by_len = mean_times(records).get(kind, {})
    lengths = list(by_len)
    return [b for a, b in zip(lengths, lengths[1:]) if by_len[b] < by_len[a] * (1 - tolerance)]


def check_scaling(fits: dict[str, ScalingFit]) -> list[str]:
    """Describe every slope that falls outside its band; empty when all pass."""
    problems = []
    for kind, (lo, hi) in (("full", FULL_SLOPE_BAND), ("agglomerative", AGGLO_SLOPE_BAND)):
        if kind in fits and not lo <= fits[kind].slope <= hi:
            problems.append(f"{kind} slope {fits[kind].slope:.3f} outside [{lo}, {hi}]")
    return problems


def write_csv(records: Iterable[BenchRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.kind, int(r.masked), r.seq_len, r.replica, f"{r.seconds:.9f}"])


def read_csv(path) -> list[BenchRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        BenchRecord(r["kind"], bool(int(r["masked"])), int(r["seq_len"]), int(r["replica"]), float(r["seconds"]))
        for r in rows
    ]


def machine_meta(config: BenchConfig, pin: PinStatus, skipped: list[str] = ()) -> dict[str, str]:
    meta = {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "logical_cpus": str(os.cpu_count()),
        "pinned": "yes" if pin.pinned else "no",
        "pinning": pin.detail,
        "kernel_backend": kernels.get_backend(),
        "seed": str(config.seed),
        "dtype": config.dtype,
        "batch": str(config.batch),
        "d_model": str(config.d_model),
        "heads_or_classes": str(config.heads_or_classes),
        "replicas": str(config.replicas),
        "warmup": str(config.warmup),
        "masked": str(config.masked).lower(),
        "timed": "forward+backward" if config.backward else "forward",
    }
    for i, reason in enumerate(skipped):
        meta[f"skipped.{i}"] = reason
    return meta


def write_meta(meta: dict[str, str], path) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def summarize(records: list[BenchRecord]) -> str:
    means = mean_times(records)
    lines = ["seq_len " + " ".join(f"{k:>14}" for k in means)]
    for n in sorted({n for by_len in means.values() for n in by_len}):
        cells = " ".join(f"{means[k].get(n, float('nan')):14.6f}" for k in means)
        lines.append(f"{n:>7} {cells}")
    try:
        fits = fit_scaling(records)
    except ContractError as exc:
        lines.append(f"slopes: {exc}")
    else:
        for kind, fit in fits.items():
            lines.append(f"slope {kind}: {fit.slope:.3f} +/- {fit.stderr:.3f} over {list(fit.lengths)}")
    if all(k in means for k in KINDS):
        cross = crossover(records)
        lines.append(f"crossover: {cross if cross is not None else 'none within measured range'}")
    return "\n".join(lines) + "\n"
