"""Adadelta training with early stopping, metrics logging and checkpointing."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import BatchIterator, CorpusSplit, windows
from .errors import TrainingError
from .model import DecoderModel, ModelConfig, decoder_forward, lm_loss
from .tensor import GradTape, backward

logger = logging.getLogger(__name__)

METRICS_HEADER = "epoch,train_loss_bits,valid_loss_bits,epoch_seconds\n"


@dataclass
class AdadeltaState:
    """Running averages ``E[g^2]`` and ``E[dx^2]`` for every parameter."""

    sq_grad: dict[str, np.ndarray]
    sq_delta: dict[str, np.ndarray]
    rho: float = 0.95
    eps: float = 1e-6

    @classmethod
    def zeros_like(cls, params: dict[str, T.Tensor], rho: float = 0.95, eps: float = 1e-6) -> "AdadeltaState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
            rho, eps,
        )


def adadelta_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: AdadeltaState) -> None:
    """Apply one Adadelta update to ``params`` in place; there is no learning rate."""
    rho, eps = state.rho, state.eps
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        eg = state.sq_grad[name]
        ed = state.sq_delta[name]
        eg *= rho
        eg += (1 - rho) * g * g
        delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1 - rho) * delta * delta
        p.data += delta.astype(p.dtype, copy=False)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint 2-norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= g.dtype.type(scale)
    return total


@dataclass
class TrainOptions:
    seed: int = 0
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    clip_norm: float | None = 5.0
    rho: float = 0.95
    eps: float = 1e-6
    dtype: str = "float32"
    out_dir: Path | None = None
    max_batches: int | None = None
    # stop as soon as validation loss reaches this many bits
    target_valid_loss: float | None = None


@dataclass
class TrainRun:
    """Per-epoch history and early-stopping state."""

    config: ModelConfig
    patience: int = 10
    epoch: int = 0
    train_history: list[float] = field(default_factory=list)
    valid_history: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_valid: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0
    stop_reason: str = ""

    def update(self, train_loss: float, valid_loss: float, seconds: float) -> bool:
        """Record one epoch; returns True if validation loss improved."""
        self.epoch += 1
        self.train_history.append(train_loss)
        self.valid_history.append(valid_loss)
        self.epoch_seconds.append(seconds)
        if valid_loss < self.best_valid:
            self.best_valid = valid_loss
            self.best_epoch = self.epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def patience_exhausted(self) -> bool:
        return self.bad_epochs >= self.patience


def evaluate(model: DecoderModel, stream: np.ndarray, seq_len: int, batch_size: int = 32) -> float:
    """Mean next-token loss in bits over all non-overlapping windows of ``stream``."""
    w = windows(stream, seq_len)
    total = 0.0
    count = 0
    with T.no_grad():
        for start in range(0, len(w), batch_size):
            chunk = w[start:start + batch_size]
            loss = lm_loss(decoder_forward(chunk[:, :-1], model), chunk[:, 1:])
            n = chunk[:, 1:].size
            total += loss.item() * n
            count += n
    return total / count


def train_step(model: DecoderModel, inputs: np.ndarray, targets: np.ndarray, state: AdadeltaState,
               clip_norm: float | None) -> float:
    with GradTape() as tape:
        loss = lm_loss(decoder_forward(inputs, model), targets)
    backward(loss, tape, wrt=model.params.values())
    grads = {k: p.grad for k, p in model.params.items()}
    if clip_norm is not None:
        clip_global_norm(grads, clip_norm)
    adadelta_step(model.params, grads, state)
    for p in model.params.values():
        p.grad = None
    return loss.item()


def train(config: ModelConfig, corpus: CorpusSplit, options: TrainOptions | None = None,
          on_epoch: Callable[[TrainRun], None] | None = None) -> tuple[TrainRun, DecoderModel]:
    """Train until validation loss stalls for ``patience`` epochs or ``max_epochs`` is hit.

    Returns the run history and the model restored to its best-validation
    weights. With ``out_dir`` set, ``metrics.csv``, ``best.ckpt`` and
    ``last.ckpt`` are written there as training progresses.
    """
    opts = options or TrainOptions()
    dtype = np.dtype(opts.dtype)
    model = DecoderModel.init(config, seed=opts.seed, dtype=dtype)
    state = AdadeltaState.zeros_like(model.params, opts.rho, opts.eps)
    batches = BatchIterator(corpus.train, config.seq_len, opts.batch_size, seed=opts.seed)
    run = TrainRun(config, patience=opts.patience)
    best_params = {k: p.data.copy() for k, p in model.params.items()}

    out = Path(opts.out_dir) if opts.out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        metrics_path.write_text(METRICS_HEADER)

    for epoch in range(opts.max_epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for i, (x, y) in enumerate(batches.epoch_batches(epoch)):
            if opts.max_batches is not None and i >= opts.max_batches:
                break
            total += train_step(model, x, y, state, opts.clip_norm) * y.size
            count += y.size
        seconds = time.perf_counter() - t0
        train_loss = total / count
        valid_loss = evaluate(model, corpus.valid, config.seq_len, opts.batch_size)
        improved = run.update(train_loss, valid_loss, seconds)
        logger.info("epoch %d train %.4f valid %.4f bits (%.1fs)%s", run.epoch, train_loss,
                    valid_loss, seconds, " *" if improved else "")
        if improved:
            best_params = {k: p.data.copy() for k, p in model.params.items()}
        if out is not None:
            with open(metrics_path, "a") as fh:
                fh.write(f"{run.epoch},{train_loss:.6f},{valid_loss:.6f},{seconds:.3f}\n")
            save_checkpoint(out / "last.ckpt", model)
            if improved:
                save_checkpoint(out / "best.ckpt", model)
        if on_epoch is not None:
            on_epoch(run)
        if run.patience_exhausted:
            run.stop_reason = f"no improvement for {opts.patience} epochs"
            break
        if opts.target_valid_loss is not None and valid_loss <= opts.target_valid_loss:
            run.stop_reason = f"reached target validation loss {opts.target_valid_loss}"
            break
    else:
        run.stop_reason = f"reached max_epochs={opts.max_epochs}"

    for k, p in model.params.items():
        p.data = best_params[k]
    return run, model
