"""Flat ``key=value`` run configuration with ``#`` comments.

Keys mirror the fields of :class:`~agglo.model.ModelConfig`,
:class:`~agglo.training.TrainOptions` and :class:`~agglo.bench.BenchConfig`
(the latter prefixed ``bench_``), plus the data keys ``corpus``,
``limit_chars`` and ``split``. Unset keys take their dataclass defaults.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

from .bench import BenchConfig
from .errors import ConfigError, ContractError
from .model import ModelConfig
from .training import TrainOptions

PRESET_NAMES = ("text8_full_embed", "text8_full_conv", "text8_agglo_embed", "text8_agglo_conv")
DEFAULT_LIMIT_CHARS = 1_000_000
DEFAULT_SPLIT = (0.9, 0.05, 0.05)


def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    return float(v)


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(v: str):
        return None if v.strip().lower() in ("none", "") else parse(v)
    return inner


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _str(v: str) -> str:
    return v.strip()


# key -> (section, attribute, parser)
SCHEMA: dict[str, tuple[str, str, Callable[[str], Any]]] = {
    "attention_kind": ("model", "attention_kind", _str),
    "encoding_kind": ("model", "encoding_kind", _str),
    "n_blocks": ("model", "n_blocks", _int),
    "seq_len": ("model", "seq_len", _int),
    "d_model": ("model", "d_model", _int),
    "heads_or_classes": ("model", "heads_or_classes", _int),
    "vocab_size": ("model", "vocab_size", _int),
    "ffn_multiplier": ("model", "ffn_multiplier", _int),
    "conv_width": ("model", "conv_width", _int),
    "seed": ("train", "seed", _int),
    "batch_size": ("train", "batch_size", _int),
    "max_epochs": ("train", "max_epochs", _int),
    "patience": ("train", "patience", _int),
    "clip_norm": ("train", "clip_norm", _optional(_float)),
    "rho": ("train", "rho", _float),
    "eps": ("train", "eps", _float),
    "dtype": ("train", "dtype", _str),
    "max_batches": ("train", "max_batches", _optional(_int)),
    "target_valid_loss": ("train", "target_valid_loss", _optional(_float)),
    "corpus": ("data", "corpus", _str),
    "limit_chars": ("data", "limit_chars", _optional(_int)),
    "split": ("data", "split", _floats),
    "bench_batch": ("bench", "batch", _int),
    "bench_d_model": ("bench", "d_model", _int),
    "bench_heads_or_classes": ("bench", "heads_or_classes", _int),
    "bench_lengths": ("bench", "seq_lengths", _ints),
    "bench_replicas": ("bench", "replicas", _int),
    "bench_warmup": ("bench", "warmup", _int),
    "bench_masked": ("bench", "masked", _bool),
    "bench_backward": ("bench", "backward", _bool),
}


@dataclass(frozen=True)
class DataOptions:
    corpus: str = "text8"
    limit_chars: int | None = DEFAULT_LIMIT_CHARS
    split: tuple[float, ...] = DEFAULT_SPLIT


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainOptions
    bench: BenchConfig
    data: DataOptions

    def value(self, key: str):
        section, attr, _ = SCHEMA[key]
        return getattr(getattr(self, section), attr)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}", f"expected key=value, got {raw.strip()!r}")
        if key not in SCHEMA:
            raise ConfigError(key, f"unknown key ({source}:{lineno})")
        if key in values:
            raise ConfigError(key, f"duplicate key ({source}:{lineno})")
        values[key] = value.strip()
    return values


def preset_path(name: str):
    stem = name[:-4] if name.endswith(".cfg") else name
    if stem not in PRESET_NAMES:
        return None
    return resources.files("agglo") / "presets" / f"{stem}.cfg"


def read_config(name_or_path: str) -> dict[str, str]:
    """Read a config file, or a bundled preset when no such file exists."""
    path = Path(name_or_path)
    if path.is_file():
        return parse_text(path.read_text(), str(path))
    preset = preset_path(name_or_path)
    if preset is not None:
        return parse_text(preset.read_text(), f"preset {preset.name}")
    raise ConfigError("config", f"{name_or_path!r} is neither a readable file nor a preset {PRESET_NAMES}")


def resolve(values: Mapping[str, Any] = (), overrides: Mapping[str, Any] = ()) -> RunConfig:
    """Combine defaults, file values and overrides (overrides win).

    String values are parsed according to :data:`SCHEMA`; non-string override
    values are taken as already typed.
    """
    sections: dict[str, dict[str, Any]] = {"model": {}, "train": {}, "bench": {}, "data": {}}
    merged = dict(values)
    merged.update({k: v for k, v in dict(overrides).items() if v is not None})
    for key, raw in merged.items():
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        section, attr, parse = SCHEMA[key]
        try:
            value = parse(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from exc
        sections[section][attr] = value
    model = ModelConfig(**sections["model"])
    train = TrainOptions(**sections["train"])
    _check_train(train)
    try:
        bench = BenchConfig(**sections["bench"])
    except ContractError as exc:
        raise ConfigError("bench", str(exc)) from exc
    data = DataOptions(**sections["data"])
    if len(data.split) != 3:
        raise ConfigError("split", f"expected three fractions, got {data.split}")
    if data.limit_chars is not None and data.limit_chars < 1:
        raise ConfigError("limit_chars", "must be >= 1")
    return RunConfig(model, train, bench, data)


def _check_train(opts: TrainOptions) -> None:
    positive = {"batch_size": opts.batch_size, "max_epochs": opts.max_epochs, "patience": opts.patience}
    for name, v in positive.items():
        if v < 1:
            raise ConfigError(name, "must be >= 1")
    if opts.dtype not in ("float32", "float64"):
        raise ConfigError("dtype", f"must be float32 or float64, got {opts.dtype!r}")
    if not 0 < opts.rho < 1:
        raise ConfigError("rho", "must lie in (0, 1)")
    if opts.eps <= 0:
        raise ConfigError("eps", "must be > 0")
    if opts.clip_norm is not None and opts.clip_norm <= 0:
        raise ConfigError("clip_norm", "must be > 0 or none")
    if opts.max_batches is not None and opts.max_batches < 1:
        raise ConfigError("max_batches", "must be >= 1 or none")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def effective_text(config: RunConfig) -> str:
    """Every key with its resolved value; parsing this text reproduces ``config``."""
    return "".join(f"{key}={_format(config.value(key))}\n" for key in SCHEMA)


def load(name_or_path: str | None = None, overrides: Mapping[str, Any] = ()) -> RunConfig:
    values = read_config(name_or_path) if name_or_path else {}
    return resolve(values, overrides)

