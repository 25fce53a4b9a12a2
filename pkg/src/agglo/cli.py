"""``agglo`` command line: train, eval, generate, bench and verify.

Exit codes: 0 ok, 1 verification or scaling failure, 2 configuration error,
3 I/O or data error, 4 checkpoint error, 130 interrupted.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench as B
from . import config as C
from . import kernels, verify
from .checkpoint import load_checkpoint
from .data import TEXT8_URL, CharVocab, read_corpus_split
from .errors import CheckpointError, ConfigError, ContractError, DataError, TrainingError
from .model import generate
from .training import evaluate, train

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECKPOINT = 4
EXIT_INTERRUPTED = 130

logger = logging.getLogger("agglo")


def _echo(text: str, out_dir: Path | None = None) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "effective_config.txt").write_text(text)


def _overrides(args, **extra) -> dict:
    keys = {
        "seed": "seed", "limit_chars": "limit_chars", "dtype": "dtype", "attention": "attention_kind",
        "encoding": "encoding_kind", "corpus": "corpus", "max_epochs": "max_epochs",
        "batch_size": "batch_size", "seq_len": "seq_len", "patience": "patience",
    }
    out = {cfg_key: getattr(args, arg) for arg, cfg_key in keys.items() if getattr(args, arg, None) is not None}
    out.update({k: v for k, v in extra.items() if v is not None})
    return out


def _load_corpus(cfg: C.RunConfig):
    path = Path(cfg.data.corpus)
    if not path.is_file():
        raise FileNotFoundError(f"corpus file {path} not found (text8 is available from {TEXT8_URL}; "
                                "extract it and pass --corpus)")
    return read_corpus_split(path, cfg.data.limit_chars, cfg.data.split)


def cmd_train(args) -> int:
    cfg = C.load(args.config, _overrides(args))
    text = C.effective_text(cfg)
    sys.stdout.write(text)
    # read the corpus before creating any output so a bad path leaves nothing behind
    corpus, _ = _load_corpus(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.txt").write_text(text)

    def report(run):
        print(f"epoch {run.epoch} train {run.train_history[-1]:.4f} valid {run.valid_history[-1]:.4f} bits "
              f"({run.epoch_seconds[-1]:.1f}s)", flush=True)

    run, _ = train(cfg.model, corpus, dataclasses.replace(cfg.train, out_dir=out), on_epoch=report)
    print(f"stopped after epoch {run.epoch}: {run.stop_reason}")
    print(f"best valid {run.best_valid:.4f} bits at epoch {run.best_epoch}")
    return EXIT_OK


def _load_model(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    return load_checkpoint(ckpt)


def cmd_eval(args) -> int:
    model = _load_model(args)
    cfg = C.load(args.config, _overrides(args))
    text = f"checkpoint={args.checkpoint}\nsplit={args.split}\n" + C.effective_text(cfg)
    _echo(text, Path(args.out) if args.out else None)
    corpus, _ = _load_corpus(cfg)
    if args.dtype:
        model = model.astype(np.dtype(args.dtype))
    bpc = evaluate(model, getattr(corpus, args.split), model.config.seq_len)
    print(f"{args.split} bpc={bpc:.6f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    model = _load_model(args)
    text = (f"checkpoint={args.checkpoint}\nprompt={args.prompt}\nn_tokens={args.n_tokens}\n"
            f"temperature={args.temperature}\nseed={args.seed if args.seed is not None else 0}\n")
    _echo(text, Path(args.out) if args.out else None)
    vocab = CharVocab()
    ids = generate(model, vocab.encode(args.prompt), args.n_tokens, args.temperature,
                   seed=args.seed if args.seed is not None else 0)
    print(vocab.decode(ids))
    return EXIT_OK


def cmd_bench(args) -> int:
    extra = {
        "bench_lengths": args.lengths,
        "bench_replicas": args.replicas,
        "bench_masked": None if args.masked is None else args.masked,
        "bench_backward": True if args.backward else None,
    }
    cfg = C.load(args.config, _overrides(args, **extra))
    bc = dataclasses.replace(cfg.bench, seed=cfg.train.seed, dtype=cfg.train.dtype)
    if args.assert_scaling and len(bc.seq_lengths) < 3:
        raise ContractError(f"--assert-scaling needs at least 3 lengths, got {list(bc.seq_lengths)}")
    out = Path(args.out)
    text = C.effective_text(cfg) + f"kernel_backend={kernels.get_backend()}\n"
    _echo(text, out)
    pin = B.pin_to_one_core()
    skipped: list[str] = []
    records = B.run_bench(bc, skipped, progress=lambda r: logger.info(
        "%s t=%d replica=%d %.6fs", r.kind, r.seq_len, r.replica, r.seconds))
    B.write_csv(records, out / "bench.csv")
    B.write_meta(B.machine_meta(bc, pin, skipped), out / "bench_meta.txt")
    summary = B.summarize(records)
    (out / "bench_summary.txt").write_text(summary)
    sys.stdout.write(summary)
    if args.assert_scaling:
        problems = B.check_scaling(B.fit_scaling(records))
        for p in problems:
            print(f"scaling check failed: {p}")
        if problems:
            return EXIT_FAILED
        print("scaling check passed")
    return EXIT_OK


def cmd_verify(args) -> int:
    dtype = args.dtype or "float64"
    text = f"dtype={dtype}\nbreak_masking={str(args.break_masking).lower()}\nkernel_backend={kernels.get_backend()}\n"
    _echo(text, Path(args.out) if args.out else None)
    results = verify.run_all(dtype, args.break_masking,
                             on_result=lambda r: print(verify.format_row(r), flush=True))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    for r in failed:
        print(f"failed: {r.suite} / {r.name}")
    return EXIT_FAILED if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agglo", description=__doc__.splitlines()[0])
    parser.add_argument("--backend", choices=kernels.BACKENDS, help="prefix-average kernel implementation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True):
        p.add_argument("--config", help="config file or preset name")
        p.add_argument("--seed", type=int)
        p.add_argument("--dtype", choices=("float32", "float64"))
        if corpus:
            p.add_argument("--corpus", help="path to the extracted text8 file")
            p.add_argument("--limit-chars", type=int)

    p = sub.add_parser("train", help="train a character model")
    common(p)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--attention", choices=("full", "agglomerative"))
    p.add_argument("--encoding", choices=("embedding", "convolution"))
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--patience", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report bits per character of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="valid")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="sample text from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default=" ", help="seed text (default: a single space)")
    p.add_argument("--n-tokens", type=int, default=200)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="time attention layers across sequence lengths")
    common(p, corpus=False)
    p.add_argument("--out", default="runs/bench")
    p.add_argument("--lengths", help="comma-separated sequence lengths")
    p.add_argument("--replicas", type=int)
    p.add_argument("--masked", dest="masked", action="store_true", default=None)
    p.add_argument("--unmasked", dest="masked", action="store_false")
    p.add_argument("--backward", action="store_true", help="time forward plus backward")
    p.add_argument("--assert-scaling", action="store_true", help="exit 1 if a slope leaves its band")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run oracle, causality and gradient checks")
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--break-masking", action="store_true", help="remove the causal restriction (negative control)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.backend:
            kernels.set_backend(args.backend)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error in {exc.field!r}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractError as exc:
        print(f"invalid request: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, DataError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except KeyboardInterrupt:
        print("interrupted; last.ckpt holds the most recent completed epoch", file=sys.stderr)
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
