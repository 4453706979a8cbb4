"""Command-line entry point: ``rwkv-forge {train,generate,eval,bench,verify}``.

Exit codes: 0 success, 1 verification failure, 2 usage / input error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .bench import measure_scaling
from .checkpoint import load_checkpoint, save_checkpoint
from .config import BenchConfig, CliConfig, load_config
from .errors import RwkvError
from .generation import MODES, SamplerConfig, generate
from .model import init_model
from .training import TrainConfig, byte_detokenize, byte_tokenize, mean_bits, read_corpus, train
from .verify import run_checks

SEED_ENV = "RWKV_FORGE_SEED"

# Shown in --help for flags that fall back to the config file.
_TRAIN, _SAMPLER, _BENCH = TrainConfig(), SamplerConfig(), BenchConfig()

log = logging.getLogger("rwkv_forge")


class UsageError(Exception):
    pass


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    # None means "fall back to the config file", so showing it is noise.
    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def cmd_train(args, cfg: CliConfig) -> int:
    corpus = read_corpus(_existing(args.corpus))
    for key in ("learning_rate", "max_steps", "batch_size", "chunk_length"):
        if getattr(args, key) is not None:
            setattr(cfg.train, key, getattr(args, key))
    seed = _env_seed()
    if seed is not None:
        cfg.model.seed = seed
        cfg.train.seed = seed
    model = init_model(cfg.model.validate())
    metrics = open(args.metrics, "w", encoding="utf-8") if args.metrics else sys.stderr
    try:
        train(model, corpus, cfg.train, metrics_out=metrics, checkpoint_path=args.out)
    finally:
        if metrics is not sys.stderr:
            metrics.close()
    save_checkpoint(model, args.out)
    log.info("wrote %s", args.out)
    return 0


def cmd_generate(args, cfg: CliConfig) -> int:
    model = load_checkpoint(_existing(args.ckpt))
    sampler = cfg.sampler
    for key in ("mode", "temperature", "k", "seed"):
        if getattr(args, key) is not None:
            setattr(sampler, key, getattr(args, key))
    seed = _env_seed()
    if seed is not None and args.seed is None:
        sampler.seed = seed
    if args.length < 0:
        raise UsageError("--length must be non-negative")
    out = generate(model, byte_tokenize(args.prompt), args.length, sampler)
    sys.stdout.buffer.write(byte_detokenize(out))
    sys.stdout.buffer.flush()
    return 0


def cmd_eval(args, cfg: CliConfig) -> int:
    model = load_checkpoint(_existing(args.ckpt))
    bits = mean_bits(model, read_corpus(_existing(args.corpus)), args.chunk_length)
    print(f"perplexity: {2.0 ** bits:.3f}")
    print(f"bits_per_char: {bits:.4f}")
    return 0


def cmd_bench(args, cfg: CliConfig) -> int:
    b = cfg.bench
    lengths = [int(x) for x in args.lengths.split(",")] if args.lengths else b.lengths
    dim = args.dim if args.dim is not None else b.dim
    reps = args.repetitions if args.repetitions is not None else b.repetitions
    out = args.out if args.out is not None else b.out
    seed = _env_seed()
    report = measure_scaling(lengths, dim, reps, seed=seed or 0, out=out)
    for op in ("wkv_parallel", "wkv_sequential", "reference_attention"):
        print(f"{op}: log-log slope {report.slope(op):.3f}")
    log.info("wrote %s", out)
    return 0


def cmd_verify(args, cfg: CliConfig) -> int:
    seed = _env_seed()
    results = run_checks(args.seed if seed is None else seed)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="rwkv-forge", description=__doc__, formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--config", default=None, help="TOML file with [model] [train] [sampler] [bench] tables (default: built-in values)"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a byte corpus", formatter_class=fmt)
    p.add_argument("--config", default=argparse.SUPPRESS, help="TOML config file (default: built-in values)")
    p.add_argument("--corpus", required=True, help="raw bytes to train on")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--metrics", default=None, help="metrics CSV path (default: stderr)")
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None, help=f"override train.learning_rate (config default: {_TRAIN.learning_rate})")
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None, help=f"override train.max_steps (config default: {_TRAIN.max_steps})")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None, help=f"override train.batch_size (config default: {_TRAIN.batch_size})")
    p.add_argument("--chunk-length", dest="chunk_length", type=int, default=None, help=f"override train.chunk_length (config default: {_TRAIN.chunk_length})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample bytes from a checkpoint", formatter_class=fmt)
    p.add_argument("--config", default=argparse.SUPPRESS, help="TOML config file (default: built-in values)")
    p.add_argument("--ckpt", required=True, help="checkpoint to load")
    p.add_argument("--prompt", default="", help="prompt text (UTF-8)")
    p.add_argument("--length", type=int, default=100, help="number of bytes to emit")
    p.add_argument("--mode", choices=MODES, default=None, help=f"sampling mode (config default: {_SAMPLER.mode})")
    p.add_argument("--temperature", type=float, default=None, help=f"softmax temperature (config default: {_SAMPLER.temperature})")
    p.add_argument("--k", type=int, default=None, help=f"top-k cutoff (config default: {_SAMPLER.k})")
    p.add_argument("--seed", type=int, default=None, help=f"sampler seed (config default: {_SAMPLER.seed})")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="perplexity and bits-per-char of a corpus", formatter_class=fmt)
    p.add_argument("--config", default=argparse.SUPPRESS, help="TOML config file (default: built-in values)")
    p.add_argument("--ckpt", required=True, help="checkpoint to load")
    p.add_argument("--corpus", required=True, help="raw bytes to score")
    p.add_argument("--chunk-length", dest="chunk_length", type=int, default=256, help="tokens per parallel chunk")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time WKV against softmax attention", formatter_class=fmt)
    p.add_argument("--config", default=argparse.SUPPRESS, help="TOML config file (default: built-in values)")
    p.add_argument("--lengths", default=None, help=f"comma-separated sequence lengths (config default: {','.join(map(str, _BENCH.lengths))})")
    p.add_argument("--dim", type=int, default=None, help=f"channel count (config default: {_BENCH.dim})")
    p.add_argument("--repetitions", type=int, default=None, help=f"timed runs per point (config default: {_BENCH.repetitions})")
    p.add_argument("--out", default=None, help=f"CSV output path (config default: {_BENCH.out})")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run the invariant suite", formatter_class=fmt)
    p.add_argument("--config", default=argparse.SUPPRESS, help="TOML config file (default: built-in values)")
    p.add_argument("--seed", type=int, default=0, help="seed for random test cases")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"rwkv-forge: I/O error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, RwkvError) as exc:
        print(f"rwkv-forge: {exc}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        # Downstream closed early (e.g. `| head`); silence the flush at exit.
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0


if __name__ == "__main__":
    sys.exit(main())
