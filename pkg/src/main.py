import os

# BLAS pools must be pinned before numpy loads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import tomllib  # noqa: E402
from pathlib import Path  # noqa: E402

from pydantic import ValidationError  # noqa: E402

from src.bench import BENCH_MECHANISMS, run_bench  # noqa: E402
from src.config import get_settings  # noqa: E402
from src.converters import write_bench_csv  # noqa: E402
from src.errors import CheckpointError, ConfigError, TrainingDivergedError, ZeroSError  # noqa: E402
from src.models import ZeroSLM  # noqa: E402
from src.schemas import TrainConfig  # noqa: E402
from src.train import eval_batches, evaluate, resolve_seed, restore, train_loop  # noqa: E402
from src.verify import format_table, run_invariants  # noqa: E402
from src.zeros_core import KNOWN_FAULTS  # noqa: E402

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def load_train_config(path: Path, cli_seed: int | None = None) -> TrainConfig:
    """Parse a TOML run config; the resolved seed (--seed, ZEROS_SEED, file) is written back."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open("rb") as f:
            raw = tomllib.load(f)
        cfg = TrainConfig.model_validate(raw)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e
    return cfg.model_copy(update={"seed": resolve_seed(cfg.seed, cli_seed)})


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


# Verify
def cmd_verify(args: argparse.Namespace) -> int:
    results = run_invariants(precision=args.precision, fault=args.fault)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


# Train
def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_train_config(args.config, args.seed)
    run_dir = Path(args.run_dir) if args.run_dir else get_settings().run_root / cfg.name
    logger.info(f"Training {cfg.model.mechanism} on {cfg.task} for {cfg.steps} steps (seed {cfg.seed}) into {run_dir}")
    result = train_loop(cfg, run_dir, resume=Path(args.resume) if args.resume else None)
    if result.metrics:
        last = result.metrics[-1]
        print(f"step {last.step}: loss {last.train_loss:.4f} accuracy {last.eval_accuracy:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


# Eval
def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_train_config(args.config, args.seed)
    model = ZeroSLM(cfg.model)
    state = restore(Path(args.ckpt), model)
    report = evaluate(model, cfg.task, eval_batches(cfg, cfg.seed, cfg.eval_batches))
    logger.info(f"Checkpoint at step {state.step}: accuracy {report.accuracy:.4f} over {report.n_masked} positions")
    print(report.model_dump_json())
    return EXIT_OK


# Bench
def cmd_bench(args: argparse.Namespace) -> int:
    reports = run_bench(
        args.mechanisms.split(","),
        args.seq_lens,
        d_model=args.d_model,
        n_heads=args.n_heads,
        reps=args.reps,
        seed=resolve_seed(0, args.seed),
        precision=args.precision,
    )
    if args.out:
        with Path(args.out).open("w", newline="") as f:
            write_bench_csv(reports, f)
        logger.info(f"Wrote {len(reports)} rows to {args.out}")
    else:
        write_bench_csv(reports, sys.stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(prog="zeros", description="Zero-sum linear attention desk tools")
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", help="run the invariant suite")
    verify.add_argument("--precision", choices=("double", "single"), default=settings.precision)
    verify.add_argument("--fault", choices=sorted(KNOWN_FAULTS), default=None, help=argparse.SUPPRESS)
    verify.set_defaults(handler=cmd_verify)

    train = sub.add_parser("train", help="train a model on a synthetic task")
    train.add_argument("--config", required=True, type=Path)
    train.add_argument("--resume", type=Path, default=None)
    train.add_argument("--run-dir", type=Path, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.set_defaults(handler=cmd_train)

    evaluate_ = sub.add_parser("eval", help="masked accuracy of a checkpoint")
    evaluate_.add_argument("--ckpt", required=True, type=Path)
    evaluate_.add_argument("--config", required=True, type=Path)
    evaluate_.add_argument("--seed", type=int, default=None)
    evaluate_.set_defaults(handler=cmd_eval)

    bench = sub.add_parser("bench", help="forward latency and state size per mechanism")
    bench.add_argument("--mechanisms", default="zeros,zeros_naive,softmax,linattn")
    bench.add_argument("--seq-lens", type=_csv_ints, default=[256, 512, 1024, 2048, 4096])
    bench.add_argument("--d-model", type=int, default=256)
    bench.add_argument("--n-heads", type=int, default=4)
    bench.add_argument("--reps", type=int, default=10)
    bench.add_argument("--precision", choices=("double", "single"), default=settings.precision)
    bench.add_argument("--out", type=Path, default=None)
    bench.add_argument("--seed", type=int, default=None)
    bench.set_defaults(handler=cmd_bench)
    bench.epilog = f"mechanisms: {', '.join(BENCH_MECHANISMS)} (aliases: linattn, zeros_scan)"
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=get_settings().log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, CheckpointError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        logger.error(f"File not found: {e.filename}")
        print(f"error: file not found: {e.filename}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as e:
        logger.error(f"Training diverged: {e}")
        return EXIT_DIVERGED
    except ZeroSError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
