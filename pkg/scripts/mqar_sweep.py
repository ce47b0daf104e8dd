"""Desk-scale MQAR comparison: ZeroS against ELU+1 linear attention over three seeds.

A seed "clears" when its final masked accuracy reaches CLEAR_ACCURACY; ZeroS
passes when at least two seeds clear and its median is not below the
baseline's median.
"""
import argparse
import json
import logging
import statistics
from pathlib import Path

from src.config import get_settings
from src.main import load_train_config
from src.train import train_loop

logger = logging.getLogger(__name__)

MECHANISMS = ("zeros", "linattn_elu")
SEEDS = (0, 1, 2)
CLEAR_ACCURACY = 0.95


def run_sweep(config: Path, out_dir: Path, steps: int | None = None) -> dict:
    base = load_train_config(config)
    if steps is not None:
        base = base.model_copy(update={"steps": steps})
    results: dict[str, list[float]] = {}
    for mechanism in MECHANISMS:
        for seed in SEEDS:
            model = base.model.model_copy(update={"mechanism": mechanism})
            cfg = base.model_copy(update={"model": model, "seed": seed, "name": f"mqar-{mechanism}-s{seed}"})
            result = train_loop(cfg, out_dir / cfg.name)
            accuracy = result.metrics[-1].eval_accuracy if result.metrics else 0.0
            logger.info(f"{mechanism} seed {seed}: accuracy {accuracy:.4f}")
            results.setdefault(mechanism, []).append(accuracy)

    medians = {m: statistics.median(acc) for m, acc in results.items()}
    cleared = sum(a >= CLEAR_ACCURACY for a in results["zeros"])
    return {
        "accuracy": results,
        "median": medians,
        "zeros_seeds_cleared": cleared,
        "passed": cleared >= 2 and medians["zeros"] >= medians["linattn_elu"],
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path, default=Path("configs/mqar.toml"))
    parser.add_argument("--out-dir", type=Path, default=get_settings().run_root / "mqar_sweep")
    parser.add_argument("--steps", type=int, default=None, help="override the step budget")
    args = parser.parse_args()

    logging.basicConfig(level=get_settings().log_level)
    summary = run_sweep(args.config, args.out_dir, args.steps)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
