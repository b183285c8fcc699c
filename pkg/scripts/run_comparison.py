import argparse
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence
from dotenv import load_dotenv
import logging

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from apps.experiments import service  # noqa: E402
from apps.experiments.config import load_config, validate_config  # noqa: E402
from apps.experiments.schemas import ExperimentConfig, StrategySection  # noqa: E402
from core.exceptions import DomainAdaptError  # noqa: E402

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

DEFAULT_STRATEGIES = (
    "in_domain_only",
    "concat",
    "fine_tuning",
    "multi_domain",
    "mixed_fine_tuning",
    "proposed:domextr",
    "proposed_mft:domextr",
)


def with_strategy(config: ExperimentConfig, spec: str) -> ExperimentConfig:
    """`kind` or `kind:head`, keeping the configured parents."""
    kind, _, head = spec.partition(":")
    section = StrategySection(kind=kind, head=head or "vanilla", parents=config.strategy.parents)
    updated = config.model_copy(update={"strategy": section})
    validate_config(updated)
    return updated


def run_one(config: ExperimentConfig, seed: int, runs_dir: Path) -> Path:
    run_dir = runs_dir / f"{config.strategy.label}-seed{seed}"
    service.cmd_prepare(config, run_dir, seed)
    service.cmd_train(config, run_dir, seed)
    service.cmd_translate(config, run_dir, seed)
    return run_dir


def run_comparison(
    config: ExperimentConfig,
    strategies: Sequence[str],
    seeds: Sequence[int],
    runs_dir: Path,
    report_path: Optional[Path] = None,
) -> str:
    run_dirs: List[Path] = []
    for spec in strategies:
        variant = with_strategy(config, spec)
        for seed in seeds:
            logger.info(f"Running {variant.strategy.label} with seed {seed}")
            run_dirs.append(run_one(variant, seed, runs_dir))
    return service.cmd_report(run_dirs, report_path)


def main() -> int:
    load_dotenv()
    parser = argparse.ArgumentParser(description="Train every strategy over several seeds and report test BLEU")
    parser.add_argument("--config", required=True)
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    parser.add_argument("--strategies", nargs="+", default=list(DEFAULT_STRATEGIES))
    parser.add_argument("--runs-dir", default=os.getenv("RUNS_DIR", "runs"))
    parser.add_argument("--report", default=None)
    parser.add_argument("--synth", action="store_true", help="generate the corpora first (overwrites the data dir)")
    args = parser.parse_args()

    try:
        config = load_config(args.config)
        if args.synth:
            service.cmd_synth_data(config, force=True)
        report_path = Path(args.report) if args.report else Path(args.runs_dir) / "report.tsv"
        report = run_comparison(config, args.strategies, args.seeds, Path(args.runs_dir), report_path)
    except DomainAdaptError as e:
        logger.error(e.describe())
        return e.exit_code
    sys.stdout.write(report)
    return 0


if __name__ == "__main__":
    sys.exit(main())
