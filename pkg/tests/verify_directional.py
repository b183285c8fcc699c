"""Seeded directional comparison on the desk and multilingual configs.

Runs every strategy for three seeds (tens of minutes on one core) and
checks the in-domain BLEU orderings. Not collected by pytest; run it
directly: python tests/verify_directional.py [--runs-dir DIR]
"""
import argparse
import os
import sys
import tempfile
from pathlib import Path
from typing import Dict, Sequence

sys.path.insert(0, os.getcwd())
sys.path.insert(0, str(Path(os.getcwd()) / "scripts"))

from apps.experiments import service
from apps.experiments.config import load_config
from run_comparison import DEFAULT_STRATEGIES, run_one, with_strategy

MARGIN = 2.0
SEEDS = (1, 2, 3)
MULTI_SOURCE_STRATEGIES = ("multi_domain", "mixed_fine_tuning")


def in_domain_bleu(rows):
    return {row.strategy: row.bleu for row in rows if row.in_domain}


def seeded_bleu(config_path: str, strategies: Sequence[str], runs_dir: Path) -> Dict[str, float]:
    """Mean in-domain test BLEU over SEEDS per strategy label."""
    config = load_config(config_path)
    config = config.model_copy(
        update={"data": config.data.model_copy(update={"dir": str(runs_dir / "data")})}
    )
    service.cmd_synth_data(config, force=True)

    run_dirs = []
    for spec in strategies:
        variant = with_strategy(config, spec)
        for seed in SEEDS:
            print(f"Training {variant.strategy.label} on {config_path} (seed {seed})")
            run_dirs.append(run_one(variant, seed, runs_dir))

    rows = service.collect_report(run_dirs)
    print(service.format_report(rows))
    return in_domain_bleu(rows)


def report(passed: bool, better: str, better_bleu: float, worse: str, worse_bleu: float) -> bool:
    gap = better_bleu - worse_bleu
    print(f"{'PASS' if passed else 'FAIL'}: {better} {better_bleu:.2f} vs {worse} {worse_bleu:.2f} ({gap:+.2f})")
    return passed


def verify(runs_dir: Path) -> bool:
    bleu = seeded_bleu("configs/desk.ini", DEFAULT_STRATEGIES, runs_dir / "desk")
    checks = [
        (label, "in_domain_only") for label in bleu if label != "in_domain_only"
    ] + [
        ("mixed_fine_tuning", "multi_domain"),
        ("proposed_mft(domextr)", "proposed(domextr)"),
    ]
    ok = True
    for better, worse in checks:
        passed = bleu[better] - bleu[worse] >= MARGIN
        ok = report(passed, better, bleu[better], worse, bleu[worse]) and ok

    # two out-of-domain sources must not do worse than one
    multi = seeded_bleu("configs/multilingual.ini", MULTI_SOURCE_STRATEGIES, runs_dir / "multilingual")
    for label in MULTI_SOURCE_STRATEGIES:
        passed = multi[label] >= bleu[label]
        ok = report(passed, f"{label} (two sources)", multi[label], f"{label} (one source)", bleu[label]) and ok
    return ok


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--runs-dir", default=None)
    args = parser.parse_args()
    if args.runs_dir:
        sys.exit(0 if verify(Path(args.runs_dir)) else 1)
    with tempfile.TemporaryDirectory() as tmp:
        sys.exit(0 if verify(Path(tmp)) else 1)
