"""Replay the four ablation variants on the fixture over several seeds.

Each variant is a config file under configs/ablation/.  Prints a TSV of the
final per-token training NLL for every (variant, seed) pair.

    python3 scripts/run_ablation.py --seeds 0 1 2
"""
import argparse
from pathlib import Path

from capcore import data as D
from capcore.cli import prepare_training
from capcore.config import load_config
from capcore.model import CaptionModel
from capcore.training import evaluate_nll, fit

VARIANTS = ("proposed", "single_head", "no_accumulation", "baseline")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config-dir", type=Path, default=Path("configs/ablation"))
    ap.add_argument("--manifest", default="tests/fixtures/tiny/manifest.jsonl")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    records = D.read_manifest(args.manifest)
    print("variant\tseed\tfinal_nll")
    for name in VARIANTS:
        for seed in args.seeds:
            cfg = load_config(args.config_dir / f"{name}.yaml", overrides={"train.seed": seed})
            _, mcfg, batches = prepare_training(records, cfg)
            model = CaptionModel(mcfg, seed=seed)
            fit(model, batches, cfg.train)
            print(f"{name}\t{seed}\t{evaluate_nll(model, batches):.6f}", flush=True)


if __name__ == "__main__":
    main()
