"""Memorize the 8-record fixture with the desk configuration.

Trains from scratch, then greedy-decodes every record and prints the caption
next to its target.  Exits non-zero if any caption differs.

    python3 scripts/overfit.py [--config configs/desk.yaml]
"""
import argparse
import sys
import time

from capcore import data as D
from capcore.cli import prepare_training
from capcore.config import load_config
from capcore.model import CaptionModel, generate
from capcore.training import fit


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/desk.yaml")
    ap.add_argument("--manifest", default="tests/fixtures/tiny/manifest.jsonl")
    args = ap.parse_args()

    cfg = load_config(args.config)
    records = D.read_manifest(args.manifest)
    vocab, mcfg, batches = prepare_training(records, cfg)
    model = CaptionModel(mcfg, seed=cfg.train.seed)
    t0 = time.perf_counter()

    def progress(m, _trainer):
        if m["epoch"] % 25 == 0 or m["epoch"] == cfg.train.epochs - 1:
            print(f"epoch {m['epoch']:4d}  loss {m['loss']:.4f}  nll {m['nll']:.4f}")

    fit(model, batches, cfg.train, on_epoch=progress)
    print(f"trained in {time.perf_counter() - t0:.0f} s")

    loader = D.FeatureCache()
    wrong = 0
    for rec in records:
        feats = loader(rec).features[: mcfg.max_visual_tokens].astype(float)
        got = D.decode(generate(model, feats), vocab)
        want = " ".join(D.normalize_and_tokenize(D.format_action_justification(rec)[0]))
        wrong += got != want
        print(f"{'ok ' if got == want else 'BAD'} {rec.video_id}  {got}")
    return 1 if wrong else 0


if __name__ == "__main__":
    sys.exit(main())
