"""``capcore`` command line: extract | split | train | generate | evaluate.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import data as D
from .config import ConfigError, RunConfig, load_config
from .metrics import EvalPair, evaluate_corpus
from .model import CaptionModel, generate
from .tensor import NonFiniteError
from .training import (CheckpointError, NumericError, OptimizerState, Trainer, load_checkpoint,
                       model_from_checkpoint, save_checkpoint)
from .vision import (FeatureFileError, ResNetMini, ResNetMiniConfig, extract_features, load_frame,
                     read_features, sample_frames, write_features)

log = logging.getLogger("capcore")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}
CKPT_RE = re.compile(r"epoch_(\d+)\.ckpt$")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# extract


def _frame_files(frame_dir: Path) -> list[Path]:
    files = sorted(p for p in frame_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no image files in {frame_dir}")
    return files


def _extract_one(job):
    rec, cfg, out_path = job
    ecfg = cfg.extract
    net = ResNetMini(ResNetMiniConfig(ecfg.stage_channels, ecfg.blocks_per_stage,
                                      (ecfg.input_size, ecfg.input_size), ecfg.feature_dim), seed=ecfg.seed)
    try:
        files = _frame_files(Path(rec.frames))
        idx = sample_frames(len(files), min(ecfg.frames_per_video, len(files)), cfg.data.sampling)
        frames = [load_frame(files[i], (ecfg.input_size, ecfg.input_size)) for i in idx]
    except (OSError, ValueError, DataError) as exc:
        return rec.video_id, f"{type(exc).__name__}: {exc}"
    fs = extract_features(frames, net, rec.video_id, idx)
    write_features(fs, out_path)
    return rec.video_id, None


def cmd_extract(args, cfg: RunConfig) -> int:
    records = D.read_manifest(args.manifest)
    out = _out_dir(args)
    feat_dir = out / "features"
    index_path = out / "manifest.jsonl"
    if index_path.exists() and not args.force:
        raise UsageError(f"{index_path} already exists; pass --force to overwrite")
    feat_dir.mkdir(exist_ok=True)
    jobs, done = [], []
    for rec in records:
        if rec.frames is None:
            done.append(rec)  # already has features; carried over unchanged
            continue
        jobs.append((rec, cfg, feat_dir / f"{rec.video_id}.mmvc"))
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_extract_one, jobs))
    else:
        results = [_extract_one(j) for j in jobs]
    failed = []
    by_id = {j[0].video_id: j for j in jobs}
    for vid, err in results:
        if err is not None:
            log.warning("extract failed for %s: %s", vid, err)
            failed.append(vid)
            continue
        rec, _, path = by_id[vid]
        done.append(D.CaptionRecord(rec.video_id, list(rec.captions), features=str(path),
                                    action=rec.action, justification=rec.justification))
    order = {r.video_id: i for i, r in enumerate(records)}
    done.sort(key=lambda r: order[r.video_id])
    D.write_manifest(done, index_path)
    cfg.dump(out / "config.yaml")
    log.info("extracted %d videos, %d failed", len(done), len(failed))
    if failed and not args.keep_going:
        raise DataError(f"feature extraction failed for: {', '.join(failed)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# split


def cmd_split(args, cfg: RunConfig) -> int:
    fraction = cfg.data.test_fraction if args.fraction is None else args.fraction
    if not 0 < fraction < 1:
        raise UsageError(f"--fraction must lie strictly between 0 and 1, got {fraction}")
    records = D.read_manifest(args.manifest)
    try:
        train, test = D.split(records, fraction, cfg.train.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = _out_dir(args)
    D.write_manifest(train, out / "train.jsonl")
    D.write_manifest(test, out / "test.jsonl")
    cfg.dump(out / "config.yaml")
    log.info("split %d records: %d train / %d test", len(records), len(train), len(test))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _checkpoints(ckpt_dir: Path) -> list[tuple[int, Path]]:
    found = []
    for p in ckpt_dir.glob("epoch_*.ckpt"):
        m = CKPT_RE.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return sorted(found)


def write_vocab(vocab: D.Vocabulary, path: Path) -> None:
    _write_text(path, "".join(t + "\n" for t in vocab.itos))


def read_vocab(path) -> D.Vocabulary:
    return D.Vocabulary(Path(path).read_text(encoding="utf-8").splitlines())


def prepare_training(records, cfg: RunConfig):
    """Vocabulary, completed model config and batches for ``records``.

    Fills the data-dependent model fields (vocabulary size, feature width,
    visual token budget) in place on ``cfg.model``.
    """
    texts = [D.normalize_and_tokenize(t) for rec in records for t in D.format_action_justification(rec)]
    vocab = D.build_vocab(texts, cfg.data.min_freq, cfg.data.vocab_cap)
    loader = D.FeatureCache()
    for rec in records:
        loader(rec)  # fail fast, naming the record
    mcfg = cfg.model
    mcfg.vocab_size = len(vocab)
    mcfg.feature_dim = loader(records[0]).dim
    mcfg.max_visual_tokens = cfg.data.n_visual
    mcfg.__post_init__()
    batches = D.make_batches(records, vocab, cfg.train.batch_size, mcfg.max_text_len, cfg.data.n_visual, loader)
    return vocab, mcfg, batches


def cmd_train(args, cfg: RunConfig) -> int:
    records = D.read_manifest(args.manifest)
    if not records:
        raise DataError("training manifest is empty")
    out = _out_dir(args)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    existing = _checkpoints(ckpt_dir)
    if existing and not args.resume:
        raise UsageError(f"{ckpt_dir} already holds checkpoints; pass --resume to continue")

    vocab, mcfg, batches = prepare_training(records, cfg)
    tcfg = cfg.train

    start_epoch = 0
    if existing and args.resume:
        ck = load_checkpoint(existing[-1][1])
        if ck.vocab != vocab or ck.model_config != mcfg:
            raise UsageError("checkpoint does not match the current manifest/config")
        model = model_from_checkpoint(ck)
        trainer = Trainer(model, tcfg, ck.optimizer or OptimizerState(), ck.loss_scale)
        start_epoch = ck.epoch + 1
        log.info("resuming after epoch %d", ck.epoch)
    else:
        model = CaptionModel(mcfg, seed=tcfg.seed)
        trainer = Trainer(model, tcfg)
    cfg.dump(out / "config.yaml")
    write_vocab(vocab, out / "vocab.txt")

    log_path = out / "train_log.tsv"
    if not log_path.exists():
        _write_text(log_path, "epoch\tstep\tloss\tnll\tgrad_norm\tloss_scale\tskipped\twall_time\n")
    for epoch in range(start_epoch, tcfg.epochs):
        t0 = time.perf_counter()
        try:
            m = trainer.train_epoch(batches, epoch)
        except (NumericError, NonFiniteError) as exc:
            last = _checkpoints(ckpt_dir)
            where = last[-1][1] if last else "none"
            raise NumericError(f"epoch {epoch}: {exc}; last good checkpoint: {where}") from exc
        path = ckpt_dir / f"epoch_{epoch:04d}.ckpt"
        save_checkpoint(path, model, vocab, tcfg, trainer.state, epoch, trainer.state.step,
                        trainer.loss_scale)
        for _, old in _checkpoints(ckpt_dir)[: -cfg.keep_checkpoints]:
            old.unlink()
        with open(log_path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{epoch}\t{m['updates']}\t{m['loss']:.10g}\t{m['nll']:.10g}\t{m['grad_norm_mean']:.10g}"
                     f"\t{m['loss_scale']:g}\t{m['skipped']}\t{time.perf_counter() - t0:.3f}\n")
        log.info("epoch %d loss %.5f nll %.5f", epoch, m["loss"], m["nll"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate


def _parse_strategy(text: str) -> tuple[str, int]:
    if text == "greedy":
        return "greedy", 1
    m = re.fullmatch(r"beam:(\d+)", text)
    if m and int(m.group(1)) >= 1:
        return "beam", int(m.group(1))
    raise UsageError(f"--strategy must be 'greedy' or 'beam:K', got {text!r}")


def cmd_generate(args, cfg: RunConfig) -> int:
    strategy, k = _parse_strategy(args.strategy)
    ck = load_checkpoint(args.checkpoint)
    if args.vocab is not None and read_vocab(args.vocab) != ck.vocab:
        raise UsageError(f"vocabulary {args.vocab} does not match the checkpoint")
    model = model_from_checkpoint(ck)
    records = D.read_manifest(args.manifest)
    loader = D.FeatureCache()
    lines = []
    seen = set()
    for rec in records:
        if rec.video_id in seen:
            continue
        seen.add(rec.video_id)
        fs = loader(rec)
        if fs.dim != ck.model_config.feature_dim:
            raise DataError(f"{rec.video_id}: feature dim {fs.dim} != model {ck.model_config.feature_dim}")
        feats = fs.features[: ck.model_config.max_visual_tokens].astype(float)
        ids = generate(model, feats, strategy, k)
        lines.append(f"{rec.video_id}\t{D.decode(ids, ck.vocab)}\n")
    out = _out_dir(args)
    _write_text(out / args.output, "".join(lines))
    log.info("wrote %d captions to %s", len(lines), out / args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def read_captions(path) -> dict:
    hyps: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            vid, sep, text = line.partition("\t")
            if not sep:
                raise DataError(f"{path}:{lineno}: expected 'video_id<TAB>caption'")
            if vid in hyps:
                raise DataError(f"{path}:{lineno}: duplicate video_id {vid}")
            hyps[vid] = text
    return hyps


def cmd_evaluate(args, cfg: RunConfig) -> int:
    hyps = read_captions(args.captions)
    refs: dict = {}
    for rec in D.read_manifest(args.manifest):
        refs.setdefault(rec.video_id, []).extend(D.reference_tokens(rec))
    missing = sorted(set(hyps) - set(refs))
    if missing:
        raise DataError(f"no references for video ids: {', '.join(missing)}")
    pairs = [EvalPair(D.normalize_and_tokenize(hyps[v]), refs[v], v) for v in hyps]
    try:
        report = evaluate_corpus(pairs, cfg.metrics.smooth, cfg.metrics.stem, cfg.metrics.rouge_beta)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    text = report.to_kv() if args.format == "kv" else report.to_text()
    sys.stdout.write(text)
    out = _out_dir(args)
    _write_text(out / ("report.kv" if args.format == "kv" else "report.txt"), text)
    if args.plot_data:
        _write_text(Path(args.plot_data), report.plot_rows())
    cfg.dump(out / "config.yaml")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, suppress):
        # repeated on each subcommand so the flags work on either side of it
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--config", default=d(None), help="YAML run config")
        parser.add_argument("--seed", type=int, default=d(None), help="overrides train.seed")
        parser.add_argument("--out", default=d("."), help="output directory")
        parser.add_argument("--quiet", action="store_true", default=d(False))

    p = _Parser(prog="capcore", description="Video captioning: features, training, decoding, metrics.")
    global_flags(p, False)
    common = _Parser(add_help=False)
    global_flags(common, True)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    e = sub.add_parser("extract", parents=[common], help="frames -> feature files + index manifest")
    e.add_argument("manifest")
    e.add_argument("--keep-going", action="store_true")
    e.add_argument("--force", action="store_true")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--input-size", type=int, dest="extract.input_size", metavar="PX")
    e.add_argument("--frames", type=int, dest="extract.frames_per_video", metavar="N")

    s = sub.add_parser("split", parents=[common], help="train/test manifests")
    s.add_argument("manifest")
    s.add_argument("--fraction", type=float)

    t = sub.add_parser("train", parents=[common], help="train and checkpoint")
    t.add_argument("manifest")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--epochs", type=int, dest="train.epochs", metavar="N")
    t.add_argument("--lr", type=float, dest="train.learning_rate", metavar="LR")
    t.add_argument("--batch-size", type=int, dest="train.batch_size", metavar="N")
    t.add_argument("--heads", type=int, dest="model.n_heads", metavar="N")
    t.add_argument("--accumulation", metavar="K", help="steps per update, or 'off'")
    t.add_argument("--no-visual", action="store_const", const=False, dest="model.use_visual")

    g = sub.add_parser("generate", parents=[common], help="decode captions for a manifest")
    g.add_argument("checkpoint")
    g.add_argument("manifest")
    g.add_argument("--strategy", default="greedy", help="greedy or beam:K")
    g.add_argument("--vocab", help="vocabulary file that must match the checkpoint")
    g.add_argument("--output", default="captions.tsv")

    v = sub.add_parser("evaluate", parents=[common], help="score captions against references")
    v.add_argument("captions")
    v.add_argument("manifest")
    v.add_argument("--format", choices=("text", "kv"), default="text")
    v.add_argument("--plot-data", help="write key,value rows for plotting")
    v.add_argument("--smooth", action="store_const", const=True, dest="metrics.smooth")
    v.add_argument("--no-stem", action="store_const", const=False, dest="metrics.stem")
    return p


def _overrides(args) -> dict:
    ov = {k: v for k, v in vars(args).items() if "." in k}
    if args.seed is not None:
        ov["train.seed"] = args.seed
    acc = getattr(args, "accumulation", None)
    if acc is not None:
        if acc == "off":
            ov["train.accumulation_steps"] = 1
        elif acc.isdigit() and int(acc) >= 1:
            ov["train.accumulation_steps"] = int(acc)
        else:
            raise UsageError(f"--accumulation must be a positive integer or 'off', got {acc!r}")
    return ov


COMMANDS = {"extract": cmd_extract, "split": cmd_split, "train": cmd_train,
            "generate": cmd_generate, "evaluate": cmd_evaluate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"capcore: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = load_config(args.config, overrides=_overrides(args))
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"capcore: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, NonFiniteError, FloatingPointError) as exc:
        print(f"capcore: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, D.ManifestError, CheckpointError, FeatureFileError, OSError, ValueError) as exc:
        print(f"capcore: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
