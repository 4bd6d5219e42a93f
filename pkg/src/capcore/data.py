"""Tokenisation, vocabulary, manifest records, splitting and batch assembly."""
from __future__ import annotations

import json
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import BOS, EOS, PAD, UNK
from .tensor import Rng
from .vision import VisualFeatureSet, read_features

log = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")
JOINER = "because"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_KNOWN_FIELDS = {"video_id", "features", "frames", "captions", "action", "justification"}


class ManifestError(ValueError):
    pass


def normalize_and_tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation into its own tokens, drop whitespace."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    itos: list
    min_freq: int = 1

    def __post_init__(self):
        if tuple(self.itos[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the 4 special tokens")
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int = 1, cap: int = 10000) -> Vocabulary:
    """Keep tokens seen at least ``min_freq`` times, most frequent first
    (ties alphabetical), at most ``cap`` entries including the specials."""
    if cap < 5:
        raise ValueError("vocabulary cap must be >= 5")
    counts: Counter = Counter()
    n = 0
    for toks in corpus:
        counts.update(toks)
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept[: cap - len(SPECIALS)], min_freq)


def encode(text, vocab: Vocabulary) -> list[int]:
    toks = normalize_and_tokenize(text) if isinstance(text, str) else list(text)
    return [BOS] + [vocab.id(t) for t in toks] + [EOS]


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise ValueError(f"unknown token id {i}")
        if i > EOS:
            words.append(vocab.itos[i])
    return " ".join(words)


# ---------------------------------------------------------------------------
# records and manifests


@dataclass
class CaptionRecord:
    video_id: str
    captions: list = field(default_factory=list)
    features: Optional[str] = None
    frames: Optional[str] = None
    action: Optional[str] = None
    justification: Optional[str] = None

    def __post_init__(self):
        if not self.video_id:
            raise ManifestError("record without video_id")
        if (self.features is None) == (self.frames is None):
            raise ManifestError(f"record {self.video_id}: exactly one of features/frames required")
        if (self.action is None) != (self.justification is None):
            raise ManifestError(f"record {self.video_id}: action and justification must come together")
        if not self.captions and self.action is None:
            raise ManifestError(f"record {self.video_id}: no captions")

    def to_json(self) -> dict:
        d = {"video_id": self.video_id}
        if self.features is not None:
            d["features"] = self.features
        if self.frames is not None:
            d["frames"] = self.frames
        d["captions"] = list(self.captions)
        if self.action is not None:
            d["action"] = self.action
            d["justification"] = self.justification
        return d


def format_action_justification(rec: CaptionRecord) -> list[str]:
    """Training texts of a record: the joined pair if present, else its captions."""
    if rec.action is not None and rec.justification is not None:
        return [f"{rec.action.strip()} {JOINER} {rec.justification.strip()}"]
    return list(rec.captions)


def parse_action_justification(text: str) -> tuple[str, str]:
    action, sep, why = text.partition(f" {JOINER} ")
    if not sep:
        raise ValueError("text has no action/justification joiner")
    return action, why


def _resolve(path: Optional[str], base: Path) -> Optional[str]:
    if path is None:
        return None
    p = Path(path)
    return str(p if p.is_absolute() else (base / p))


def read_manifest(path) -> list[CaptionRecord]:
    """One JSON object per line; relative paths resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: record must be an object")
            extra = set(obj) - _KNOWN_FIELDS
            if extra:
                log.warning("%s:%d: ignoring unknown fields %s", path, lineno, sorted(extra))
            caps = obj.get("captions", [])
            if not isinstance(caps, list) or not all(isinstance(c, str) for c in caps):
                raise ManifestError(f"{path}:{lineno}: captions must be a list of strings")
            try:
                records.append(CaptionRecord(
                    video_id=str(obj.get("video_id", "")),
                    captions=caps,
                    features=_resolve(obj.get("features"), base),
                    frames=_resolve(obj.get("frames"), base),
                    action=obj.get("action"),
                    justification=obj.get("justification"),
                ))
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_manifest(records: Sequence[CaptionRecord], path) -> None:
    """Canonical JSON lines; paths are written relative to the manifest's directory."""
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for rec in records:
        d = rec.to_json()
        for key in ("features", "frames"):
            if key in d:
                d[key] = os.path.relpath(Path(d[key]).resolve(), base)
        lines.append(json.dumps(d, ensure_ascii=False, sort_keys=True))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(line + "\n" for line in lines))


def split(records: Sequence[CaptionRecord], test_fraction: float = 0.2, seed: int = 0):
    """Seeded shuffle of distinct video ids, then cut off round(fraction * count) for test.

    Both halves keep the input record order.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    vids = sorted({r.video_id for r in records})
    if len(vids) < 2:
        raise ValueError("need at least 2 videos to split")
    order = Rng(seed).permutation(len(vids))
    n_test = int(np.floor(test_fraction * len(vids) + 0.5))
    n_test = min(max(n_test, 1), len(vids) - 1)
    test_ids = {vids[i] for i in order[:n_test]}
    train = [r for r in records if r.video_id not in test_ids]
    test = [r for r in records if r.video_id in test_ids]
    return train, test


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    features: np.ndarray      # [B, N, D]
    input_ids: np.ndarray     # [B, T]
    target_ids: np.ndarray    # [B, T]
    text_mask: np.ndarray     # [B, T] True where the target counts
    visual_mask: np.ndarray   # [B, N] True for real visual tokens
    video_ids: list = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return int(self.text_mask.sum())

    def __len__(self) -> int:
        return self.input_ids.shape[0]


def expand_examples(records: Sequence[CaptionRecord]) -> list[tuple[CaptionRecord, str]]:
    return [(rec, text) for rec in records for text in format_action_justification(rec)]


def _encode_truncated(text: str, vocab: Vocabulary, max_len: int) -> list[int]:
    ids = encode(text, vocab)
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [EOS]
    return ids


def collate(examples, vocab: Vocabulary, max_len: int, n_visual: int, loader) -> Batch:
    seqs = [_encode_truncated(text, vocab, max_len) for _, text in examples]
    t = max(len(s) for s in seqs)
    b = len(seqs)
    inp = np.full((b, t), PAD, dtype=np.int64)
    tgt = np.full((b, t), PAD, dtype=np.int64)
    tmask = np.zeros((b, t), dtype=bool)
    for i, s in enumerate(seqs):
        inp[i, : len(s)] = s
        # targets: input shifted left, eos in the freed last slot
        tgt[i, : len(s) - 1] = s[1:]
        tgt[i, -1] = EOS
        tmask[i, : len(s) - 1] = True
    feats_list = [loader(rec) for rec, _ in examples]
    d = feats_list[0].dim
    feats = np.zeros((b, n_visual, d))
    vmask = np.zeros((b, n_visual), dtype=bool)
    for i, fs in enumerate(feats_list):
        if fs.dim != d:
            raise ValueError(f"feature dim mismatch for {fs.video_id}")
        if fs.n > n_visual:
            raise ValueError(f"{fs.video_id}: {fs.n} visual tokens exceed {n_visual}")
        feats[i, : fs.n] = fs.features
        vmask[i, : fs.n] = True
    return Batch(feats, inp, tgt, tmask, vmask, [rec.video_id for rec, _ in examples])


class FeatureCache:
    """Loads feature files once per path."""

    def __init__(self):
        self._cache: dict[str, VisualFeatureSet] = {}

    def __call__(self, rec: CaptionRecord) -> VisualFeatureSet:
        if rec.features is None:
            raise ManifestError(f"record {rec.video_id} has no feature file (run extract first)")
        fs = self._cache.get(rec.features)
        if fs is None:
            try:
                fs = read_features(rec.features)
            except (OSError, ValueError) as exc:
                raise ManifestError(f"record {rec.video_id}: cannot load features ({exc})") from exc
            self._cache[rec.features] = fs
        return fs


def make_batches(records: Sequence[CaptionRecord], vocab: Vocabulary, batch_size: int = 32,
                 max_len: int = 24, n_visual: int = 8, loader=None) -> list[Batch]:
    """One example per (record, reference text), grouped in order into batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if max_len < 2:
        raise ValueError("max_len must leave room for bos and eos")
    loader = loader or FeatureCache()
    examples = expand_examples(records)
    return [collate(examples[i : i + batch_size], vocab, max_len, n_visual, loader)
            for i in range(0, len(examples), batch_size)]


def reference_tokens(rec: CaptionRecord) -> list[list[str]]:
    return [normalize_and_tokenize(t) for t in format_action_justification(rec)]
