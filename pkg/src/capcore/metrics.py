"""Caption metrics: corpus BLEU-1..4, CIDEr, METEOR (exact + stem) and ROUGE-L.

Inputs are already tokenised.  Variants are fixed and recorded in every
report header: unsmoothed BLEU with closest-reference brevity penalty,
original CIDEr (no length penalty, IDF = ln(M / (1 + df))), METEOR without a
synonym resource, ROUGE-L with beta = 1.2.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

log = logging.getLogger(__name__)

METRIC_NAMES = ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "cider", "meteor", "rouge_l")


@dataclass
class EvalPair:
    hypothesis: list
    references: list
    key: str = ""

    def __post_init__(self):
        if not self.references:
            raise ValueError("an evaluation pair needs at least one reference")
        self.hypothesis = list(self.hypothesis)
        self.references = [list(r) for r in self.references]


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def _closest_ref_len(hyp_len: int, refs) -> int:
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def _bleu_from_counts(matches, totals, c, r, max_n, smooth):
    if c == 0:
        return 0.0
    logp = 0.0
    for i in range(max_n):
        m, t = matches[i], totals[i]
        if smooth and i > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        logp += math.log(m / t) / max_n
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(logp)


def _bleu_stats(pair: EvalPair, max_n: int):
    hyp = pair.hypothesis
    matches, totals = [], []
    for n in range(1, max_n + 1):
        h = ngrams(hyp, n)
        maxref: Counter = Counter()
        for ref in pair.references:
            for g, c in ngrams(ref, n).items():
                maxref[g] = max(maxref[g], c)
        matches.append(sum(min(c, maxref[g]) for g, c in h.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    return matches, totals, len(hyp), _closest_ref_len(len(hyp), pair.references)


def bleu(pairs: Sequence[EvalPair], max_n: int = 4, smooth: bool = False) -> list[float]:
    """Corpus BLEU-1..max_n from n-gram counts pooled over all pairs."""
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    matches = [0] * max_n
    totals = [0] * max_n
    c = r = 0
    for p in pairs:
        m, t, hl, rl = _bleu_stats(p, max_n)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        c += hl
        r += rl
    if c == 0:
        log.warning("BLEU on empty hypotheses: scoring 0")
    return [_bleu_from_counts(matches, totals, c, r, n, smooth) for n in range(1, max_n + 1)]


def sentence_bleu(pair: EvalPair, max_n: int = 4, smooth: bool = False) -> float:
    m, t, c, r = _bleu_stats(pair, max_n)
    return _bleu_from_counts(m, t, c, r, max_n, smooth)


# ---------------------------------------------------------------------------
# CIDEr


def _tfidf(tokens, n, idf):
    counts = ngrams(tokens, n)
    return {g: c * idf(g) for g, c in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    dot = sum(v * b[g] for g, v in a.items() if g in b)
    return dot / (na * nb)


def cider_scores(pairs: Sequence[EvalPair], max_n: int = 4) -> list[float]:
    """Per-image CIDEr (x10 convention)."""
    if len({tuple(map(tuple, p.references)) for p in pairs}) < 2:
        raise ValueError("CIDEr needs a corpus with at least 2 distinct reference sets "
                         "(document frequencies are undefined for a single image)")
    m_images = len(pairs)
    df: list[Counter] = [Counter() for _ in range(max_n)]
    for p in pairs:
        for n in range(1, max_n + 1):
            seen = set()
            for ref in p.references:
                seen.update(ngrams(ref, n))
            df[n - 1].update(seen)
    scores = []
    for p in pairs:
        per_n = []
        for n in range(1, max_n + 1):
            d = df[n - 1]

            def idf(g, d=d):
                return math.log(m_images / (1.0 + d[g]))

            hv = _tfidf(p.hypothesis, n, idf)
            sims = [_cosine(hv, _tfidf(ref, n, idf)) for ref in p.references]
            per_n.append(10.0 * sum(sims) / len(sims))
        scores.append(sum(per_n) / max_n)
    return scores


def cider(pairs: Sequence[EvalPair]) -> float:
    s = cider_scores(pairs)
    return sum(s) / len(s)


# ---------------------------------------------------------------------------
# METEOR


_SUFFIXES = ("ing", "ed", "es", "s")


def stem(word: str) -> str:
    """Strip one of ing/ed/es/s when at least 3 characters remain ('ss' kept)."""
    for suf in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            if suf == "s" and word.endswith("ss"):
                continue
            return word[: -len(suf)]
    return word


def align(hyp: Sequence[str], ref: Sequence[str], use_stem: bool = True) -> tuple[int, int]:
    """Unigram alignment with the most matches, then the fewest chunks.

    Returns (matches, chunks).
    """
    key = stem if use_stem else (lambda w: w)
    hk = [key(w) for w in hyp]
    rk = [key(w) for w in ref]
    cands = [tuple(j for j, r in enumerate(rk) if r == h) for h in hk]
    hc, rc = Counter(hk), Counter(rk)
    need = sum(min(hc[w], rc[w]) for w in hc)
    if need == 0:
        return 0, 0
    classes = sorted(hc)
    cls_index = {w: i for i, w in enumerate(classes)}
    quota0 = tuple(min(hc[w], rc[w]) for w in classes)
    # remaining hyp tokens of each class after position i
    remaining = []
    for i in range(len(hk) + 1):
        cnt = Counter(hk[i:])
        remaining.append(tuple(cnt[w] for w in classes))

    @lru_cache(maxsize=None)
    def best(i: int, used: int, prev: int, quota: tuple) -> int:
        # fewest chunks for hyp[i:] given used ref positions and the ref index
        # matched at i-1 (-1 if hyp[i-1] unmatched); inf if quota unreachable
        if i == len(hk):
            return 0 if not any(quota) else 10 ** 9
        c = cls_index[hk[i]]
        if any(q > r for q, r in zip(quota, remaining[i])):
            return 10 ** 9
        out = 10 ** 9
        if quota[c] > 0:
            q2 = quota[:c] + (quota[c] - 1,) + quota[c + 1 :]
            for j in cands[i]:
                if used >> j & 1:
                    continue
                new_chunk = 0 if (prev >= 0 and j == prev + 1) else 1
                out = min(out, new_chunk + best(i + 1, used | (1 << j), j, q2))
        if quota[c] < remaining[i][c]:
            out = min(out, best(i + 1, used, -1, quota))
        return out

    chunks = best(0, 0, -1, quota0)
    return need, chunks


def meteor_sentence(hyp, ref, use_stem: bool = True) -> float:
    m, chunks = align(hyp, ref, use_stem)
    if m == 0:
        return 0.0
    p = m / len(hyp)
    r = m / len(ref)
    f = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / m) ** 3
    return f * (1 - penalty)


def meteor_scores(pairs: Sequence[EvalPair], use_stem: bool = True) -> list[float]:
    return [max(meteor_sentence(p.hypothesis, r, use_stem) for r in p.references) for p in pairs]


def meteor(pairs: Sequence[EvalPair], use_stem: bool = True) -> float:
    s = meteor_scores(pairs, use_stem)
    return sum(s) / len(s) if s else 0.0


# ---------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(hyp, ref, beta: float = 1.2) -> float:
    if beta <= 0:
        raise ValueError("beta must be positive")
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    r = lcs / len(ref)
    p = lcs / len(hyp)
    b2 = beta * beta
    return (1 + b2) * p * r / (r + b2 * p)


def rouge_l_scores(pairs: Sequence[EvalPair], beta: float = 1.2) -> list[float]:
    return [max(rouge_l_sentence(p.hypothesis, r, beta) for r in p.references) for p in pairs]


def rouge_l(pairs: Sequence[EvalPair], beta: float = 1.2) -> float:
    s = rouge_l_scores(pairs, beta)
    return sum(s) / len(s) if s else 0.0


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    scores: dict
    per_sentence: list = field(default_factory=list)
    n_pairs: int = 0
    n_references: int = 0
    flags: dict = field(default_factory=dict)

    def __getattr__(self, name):
        scores = self.__dict__.get("scores", {})
        if name in scores:
            return scores[name]
        raise AttributeError(name)

    def header(self) -> dict:
        h = dict(self.flags)
        h["pairs"] = self.n_pairs
        h["references"] = self.n_references
        return h

    def to_text(self) -> str:
        lines = [f"# {k}: {v}" for k, v in self.header().items()]
        lines += [f"{name:<8} {self.scores[name]:.12f}" for name in METRIC_NAMES]
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        lines = [f"{k}={v}" for k, v in self.header().items()]
        lines += [f"{name}={self.scores[name]!r}" for name in METRIC_NAMES]
        return "\n".join(lines) + "\n"

    def plot_rows(self) -> str:
        """key,value rows: corpus scores then per-sentence series."""
        rows = ["key,value"]
        rows += [f"{name},{self.scores[name]!r}" for name in METRIC_NAMES]
        for i, sent in enumerate(self.per_sentence):
            for name in ("bleu_4", "cider", "meteor", "rouge_l"):
                rows.append(f"{sent.get('key') or i}.{name},{sent[name]!r}")
        return "\n".join(rows) + "\n"


def parse_report(text: str) -> dict:
    """Metric values from either report format."""
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            k, v = line.split("=", 1)
        else:
            k, v = line.split(None, 1)
        if k in METRIC_NAMES:
            out[k] = float(v)
    return out


def evaluate_corpus(pairs: Sequence[EvalPair], smooth: bool = False, use_stem: bool = True,
                    beta: float = 1.2) -> MetricReport:
    if not pairs:
        raise ValueError("nothing to evaluate")
    b = bleu(pairs, 4, smooth)
    ci = cider_scores(pairs)
    me = meteor_scores(pairs, use_stem)
    ro = rouge_l_scores(pairs, beta)
    scores = {f"bleu_{n}": b[n - 1] for n in range(1, 5)}
    scores["cider"] = sum(ci) / len(ci)
    scores["meteor"] = sum(me) / len(me)
    scores["rouge_l"] = sum(ro) / len(ro)
    per = [{"key": p.key, "bleu_4": sentence_bleu(p, 4, smooth), "cider": c, "meteor": m, "rouge_l": r}
           for p, c, m, r in zip(pairs, ci, me, ro)]
    flags = {
        "bleu_variant": "corpus-pooled, closest-ref brevity penalty, " + ("add-1 smoothing" if smooth else "unsmoothed"),
        "cider_variant": "original (no length penalty), idf=ln(M/(1+df)), x10",
        "meteor_matching": "exact+stem" if use_stem else "exact",
        "rouge_l_beta": beta,
    }
    return MetricReport(scores, per, len(pairs), sum(len(p.references) for p in pairs), flags)
