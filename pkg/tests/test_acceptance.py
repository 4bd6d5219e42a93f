"""Acceptance criteria, one test each.

Every test prints a single ``[PASS]`` / ``[FAIL]`` line with the measured
quantity before asserting, so ``pytest tests/test_acceptance.py -v`` doubles
as the acceptance report.
"""
import json
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from capcore import data as D
from capcore import metrics as M
from capcore import tensor as T
from capcore import training as TR
from capcore import vision as V
from capcore.cli import prepare_training
from capcore.config import load_config
from capcore.model import BOS, CaptionModel, ModelConfig, generate
from capcore.tensor import Tensor
from tests.oracles import reference_model as ref

ROOT = Path(__file__).resolve().parents[1]
FIX = ROOT / "tests" / "fixtures"
FIXTURE_MANIFEST = FIX / "tiny" / "manifest.jsonl"


@pytest.fixture
def report(capsys):
    def emit(n, ok, what):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {what}")
        return ok
    return emit


def flat(params):
    return np.concatenate([np.asarray(getattr(params[k], "data", params[k])).ravel() for k in sorted(params)])


def rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def fixture_setup(path, seed=None):
    cfg = load_config(ROOT / path, environ={})
    if seed is not None:
        cfg.train.seed = seed
    records = D.read_manifest(FIXTURE_MANIFEST)
    vocab, mcfg, batches = prepare_training(records, cfg)
    return cfg, records, vocab, mcfg, batches


# -- 1


def test_c1_gradient_check(report):
    """Autodiff vs central differences of the loss over every parameter.

    The finite differences are taken on the straight-line oracle evaluated in
    extended precision, which keeps round-off in the difference quotient well
    below the tolerance even for tiny gradients.
    """
    t0 = time.perf_counter()
    cfg = ModelConfig(d_model=16, n_heads=2, n_encoder_layers=1, n_decoder_layers=1, vocab_size=50,
                      max_visual_tokens=4, max_text_len=8, feature_dim=32)
    m = CaptionModel(cfg, seed=0)
    rng = T.Rng(0)
    feats = rng.normal((2, 4, 32))
    ids = np.array([[BOS, 5, 7, 9, 3], [BOS, 8, 3, 0, 0]])
    tgt = np.array([[5, 7, 9, 3, 3], [8, 3, 0, 0, 3]])
    tmask = np.array([[1, 1, 1, 1, 0], [1, 1, 0, 0, 0]], bool)
    vmask = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], bool)
    lam = 1e-4
    loss, _ = TR.compute_loss(m.forward(feats, ids, vmask), tgt, tmask, m.params, lam)
    grads = T.backward(loss)

    L = np.longdouble
    p = {k: v.data.astype(L) for k, v in m.params.items()}
    fl = feats.astype(L)
    h = L(1e-5)
    worst, count = 0.0, 0
    for name, arr in p.items():
        flat_p = arr.reshape(-1)
        g_ad = grads[m.params[name]].reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            fp = ref.loss(p, fl, ids, tgt, tmask, 2, 1, 1, lam, vmask)
            flat_p[i] = orig - h
            fm = ref.loss(p, fl, ids, tgt, tmask, 2, 1, 1, lam, vmask)
            flat_p[i] = orig
            fd = float((fp - fm) / (2 * h))
            worst = max(worst, abs(g_ad[i] - fd) / max(abs(g_ad[i]), abs(fd), 1e-8))
            count += 1
    elapsed = time.perf_counter() - t0
    ok = report(1, worst < 1e-4 and elapsed < 60,
                f"max rel err {worst:.2e} over {count} params (< 1e-4), {elapsed:.1f} s (< 60 s)")
    assert ok


# -- 2


def test_c2_overfit_fixture(report):
    t0 = time.perf_counter()
    cfg, records, vocab, mcfg, batches = fixture_setup("configs/desk.yaml")
    model = CaptionModel(mcfg, seed=cfg.train.seed)
    history = TR.fit(model, batches, cfg.train)
    final_loss = history[-1]["loss"]
    exact = 0
    pairs = []
    for rec in records:
        fs = D.FeatureCache()(rec)
        hyp = D.decode(generate(model, fs.features[: mcfg.max_visual_tokens].astype(float)), vocab)
        want = D.format_action_justification(rec)[0]
        target = " ".join(D.normalize_and_tokenize(want))
        exact += hyp == target
        pairs.append(M.EvalPair(hyp.split(), [target.split()], rec.video_id))
    bleu4 = M.bleu(pairs, 4)[3]
    elapsed = time.perf_counter() - t0
    ok = report(2, final_loss < 0.05 and exact == len(records) and elapsed < 300,
                f"{cfg.train.epochs} epochs: loss {final_loss:.4f} (< 0.05), {exact}/{len(records)} exact, "
                f"BLEU-4 {bleu4:.3f}, {elapsed:.0f} s (< 300 s)")
    assert ok


# -- 3


def accumulation_data(n=4, seed=0):
    texts = ["a dog runs", "the red car stops at the light", "two cats sleep", "a man sings a very long song"]
    recs = [D.CaptionRecord(f"v{i}", [texts[i % 4]], features=f"v{i}") for i in range(n)]
    vocab = D.build_vocab([D.normalize_and_tokenize(t) for t in texts])
    rng = T.Rng(seed)
    sets = {r.video_id: V.VisualFeatureSet(r.video_id, rng.normal((int(rng.integers(2, 5)), 12)))
            for r in recs}
    cfg = ModelConfig(d_model=16, n_heads=2, n_encoder_layers=1, n_decoder_layers=1, vocab_size=len(vocab),
                      max_visual_tokens=4, max_text_len=12, feature_dim=12)
    batches = lambda size: D.make_batches(recs, vocab, size, 12, 4, lambda r: sets[r.video_id])
    return cfg, batches


def test_c3_accumulation_equivalence(report):
    cfg, batches = accumulation_data()
    big, micro = batches(4), batches(1)
    common = dict(learning_rate=1e-3, shuffle=False, loss_scale=1.0)
    a, b = CaptionModel(cfg, seed=1), CaptionModel(cfg, seed=1)
    ta = TR.Trainer(a, TR.TrainConfig(batch_size=4, accumulation_steps=1, **common))
    tb = TR.Trainer(b, TR.TrainConfig(batch_size=1, accumulation_steps=4, **common))
    errs = []
    for _ in range(50):
        ta.step(big)
        tb.step(micro)
        errs.append(rel(flat(b.params), flat(a.params)))
    ok = report(3, errs[0] <= 1e-9 and errs[-1] <= 1e-6,
                f"k=4 vs 4x batch: rel diff {errs[0]:.1e} after 1 update (<= 1e-9), "
                f"{errs[-1]:.1e} after 50 (<= 1e-6)")
    assert ok


# -- 4


def test_c4_loss_scale(report):
    cfg, batches = accumulation_data(seed=2)
    group = batches(2)
    m = CaptionModel(cfg, seed=4)
    g1, *_ = TR.Trainer(m, TR.TrainConfig(loss_scale=1.0)).group_gradients(group)
    g2, *_ = TR.Trainer(m, TR.TrainConfig(loss_scale=1024.0)).group_gradients(group)
    worst = max(rel(g2[k], g1[k]) for k in g1 if np.any(g1[k]))

    tr = TR.Trainer(m, TR.TrainConfig(loss_scale=1024.0, learning_rate=1e-3))
    before = flat(m.params).copy()

    def poison(grads):
        grads = dict(grads)
        name = sorted(grads)[0]
        grads[name] = grads[name].copy()
        grads[name].flat[0] = np.inf
        return grads

    tr.grad_hook = poison
    res = tr.step(group)
    skipped_once = (not res.applied and tr.skipped == 1 and tr.loss_scale == 512.0
                    and np.array_equal(flat(m.params), before))
    tr.grad_hook = None
    recovers = tr.step(group).applied and tr.skipped == 1 and tr.loss_scale == 512.0
    ok = report(4, worst <= 1e-9 and skipped_once and recovers,
                f"scale 1 vs 1024 rel diff {worst:.1e} (<= 1e-9); Inf -> skipped={tr.skipped}, "
                f"scale 1024 -> {tr.loss_scale:g}, params untouched={skipped_once}")
    assert ok


# -- 5


def test_c5_metric_parity(report):
    raw = FIX / "golden_pairs.json"
    oracle = subprocess.run([sys.executable, str(ROOT / "tests" / "oracles" / "metrics_oracle.py"), str(raw)],
                            capture_output=True, text=True, check=True).stdout
    expected = M.parse_report(oracle)
    pairs = [M.EvalPair(d["hyp"].split(), [r.split() for r in d["refs"]], d["key"])
             for d in json.loads(raw.read_text(encoding="utf-8"))]
    got = M.evaluate_corpus(pairs).scores
    parity = max(abs(got[k] - expected[k]) for k in M.METRIC_NAMES)

    clip = M.bleu([M.EvalPair("the the the the".split(), ["the cat".split()])], 1)[0]
    rouge = M.rouge_l_sentence("the cat".split(), "the cat sat".split())
    meteor = M.meteor_sentence("a b c".split(), "a b c".split())
    hand = {"clipping p1": (clip, 0.5), "ROUGE-L": (rouge, 0.77215), "METEOR": (meteor, 0.98148)}
    hand_ok = {k: abs(v - want) <= 5e-6 for k, (v, want) in hand.items()}
    detail = ", ".join(f"{k} {v:.5f} vs {want}" + ("" if hand_ok[k] else " MISMATCH")
                       for k, (v, want) in hand.items())
    ok = report(5, parity <= 1e-9 and all(hand_ok.values()),
                f"golden 7-score max |diff| {parity:.1e} (<= 1e-9); {detail}")
    assert ok


# -- 6


def test_c6_attention_invariants(report):
    t0 = time.perf_counter()
    worst_rows = 0.0
    tf_mismatch = kv_mismatch = 0
    grad_err = {"single": 0.0, "multi": 0.0}
    for case in range(1000):
        rng = T.Rng((6, case))
        heads = (1, 2, 4)[case % 3]
        d = heads * int(rng.integers(1, 4))
        cfg = ModelConfig(d_model=d, n_heads=heads, n_encoder_layers=1, n_decoder_layers=int(rng.integers(1, 3)),
                          vocab_size=10, max_visual_tokens=5, max_text_len=8, feature_dim=5)
        m = CaptionModel(cfg, seed=case)

        nq, nk = int(rng.integers(1, 6)), int(rng.integers(1, 7))
        mask = rng.uniform((nq, nk)) < 0.6
        mask[np.arange(nq), rng.integers(0, nk, nq)] = True
        q, kv = Tensor(rng.normal((nq, d))), Tensor(rng.normal((nk, d)))
        _, w = m.attention(q, "enc.0.attn", kv_in=kv, mask=mask, return_weights=True)
        worst_rows = max(worst_rows, float(np.max(np.abs(w.data.sum(-1) - 1))))
        if np.any(w.data[..., ~mask] != 0) or np.any(w.data < 0):
            worst_rows = np.inf

        feats = rng.normal((int(rng.integers(1, 6)), 5))
        ids = np.concatenate([[BOS], rng.integers(4, 10, int(rng.integers(1, 7)))])
        full = m.forward(feats, ids).data
        cached, uncached = m.start_state(feats, None, True), m.start_state(feats, None, False)
        for t in range(len(ids)):
            if t:
                cached.ids.append(int(ids[t]))
                uncached.ids.append(int(ids[t]))
            a, b = m.decode_step(cached), m.decode_step(uncached)
            tf_mismatch += b.tobytes() != full[t].tobytes()
            kv_mismatch += a.tobytes() != b.tobytes()

        x = rng.normal((3, d))
        proj = rng.normal((3, d))
        causal = np.tril(np.ones((3, 3), bool))
        f = lambda t: T.sum_(m.attention(t, "dec.0.self", kv_in=t, mask=causal) * proj)
        coords = [int(c) for c in rng.integers(0, x.size, 3)]
        key = "single" if heads == 1 else "multi"
        grad_err[key] = max(grad_err[key], T.grad_check(f, x, coords=coords))
    elapsed = time.perf_counter() - t0
    ok = report(6, worst_rows <= 1e-10 and tf_mismatch == 0 and kv_mismatch == 0
                and max(grad_err.values()) < 1e-4 and elapsed < 120,
                f"1000 cases: row-sum err {worst_rows:.1e} (<= 1e-10), teacher-forced/incremental mismatches "
                f"{tf_mismatch}, KV mismatches {kv_mismatch}, grad err 1-head {grad_err['single']:.1e} / "
                f"multi-head {grad_err['multi']:.1e} (< 1e-4), {elapsed:.0f} s (< 120 s)")
    assert ok


# -- 7

ABLATIONS = ("proposed", "single_head", "no_accumulation", "baseline")


def ablation_loss(name, seed):
    cfg, _, _, mcfg, batches = fixture_setup(f"configs/ablation/{name}.yaml", seed)
    model = CaptionModel(mcfg, seed=seed)
    TR.fit(model, batches, cfg.train)
    return TR.evaluate_nll(model, batches)


def test_c7_ablation_replay(report):
    losses = {(name, seed): ablation_loss(name, seed) for name in ABLATIONS for seed in (0, 1, 2)}
    all_finite = all(np.isfinite(v) for v in losses.values())
    wins = sum(losses["proposed", s] < losses["single_head", s] for s in (0, 1, 2))
    detail = "; ".join(f"seed {s}: proposed {losses['proposed', s]:.4f} vs single_head "
                       f"{losses['single_head', s]:.4f}" for s in (0, 1, 2))
    ok = report(7, all_finite and wins == 3,
                f"4 variants x 3 seeds trained 5 epochs ({'ok' if all_finite else 'non-finite'}); "
                f"proposed lower on {wins}/3 seeds ({detail})")
    assert ok


# -- 8


def test_c8_round_trips(report, tmp_path):
    bad = {"features": 0, "checkpoints": 0, "manifests": 0}
    alphabet = list("abcdefghij_-0123456789") + ["é", "漢"]
    words = ["a", "dog", "runs", "the", "car", "stops", "red", "light"]
    for i in range(1000):
        rng = T.Rng((8, i))
        vid = "".join(alphabet[j] for j in rng.integers(0, len(alphabet), int(rng.integers(1, 12))))
        rows, dim = int(rng.integers(1, 6)), int(rng.integers(1, 40))
        fs = V.VisualFeatureSet(vid, rng.normal((rows, dim)).astype(np.float32),
                                sorted(int(x) for x in rng.integers(0, 100, rows)))
        path = tmp_path / "f.mmvc"
        V.write_features(fs, path)
        back = V.read_features(path)
        bad["features"] += not (back.video_id == vid and back.features.tobytes() == fs.features.tobytes()
                                and back.frame_indices == fs.frame_indices)

        heads = (1, 2)[i % 2]
        vocab = D.Vocabulary(list(D.SPECIALS) + words[: int(rng.integers(1, len(words) + 1))])
        mcfg = ModelConfig(d_model=2 * heads, n_heads=heads, n_encoder_layers=int(rng.integers(0, 2)),
                           n_decoder_layers=1, vocab_size=len(vocab), max_visual_tokens=2, max_text_len=4,
                           feature_dim=3)
        model = CaptionModel(mcfg, seed=i)
        opt = TR.OptimizerState({k: rng.normal(v.data.shape) for k, v in model.params.items()},
                                {k: rng.uniform(v.data.shape) for k, v in model.params.items()}, i)
        tcfg = TR.TrainConfig(learning_rate=float(rng.uniform((1,), 1e-5, 1e-2)[0]), seed=i)
        ck_path = tmp_path / "m.ckpt"
        scale = 2.0 ** int(rng.integers(-4, 12))
        TR.save_checkpoint(ck_path, model, vocab, tcfg, opt, epoch=i, global_step=3 * i, loss_scale=scale)
        ck = TR.load_checkpoint(ck_path)
        same = (ck.vocab == vocab and ck.model_config == mcfg and ck.train_config == tcfg and ck.epoch == i
                and ck.global_step == 3 * i and ck.loss_scale == scale and ck.optimizer.step == i
                and all(ck.params[k].tobytes() == v.data.tobytes() for k, v in model.params.items())
                and all(ck.optimizer.m[k].tobytes() == opt.m[k].tobytes()
                        and ck.optimizer.v[k].tobytes() == opt.v[k].tobytes() for k in opt.m))
        bad["checkpoints"] += not same

        recs = []
        for j in range(int(rng.integers(1, 5))):
            caption = " ".join(words[w] for w in rng.integers(0, len(words), int(rng.integers(1, 6))))
            if rng.integers(0, 2):
                recs.append(D.CaptionRecord(f"{vid}{j}", [], features=f"feat/{j}.mmvc", action=caption,
                                            justification=caption[::-1]))
            else:
                recs.append(D.CaptionRecord(f"{vid}{j}", [caption, caption.upper()], frames=f"frames/{j}"))
        man = tmp_path / "m.jsonl"
        D.write_manifest(recs, man)
        first = man.read_bytes()
        back_recs = D.read_manifest(man)
        D.write_manifest(back_recs, man)
        bad["manifests"] += not (man.read_bytes() == first and [r.video_id for r in back_recs] ==
                                 [r.video_id for r in recs] and [r.captions for r in back_recs] ==
                                 [r.captions for r in recs])

    # resume vs uninterrupted
    cfg, _, vocab, mcfg, batches = fixture_setup("configs/ablation/proposed.yaml")
    tcfg = replace(cfg.train, epochs=4)
    full = CaptionModel(mcfg, seed=0)
    TR.fit(full, batches, tcfg)
    half = CaptionModel(mcfg, seed=0)
    tr = TR.Trainer(half, tcfg)
    TR.fit(half, batches, replace(tcfg, epochs=2), tr)
    TR.save_checkpoint(tmp_path / "r.ckpt", half, vocab, tcfg, tr.state, 1, tr.state.step, tr.loss_scale)
    ck = TR.load_checkpoint(tmp_path / "r.ckpt")
    resumed = TR.model_from_checkpoint(ck)
    TR.fit(resumed, batches, tcfg, TR.Trainer(resumed, tcfg, ck.optimizer, ck.loss_scale), start_epoch=2)
    resume_err = rel(flat(resumed.params), flat(full.params))

    ok = report(8, not any(bad.values()) and resume_err <= 1e-9,
                f"1000 round trips each, failures {bad}; resume vs uninterrupted rel diff {resume_err:.1e} "
                f"(<= 1e-9)")
    assert ok
