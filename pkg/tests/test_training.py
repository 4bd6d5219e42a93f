import math
import struct

import numpy as np
import pytest

from capcore import data as D
from capcore import tensor as T
from capcore import training as TR
from capcore.model import CaptionModel, ModelConfig
from capcore.tensor import Tensor
from capcore.vision import VisualFeatureSet

CAPTIONS = ["a dog runs", "a red car stops because the light is red", "two cats sleep", "a man sings loudly"]


def small_setup(batch_size=4, n=4):
    recs = [D.CaptionRecord(f"v{i}", [CAPTIONS[i % 4]], features=f"v{i}") for i in range(n)]
    vocab = D.build_vocab([D.normalize_and_tokenize(c) for c in CAPTIONS])
    rng = T.Rng(0)
    sets = {r.video_id: VisualFeatureSet(r.video_id, rng.normal((3, 10)).astype(np.float32)) for r in recs}
    batches = D.make_batches(recs, vocab, batch_size, 12, 3, lambda r: sets[r.video_id])
    cfg = ModelConfig(d_model=8, n_heads=2, n_encoder_layers=1, n_decoder_layers=1, vocab_size=len(vocab),
                      max_visual_tokens=3, max_text_len=12, feature_dim=10)
    return recs, vocab, sets, batches, cfg


def flat(model):
    return np.concatenate([model.params[k].data.ravel() for k in sorted(model.params)])


def rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


# -- objective


def test_loss_examples():
    targets = np.array([[1, 2, 3]])
    mask = np.ones((1, 3), bool)
    perfect = np.full((1, 3, 4), -1e3)
    perfect[0, np.arange(3), targets[0]] = 0.0
    loss, _ = TR.compute_loss(Tensor(perfect), targets, mask)
    assert loss.item() == 0.0
    loss, nll = TR.compute_loss(Tensor(np.zeros((1, 3, 4))), targets, mask)
    assert loss.item() == pytest.approx(math.log(4), abs=1e-15) and nll == pytest.approx(1.38629, abs=1e-5)
    params = {"w": Tensor(np.array([0.0, 2.0, 0.0])), "b": Tensor(np.array([5.0]))}
    loss, _ = TR.compute_loss(Tensor(perfect), targets, mask, params, lam=0.5)
    assert loss.item() == 2.0


def test_loss_sum_form_and_errors():
    targets = np.array([[1, 2]])
    z = Tensor(np.zeros((1, 2, 4)))
    loss, _ = TR.compute_loss(z, targets, np.ones((1, 2), bool), form="sum")
    assert loss.item() == pytest.approx(2 * math.log(4))
    with pytest.raises(ValueError):
        TR.compute_loss(z, targets, np.zeros((1, 2), bool))
    with pytest.raises(ValueError):
        TR.compute_loss(z, targets, np.ones((1, 2), bool), form="median")


def test_pad_targets_do_not_affect_loss():
    _, _, _, batches, cfg = small_setup()
    m = CaptionModel(cfg, seed=1)
    b = batches[0]
    logits = m.forward(b.features, b.input_ids, b.visual_mask)
    base, _ = TR.compute_loss(logits, b.target_ids, b.text_mask, m.params, 1e-4)
    flipped = b.target_ids.copy()
    flipped[~b.text_mask] = 7
    other, _ = TR.compute_loss(logits, flipped, b.text_mask, m.params, 1e-4)
    assert base.item() == other.item()


def test_pure_nll_gradient_matches_finite_differences():
    _, _, _, batches, cfg = small_setup()
    m = CaptionModel(cfg, seed=2)
    b = batches[0]
    name = "dec.0.ff.w1"

    def f(w):
        params = dict(m.params)
        params[name] = w
        model = CaptionModel(cfg, params=params)
        logits = model.forward(b.features, b.input_ids, b.visual_mask)
        return TR.compute_loss(logits, b.target_ids, b.text_mask)[0]

    assert T.grad_check(f, m.params[name].data, coords=range(0, 256, 7)) < 1e-4


# -- optimizer pieces


def test_clip_examples():
    g = {"a": np.array([0.3, 0.4])}
    out, norm = TR.clip_gradients(g, 1.0)
    assert norm == pytest.approx(0.5) and np.array_equal(out["a"], g["a"])
    out, norm = TR.clip_gradients({"a": np.array([3.0, 4.0])}, 1.0)
    assert norm == 5.0 and np.allclose(out["a"], [0.6, 0.8], atol=1e-15)
    out, _ = TR.clip_gradients({"a": np.array([0.6, 0.8])}, 1.0)
    assert np.array_equal(out["a"], [0.6, 0.8])
    with pytest.raises(ValueError):
        TR.clip_gradients(g, 0.0)


def test_adamw_examples():
    p = {"w": np.array([1.0])}
    TR.adamw_step(p, {"w": np.array([0.0])}, TR.OptimizerState(), lr=0.1, weight_decay=0.0)
    assert p["w"][0] == 1.0
    TR.adamw_step(p, {"w": np.array([0.0])}, TR.OptimizerState(), lr=0.1, weight_decay=0.01)
    assert p["w"][0] == pytest.approx(0.999, abs=1e-15)
    p = {"w": np.array([0.0])}
    TR.adamw_step(p, {"w": np.array([1.0])}, TR.OptimizerState(), lr=0.001, weight_decay=0.01)
    # reference formula: m_hat = g, v_hat = g^2, step = lr * m_hat / (sqrt(v_hat) + eps)
    assert p["w"][0] == pytest.approx(-0.001 / (1.0 + 1e-8), abs=1e-18)


def test_adamw_state_counts_updates():
    st = TR.OptimizerState()
    p = {"w": np.zeros(3)}
    for _ in range(3):
        TR.adamw_step(p, {"w": np.ones(3)}, st, 1e-3, 0.0)
    assert st.step == 3 and np.allclose(st.m["w"], 1 - 0.9 ** 3)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TR.TrainConfig(accumulation_steps=0)
    with pytest.raises(ValueError):
        TR.TrainConfig(loss_form="other")
    assert TR.TrainConfig(mixed_precision=False).effective_loss_scale == 1.0


# -- loop properties


def test_accumulation_equivalence_one_update():
    _, _, _, big, cfg = small_setup(batch_size=4)
    _, _, _, small, _ = small_setup(batch_size=2)
    tc = dict(epochs=1, learning_rate=1e-3, shuffle=False, loss_scale=1.0)
    a = CaptionModel(cfg, seed=3)
    b = CaptionModel(cfg, seed=3)
    TR.Trainer(a, TR.TrainConfig(batch_size=4, accumulation_steps=1, **tc)).step(big)
    TR.Trainer(b, TR.TrainConfig(batch_size=2, accumulation_steps=2, **tc)).step(small)
    assert rel(flat(b), flat(a)) < 1e-9


@pytest.mark.parametrize("scale", [16.0, 1024.0])
def test_loss_scale_invariance(scale):
    _, _, _, batches, cfg = small_setup()
    m = CaptionModel(cfg, seed=4)
    g1, *_ = TR.Trainer(m, TR.TrainConfig(loss_scale=1.0)).group_gradients(batches)
    gs, *_ = TR.Trainer(m, TR.TrainConfig(loss_scale=scale)).group_gradients(batches)
    for k in g1:
        assert np.max(np.abs(gs[k] - g1[k])) <= 1e-9 * max(np.max(np.abs(g1[k])), 1e-300)


def test_inf_gradient_skips_and_halves_once():
    _, _, _, batches, cfg = small_setup()
    m = CaptionModel(cfg, seed=5)
    tr = TR.Trainer(m, TR.TrainConfig(loss_scale=1024.0))
    before = flat(m).copy()

    def poison(grads):
        grads = dict(grads)
        grads["head.b"] = grads["head.b"].copy()
        grads["head.b"][0] = np.inf
        return grads

    tr.grad_hook = poison
    res = tr.step(batches)
    assert not res.applied and tr.skipped == 1 and tr.loss_scale == 512.0
    assert np.array_equal(flat(m), before) and tr.state.step == 0
    tr.grad_hook = None
    assert tr.step(batches).applied and tr.loss_scale == 512.0


def test_epoch_metrics_and_deterministic_order():
    _, _, _, batches, cfg = small_setup(batch_size=1)
    tc = TR.TrainConfig(learning_rate=1e-3, accumulation_steps=2, seed=9)
    tr = TR.Trainer(CaptionModel(cfg), tc)
    assert tr.batch_order(4, 0) == TR.Trainer(CaptionModel(cfg), tc).batch_order(4, 0)
    m = tr.train_epoch(batches, 0)
    assert m["updates"] == 2 and m["skipped"] == 0 and m["grad_norm_max"] >= m["grad_norm_mean"] > 0


def test_narrow_activation_mode_trains():
    _, _, _, batches, cfg = small_setup()
    tr = TR.Trainer(CaptionModel(cfg), TR.TrainConfig(learning_rate=1e-3, narrow_activations=True))
    assert tr.step(batches).applied


# -- checkpoints


def test_checkpoint_roundtrip_and_resume(tmp_path):
    _, vocab, _, batches, cfg = small_setup(batch_size=2)
    tc = TR.TrainConfig(epochs=4, batch_size=2, learning_rate=1e-3, seed=1)
    full = CaptionModel(cfg, seed=6)
    TR.fit(full, batches, tc)

    half = CaptionModel(cfg, seed=6)
    tr = TR.Trainer(half, tc)
    TR.fit(half, batches, TR.TrainConfig(**{**tc.__dict__, "epochs": 2}), tr)
    path = tmp_path / "c.ckpt"
    TR.save_checkpoint(path, half, vocab, tc, tr.state, epoch=1, global_step=tr.state.step,
                       loss_scale=tr.loss_scale)
    ck = TR.load_checkpoint(path)
    assert ck.vocab == vocab and ck.model_config == cfg and ck.train_config == tc and ck.epoch == 1
    for k, v in half.params.items():
        assert ck.params[k].tobytes() == v.data.tobytes()
    resumed = TR.model_from_checkpoint(ck)
    TR.fit(resumed, batches, tc, TR.Trainer(resumed, tc, ck.optimizer, ck.loss_scale), start_epoch=2)
    assert flat(resumed).tobytes() == flat(full).tobytes()


def test_checkpoint_errors(tmp_path):
    _, vocab, _, _, cfg = small_setup()
    path = tmp_path / "c.ckpt"
    TR.save_checkpoint(path, CaptionModel(cfg), vocab)
    raw = path.read_bytes()
    cases = {
        "magic": b"NOPE" + raw[4:],
        "version": raw[:4] + struct.pack("<I", 2) + raw[8:],
        "truncated": raw[:-10],
        "crc": raw[:-5] + bytes([raw[-5] ^ 1]) + raw[-4:],
    }
    for name, blob in cases.items():
        bad = tmp_path / f"{name}.ckpt"
        bad.write_bytes(blob)
        with pytest.raises(TR.CheckpointError):
            TR.load_checkpoint(bad)
    with pytest.raises(TR.CheckpointError, match="version"):
        TR.load_checkpoint(tmp_path / "version.ckpt")


def test_checkpoint_without_optimizer(tmp_path):
    _, vocab, _, _, cfg = small_setup()
    TR.save_checkpoint(tmp_path / "c", CaptionModel(cfg, seed=2), vocab)
    ck = TR.load_checkpoint(tmp_path / "c")
    assert ck.optimizer is None and ck.train_config is None
    assert TR.model_from_checkpoint(ck).checksum() == CaptionModel(cfg, seed=2).checksum()


def test_evaluate_nll_decreases_with_training():
    _, _, _, batches, cfg = small_setup()
    m = CaptionModel(cfg, seed=0)
    before = TR.evaluate_nll(m, batches)
    TR.fit(m, batches, TR.TrainConfig(epochs=15, learning_rate=3e-3))
    assert TR.evaluate_nll(m, batches) < before
