import logging
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capcore import data as D
from capcore.model import BOS, EOS, PAD, UNK
from capcore.vision import VisualFeatureSet

FIXTURE = "tests/fixtures/tiny/manifest.jsonl"


def test_tokenizer_examples():
    assert D.normalize_and_tokenize("The car stops.") == ["the", "car", "stops", "."]
    assert D.normalize_and_tokenize("") == []
    assert D.normalize_and_tokenize("A man,  riding") == ["a", "man", ",", "riding"]


def test_build_vocab_examples():
    v = D.build_vocab([["a", "a", "b"]])
    assert v.itos[:4] == list(D.SPECIALS) and v.stoi["a"] == 4 and v.stoi["b"] == 5
    v2 = D.build_vocab([["a", "a", "b"]], min_freq=2)
    assert "b" not in v2.stoi and D.encode(["b"], v2) == [BOS, UNK, EOS]
    assert D.build_vocab([["x", "m"]]).itos[4:] == ["m", "x"]


def test_build_vocab_cap_and_errors():
    v = D.build_vocab([list("abcdefg")], cap=6)
    assert len(v) == 6
    with pytest.raises(ValueError):
        D.build_vocab([["a"]], cap=4)
    with pytest.raises(ValueError):
        D.build_vocab([])


def test_encode_decode_examples():
    v = D.Vocabulary(list(D.SPECIALS) + ["a", "b"])
    assert D.encode("zzz", v) == [BOS, UNK, EOS]
    assert D.decode([BOS, 4, 5, EOS], v) == "a b"
    with pytest.raises(ValueError):
        D.decode([99], v)


words = st.lists(st.sampled_from(["a", "cat", "dog", "runs", "red", "the"]), min_size=0, max_size=10)


@given(words)
def test_encode_decode_roundtrip(toks):
    v = D.build_vocab([["a", "cat", "dog", "runs", "red", "the"]])
    text = " ".join(toks)
    assert D.decode(D.encode(text, v), v) == text
    ids = [v.stoi[t] for t in toks]
    assert D.encode(D.decode(ids, v), v)[1:-1] == ids


def test_action_justification_format():
    rec = D.CaptionRecord("v", [], features="f", action="the car slows", justification="the light is red")
    text = D.format_action_justification(rec)
    assert text == ["the car slows because the light is red"]
    assert D.parse_action_justification(text[0]) == ("the car slows", "the light is red")
    cap = D.CaptionRecord("v", ["a dog runs"], features="f")
    assert D.format_action_justification(cap) == ["a dog runs"]
    both = D.CaptionRecord("v", ["ignored"], features="f", action="x", justification="y")
    assert D.format_action_justification(both) == ["x because y"]


def test_record_validation():
    with pytest.raises(D.ManifestError):
        D.CaptionRecord("v", ["c"])
    with pytest.raises(D.ManifestError):
        D.CaptionRecord("v", ["c"], features="a", frames="b")
    with pytest.raises(D.ManifestError):
        D.CaptionRecord("v", ["c"], features="a", action="x")
    with pytest.raises(D.ManifestError):
        D.CaptionRecord("v", [], features="a")


def test_read_fixture_manifest_resolves_paths():
    recs = D.read_manifest(FIXTURE)
    assert len(recs) == 8
    assert all(r.features.startswith("tests/fixtures/tiny/features/") for r in recs)


def test_manifest_errors_and_warnings(tmp_path, caplog):
    p = tmp_path / "m.jsonl"
    p.write_text('{"video_id": "a", "features": "x", "captions": ["c"], "extra": 1}\n', encoding="utf-8")
    with caplog.at_level(logging.WARNING):
        D.read_manifest(p)
    assert "extra" in caplog.text
    p.write_text("{not json\n", encoding="utf-8")
    with pytest.raises(D.ManifestError, match="m.jsonl:1"):
        D.read_manifest(p)
    p.write_text('{"video_id": "a", "captions": ["c"]}\n', encoding="utf-8")
    with pytest.raises(D.ManifestError):
        D.read_manifest(p)


def test_manifest_roundtrip(tmp_path):
    recs = D.read_manifest(FIXTURE)
    out = tmp_path / "sub" / "m.jsonl"
    out.parent.mkdir()
    D.write_manifest(recs, out)
    back = D.read_manifest(out)
    assert len(back) == len(recs)
    for a, b in zip(back, recs):
        assert (a.video_id, a.captions, a.action, a.justification) == (b.video_id, b.captions, b.action,
                                                                       b.justification)
        assert Path(a.features).resolve() == Path(b.features).resolve()
    D.write_manifest(back, tmp_path / "again.jsonl")
    D.write_manifest(recs, tmp_path / "first.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == (tmp_path / "first.jsonl").read_bytes()


def _records(n):
    return [D.CaptionRecord(f"v{i:02d}", [f"caption {i}"], features="f") for i in range(n)]


def test_split_examples():
    train, test = D.split(_records(10), 0.2, 0)
    assert (len(train), len(test)) == (8, 2)
    assert D.split(_records(10), 0.2, 0) == (train, test)
    tr, te = D.split(_records(2), 0.5, 3)
    assert (len(tr), len(te)) == (1, 1)
    with pytest.raises(ValueError):
        D.split(_records(10), 1.0)


@settings(max_examples=500, deadline=None)
@given(st.integers(2, 30), st.floats(0.01, 0.99), st.integers(0, 2**32 - 1))
def test_split_is_partition(n, frac, seed):
    recs = _records(n)
    recs += [D.CaptionRecord("v00", ["extra ref"], features="f")]
    train, test = D.split(recs, frac, seed)
    tr, te = {r.video_id for r in train}, {r.video_id for r in test}
    assert tr | te == {r.video_id for r in recs} and not tr & te
    assert len(train) + len(test) == len(recs)
    assert [r for r in recs if r.video_id in tr] == train


def _loader(dim=5, n=3):
    return lambda rec: VisualFeatureSet(rec.video_id, np.ones((n, dim), np.float32))


def test_batch_layout_example():
    v = D.build_vocab([["a", "b", "c", "d", "e"]])
    recs = [D.CaptionRecord("x", ["a b c"], features="f"), D.CaptionRecord("y", ["a b c d e"], features="f")]
    (batch,) = D.make_batches(recs, v, 4, 16, 4, _loader())
    assert batch.input_ids.shape == (2, 7)
    assert batch.input_ids[0].tolist()[-2:] == [PAD, PAD]
    for row in range(2):
        n = int(batch.text_mask[row].sum())
        assert batch.target_ids[row, :n].tolist() == batch.input_ids[row, 1 : n + 1].tolist()
        assert batch.target_ids[row, -1] == EOS
    assert batch.visual_mask.tolist() == [[True, True, True, False]] * 2
    assert batch.n_tokens == 4 + 6
    assert D.make_batches([], v, 4, 16, 4, _loader()) == []


def test_truncation_keeps_eos():
    v = D.build_vocab([list("abcdefgh")])
    (batch,) = D.make_batches([D.CaptionRecord("x", [" ".join("abcdefgh")], features="f")], v, 1, 5, 3, _loader())
    assert batch.input_ids[0].tolist()[-1] == EOS and batch.input_ids.shape[1] == 5


def test_multi_reference_expansion_count():
    recs = D.read_manifest(FIXTURE) + [D.CaptionRecord("z", ["one", "two", "three"], features="f")]
    assert len(D.expand_examples(recs)) == sum(len(D.format_action_justification(r)) for r in recs)
    assert len(D.expand_examples(recs)) == 8 + 3


def test_feature_cache_errors():
    cache = D.FeatureCache()
    with pytest.raises(D.ManifestError, match="zz"):
        cache(D.CaptionRecord("zz", ["c"], features="/nonexistent.mmvc"))
    with pytest.raises(D.ManifestError, match="extract"):
        cache(D.CaptionRecord("zz", ["c"], frames="dir"))
