"""Visual-token encoder / text decoder transformer with autoregressive decoding.

Blocks follow the GPT-2 layout: pre-LayerNorm, GELU feed-forward, learned
positional tables.  The decoder adds cross-attention over the encoder memory.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, UNK, BOS, EOS = 0, 1, 2, 3
LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: Optional[int] = None
    vocab_size: int = 64
    max_visual_tokens: int = 8
    max_text_len: int = 24
    feature_dim: int = 2048
    use_visual: bool = True

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        for name in ("d_model", "n_heads", "d_ff", "vocab_size", "max_visual_tokens",
                     "max_text_len", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_encoder_layers < 0 or self.n_decoder_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must cover the 4 special tokens")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full_scale(cls, vocab_size: int) -> "ModelConfig":
        """Full-width structure (d=768, 12 heads); far too large for desk training."""
        return cls(d_model=768, n_heads=12, n_encoder_layers=2, n_decoder_layers=2,
                   vocab_size=vocab_size)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter census for ``cfg``."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    attn = 4 * d * d + 4 * d
    ff = 2 * d * f + f + d
    ln = 2 * d
    embed = cfg.feature_dim * d + cfg.max_visual_tokens * d + v * d + cfg.max_text_len * d
    enc = cfg.n_encoder_layers * (attn + ff + 2 * ln) + ln
    dec = cfg.n_decoder_layers * (2 * attn + ff + 3 * ln) + ln
    return embed + enc + dec + d * v + v


def is_weight(name: str) -> bool:
    """True for matrices and embedding tables (the L2 / decay set)."""
    return not (name.endswith("bias") or name.endswith("gain") or name.rsplit(".", 1)[-1].startswith("b"))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Normal(0, 0.02) weights and positional tables, zero biases, unit LN gains."""
    rng = T.Rng(seed)
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    p: dict[str, np.ndarray] = {}

    def normal(name, shape):
        p[name] = rng.normal(shape, INIT_STD)

    def ln(name):
        p[f"{name}.gain"] = np.ones(d)
        p[f"{name}.bias"] = np.zeros(d)

    def attn(name):
        for w in ("wq", "wk", "wv", "wo"):
            normal(f"{name}.{w}", (d, d))
        for b in ("bq", "bk", "bv", "bo"):
            p[f"{name}.{b}"] = np.zeros(d)

    def ff(name):
        normal(f"{name}.w1", (d, f))
        p[f"{name}.b1"] = np.zeros(f)
        normal(f"{name}.w2", (f, d))
        p[f"{name}.b2"] = np.zeros(d)

    normal("visual.proj", (cfg.feature_dim, d))
    normal("visual.pos", (cfg.max_visual_tokens, d))
    normal("text.tok", (v, d))
    normal("text.pos", (cfg.max_text_len, d))
    for i in range(cfg.n_encoder_layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.attn")
        ln(f"enc.{i}.ln2")
        ff(f"enc.{i}.ff")
    ln("enc.ln_f")
    for i in range(cfg.n_decoder_layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3")
        ff(f"dec.{i}.ff")
    ln("dec.ln_f")
    normal("head.w", (d, v))
    p["head.b"] = np.zeros(v)
    return p


class CaptionModel:
    """Parameters plus forward passes.  ``params`` maps names to Tensors."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: dict | None = None):
        self.cfg = cfg
        raw = params if params is not None else init_params(cfg, seed)
        self.params = {k: (v if isinstance(v, Tensor) else Tensor(v, requires_grad=True, name=k))
                       for k, v in raw.items()}
        self.check_shapes()

    def check_shapes(self) -> None:
        expected = {k: v.shape for k, v in init_params_shapes(self.cfg).items()}
        got = {k: v.shape for k, v in self.params.items()}
        if expected != got:
            missing = sorted(set(expected) ^ set(got))
            bad = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
            raise ValueError(f"parameter set does not match config (names: {missing[:5]}, shapes: {bad[:5]})")

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.grad = None

    # -- building blocks

    def embed_visual(self, feats, n_valid=None) -> Tensor:
        """E_v = f W_p + P for one video ([N, D]) or a batch ([B, N, D])."""
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[-1] != self.cfg.feature_dim:
            raise T.DimensionError(f"feature dim {feats.shape[-1]} != configured {self.cfg.feature_dim}")
        n = feats.shape[-2]
        if n > self.cfg.max_visual_tokens:
            raise T.DimensionError(f"{n} visual tokens exceed max_visual_tokens={self.cfg.max_visual_tokens}")
        pos = self.params["visual.pos"][:n]
        if not self.cfg.use_visual:
            return pos + np.zeros(feats.shape[:-1] + (self.cfg.d_model,))
        return T.matmul(Tensor(feats), self.params["visual.proj"]) + pos

    def _ln(self, x, name):
        return T.layer_norm(x, self.params[f"{name}.gain"], self.params[f"{name}.bias"], LN_EPS)

    def _ff(self, x, name):
        p = self.params
        h = T.gelu(x @ p[f"{name}.w1"] + p[f"{name}.b1"])
        return h @ p[f"{name}.w2"] + p[f"{name}.b2"]

    def project_kv(self, x, name):
        p = self.params
        k = split_heads(x @ p[f"{name}.wk"] + p[f"{name}.bk"], self.cfg.n_heads)
        v = split_heads(x @ p[f"{name}.wv"] + p[f"{name}.bv"], self.cfg.n_heads)
        return k, v

    def attention(self, q_in, name, k=None, v=None, kv_in=None, mask=None, return_weights=False):
        """Multi-head scaled dot-product attention.

        ``mask`` is boolean, broadcastable to [..., L_q, L_k]; True = allowed.
        Keys/values come either pre-projected (``k``, ``v``, head-split) or from
        ``kv_in``.
        """
        p = self.params
        if k is None:
            k, v = self.project_kv(kv_in, name)
        q = split_heads(q_in @ p[f"{name}.wq"] + p[f"{name}.bq"], self.cfg.n_heads)
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.cfg.d_head))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.ndim >= 3:
                mask = np.expand_dims(mask, -3)  # broadcast over heads
        w = T.softmax(scores, -1, mask)
        out = merge_heads(T.matmul(w, v)) @ p[f"{name}.wo"] + p[f"{name}.bo"]
        return (out, w) if return_weights else out

    # -- encoder / decoder

    def encode(self, e_v: Tensor, visual_mask=None) -> Tensor:
        """Encoder stack over visual tokens; ``visual_mask`` marks real tokens."""
        kmask = None if visual_mask is None else np.asarray(visual_mask, bool)[..., None, :]
        x = e_v
        for i in range(self.cfg.n_encoder_layers):
            h = self._ln(x, f"enc.{i}.ln1")
            x = x + self.attention(h, f"enc.{i}.attn", kv_in=h, mask=kmask)
            x = x + self._ff(self._ln(x, f"enc.{i}.ln2"), f"enc.{i}.ff")
        if self.cfg.n_encoder_layers == 0:
            return x
        return self._ln(x, "enc.ln_f")

    def embed_text(self, ids, start: int = 0) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        t = ids.shape[-1]
        if start + t > self.cfg.max_text_len:
            raise IndexError(f"text position {start + t - 1} >= max_text_len={self.cfg.max_text_len}")
        return T.embedding(self.params["text.tok"], ids) + self.params["text.pos"][start:start + t]

    def decode(self, ids, memory: Tensor, visual_mask=None) -> Tensor:
        """Teacher-forced decoder over the whole prefix; returns logits [..., T, V]."""
        ids = np.asarray(ids, dtype=np.int64)
        t = ids.shape[-1]
        causal = np.tril(np.ones((t, t), dtype=bool))
        cmask = None if visual_mask is None else np.asarray(visual_mask, bool)[..., None, :]
        x = self.embed_text(ids)
        for i in range(self.cfg.n_decoder_layers):
            h = self._ln(x, f"dec.{i}.ln1")
            x = x + self.attention(h, f"dec.{i}.self", kv_in=h, mask=causal)
            h = self._ln(x, f"dec.{i}.ln2")
            x = x + self.attention(h, f"dec.{i}.cross", kv_in=memory, mask=cmask)
            x = x + self._ff(self._ln(x, f"dec.{i}.ln3"), f"dec.{i}.ff")
        h = self._ln(x, "dec.ln_f")
        return h @ self.params["head.w"] + self.params["head.b"]

    def forward(self, feats, ids, visual_mask=None) -> Tensor:
        memory = self.encode(self.embed_visual(feats), visual_mask)
        return self.decode(ids, memory, visual_mask)

    # -- incremental decoding

    def start_state(self, feats, visual_mask=None, use_cache: bool = True) -> "DecoderState":
        feats = np.asarray(feats, dtype=np.float64)
        memory = self.encode(self.embed_visual(feats), visual_mask)
        state = DecoderState(ids=[BOS], memory=memory, visual_mask=visual_mask, use_cache=use_cache)
        if use_cache:
            state.cross_kv = [self.project_kv(memory, f"dec.{i}.cross")
                              for i in range(self.cfg.n_decoder_layers)]
            state.self_kv = [None] * self.cfg.n_decoder_layers
        return state

    def decode_step(self, state: "DecoderState") -> np.ndarray:
        """Logits [V] for the token after ``state.ids``; extends caches in place."""
        t = len(state.ids) - 1
        if t < 0:
            raise ValueError("decoder state needs at least the begin token")
        if t >= self.cfg.max_text_len:
            raise IndexError(f"step {t} >= max_text_len={self.cfg.max_text_len}")
        if not state.use_cache:
            return self.decode(np.asarray(state.ids), state.memory, state.visual_mask).data[-1]
        if state.cached_len != t:
            raise ValueError("cache length out of sync with generated ids")
        cmask = None if state.visual_mask is None else np.asarray(state.visual_mask, bool)[None, :]
        x = self.embed_text(np.asarray([state.ids[-1]]), start=t)
        for i in range(self.cfg.n_decoder_layers):
            h = self._ln(x, f"dec.{i}.ln1")
            k_new, v_new = self.project_kv(h, f"dec.{i}.self")
            prev = state.self_kv[i]
            if prev is not None:
                k_new = Tensor(np.concatenate([prev[0].data, k_new.data], axis=-2))
                v_new = Tensor(np.concatenate([prev[1].data, v_new.data], axis=-2))
            state.self_kv[i] = (k_new, v_new)
            x = x + self.attention(h, f"dec.{i}.self", k=k_new, v=v_new)
            h = self._ln(x, f"dec.{i}.ln2")
            ck, cv = state.cross_kv[i]
            x = x + self.attention(h, f"dec.{i}.cross", k=ck, v=cv, mask=cmask)
            x = x + self._ff(self._ln(x, f"dec.{i}.ln3"), f"dec.{i}.ff")
        h = self._ln(x, "dec.ln_f")
        state.cached_len = t + 1
        return (h @ self.params["head.w"] + self.params["head.b"]).data[-1]


def init_params_shapes(cfg: ModelConfig) -> dict:
    # cheap shape-only twin of init_params
    shapes = {}
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes["visual.proj"] = (cfg.feature_dim, d)
    shapes["visual.pos"] = (cfg.max_visual_tokens, d)
    shapes["text.tok"] = (v, d)
    shapes["text.pos"] = (cfg.max_text_len, d)

    def ln(n):
        shapes[f"{n}.gain"] = (d,)
        shapes[f"{n}.bias"] = (d,)

    def attn(n):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{n}.{w}"] = (d, d)
        for b in ("bq", "bk", "bv", "bo"):
            shapes[f"{n}.{b}"] = (d,)

    def ff(n):
        shapes.update({f"{n}.w1": (d, f), f"{n}.b1": (f,), f"{n}.w2": (f, d), f"{n}.b2": (d,)})

    for i in range(cfg.n_encoder_layers):
        ln(f"enc.{i}.ln1"); attn(f"enc.{i}.attn"); ln(f"enc.{i}.ln2"); ff(f"enc.{i}.ff")
    ln("enc.ln_f")
    for i in range(cfg.n_decoder_layers):
        ln(f"dec.{i}.ln1"); attn(f"dec.{i}.self"); ln(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross"); ln(f"dec.{i}.ln3"); ff(f"dec.{i}.ff")
    ln("dec.ln_f")
    shapes["head.w"] = (d, v)
    shapes["head.b"] = (v,)
    return {k: np.empty(s) for k, s in shapes.items()}


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., L, d] -> [..., h, L, d/h]"""
    *lead, length, d = x.shape
    x = x.reshape(tuple(lead) + (length, n_heads, d // n_heads))
    return T.swapaxes(x, -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """[..., h, L, dk] -> [..., L, h*dk]"""
    *lead, h, length, dk = x.shape
    return T.swapaxes(x, -2, -3).reshape(tuple(lead) + (length, h * dk))


@dataclass
class DecoderState:
    ids: list
    memory: Tensor
    visual_mask: Optional[np.ndarray] = None
    use_cache: bool = True
    self_kv: list = field(default_factory=list)
    cross_kv: list = field(default_factory=list)
    cached_len: int = 0

    def fork(self, token: int) -> "DecoderState":
        # cache tensors are never mutated, so sharing them between beams is safe
        return DecoderState(self.ids + [int(token)], self.memory, self.visual_mask, self.use_cache,
                            list(self.self_kv), self.cross_kv, self.cached_len)


# ---------------------------------------------------------------------------
# generation


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    s = x - np.max(x)
    return s - np.log(T.sum_all(np.exp(s)))


def generate(model: CaptionModel, feats, strategy: str = "greedy", beam_size: int = 1,
             max_len: Optional[int] = None, visual_mask=None, use_cache: bool = True) -> list[int]:
    """Decode a token sequence starting with BOS.

    ``max_len`` bounds the total length (BOS and EOS included).  Greedy ties go
    to the lowest token id.  Beam search ranks finished hypotheses by summed
    log-probability divided by their length.
    """
    cap = model.cfg.max_text_len + 1
    max_len = cap if max_len is None else min(max_len, cap)
    if strategy == "greedy":
        return _greedy(model, feats, max_len, visual_mask, use_cache)
    if strategy == "beam":
        return _beam(model, feats, beam_size, max_len, visual_mask, use_cache)
    raise ValueError(f"unknown decoding strategy {strategy!r}")


def _greedy(model, feats, max_len, visual_mask, use_cache):
    state = model.start_state(feats, visual_mask, use_cache)
    while len(state.ids) < max_len:
        logits = model.decode_step(state)
        tok = int(np.argmax(logits))  # first maximum = lowest id
        state.ids.append(tok)
        if tok == EOS:
            break
    return list(state.ids)


def _beam(model, feats, k, max_len, visual_mask, use_cache):
    if k < 1:
        raise ValueError("beam size must be >= 1")
    start = model.start_state(feats, visual_mask, use_cache)
    alive = [(0.0, start)]
    finished: list[tuple[float, list]] = []
    while alive and len(alive[0][1].ids) < max_len:
        cands = []
        for b, (score, st) in enumerate(alive):
            lp = _log_softmax_np(model.decode_step(st))
            for tok in range(lp.shape[0]):
                cands.append((score + lp[tok], b, tok))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        nxt = []
        for score, b, tok in cands:
            st = alive[b][1]
            if tok == EOS:
                ids = st.ids + [EOS]
                finished.append((score / (len(ids) - 1), ids))
            else:
                nxt.append((score, st.fork(tok)))
            if len(nxt) >= k or len(finished) >= k:
                break
        if len(finished) >= k:
            break
        alive = nxt
    if not finished:
        return list(alive[0][1].ids)
    finished.sort(key=lambda f: -f[0])
    return finished[0][1]
