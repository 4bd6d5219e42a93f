"""Captioning objective, AdamW with accumulation / loss scaling, and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Batch, Vocabulary
from .model import CaptionModel, ModelConfig, is_weight
from .tensor import Tensor

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 75
    batch_size: int = 32
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    accumulation_steps: int = 1
    clip_norm: float = 1.0
    l2_lambda: float = 1e-4
    loss_scale: float = 1024.0
    mixed_precision: bool = True
    narrow_activations: bool = False
    loss_form: str = "mean"
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.accumulation_steps < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and accumulation_steps >= 1 required")
        if self.learning_rate <= 0 or self.clip_norm <= 0 or self.loss_scale <= 0:
            raise ValueError("learning_rate, clip_norm and loss_scale must be positive")
        if self.weight_decay < 0 or self.l2_lambda < 0:
            raise ValueError("weight_decay and l2_lambda must be non-negative")
        if self.loss_form not in ("mean", "sum"):
            raise ValueError("loss_form must be 'mean' or 'sum'")

    @property
    def effective_loss_scale(self) -> float:
        return self.loss_scale if self.mixed_precision else 1.0


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


# ---------------------------------------------------------------------------
# objective


def l2_penalty(params: dict) -> Tensor:
    """Sum of squared entries over weight matrices and embedding tables."""
    total = None
    for name in sorted(params):
        if is_weight(name):
            sq = T.sum_(params[name] * params[name])
            total = sq if total is None else total + sq
    return total if total is not None else Tensor(0.0)


def compute_loss(logits: Tensor, targets, pad_mask, params: dict | None = None, lam: float = 0.0,
                 form: str = "mean", normalizer: Optional[float] = None, l2_weight: float = 1.0):
    """NLL of ``targets`` over positions where ``pad_mask`` is True plus ``lam * ||theta||^2``.

    ``form="mean"`` divides the NLL by the counted tokens (or by ``normalizer``
    when given, so accumulation groups share one denominator).  Returns
    ``(total, nll)``; ``nll`` is the per-token mean as a float.
    """
    mask = np.asarray(pad_mask, dtype=bool)
    n_tok = int(mask.sum())
    if n_tok == 0:
        raise ValueError("every target position is padding")
    nll_sum = T.cross_entropy(logits, targets, mask)
    if form == "mean":
        loss = nll_sum * (1.0 / (normalizer if normalizer is not None else n_tok))
    elif form == "sum":
        loss = nll_sum
    else:
        raise ValueError(f"unknown loss form {form!r}")
    if lam and params:
        loss = loss + l2_penalty(params) * (lam * l2_weight)
    return loss, nll_sum.item() / n_tok


def clip_gradients(grads: dict, clip_norm: float):
    """Scale all gradients by clip_norm/norm when the global L2 norm exceeds clip_norm."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    sq = [T.sum_all(grads[k] * grads[k]) for k in sorted(grads)]
    norm = math.sqrt(T.sum_all(np.array(sq))) if sq else 0.0
    if norm > clip_norm:
        scale = clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float, weight_decay: float,
               beta1: float = BETA1, beta2: float = BETA2, eps: float = ADAM_EPS) -> None:
    """One in-place AdamW update (decoupled decay, bias-corrected moments).

    ``params`` maps names to Tensors or ndarrays; both are updated in place.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in sorted(grads):
        p = params[name]
        data = p.data if isinstance(p, Tensor) else p
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        if weight_decay:
            data -= lr * weight_decay * data
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# loop


@dataclass
class StepResult:
    applied: bool
    loss: float
    nll: float
    tokens: int
    grad_norm: float


class Trainer:
    """Owns the optimizer state and the dynamic loss scale for one model."""

    def __init__(self, model: CaptionModel, cfg: TrainConfig, state: OptimizerState | None = None,
                 loss_scale: float | None = None):
        self.model = model
        self.cfg = cfg
        self.state = state or OptimizerState()
        self.loss_scale = cfg.effective_loss_scale if loss_scale is None else loss_scale
        self.skipped = 0
        self.grad_hook: Optional[Callable[[dict], dict]] = None

    def group_gradients(self, group: Sequence[Batch]):
        """Accumulate unscaled gradients over the micro-batches of one update."""
        cfg = self.cfg
        params = self.model.params
        total_tokens = sum(b.n_tokens for b in group)
        acc = {k: np.zeros_like(v.data) for k, v in params.items()}
        loss_total = 0.0
        nll_total = 0.0
        for batch in group:
            self.model.zero_grad()
            with T.narrow_activations(cfg.narrow_activations):
                logits = self.model.forward(batch.features, batch.input_ids, batch.visual_mask)
                loss, nll = compute_loss(logits, batch.target_ids, batch.text_mask, params, cfg.l2_lambda,
                                         cfg.loss_form, normalizer=total_tokens,
                                         l2_weight=1.0 / len(group))
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite loss on batch {batch.video_ids[:3]}")
            scaled = loss * self.loss_scale
            grads = T.backward(scaled)
            for name, p in params.items():
                g = grads.get(p)
                if g is not None:
                    acc[name] += g / self.loss_scale
            loss_total += loss.item()
            nll_total += nll * batch.n_tokens
        return acc, loss_total, nll_total / total_tokens, total_tokens

    def apply(self, grads: dict) -> tuple[bool, float]:
        """Skip-or-update: non-finite gradients halve the loss scale and skip."""
        if self.grad_hook is not None:
            grads = self.grad_hook(grads)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            self.loss_scale /= 2.0
            log.warning("non-finite gradient: update skipped, loss scale -> %g", self.loss_scale)
            return False, float("nan")
        grads, norm = clip_gradients(grads, self.cfg.clip_norm)
        adamw_step(self.model.params, grads, self.state, self.cfg.learning_rate, self.cfg.weight_decay)
        return True, norm

    def step(self, group: Sequence[Batch]) -> StepResult:
        grads, loss, nll, ntok = self.group_gradients(group)
        applied, norm = self.apply(grads)
        return StepResult(applied, loss, nll, ntok, norm)

    def batch_order(self, n: int, epoch: int) -> list[int]:
        if not self.cfg.shuffle:
            return list(range(n))
        return [int(i) for i in T.Rng((self.cfg.seed, epoch)).permutation(n)]

    def train_epoch(self, batches: Sequence[Batch], epoch: int = 0,
                    on_step: Optional[Callable[[StepResult], None]] = None) -> dict:
        if not batches:
            raise ValueError("no batches to train on")
        k = self.cfg.accumulation_steps
        order = [batches[i] for i in self.batch_order(len(batches), epoch)]
        skipped_before = self.skipped
        nll_tok = 0.0
        ntok = 0
        losses, norms = [], []
        for start in range(0, len(order), k):
            res = self.step(order[start : start + k])
            nll_tok += res.nll * res.tokens
            ntok += res.tokens
            losses.append(res.loss)
            if res.applied:
                norms.append(res.grad_norm)
            if on_step:
                on_step(res)
        return {
            "epoch": epoch,
            "nll": nll_tok / ntok,
            "loss": float(np.mean(losses)),
            "grad_norm_mean": float(np.mean(norms)) if norms else float("nan"),
            "grad_norm_max": float(np.max(norms)) if norms else float("nan"),
            "skipped": self.skipped - skipped_before,
            "updates": self.state.step,
            "loss_scale": self.loss_scale,
        }


def evaluate_nll(model: CaptionModel, batches: Sequence[Batch]) -> float:
    """Per-token NLL over ``batches`` without updating anything."""
    tot, n = 0.0, 0
    for b in batches:
        logits = model.forward(b.features, b.input_ids, b.visual_mask)
        _, nll = compute_loss(logits, b.target_ids, b.text_mask)
        tot += nll * b.n_tokens
        n += b.n_tokens
    return tot / n


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class ModelCheckpoint:
    model_config: ModelConfig
    vocab: Vocabulary
    params: dict
    train_config: Optional[TrainConfig] = None
    optimizer: Optional[OptimizerState] = None
    epoch: int = 0
    global_step: int = 0
    loss_scale: float = 1.0
    rng: dict = field(default_factory=dict)
    version: int = CKPT_VERSION


def _pack_text(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_tensors(named: Sequence[tuple[str, np.ndarray]]) -> bytes:
    out = bytearray(struct.pack("<I", len(named)))
    for name, arr in named:
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return bytes(out)


def save_checkpoint(path, model: CaptionModel, vocab: Vocabulary, train_cfg: TrainConfig | None = None,
                    optimizer: OptimizerState | None = None, epoch: int = 0, global_step: int = 0,
                    loss_scale: float = 1.0, rng: dict | None = None) -> None:
    header = {
        "model": model.cfg.to_dict(),
        "train": asdict(train_cfg) if train_cfg is not None else None,
        "state": {"epoch": epoch, "global_step": global_step, "loss_scale": loss_scale,
                  "rng": rng or {}},
    }
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<I", CKPT_VERSION)
    buf += _pack_text(header)
    buf += _pack_text(vocab.itos)
    buf += _pack_tensors([(k, model.params[k].data) for k in sorted(model.params)])
    if optimizer is None:
        buf += b"\x00"
    else:
        buf += b"\x01" + struct.pack("<Q", optimizer.step)
        named = [(f"m/{k}", optimizer.m[k]) for k in sorted(optimizer.m)]
        named += [(f"v/{k}", optimizer.v[k]) for k in sorted(optimizer.v)]
        buf += _pack_tensors(named)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError("checkpoint truncated")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self):
        (n,) = self.unpack("<I")
        return json.loads(self.take(n).decode("utf-8"))

    def tensors(self) -> dict:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode("utf-8")
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
            out[name] = arr
        return out


def load_checkpoint(path) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: checkpoint truncated")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    rd = _Reader(body)
    rd.off = 8
    try:
        header = rd.text()
        itos = rd.text()
        params = rd.tensors()
        (has_opt,) = rd.unpack("<B")
        opt = None
        if has_opt:
            (step,) = rd.unpack("<Q")
            named = rd.tensors()
            opt = OptimizerState(
                m={k[2:]: v for k, v in named.items() if k.startswith("m/")},
                v={k[2:]: v for k, v in named.items() if k.startswith("v/")},
                step=step,
            )
    except CheckpointError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError, struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if rd.off != len(body) or zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch or trailing data (truncated or corrupt)")
    mcfg = ModelConfig(**header["model"])
    expected = CaptionModel.__new__(CaptionModel)
    expected.cfg = mcfg
    from .model import init_params_shapes

    shapes = {k: v.shape for k, v in init_params_shapes(mcfg).items()}
    got = {k: v.shape for k, v in params.items()}
    if shapes != got:
        bad = sorted(k for k in set(shapes) | set(got) if shapes.get(k) != got.get(k))
        raise CheckpointError(f"{path}: tensor shapes do not match config: {bad[:5]}")
    state = header["state"]
    return ModelCheckpoint(
        model_config=mcfg,
        vocab=Vocabulary(list(itos)),
        params=params,
        train_config=TrainConfig(**header["train"]) if header.get("train") else None,
        optimizer=opt,
        epoch=state["epoch"],
        global_step=state["global_step"],
        loss_scale=state["loss_scale"],
        rng=state.get("rng", {}),
        version=version,
    )


def model_from_checkpoint(ck: ModelCheckpoint) -> CaptionModel:
    return CaptionModel(ck.model_config, params={k: v.copy() for k, v in ck.params.items()})


def fit(model: CaptionModel, batches: Sequence[Batch], cfg: TrainConfig, trainer: Trainer | None = None,
        start_epoch: int = 0, on_epoch: Optional[Callable[[dict, Trainer], None]] = None) -> list[dict]:
    """Run epochs ``start_epoch .. cfg.epochs-1`` and return per-epoch metrics."""
    trainer = trainer or Trainer(model, cfg)
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        m = trainer.train_epoch(batches, epoch)
        m["wall_time"] = time.perf_counter() - t0
        history.append(m)
        if on_epoch:
            on_epoch(m, trainer)
    return history
