"""Per-frame visual features from a small residual CNN, plus the feature file format."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

# pixel standardisation applied after scaling to [0, 1]
PIXEL_MEAN = 0.5
PIXEL_STD = 0.5
BN_EPS = 1e-5

MAGIC = b"MMVC"
VERSION = 1


class FeatureFileError(ValueError):
    pass


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


@dataclass(frozen=True)
class ResNetMiniConfig:
    stage_channels: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    input_size: tuple = (224, 224)
    feature_dim: int = 2048

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if not self.stage_channels or any(c <= 0 for c in self.stage_channels):
            raise ValueError("stage_channels must be non-empty and positive")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        h, w = self.input_size
        if h != w or h < 32:
            raise ValueError("input_size must be square with extent >= 32")


@dataclass
class VisualFeatureSet:
    video_id: str
    features: np.ndarray  # [N, D] float32
    frame_indices: list = field(default_factory=list)
    extractor_tag: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be an N x D matrix with N >= 1")
        if not self.frame_indices:
            self.frame_indices = list(range(self.features.shape[0]))
        self.frame_indices = [int(i) for i in self.frame_indices]
        if len(self.frame_indices) != self.features.shape[0]:
            raise ValueError("one frame index per feature row required")
        if any(b < a for a, b in zip(self.frame_indices, self.frame_indices[1:])):
            raise ValueError("frame_indices must be ascending")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


# ---------------------------------------------------------------------------
# network


def _conv_init(rng: T.Rng, c_out: int, c_in: int, k: int) -> np.ndarray:
    fan_in = c_in * k * k
    return rng.normal((c_out, c_in, k, k), std=np.sqrt(2.0 / fan_in))


def init_resnet_params(cfg: ResNetMiniConfig, seed: int = 0) -> dict:
    """He-normal convolutions, unit BN gains, zero biases, scaled-normal lift."""
    rng = T.Rng(seed)
    p: dict[str, np.ndarray] = {}

    def bn(prefix, c):
        p[f"{prefix}.gain"] = np.ones(c)
        p[f"{prefix}.bias"] = np.zeros(c)

    c0 = cfg.stage_channels[0]
    p["stem.conv"] = _conv_init(rng, c0, 3, 3)
    bn("stem.bn", c0)
    c_prev = c0
    for s, c in enumerate(cfg.stage_channels):
        for b in range(cfg.blocks_per_stage):
            pre = f"stage{s}.block{b}"
            c_in = c_prev if b == 0 else c
            p[f"{pre}.conv1"] = _conv_init(rng, c, c_in, 3)
            bn(f"{pre}.bn1", c)
            p[f"{pre}.conv2"] = _conv_init(rng, c, c, 3)
            bn(f"{pre}.bn2", c)
            if _block_stride(s, b) != 1 or c_in != c:
                p[f"{pre}.proj"] = _conv_init(rng, c, c_in, 1)
                bn(f"{pre}.proj_bn", c)
        c_prev = c
    p["lift.weight"] = rng.normal((c_prev, cfg.feature_dim), std=1.0 / np.sqrt(c_prev))
    p["lift.bias"] = np.zeros(cfg.feature_dim)
    return p


def _block_stride(stage: int, block: int) -> int:
    return 2 if (stage > 0 and block == 0) else 1


def batch_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Inference-form batch norm with running statistics frozen at mean 0, var 1."""
    c = x.shape[0]
    scale = gain * (1.0 / np.sqrt(1.0 + BN_EPS))
    return x * scale.reshape(c, 1, 1) + bias.reshape(c, 1, 1)


def residual_block(x: Tensor, p: dict, pre: str, stride: int) -> Tensor:
    h = T.conv2d(x, p[f"{pre}.conv1"], stride=stride, padding=1)
    h = T.relu(batch_norm(h, p[f"{pre}.bn1.gain"], p[f"{pre}.bn1.bias"]))
    h = T.conv2d(h, p[f"{pre}.conv2"], stride=1, padding=1)
    h = batch_norm(h, p[f"{pre}.bn2.gain"], p[f"{pre}.bn2.bias"])
    if f"{pre}.proj" in p:
        short = T.conv2d(x, p[f"{pre}.proj"], stride=stride, padding=0)
        short = batch_norm(short, p[f"{pre}.proj_bn.gain"], p[f"{pre}.proj_bn.bias"])
    else:
        short = x
    return T.relu(h + short)


def standardize(frame: np.ndarray) -> np.ndarray:
    return (np.asarray(frame, dtype=np.float64) - PIXEL_MEAN) / PIXEL_STD


class ResNetMini:
    """Stem conv, residual stages, global average pool, linear lift to D."""

    def __init__(self, cfg: ResNetMiniConfig | None = None, seed: int = 0, params: dict | None = None):
        self.cfg = cfg or ResNetMiniConfig()
        raw = params if params is not None else init_resnet_params(self.cfg, seed)
        self.params = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in raw.items()}

    def tag(self) -> str:
        h = hashlib.sha256(repr(self.cfg).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()[:16]

    def forward(self, x: Tensor) -> Tensor:
        """Map one standardised [3, H, W] frame to a D-vector."""
        p = self.params
        h = T.conv2d(x, p["stem.conv"], stride=2, padding=1)
        h = T.relu(batch_norm(h, p["stem.bn.gain"], p["stem.bn.bias"]))
        for s in range(len(self.cfg.stage_channels)):
            for b in range(self.cfg.blocks_per_stage):
                h = residual_block(h, p, f"stage{s}.block{b}", _block_stride(s, b))
        pooled = T.global_avg_pool(h)
        lifted = T.matmul(pooled.reshape(1, -1), p["lift.weight"]) + p["lift.bias"]
        return lifted.reshape(-1)

    def check_frame(self, frame) -> np.ndarray:
        arr = frame.data if isinstance(frame, Tensor) else np.asarray(frame, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ValueError(f"frame must have shape [3, H, W], got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("frame contains non-finite pixels")
        if tuple(arr.shape[1:]) != self.cfg.input_size:
            raise ValueError(f"frame size {arr.shape[1:]} != configured {self.cfg.input_size}")
        return arr


def extract_features(frames: Sequence, net: ResNetMini, video_id: str = "",
                     frame_indices: Sequence[int] | None = None) -> VisualFeatureSet:
    """Run each [3, H, W] frame (pixel values in [0, 1]) through ``net``."""
    if len(frames) == 0:
        raise ValueError("no frames given")
    rows = []
    for frame in frames:
        arr = net.check_frame(frame)
        rows.append(net.forward(Tensor(standardize(arr))).data)
    feats = np.stack(rows).astype(np.float32)
    return VisualFeatureSet(video_id, feats, list(frame_indices or range(len(rows))), net.tag())


def load_frame(path, size: tuple) -> np.ndarray:
    """Read an image file, resize to ``size`` (H, W) and return [3, H, W] in [0, 1]."""
    from PIL import Image

    with Image.open(path) as img:
        img = img.convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def sample_frames(total: int, n: int, policy: str = "uniform") -> list[int]:
    """Indices of ``n`` frames out of ``total``.

    ``uniform`` takes round(i*(total-1)/(n-1)) with half-up rounding; any
    collision is pushed right to the next free index.
    """
    if n < 1 or total < 1:
        raise ValueError("total and n must be >= 1")
    if n > total:
        raise ValueError(f"cannot sample {n} frames from {total}")
    if policy == "first_n":
        return list(range(n))
    if policy != "uniform":
        raise ValueError(f"unknown sampling policy {policy!r}")
    if n == 1:
        return [0]
    idx = [int(np.floor(i * (total - 1) / (n - 1) + 0.5)) for i in range(n)]
    for i in range(1, n):
        if idx[i] <= idx[i - 1]:
            idx[i] = idx[i - 1] + 1
    return idx


# ---------------------------------------------------------------------------
# feature files


def write_features(fs: VisualFeatureSet, path) -> None:
    vid = fs.video_id.encode("utf-8")
    if len(vid) > 0xFFFF:
        raise ValueError("video_id too long")
    rows, cols = fs.features.shape
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<IIIH", VERSION, rows, cols, len(vid))
    buf += vid
    buf += np.asarray(fs.frame_indices, dtype="<u4").tobytes()
    buf += np.ascontiguousarray(fs.features, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_features(path, extractor_tag: str = "") -> VisualFeatureSet:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic in feature file {path}")
    if len(raw) < 18:
        raise TruncatedFileError(f"truncated feature header in {path}")
    version, rows, cols, nlen = struct.unpack_from("<IIIH", raw, 4)
    if version != VERSION:
        raise VersionMismatchError(f"feature file version {version}, expected {VERSION}")
    off = 18
    need = off + nlen + 4 * rows + 4 * rows * cols
    if len(raw) < need:
        raise TruncatedFileError(f"truncated feature payload in {path}: {len(raw)} < {need} bytes")
    vid = raw[off : off + nlen].decode("utf-8")
    off += nlen
    idx = np.frombuffer(raw, dtype="<u4", count=rows, offset=off).tolist()
    off += 4 * rows
    feats = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
    return VisualFeatureSet(vid, feats.astype(np.float32), idx, extractor_tag)


def header_size(video_id: str, rows: int) -> int:
    return 18 + len(video_id.encode("utf-8")) + 4 * rows
