"""Build the committed 8-record fixture.

Each synthetic video has 4 PNG frames (``manifest_frames.jsonl``, input for
``capcore extract``) and a precomputed feature file (``manifest.jsonl``, input
for training).  The feature files stand in for a pretrained extractor: a
non-negative per-video prototype plus small per-frame jitter.  Features from
the randomly initialised mini ResNet are almost collinear across videos, so
they are not used for the training fixture.

    python scripts/make_fixture.py tests/fixtures/tiny
"""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from capcore.data import CaptionRecord, write_manifest
from capcore.vision import VisualFeatureSet, write_features

CAPTIONS = [
    ("v00", {"captions": ["a man is riding a horse on the beach"]}),
    ("v01", {"action": "the car slows down", "justification": "the light turns red"}),
    ("v02", {"captions": ["a woman is slicing a tomato"]}),
    ("v03", {"captions": ["two dogs are playing in the snow"]}),
    ("v04", {"action": "the truck turns left", "justification": "the road curves to the left"}),
    ("v05", {"captions": ["a child kicks a red ball"]}),
    ("v06", {"captions": ["a cat is sleeping on the sofa"]}),
    ("v07", {"action": "the car stops", "justification": "a pedestrian is crossing"}),
]
N_FRAMES = 4
SIZE = 64
FEATURE_DIM = 2048
FEATURE_SEED = 11
FRAME_JITTER = 0.1


def synth_frame(video: int, frame: int, rng) -> np.ndarray:
    """A moving coloured square over a video-specific gradient background."""
    yy, xx = np.mgrid[0:SIZE, 0:SIZE] / SIZE
    hue = np.array([(video * 37) % 255, (video * 91 + 60) % 255, (video * 53 + 120) % 255]) / 255
    bg = np.stack([hue[0] * xx, hue[1] * yy, hue[2] * (1 - xx)], -1)
    img = 0.6 * bg + 0.1 * rng.random((SIZE, SIZE, 3))
    s = 12 + 2 * video
    x0 = (8 + frame * (4 + video)) % (SIZE - s)
    y0 = (4 + video * 6) % (SIZE - s)
    img[y0:y0 + s, x0:x0 + s] = 1.0 - hue
    return (np.clip(img, 0, 1) * 255).astype(np.uint8)


def synth_features(vid: str, rng) -> VisualFeatureSet:
    proto = np.maximum(rng.normal(size=FEATURE_DIM), 0.0)
    frames = np.maximum(proto + FRAME_JITTER * rng.normal(size=(N_FRAMES, FEATURE_DIM)), 0.0)
    return VisualFeatureSet(vid, frames.astype(np.float32), list(range(N_FRAMES)), "synthetic")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", type=Path)
    args = ap.parse_args()
    out = args.out
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(exist_ok=True)
    pix_rng = np.random.default_rng(0)
    feat_rng = np.random.default_rng(FEATURE_SEED)
    frame_recs, feat_recs = [], []
    for v, (vid, fields) in enumerate(CAPTIONS):
        fdir = out / "frames" / vid
        fdir.mkdir(exist_ok=True)
        for f in range(N_FRAMES):
            Image.fromarray(synth_frame(v, f, pix_rng)).save(fdir / f"frame_{f:03d}.png")
        fpath = out / "features" / f"{vid}.mmvc"
        write_features(synth_features(vid, feat_rng), fpath)
        frame_recs.append(CaptionRecord(vid, frames=str(fdir), **fields))
        feat_recs.append(CaptionRecord(vid, features=str(fpath), **fields))
    write_manifest(frame_recs, out / "manifest_frames.jsonl")
    write_manifest(feat_recs, out / "manifest.jsonl")


if __name__ == "__main__":
    main()
