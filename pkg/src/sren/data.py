"""IDX ingestion, SRT-distorted test sets and analytic pattern fixtures."""

from __future__ import annotations

import gzip
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sren.errors import CountMismatch, InvalidArgument, MagicMismatch, TruncatedFile
from sren.io import read_srtn, write_srtn
from sren.tensorcore import FeatureMap, make_sim2, pixel_offsets, rotation, warp_array

log = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

DEFAULT_RANGES = {"theta": (0.0, 2.0 * math.pi), "s": (1.0, 2.0), "t": (-10.0, 10.0)}
MODES = ("plain", "R", "S", "T", "SRT")


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise InvalidArgument(f"images must be N x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InvalidArgument("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def feature_map(self, i: int) -> FeatureMap:
        return FeatureMap(self.images[i][None])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        meta = dict(self.meta)
        if "distortions" in meta:
            meta["distortions"] = [meta["distortions"][i] for i in idx]
        meta["indices"] = idx.tolist()
        return LabeledDataset(self.images[idx], self.labels[idx], meta)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: file too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise MagicMismatch(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFile(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise TruncatedFile(f"{path}: payload has {len(raw) - head} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an IDX image/label pair (plain or gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise CountMismatch(f"{len(images)} images but {len(labels)} labels")
    meta = {"source": str(images_path), "padding": 0}
    return LabeledDataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), meta)


def split(ds: LabeledDataset, n_train: int, n_test: int, seed: int = 0):
    """Disjoint seeded subsets; the full set is used when a count is <= 0."""
    order = np.random.default_rng([seed, 0x5EED]).permutation(len(ds))
    n_train = len(ds) if n_train <= 0 else n_train
    if n_train + max(n_test, 0) > len(ds):
        raise InvalidArgument(f"cannot draw {n_train} + {n_test} samples from {len(ds)}")
    test_idx = order[n_train:] if n_test <= 0 else order[n_train : n_train + n_test]
    return ds.subset(order[:n_train]), ds.subset(test_idx)


def pad_to(images: np.ndarray, size: int) -> np.ndarray:
    n, h, w = images.shape
    if h > size or w > size:
        raise InvalidArgument(f"cannot pad {h}x{w} into {size}x{size}")
    top, left = (size - h) // 2, (size - w) // 2
    out = np.zeros((n, size, size))
    out[:, top : top + h, left : left + w] = images
    return out


def _draw(rng, mode: str, ranges: dict):
    s, theta, t = 1.0, 0.0, (0.0, 0.0)
    if mode in ("R", "SRT"):
        theta = rng.uniform(*ranges["theta"])
    if mode in ("S", "SRT"):
        s = rng.uniform(*ranges["s"])
    if mode in ("T", "SRT"):
        t = (rng.uniform(*ranges["t"]), rng.uniform(*ranges["t"]))
    return s, theta, t


def _fits(img: np.ndarray, T) -> bool:
    h, w = img.shape
    origin = ((h - 1) / 2.0, (w - 1) / 2.0)
    dr, dc = pixel_offsets(h, w, origin)
    on = img > 0
    if not on.any():
        return True
    dst = T.apply(np.stack([dr[on], dc[on]], axis=1))
    return bool(np.all(np.abs(dst[:, 0]) <= origin[0]) and np.all(np.abs(dst[:, 1]) <= origin[1]))


def make_srt_variant(ds: LabeledDataset, seed: int, mode: str = "SRT", ranges: dict | None = None, size: int = 56,
                     max_redraws: int = 100) -> LabeledDataset:
    """Pad to ``size`` and warp every image by its own random similarity.

    Parameters for image i come from a generator seeded with (seed, i), so any
    image can be regenerated alone.  Draws that would push ink outside the
    canvas are rejected and redrawn; rejections are logged and recorded.
    """
    if mode not in MODES:
        raise InvalidArgument(f"unknown mode {mode!r}; expected one of {MODES}")
    ranges = {**DEFAULT_RANGES, **(ranges or {})}
    padded = pad_to(ds.images, size)
    out = np.empty_like(padded)
    records = []
    rejected = 0
    for i, img in enumerate(padded):
        rng = np.random.default_rng([seed, i])
        for attempt in range(max_redraws + 1):
            s, theta, t = _draw(rng, mode, ranges)
            T = make_sim2(s, theta, t)
            if mode == "plain" or _fits(img, T):
                break
        else:
            log.warning("image %d still clips after %d redraws; keeping last draw", i, max_redraws)
        rejected += attempt
        out[i] = warp_array(img[None], T)[0]
        records.append({"index": i, "s": T.s, "theta": T.theta, "tx": T.t[0], "ty": T.t[1], "seed": seed,
                        "redraws": attempt})
    if rejected:
        log.info("%s variant: %d clipping draws rejected and redrawn", mode, rejected)
    meta = dict(ds.meta, padding=size, mode=mode, seed=seed, ranges={k: list(v) for k, v in ranges.items()},
                distortions=records, rejected=rejected)
    return LabeledDataset(out, ds.labels.copy(), meta)


def synth_pattern(kind: str, size: int, theta: float = 0.0, s: float = 1.0, period: float = 8.0,
                  phase: float = 0.0) -> FeatureMap:
    """Analytic fixtures about the image center.

    Each pattern equals its (theta=0, s=1) version evaluated at R^T x / s,
    i.e. the warp of the base pattern by (s, theta).
    """
    dr, dc = pixel_offsets(size, size, ((size - 1) / 2.0, (size - 1) / 2.0))
    R = rotation(theta)
    u = (R[0, 0] * dr + R[1, 0] * dc) / s
    v = (R[0, 1] * dr + R[1, 1] * dc) / s
    if kind == "grating":
        img = np.cos(2.0 * np.pi * v / period + phase)
    elif kind == "blob":
        sigma = period / 2.0
        img = np.exp(-(u * u + v * v) / (2.0 * sigma * sigma))
    elif kind == "checker":
        img = np.sign(np.sin(np.pi * u / period + phase) * np.sin(np.pi * v / period + phase))
    else:
        raise InvalidArgument(f"unknown pattern kind {kind!r}")
    return FeatureMap(img)


def save_dataset(ds: LabeledDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_srtn(out / "images.srtn", ds.images, dtype="f32")
    write_srtn(out / "labels.srtn", ds.labels.astype(np.float64))
    (out / "manifest.json").write_text(json.dumps(ds.meta, indent=1, sort_keys=True))
    return out


def load_dataset(in_dir) -> LabeledDataset:
    d = Path(in_dir)
    images = read_srtn(d / "images.srtn").astype(np.float64)
    labels = read_srtn(d / "labels.srtn").astype(np.int64)
    meta = json.loads((d / "manifest.json").read_text())
    return LabeledDataset(images, labels, meta)
