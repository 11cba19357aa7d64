"""Synthetic image sources, batching with augmentation, and PPM I/O.

Two generators give a genuine distribution shift at desk scale:

* ``source_a``: smooth Gaussian random fields (white noise blurred twice by a
  5x5 binomial kernel, then min-max normalised per channel).
* ``source_b``: piecewise-constant Voronoi mosaics with slightly smoothed cell
  borders.

Images are stored as 48x48 canvases and cropped to 32x32 when loaded.  Every
random decision is drawn from a stream derived from ``(seed, purpose)`` so
that data generation, batch order and augmentation never share state.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy import ndimage

CANVAS = 48
CROP = 32
BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
VORONOI_CELLS = 8

# stream tags keep independent generators apart
_STREAM_PIXELS = 0
_STREAM_ORDER = 1
_STREAM_AUGMENT = 2
_STREAM_CROP = 3

KINDS = ("source_a", "source_b", "directory")


class PPMError(ValueError):
    """Malformed or unsupported PPM file."""


def stream(seed: int, tag: int, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, tag, *extra)``."""
    return np.random.default_rng([int(seed), int(tag), *map(int, extra)])


# ---------------------------------------------------------------------------
# generators


def _source_a_canvases(seed: int, n: int, size: int = CANVAS) -> np.ndarray:
    rng = stream(seed, _STREAM_PIXELS)
    noise = rng.standard_normal((n, size, size, 3))
    out = noise
    for _ in range(2):
        for axis in (1, 2):
            out = ndimage.convolve1d(out, BINOMIAL5, axis=axis, mode="reflect")
    lo = out.min(axis=(1, 2), keepdims=True)
    hi = out.max(axis=(1, 2), keepdims=True)
    return ((out - lo) / np.maximum(hi - lo, 1e-12)).astype(np.float32)


def _source_b_canvases(seed: int, n: int, size: int = CANVAS, cells: int = VORONOI_CELLS) -> np.ndarray:
    rng = stream(seed, _STREAM_PIXELS)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((n, size, size, 3), dtype=np.float32)
    for i in range(n):
        centers = rng.uniform(0, size, size=(cells, 2))
        colors = rng.uniform(0, 1, size=(cells, 3))
        d = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
        labels = np.argmin(d, axis=0)
        img = colors[labels]
        # pixels touching another cell get the 3x3 mean: a one-pixel soft border
        border = np.zeros((size, size), dtype=bool)
        border[:, 1:] |= labels[:, 1:] != labels[:, :-1]
        border[:, :-1] |= labels[:, 1:] != labels[:, :-1]
        border[1:, :] |= labels[1:, :] != labels[:-1, :]
        border[:-1, :] |= labels[1:, :] != labels[:-1, :]
        smooth = ndimage.uniform_filter(img, size=(3, 3, 1), mode="nearest")
        img[border] = smooth[border]
        out[i] = np.clip(img, 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# dataset


@dataclass
class ImageDataset:
    """A fixed set of canvases plus crop/flip augmentation settings."""

    kind: str
    seed: int
    count: int
    canvases: np.ndarray = field(repr=False)
    crop_size: int = CROP
    random_crop: bool = True
    hflip: bool = True
    source: Optional[str] = None  # directory path for kind="directory"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        c = self.canvases
        if c.ndim != 4 or c.shape[-1] != 3:
            raise ValueError(f"canvases must be (n, H, W, 3), got {c.shape}")
        if c.shape[1] < self.crop_size or c.shape[2] < self.crop_size:
            raise ValueError(f"canvas {c.shape[1:3]} smaller than crop {self.crop_size}")

    def __len__(self) -> int:
        return self.count

    def test_images(self) -> np.ndarray:
        """Deterministic crops used for evaluation: one fixed offset per image."""
        rng = stream(self.seed, _STREAM_CROP)
        out = np.empty((self.count, self.crop_size, self.crop_size, 3), dtype=np.float32)
        H, W = self.canvases.shape[1:3]
        for i in range(self.count):
            top = int(rng.integers(0, H - self.crop_size + 1))
            left = int(rng.integers(0, W - self.crop_size + 1))
            out[i] = self.canvases[i, top:top + self.crop_size, left:left + self.crop_size]
        return out

    def augment(self, indices, rng: np.random.Generator) -> np.ndarray:
        """Random-crop and optionally flip the given canvases -> (B, crop, crop, 3)."""
        H, W = self.canvases.shape[1:3]
        k = self.crop_size
        out = np.empty((len(indices), k, k, 3), dtype=np.float32)
        for j, i in enumerate(indices):
            if self.random_crop:
                top = int(rng.integers(0, H - k + 1))
                left = int(rng.integers(0, W - k + 1))
            else:
                top, left = (H - k) // 2, (W - k) // 2
            img = self.canvases[i, top:top + k, left:left + k]
            if self.hflip and rng.random() < 0.5:
                img = img[:, ::-1]
            out[j] = img
        return out

    def epoch_order(self, epoch: int) -> np.ndarray:
        """Visiting order for one epoch; a pure function of (seed, epoch)."""
        return stream(self.seed, _STREAM_ORDER, epoch).permutation(self.count)

    def batches(self, batch_size: int, seed: int) -> Iterator[np.ndarray]:
        """Endless stream of augmented batches.

        ``seed`` drives augmentation only; the visiting order depends on the
        dataset seed and epoch number.
        """
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        aug = stream(seed, _STREAM_AUGMENT)
        epoch, pos = 0, 0
        order = self.epoch_order(epoch)
        while True:
            idx = []
            while len(idx) < batch_size:
                if pos == len(order):
                    epoch, pos = epoch + 1, 0
                    order = self.epoch_order(epoch)
                take = min(batch_size - len(idx), len(order) - pos)
                idx.extend(order[pos:pos + take])
                pos += take
            yield self.augment(idx, aug)

    def manifest_text(self) -> str:
        lines = [f"kind = {self.kind}", f"seed = {self.seed}", f"count = {self.count}", f"crop = {self.crop_size}"]
        if self.source:
            lines.append(f"source = {self.source}")
        return "\n".join(lines) + "\n"


def gen_source_a(seed: int, n: int) -> ImageDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    return ImageDataset("source_a", seed, n, _source_a_canvases(seed, n))


def gen_source_b(seed: int, n: int) -> ImageDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    return ImageDataset("source_b", seed, n, _source_b_canvases(seed, n))


def load_directory(path, seed: int = 0, crop: int = CROP) -> ImageDataset:
    """All ``*.ppm`` files in ``path`` (sorted by name); they must share one size."""
    files = sorted(Path(path).glob("*.ppm"))
    if not files:
        raise FileNotFoundError(f"no .ppm files in {path}")
    imgs = [load_ppm(f) for f in files]
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise ValueError(f"images in {path} have differing sizes: {sorted(shapes)}")
    return ImageDataset("directory", seed, len(imgs), np.stack(imgs), crop_size=crop, source=str(path))


GENERATORS = {"source_a": gen_source_a, "source_b": gen_source_b}


def make_dataset(kind: str, seed: int, count: int) -> ImageDataset:
    try:
        return GENERATORS[kind](seed, count)
    except KeyError:
        raise ValueError(f"unknown generator {kind!r}; choose from {sorted(GENERATORS)}") from None


def write_manifest(dataset: ImageDataset, path) -> None:
    Path(path).write_text(dataset.manifest_text())


def read_manifest(path) -> ImageDataset:
    from .codec.config import parse_kv

    kv = parse_kv(Path(path).read_text())
    kind = kv.get("kind")
    seed = int(kv.get("seed", 0))
    if kind == "directory":
        src = kv["source"]
        if not os.path.isabs(src):
            src = str(Path(path).parent / src)
        return load_directory(src, seed, int(kv.get("crop", CROP)))
    return make_dataset(kind, seed, int(kv["count"]))


# ---------------------------------------------------------------------------
# PPM


_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def load_ppm(path) -> np.ndarray:
    """Read a binary P6 file with maxval 255 -> float32 (H, W, 3) in [0, 1]."""
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _HEADER_TOKEN.match(data, pos)
        if not m:
            raise PPMError(f"{path}: malformed header at byte {pos}")
        tokens.append((m.group(1), m.start(1)))
        pos = m.end(1)
    magic, (w_tok, w_off), (h_tok, h_off), (mv_tok, mv_off) = tokens[0][0], tokens[1], tokens[2], tokens[3]
    if magic != b"P6":
        raise PPMError(f"{path}: expected P6 magic at byte 0, found {magic[:8]!r}")
    try:
        width, height, maxval = int(w_tok), int(h_tok), int(mv_tok)
    except ValueError:
        raise PPMError(f"{path}: non-numeric header field near byte {w_off}") from None
    if width < 1 or height < 1:
        raise PPMError(f"{path}: bad image size {width}x{height} at byte {w_off}")
    if maxval != 255:
        raise PPMError(f"{path}: unsupported maxval {maxval} at byte {mv_off} (only 255)")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PPMError(f"{path}: missing whitespace after header at byte {pos}")
    pos += 1
    need = width * height * 3
    if len(data) - pos < need:
        raise PPMError(f"{path}: truncated payload, expected {need} bytes from byte {pos}, found {len(data) - pos}")
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return (px.reshape(height, width, 3).astype(np.float32) / 255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    px = to_uint8(img)
    h, w = px.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes())
