"""On-disk container for one encoded image and the backward-compatibility check.

Layout (little-endian)::

    b"CCBS1"                      magic
    u8     format version
    32 B   SHA-256 fingerprint of the entropy-model parameters
    f64    lambda
    u32    height, u32 width
    u8     stage count N
    N x u32 payload byte lengths
    payloads (stage 1 first)
    u32    CRC32 of every preceding byte

Decoding is refused unless the decoder's entropy-model fingerprint equals
the header's: a different probability model would silently decode garbage.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .codec.model import Model, StageLatent, batch_to_image, image_to_batch, model_fingerprint
from .entropy import MAX_ESCAPE_MAGNITUDE, EntropyCodingError, rans_decode, rans_encode, sigma_to_index
from .numerics import no_grad

MAGIC = b"CCBS1"
VERSION = 1
FINGERPRINT_BYTES = 32
EXTENSION = ".ccbs"
_FIXED = struct.Struct(f"<5sB{FINGERPRINT_BYTES}sdIIB")


class BitstreamError(ValueError):
    """Base class for container problems."""


class CorruptionError(BitstreamError):
    """Bad magic, version, lengths or CRC."""


class IncompatibleModelError(BitstreamError):
    """The decoder's entropy model differs from the one that wrote the stream."""


class EncodeError(BitstreamError):
    """A latent residual cannot be represented by the entropy coder."""


@dataclass(frozen=True)
class Header:
    fingerprint: bytes
    lam: float
    height: int
    width: int
    lengths: tuple
    version: int = VERSION

    @property
    def stages(self) -> int:
        return len(self.lengths)

    def pack(self) -> bytes:
        fixed = _FIXED.pack(MAGIC, self.version, self.fingerprint, self.lam, self.height, self.width, len(self.lengths))
        return fixed + struct.pack(f"<{len(self.lengths)}I", *self.lengths)

    @property
    def size(self) -> int:
        return _FIXED.size + 4 * len(self.lengths)


@dataclass(frozen=True)
class EncodedImage:
    header: Header
    payloads: tuple

    def to_bytes(self) -> bytes:
        body = self.header.pack() + b"".join(self.payloads)
        return body + struct.pack("<I", zlib.crc32(body))

    @property
    def nbytes(self) -> int:
        return self.header.size + sum(len(p) for p in self.payloads) + 4

    @property
    def bpp(self) -> float:
        return 8.0 * self.nbytes / (self.header.height * self.header.width)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EncodedImage":
        if len(blob) < _FIXED.size + 4:
            raise CorruptionError(f"container too short ({len(blob)} bytes)")
        magic, version, fp, lam, h, w, n = _FIXED.unpack_from(blob, 0)
        if magic != MAGIC:
            raise CorruptionError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptionError(f"unsupported format version {version}")
        pos = _FIXED.size
        if len(blob) < pos + 4 * n + 4:
            raise CorruptionError("container truncated inside the length table")
        lengths = struct.unpack_from(f"<{n}I", blob, pos)
        pos += 4 * n
        body_end = len(blob) - 4
        if pos + sum(lengths) != body_end:
            raise CorruptionError(f"payload lengths sum to {sum(lengths)} but {body_end - pos} bytes remain")
        (crc,) = struct.unpack_from("<I", blob, body_end)
        if zlib.crc32(blob[:body_end]) != crc:
            raise CorruptionError("CRC mismatch")
        if fp == bytes(FINGERPRINT_BYTES):
            raise CorruptionError("all-zero fingerprint")
        payloads = []
        for n_bytes in lengths:
            payloads.append(bytes(blob[pos:pos + n_bytes]))
            pos += n_bytes
        return cls(Header(fp, lam, h, w, tuple(lengths), version), tuple(payloads))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EncodedImage":
        return cls.from_bytes(Path(path).read_bytes())


def _check_lambda(lam) -> float:
    lam = float(lam)
    if not math.isfinite(lam) or lam <= 0:
        raise ValueError(f"lambda must be finite and positive, got {lam}")
    return lam


def encode_image(x: np.ndarray, lam: float, model: Model) -> EncodedImage:
    """Encode one (H, W, 3) image in [0, 1] at rate parameter ``lam``."""
    lam = _check_lambda(lam)
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {x.shape}")
    with no_grad():
        feats = model.encode_features(image_to_batch(x), lam)
        stages = model.entropy_pass(lam, "encode", features=feats, quant="round")
    payloads = []
    for st in stages:
        sym = st.symbols
        bad = np.argwhere(np.abs(sym) > MAX_ESCAPE_MAGNITUDE)
        if len(bad):
            raise EncodeError(f"stage {st.stage}: residual {int(sym[tuple(bad[0])])} at position {tuple(int(v) for v in bad[0])} exceeds the escape range")
        idx = sigma_to_index(st.sigma.data.ravel(), model.table)
        try:
            payloads.append(rans_encode(sym.ravel(), idx, model.table))
        except EntropyCodingError as exc:  # pragma: no cover - guarded above
            raise EncodeError(f"stage {st.stage}: {exc}") from exc
    header = Header(model_fingerprint(model), lam, x.shape[0], x.shape[1], tuple(len(p) for p in payloads))
    return EncodedImage(header, tuple(payloads))


def decode_image(b: EncodedImage, model: Model, force: bool = False) -> tuple[np.ndarray, list[StageLatent]]:
    """Decode to an (H, W, 3) reconstruction and the recovered stage latents.

    With ``force=True`` the fingerprint gate is skipped and the range decoder
    tolerates running off the end of a payload, so a mismatched entropy model
    produces a (corrupted) image instead of an error.
    """
    h = b.header
    if not force and h.fingerprint != model_fingerprint(model):
        raise IncompatibleModelError(
            f"stream fingerprint {h.fingerprint.hex()[:16]} does not match decoder {model_fingerprint(model).hex()[:16]}"
        )
    cfg = model.config
    if h.stages != cfg.stages:
        raise IncompatibleModelError(f"stream has {h.stages} stages, model has {cfg.stages}")
    f = cfg.total_factor
    if h.height % f or h.width % f:
        raise CorruptionError(f"image size {h.height}x{h.width} not divisible by {f}")

    def symbols(stage: int, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
        idx = sigma_to_index(sigma.ravel(), model.table)
        try:
            vals = rans_decode(b.payloads[stage], idx, len(idx), model.table, strict=not force)
        except EntropyCodingError as exc:
            raise CorruptionError(f"stage {stage + 1}: {exc}") from exc
        return np.asarray(vals, dtype=np.int64).reshape(mu.shape)

    with no_grad():
        stages = model.entropy_pass(h.lam, "decode", symbols=symbols, batch=1, spatial=(h.height // f, h.width // f))
        x_hat = model.decoder_pass([s.zhat for s in stages], [s.e for s in stages], h.lam)
    return batch_to_image(x_hat.data), stages


@dataclass
class CompatRow:
    index: int
    bpp: float
    psnr_old: float
    psnr_new: float
    latents_equal: bool
    error: Optional[str] = None

    @property
    def delta(self) -> float:
        return self.psnr_new - self.psnr_old


@dataclass
class CompatReport:
    rows: list

    def _ok(self):
        return [r for r in self.rows if r.error is None]

    @property
    def mean_old(self) -> float:
        return float(np.mean([r.psnr_old for r in self._ok()]))

    @property
    def mean_new(self) -> float:
        return float(np.mean([r.psnr_new for r in self._ok()]))

    @property
    def mean_delta(self) -> float:
        return float(np.mean([r.delta for r in self._ok()]))

    @property
    def all_latents_equal(self) -> bool:
        return all(r.latents_equal for r in self.rows)

    def to_csv(self) -> str:
        lines = ["index,bpp,psnr_old,psnr_new,delta_psnr,latents_equal,error"]
        for r in self.rows:
            lines.append(
                f"{r.index},{r.bpp:.6f},{r.psnr_old:.6f},{r.psnr_new:.6f},{r.delta:.6f},{int(r.latents_equal)},{r.error or ''}"
            )
        return "\n".join(lines) + "\n"


def compatibility_report(
    bitstreams: Sequence[EncodedImage],
    old_model: Model,
    new_model: Model,
    originals: Sequence[np.ndarray],
) -> CompatReport:
    """Decode each stream with both models and compare against the originals.

    Decode failures are recorded per item (``error`` column) and do not stop
    the batch.
    """
    from .evaluation import psnr  # evaluation imports this module

    if len(bitstreams) != len(originals):
        raise ValueError(f"{len(bitstreams)} bitstreams but {len(originals)} originals")
    rows = []
    for i, (b, x) in enumerate(zip(bitstreams, originals)):
        try:
            rec_old, lat_old = decode_image(b, old_model)
            rec_new, lat_new = decode_image(b, new_model)
        except BitstreamError as exc:
            rows.append(CompatRow(i, b.bpp, float("nan"), float("nan"), False, f"{type(exc).__name__}: {exc}"))
            continue
        equal = all(np.array_equal(p.zhat.data, q.zhat.data) for p, q in zip(lat_old, lat_new))
        rows.append(CompatRow(i, b.bpp, psnr(x, rec_old), psnr(x, rec_new), equal))
    return CompatReport(rows)
