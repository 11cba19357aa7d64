"""PSNR, bpp, rate-distortion sweeps and the Bjontegaard delta rate."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import PchipInterpolator

from .bitstream import EncodedImage, decode_image, encode_image
from .numerics import DimensionError

PSNR_CAP = 99.0
SIMPSON_INTERVALS = 1000
MIN_OVERLAP_DB = 0.5


class OverlapError(ValueError):
    """Two RD curves do not share enough PSNR range for a BD-rate."""


def psnr(a, b) -> float:
    """10 log10(1 / MSE) over all samples, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def bpp(b: EncodedImage) -> float:
    """8 x container bytes (header and CRC included) / pixels."""
    return b.bpp


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float
    lam: float


@dataclass
class RDCurve:
    points: list
    dataset: str = ""
    checkpoint: str = ""

    def __post_init__(self):
        for p in self.points:
            if not p.bpp > 0:
                raise ValueError(f"non-positive bpp {p.bpp} at lambda {p.lam}")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points])

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([p.lam for p in self.points])

    def scaled(self, factor: float) -> "RDCurve":
        pts = [RDPoint(p.bpp * factor, p.psnr, p.lam) for p in self.points]
        return RDCurve(pts, self.dataset, self.checkpoint)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "bpp", "psnr"])
        for p in self.points:
            w.writerow([repr(float(p.lam)), repr(float(p.bpp)), repr(float(p.psnr))])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, dataset: str = "", checkpoint: str = "") -> "RDCurve":
        rows = list(csv.DictReader(io.StringIO(text)))
        missing = {"lambda", "bpp", "psnr"} - set(rows[0].keys() if rows else ())
        if missing:
            raise ValueError(f"RD csv lacks columns {sorted(missing)}")
        pts = [RDPoint(float(r["bpp"]), float(r["psnr"]), float(r["lambda"])) for r in rows]
        return cls(pts, dataset, checkpoint)

    @classmethod
    def load_csv(cls, path) -> "RDCurve":
        return cls.from_csv(Path(path).read_text(), checkpoint=str(path))


def _log_rate_fit(curve: RDCurve):
    if len(curve) < 4:
        raise ValueError(f"BD-rate needs at least 4 points per curve, got {len(curve)}")
    order = np.argsort(curve.psnrs, kind="stable")
    q = curve.psnrs[order]
    r = np.log10(curve.rates[order])
    if np.any(np.diff(q) <= 0):
        raise ValueError("PSNR values of an RD curve must be distinct for interpolation")
    if np.any(np.diff(r) <= 0):
        raise ValueError("rate must increase with PSNR along an RD curve")
    return PchipInterpolator(q, r, extrapolate=False), q[0], q[-1]


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average rate difference (percent) of ``test`` against ``anchor`` at equal PSNR.

    log10(rate) is interpolated as a shape-preserving piecewise cubic of PSNR
    and the gap is averaged over the common PSNR interval with composite
    Simpson on 1000 subintervals.
    """
    fa, lo_a, hi_a = _log_rate_fit(anchor)
    ft, lo_t, hi_t = _log_rate_fit(test)
    lo, hi = max(lo_a, lo_t), min(hi_a, hi_t)
    if hi - lo < MIN_OVERLAP_DB:
        raise OverlapError(
            f"PSNR ranges [{lo_a:.3f}, {hi_a:.3f}] and [{lo_t:.3f}, {hi_t:.3f}] overlap by less than {MIN_OVERLAP_DB} dB"
        )
    q = np.linspace(lo, hi, SIMPSON_INTERVALS + 1)
    diff = ft(q) - fa(q)
    mean_diff = simpson(diff, x=q) / (hi - lo)
    return 100.0 * (10.0 ** mean_diff - 1.0)


def lambda_grid(low: float, high: float, count: int = 8) -> np.ndarray:
    """``count`` log-spaced values from ``low`` to ``high`` inclusive."""
    if count < 1 or not 0 < low <= high:
        raise ValueError("need count >= 1 and 0 < low <= high")
    if count == 1:
        return np.array([low], dtype=np.float64)
    return np.exp(np.linspace(math.log(low), math.log(high), count))


@dataclass
class SweepDetail:
    """Per-image numbers behind one RD point."""

    lam: float
    bpp: list = field(default_factory=list)
    psnr: list = field(default_factory=list)


def rd_sweep(model, images: Sequence[np.ndarray], lambdas: Iterable[float], dataset: str = "", checkpoint: str = "",
             details: Optional[list] = None, verify_decode: bool = False) -> RDCurve:
    """Encode every image at every lambda; average container bpp and PSNR per lambda.

    The reconstruction is produced by decoding the actual container, so the
    reported PSNR is what a receiver gets.  ``verify_decode`` additionally
    round-trips the container through its byte form.
    """
    pts = []
    for lam in lambdas:
        d = SweepDetail(float(lam))
        for x in images:
            b = encode_image(x, lam, model)
            if verify_decode:
                b = EncodedImage.from_bytes(b.to_bytes())
            rec, _ = decode_image(b, model)
            d.bpp.append(b.bpp)
            d.psnr.append(psnr(x, rec))
        pts.append(RDPoint(float(np.mean(d.bpp)), float(np.mean(d.psnr)), float(lam)))
        if details is not None:
            details.append(d)
    return RDCurve(pts, dataset, checkpoint)


def plot_curves(curves: Sequence[tuple[str, RDCurve]], path, title: str = "") -> None:
    """Write an SVG line plot (x: bpp, y: PSNR) of the exact points given."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "replaycodec", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        for label, c in curves:
            order = np.argsort(c.rates, kind="stable")
            ax.plot(c.rates[order], c.psnrs[order], marker="o", label=label)
        ax.set_xlabel("bpp")
        ax.set_ylabel("PSNR (dB)")
        if title:
            ax.set_title(title)
        ax.grid(True, alpha=0.3)
        if len(curves) > 1 or curves and curves[0][0]:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
