"""Rate-distortion pre-training and the fine-tuning strategies.

Strategies and the parameter groups they update:

=============  ==================  ==========================================
strategy       trainable groups    loss
=============  ==================  ==========================================
pretrain       enc, dec, pz        rate + lambda * MSE on the training data
ft_enc         enc                 same loss on the new data
ft_enc_dec     enc, dec            same loss on the new data
kr             enc, dec            (1 - alpha) * new loss + alpha * replay loss
=============  ==================  ==========================================

The replay loss decodes latents produced by the frozen *old* encoder on old
data with the current decoder and scores only distortion.  The entropy model
is never updated after pre-training, so every archived bitstream keeps its
exact symbol probabilities.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from .codec.config import dataclass_from_text, dataclass_to_text
from .codec.model import Model, image_to_batch, model_fingerprint
from .data import ImageDataset, stream
from .numerics import ContractError, OptimizerState, Tensor, adam_step, no_grad, ops

log = logging.getLogger(__name__)

STRATEGIES = ("pretrain", "ft_enc", "ft_enc_dec", "kr")
TRAINABLE = {
    "pretrain": ("enc", "dec", "pz"),
    "ft_enc": ("enc",),
    "ft_enc_dec": ("enc", "dec"),
    "kr": ("enc", "dec"),
}
DEFAULT_LR = {"pretrain": 2e-4, "ft_enc": 1e-4, "ft_enc_dec": 1e-4, "kr": 1e-4}
LOG_COLUMNS = ("iter", "lambda_mean", "R_bits", "D", "loss_new", "loss_kr", "combined")

# generator stream tags (see data.stream)
_S_LAMBDA, _S_NOISE, _S_AUG, _S_REPLAY_LAMBDA, _S_REPLAY_AUG, _S_REPLAY_NOISE = range(10, 16)


class TrainingDiverged(RuntimeError):
    """Raised when a loss term stops being finite."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class LambdaDistribution:
    """Log-uniform distribution on [low, high]."""

    low: float = 32.0
    high: float = 1024.0

    def __post_init__(self):
        if not (math.isfinite(self.low) and math.isfinite(self.high)) or not 0 < self.low <= self.high:
            raise ValueError(f"need 0 < low <= high, got [{self.low}, {self.high}]")

    def sample(self, rng: np.random.Generator, size: Optional[int] = None):
        lo, hi = math.log(self.low), math.log(self.high)
        u = rng.uniform(lo, hi, size=size)
        # exp(log(x)) can land one ulp outside the bounds
        return np.clip(np.exp(u), self.low, self.high) if size is not None else min(max(math.exp(u), self.low), self.high)


def sample_lambda(dist: LambdaDistribution, rng: np.random.Generator, size: Optional[int] = None):
    return dist.sample(rng, size)


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "pretrain"
    iterations: int = 20000
    batch_size: int = 32
    lr: float = 0.0  # 0 selects the strategy default
    alpha: float = 0.5
    clip_norm: float = 2.0
    seed: int = 0
    lambda_low: float = 32.0
    lambda_high: float = 1024.0
    constant_fraction: float = 0.5  # pretrain: share of iterations at constant lr before the cosine
    ema_decay: float = 0.0  # 0 disables; pretrain only
    kr_mode: str = "two_batch"  # or "split": one batch divided alpha-proportionally
    replay_quant: str = "round"  # quantization of the old encoder's latents: round | noise

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.kr_mode not in ("two_batch", "split"):
            raise ValueError(f"unknown kr_mode {self.kr_mode!r}")
        if self.replay_quant not in ("round", "noise"):
            raise ValueError(f"unknown replay_quant {self.replay_quant!r}")
        if self.ema_decay and (self.strategy != "pretrain" or not 0 < self.ema_decay < 1):
            raise ValueError("ema_decay must be in (0, 1) and is only used for pretraining")
        if not 0.0 <= self.constant_fraction <= 1.0:
            raise ValueError("constant_fraction must lie in [0, 1]")
        LambdaDistribution(self.lambda_low, self.lambda_high)

    @property
    def learning_rate(self) -> float:
        return self.lr or DEFAULT_LR[self.strategy]

    @property
    def lambdas(self) -> LambdaDistribution:
        return LambdaDistribution(self.lambda_low, self.lambda_high)

    def replace(self, **kw) -> "TrainConfig":
        import dataclasses

        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return dataclass_to_text(self)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return dataclass_from_text(cls, text)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for 0-based ``step``.

    Pre-training holds the base rate for ``constant_fraction`` of the run and
    then follows a half cosine to zero; fine-tuning is a cosine throughout.
    """
    base = cfg.learning_rate
    n = max(cfg.iterations, 1)
    start = int(round(cfg.constant_fraction * n)) if cfg.strategy == "pretrain" else 0
    if step < start:
        return base
    span = max(n - start, 1)
    p = min((step - start) / span, 1.0)
    return base * 0.5 * (1.0 + math.cos(math.pi * p))


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossBreakdown:
    rate_bits: list  # mean bits per image, per stage
    distortion: float  # mean MSE
    lam_mean: float
    loss_new: float = float("nan")
    loss_kr: float = float("nan")
    combined: float = float("nan")
    pixels: int = 0

    @property
    def total_bits(self) -> float:
        return float(sum(self.rate_bits))

    @property
    def bpp(self) -> float:
        return self.total_bits / self.pixels if self.pixels else float("nan")


def _as_batch(batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected (B, H, W, 3) images, got {x.shape}")
    return image_to_batch(x)


def _mse_per_item(x_hat: Tensor, x: np.ndarray) -> Tensor:
    return ops.mean(ops.square(ops.sub(x_hat, Tensor(x.astype(x_hat.dtype)))), axis=(1, 2, 3))


def _check_finite(value: float, term: str) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite {term}: {value}")


def rd_loss(batch, lambdas, model: Model, rng: np.random.Generator) -> tuple[Tensor, LossBreakdown]:
    """mean_b [ bits_b / (H W) + lambda_b * MSE_b ] with additive-noise quantization.

    The rate is the continuous discretized-Gaussian code length summed over
    stages, expressed per pixel so that lambda weighs MSE against bpp.
    """
    x = _as_batch(batch)
    B, _, H, W = x.shape
    lam = np.broadcast_to(np.asarray(lambdas, dtype=np.float64), (B,))
    res = model.forward(x, lam, quant="noise", rng=rng)
    stage_bits = [ops.sum(ops.gaussian_bits(s.zhat, s.mu, s.sigma), axis=(1, 2, 3)) for s in res.stages]
    bits = stage_bits[0]
    for sb in stage_bits[1:]:
        bits = ops.add(bits, sb)
    mse = _mse_per_item(res.x_hat, x)
    lam_t = Tensor(lam.astype(mse.dtype))
    loss = ops.mean(ops.add(ops.mul(bits, 1.0 / (H * W)), ops.mul(mse, lam_t)))
    value = float(loss.data)
    bd = LossBreakdown(
        rate_bits=[float(sb.data.mean()) for sb in stage_bits],
        distortion=float(mse.data.mean()),
        lam_mean=float(lam.mean()),
        loss_new=value,
        combined=value,
        pixels=H * W,
    )
    for i, r in enumerate(bd.rate_bits):
        _check_finite(r, f"rate (stage {i + 1})")
    _check_finite(bd.distortion, "distortion")
    return loss, bd


def loss_new(batch, model: Model, dist: LambdaDistribution, rng_lambda: np.random.Generator, rng_noise: np.random.Generator):
    """Standard RD loss on new data with lambdas drawn from ``dist``."""
    lam = dist.sample(rng_lambda, len(batch))
    return rd_loss(batch, lam, model, rng_noise)


@dataclass
class ReplayBuffer:
    """Old training data, a frozen snapshot of the old model, and the old lambda distribution."""

    dataset: ImageDataset
    old_model: Model
    dist: LambdaDistribution = field(default_factory=LambdaDistribution)

    def __post_init__(self):
        # private copy: the caller's model may be trained further
        self.old_model = self.old_model.copy()
        self.old_model.set_trainable(())

    def old_latents(self, x: np.ndarray, lam: np.ndarray, quant: str = "round", rng=None):
        """zhat_i and e_i from the old encoder and entropy branch, without gradients."""
        with no_grad():
            feats = self.old_model.encode_features(x, lam)
            stages = self.old_model.entropy_pass(lam, "encode", features=feats, quant=quant, rng=rng)
        return [Tensor(s.zhat.data) for s in stages], [Tensor(s.e.data) for s in stages]


def loss_kr(batch, replay: Optional[ReplayBuffer], model: Model, rng_lambda: np.random.Generator,
            quant: str = "round", rng_noise: Optional[np.random.Generator] = None) -> tuple[Tensor, LossBreakdown]:
    """mean_b lambda_b * MSE(x_b, dec_current(enc_old(x_b))); no rate term."""
    if replay is None:
        raise ContractError("knowledge replay needs a replay buffer")
    x = _as_batch(batch)
    B, _, H, W = x.shape
    lam = replay.dist.sample(rng_lambda, B)
    zhats, es = replay.old_latents(x, lam, quant=quant, rng=rng_noise)
    x_hat = model.decoder_pass(zhats, es, lam)
    mse = _mse_per_item(x_hat, x)
    loss = ops.mean(ops.mul(mse, Tensor(lam.astype(mse.dtype))))
    value = float(loss.data)
    _check_finite(value, "replay loss")
    bd = LossBreakdown(rate_bits=[], distortion=float(mse.data.mean()), lam_mean=float(lam.mean()),
                       loss_kr=value, combined=value, pixels=H * W)
    return loss, bd


def combined_loss(l_new, l_kr, alpha: float):
    """(1 - alpha) * l_new + alpha * l_kr for floats or tensors."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if isinstance(l_new, Tensor) or isinstance(l_kr, Tensor):
        return ops.add(ops.mul(l_new, 1.0 - alpha), ops.mul(l_kr, alpha))
    return (1.0 - alpha) * l_new + alpha * l_kr


# ---------------------------------------------------------------------------
# loops


@dataclass
class TrainResult:
    model: Model
    rows: list  # one tuple per iteration, see LOG_COLUMNS
    seconds: float
    ema_model: Optional[Model] = None

    def losses(self) -> np.ndarray:
        return np.array([r[LOG_COLUMNS.index("combined")] for r in self.rows])

    def write_csv(self, path) -> None:
        write_log(path, self.rows)


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r[0]] + [f"{v:.9g}" for v in r[1:]])


def _fill_missing_grads(model: Model) -> None:
    # a term with weight zero is skipped; its parameters still take an (empty) Adam step
    for p in model.params.values():
        if p.trainable and p.grad is None:
            p.grad = np.zeros_like(p.data)


def train(model: Model, cfg: TrainConfig, data: ImageDataset, replay: Optional[ReplayBuffer] = None,
          out_dir=None, progress: Optional[Callable[[int, LossBreakdown], None]] = None) -> TrainResult:
    """Run ``cfg.iterations`` optimizer steps on ``model`` in place.

    ``out_dir`` (optional) receives ``train_log.csv``, ``final.ckpt`` and, when
    EMA is on, ``ema.ckpt``.  On divergence the last good parameters are
    written to ``last_good.ckpt`` before :class:`TrainingDiverged` propagates.
    """
    if cfg.strategy == "kr" and replay is None:
        raise ContractError("strategy 'kr' requires a replay buffer")
    model.set_trainable(TRAINABLE[cfg.strategy])
    params = model.parameters()
    opt = OptimizerState(lr=cfg.learning_rate, clip_norm=cfg.clip_norm)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rng_lam = stream(cfg.seed, _S_LAMBDA)
    rng_noise = stream(cfg.seed, _S_NOISE)
    rng_rlam = stream(cfg.seed, _S_REPLAY_LAMBDA)
    rng_rnoise = stream(cfg.seed, _S_REPLAY_NOISE)

    alpha = cfg.alpha if cfg.strategy == "kr" else 0.0
    B = cfg.batch_size
    if cfg.strategy == "kr" and cfg.kr_mode == "split":
        n_rep = int(round(alpha * B))
        n_new = B - n_rep
        w_new, w_kr = n_new / B, n_rep / B
    else:
        n_new, n_rep = B, (B if alpha > 0 else 0)
        w_new, w_kr = 1.0 - alpha, alpha
    new_batches: Iterator[np.ndarray] = data.batches(n_new, stream(cfg.seed, _S_AUG).integers(2**63)) if n_new else iter(())
    rep_batches: Iterator[np.ndarray] = (
        replay.dataset.batches(n_rep, stream(cfg.seed, _S_REPLAY_AUG).integers(2**63)) if n_rep else iter(())
    )

    ema = None
    if cfg.ema_decay:
        ema = {name: p.data.astype(np.float64) for name, p in model.params.items()}

    rows = []
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        opt.lr = lr_at(cfg, it)
        model.zero_grad()
        total = None
        bd_new = bd_kr = None
        try:
            if n_new and w_new > 0:
                l_n, bd_new = loss_new(next(new_batches), model, cfg.lambdas, rng_lam, rng_noise)
                total = ops.mul(l_n, w_new) if w_new != 1.0 else l_n
            if n_rep and w_kr > 0:
                l_k, bd_kr = loss_kr(next(rep_batches), replay, model, rng_rlam, cfg.replay_quant, rng_rnoise)
                term = ops.mul(l_k, w_kr)
                total = term if total is None else ops.add(total, term)
            value = float(total.data)
            _check_finite(value, "combined loss")
        except TrainingDiverged as exc:
            if out is not None:
                model.save(out / "last_good.ckpt")
                write_log(out / "train_log.csv", rows)
            raise TrainingDiverged(f"iteration {it}: {exc}") from exc
        total.backward()
        _fill_missing_grads(model)
        adam_step(params, opt)
        if ema is not None:
            d = cfg.ema_decay
            for name, p in model.params.items():
                ema[name] *= d
                ema[name] += (1.0 - d) * p.data

        ref = bd_new or bd_kr
        row = (
            it,
            ref.lam_mean,
            bd_new.total_bits if bd_new else float("nan"),
            ref.distortion,
            bd_new.loss_new if bd_new else float("nan"),
            bd_kr.loss_kr if bd_kr else float("nan"),
            value,
        )
        rows.append(row)
        if progress is not None:
            progress(it, LossBreakdown(ref.rate_bits, ref.distortion, ref.lam_mean, row[4], row[5], value, ref.pixels))
    seconds = time.perf_counter() - t0
    model.zero_grad()

    ema_model = None
    if ema is not None:
        ema_model = model.copy()
        for name, p in ema_model.params.items():
            p.data = ema[name].astype(np.float32)
    if out is not None:
        model.save(out / "final.ckpt")
        write_log(out / "train_log.csv", rows)
        if ema_model is not None:
            ema_model.save(out / "ema.ckpt")
    return TrainResult(model, rows, seconds, ema_model)


def pretrain(cfg: TrainConfig, dataset: ImageDataset, model: Model, out_dir=None, progress=None) -> TrainResult:
    """Train all three groups from scratch."""
    if cfg.strategy != "pretrain":
        raise ValueError(f"pretrain() needs strategy 'pretrain', got {cfg.strategy!r}")
    return train(model, cfg, dataset, out_dir=out_dir, progress=progress)


def finetune(cfg: TrainConfig, new_dataset: ImageDataset, replay: Optional[ReplayBuffer], base: Model,
             out_dir=None, progress=None) -> TrainResult:
    """Fine-tune a copy of ``base``; the entropy model stays byte-identical."""
    if cfg.strategy == "pretrain":
        raise ValueError("finetune() does not accept strategy 'pretrain'")
    model = base.copy()
    before = model_fingerprint(model)
    result = train(model, cfg, new_dataset, replay=replay, out_dir=out_dir, progress=progress)
    if model_fingerprint(model) != before:  # pragma: no cover - guarded by the trainable mask
        raise ContractError("entropy-model parameters changed during fine-tuning")
    return result
