"""End-to-end continual-compression experiments.

One scenario run, per seed:

1. pre-train on the old source with the old lambda range;
2. archive the old test set as bitstreams over an old-range lambda grid;
3. fine-tune with each strategy (and each alpha of an optional grid);
4. decode the archived bitstreams with every fine-tuned model, sweep RD
   curves on the new data / new lambda range, and compute BD-rates against
   the pre-trained model.

Every step stores its outputs (checkpoint, JSON metrics) in the run
directory and is skipped when those outputs already exist for the same
settings, so interrupted runs resume and repeated runs are cheap.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .bitstream import EncodedImage, compatibility_report, encode_image
from .codec import Model, ModelConfig
from .codec.config import dataclass_from_text, dataclass_to_text
from .data import ImageDataset, make_dataset
from .entropy import cdf_table, default_scale_table
from .evaluation import OverlapError, RDCurve, RDPoint, bd_rate, lambda_grid, plot_curves, rd_sweep
from .training import LambdaDistribution, ReplayBuffer, TrainConfig, finetune, pretrain

log = logging.getLogger(__name__)

# fixed data seeds: the training seed varies, the datasets do not
DATA_SEEDS = {("source_a", "train"): 101, ("source_a", "test"): 102, ("source_b", "train"): 201, ("source_b", "test"): 202}


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "data_incremental"
    old_source: str = "source_a"
    new_source: str = "source_b"
    old_low: float = 32.0
    old_high: float = 1024.0
    new_low: float = 32.0
    new_high: float = 1024.0
    strategies: str = "ft_enc,ft_enc_dec,kr"
    alpha: float = 0.5
    alpha_grid: str = ""  # comma-separated; when set, kr runs once per value
    seeds: str = "0,1,2"
    pretrain_iters: int = 20000
    finetune_iters: int = 5000
    n_train: int = 2048
    n_test: int = 24
    grid_size: int = 8
    arch: str = "parallel"
    batch_size: int = 32

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return dataclass_to_text(self)

    @classmethod
    def from_text(cls, text: str) -> "ScenarioConfig":
        return dataclass_from_text(cls, text)

    @property
    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    @property
    def strategy_list(self) -> list[str]:
        return [s.strip() for s in self.strategies.split(",") if s.strip()]

    @property
    def alphas(self) -> list[float]:
        if self.alpha_grid.strip():
            return [float(a) for a in self.alpha_grid.split(",") if a.strip()]
        return [self.alpha]

    @property
    def old_grid(self) -> np.ndarray:
        return lambda_grid(self.old_low, self.old_high, self.grid_size)

    @property
    def new_grid(self) -> np.ndarray:
        return lambda_grid(self.new_low, self.new_high, self.grid_size)

    def runs(self) -> list[tuple[str, float]]:
        """(strategy, alpha) pairs to fine-tune; alpha is irrelevant outside kr."""
        out = []
        for s in self.strategy_list:
            if s == "kr":
                out.extend(("kr", a) for a in self.alphas)
            else:
                out.append((s, 0.0))
        return out


SCENARIOS = {
    "data_incremental": ScenarioConfig(),
    "rate_inc_low_to_high": ScenarioConfig(name="rate_inc_low_to_high", new_source="source_a", new_low=32.0, new_high=4096.0),
    "rate_inc_high_to_low": ScenarioConfig(name="rate_inc_high_to_low", new_source="source_a", new_low=4.0, new_high=1024.0),
}


def run_label(strategy: str, alpha: float) -> str:
    return f"kr_a{alpha:g}" if strategy == "kr" else strategy


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir) -> Path:
    """MANIFEST.sha256 listing every file under ``run_dir`` (sorted, relative paths)."""
    run_dir = Path(run_dir)
    lines = []
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "MANIFEST.sha256":
            lines.append(f"{sha256_file(p)}  {p.relative_to(run_dir).as_posix()}")
    out = run_dir / "MANIFEST.sha256"
    out.write_text("\n".join(lines) + "\n")
    return out


def _dataset(source: str, split: str, n: int) -> ImageDataset:
    return make_dataset(source, DATA_SEEDS[(source, split)], n)


class _Step:
    """A cached unit of work: ``done.json`` records the key and the results."""

    def __init__(self, directory: Path, key: str):
        self.dir = directory
        self.key = key
        self.file = directory / "done.json"

    def load(self) -> Optional[dict]:
        if self.file.exists():
            data = json.loads(self.file.read_text())
            if data.get("key") == self.key:
                return data
        return None

    def save(self, payload: dict) -> dict:
        self.dir.mkdir(parents=True, exist_ok=True)
        payload = dict(payload, key=self.key)
        self.file.write_text(json.dumps(payload, indent=1, sort_keys=True))
        return payload


def _curve_json(c: RDCurve) -> list:
    return [[p.lam, p.bpp, p.psnr] for p in c.points]


def _curve_from_json(rows) -> RDCurve:
    return RDCurve([RDPoint(b, q, lam) for lam, b, q in rows])


def _safe_bd(anchor: RDCurve, test: RDCurve) -> float:
    try:
        return bd_rate(anchor, test)
    except (OverlapError, ValueError) as exc:
        log.info("BD-rate undefined: %s", exc)
        return float("nan")


def _coder_digest() -> str:
    """Digest of the fixed-point coding tables, so cached streams follow table changes."""
    return hashlib.sha256(cdf_table(default_scale_table()).tobytes()).hexdigest()


def _eval_signature(cfg: ScenarioConfig) -> str:
    """The settings an evaluation depends on (not the seed list or strategy set)."""
    return repr((cfg.old_source, cfg.new_source, cfg.old_grid.tolist(), cfg.new_grid.tolist(), cfg.n_test, _coder_digest()))


def _model_config(cfg: ScenarioConfig) -> ModelConfig:
    return ModelConfig(variant=cfg.arch, lambda_low=cfg.old_low, lambda_high=cfg.old_high)


def pretrain_step(cfg: ScenarioConfig, seed: int, root: Path, echo=print) -> tuple[Model, dict]:
    mcfg = _model_config(cfg).replace(init_seed=seed)
    tcfg = TrainConfig(strategy="pretrain", iterations=cfg.pretrain_iters, seed=seed, batch_size=cfg.batch_size,
                       lambda_low=cfg.old_low, lambda_high=cfg.old_high)
    key = _digest(mcfg.to_text() + tcfg.to_text() + f"{cfg.old_source}:{cfg.n_train}")
    d = root / "pretrain" / f"{cfg.arch}_{cfg.old_source}_seed{seed}"
    step = _Step(d, key)
    done = step.load()
    if done and (d / "final.ckpt").exists():
        return Model.load(d / "final.ckpt"), done
    echo(f"[seed {seed}] pretraining {cfg.pretrain_iters} iterations")
    data = _dataset(cfg.old_source, "train", cfg.n_train)
    res = pretrain(tcfg, data, Model(mcfg), out_dir=d, progress=_progress(echo, f"seed {seed} pretrain", cfg.pretrain_iters))
    losses = res.losses()
    start = min(100, len(losses) - 1)
    info = {
        "seconds": res.seconds,
        "loss_at_100": float(np.mean(losses[max(0, start - 10):start + 10])) if len(losses) else float("nan"),
        "loss_final": float(np.mean(losses[-20:])) if len(losses) else float("nan"),
    }
    return res.model, step.save(info)


def _progress(echo, tag, total):
    every = max(total // 10, 1)
    t0 = time.perf_counter()

    def cb(it, bd):
        if (it + 1) % every == 0:
            el = time.perf_counter() - t0
            echo(f"  [{tag}] {it + 1}/{total} loss={bd.combined:.4f} ({el / (it + 1) * 1000:.0f} ms/it)")

    return cb


def archive_step(cfg: ScenarioConfig, seed: int, model: Model, run_dir: Path, images) -> list[list[EncodedImage]]:
    """Old test set encoded by the pre-trained model: one list of streams per lambda."""
    d = run_dir / f"seed{seed}" / "archive"
    key = _digest(hashlib.sha256(model.to_bytes()).hexdigest() + repr(cfg.old_grid.tolist()) + str(len(images)) + _coder_digest())
    step = _Step(d, key)
    t0 = time.perf_counter()
    if step.load() is None:
        d.mkdir(parents=True, exist_ok=True)
        for li, lam in enumerate(cfg.old_grid):
            for i, x in enumerate(images):
                encode_image(x, lam, model).save(d / f"l{li}_img{i:03d}.ccbs")
        step.save({"seconds": time.perf_counter() - t0})
    return [[EncodedImage.load(d / f"l{li}_img{i:03d}.ccbs") for i in range(len(images))] for li in range(len(cfg.old_grid))]


def evaluate_model(model: Model, base: Model, archive, old_images, new_images, cfg: ScenarioConfig) -> dict:
    """Old-bitstream decode quality and the new-data RD curve of ``model``."""
    t0 = time.perf_counter()
    old_pts, latents_equal, delta = [], True, []
    for lam, streams in zip(cfg.old_grid, archive):
        rep = compatibility_report(streams, base, model, old_images)
        if any(r.error for r in rep.rows):
            raise RuntimeError(f"archived bitstream failed to decode: {[r.error for r in rep.rows if r.error][0]}")
        latents_equal &= rep.all_latents_equal
        old_pts.append(RDPoint(float(np.mean([r.bpp for r in rep.rows])), rep.mean_new, float(lam)))
        delta.append(rep.mean_delta)
    old_curve = RDCurve(old_pts)
    new_curve = rd_sweep(model, new_images, cfg.new_grid)
    return {
        "old_curve": _curve_json(old_curve),
        "old_psnr": float(np.mean(old_curve.psnrs)),
        "old_delta_psnr": float(np.mean(delta)),
        "latents_equal": bool(latents_equal),
        "new_curve": _curve_json(new_curve),
        "new_psnr": float(np.mean(new_curve.psnrs)),
        "eval_seconds": time.perf_counter() - t0,
    }


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    per_seed: dict  # seed -> {"pretrained": {...}, label: {...}}
    run_dir: Path

    def labels(self) -> list[str]:
        return ["pretrained"] + [run_label(s, a) for s, a in self.config.runs()]

    def mean(self, label: str, field: str) -> float:
        return float(np.mean([self.per_seed[s][label][field] for s in self.per_seed]))

    def seconds(self, labels) -> float:
        """Training plus evaluation time of the given runs, summed over seeds."""
        total = 0.0
        for s in self.per_seed:
            for lab in labels:
                r = self.per_seed[s][lab]
                total += r.get("train_seconds", 0.0) + r.get("eval_seconds", 0.0)
        return total


def run_scenario(cfg: ScenarioConfig, run_dir, cache_dir=None, echo: Callable[[str], None] = print) -> ScenarioResult:
    """Run (or resume) a scenario; see the module docstring for the steps."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cache = Path(cache_dir) if cache_dir is not None else run_dir
    (run_dir / "scenario.cfg").write_text(cfg.to_text())

    old_test = _dataset(cfg.old_source, "test", cfg.n_test).test_images()
    new_test = _dataset(cfg.new_source, "test", cfg.n_test).test_images()
    per_seed = {}
    for seed in cfg.seed_list:
        base, pre_info = pretrain_step(cfg, seed, cache, echo)
        archive = archive_step(cfg, seed, base, run_dir, old_test)
        results = {}

        def evaluated(label, model, train_seconds, extra_key=""):
            d = run_dir / f"seed{seed}" / label
            key = _digest(hashlib.sha256(model.to_bytes()).hexdigest() + _eval_signature(cfg) + extra_key)
            step = _Step(d / "eval", key)
            got = step.load()
            if got is None:
                echo(f"[seed {seed}] evaluating {label}")
                got = step.save(evaluate_model(model, base, archive, old_test, new_test, cfg))
            got = dict(got, train_seconds=train_seconds)
            return got

        results["pretrained"] = evaluated("pretrained", base, pre_info["seconds"])
        results["pretrained"]["pretrain_loss_at_100"] = pre_info["loss_at_100"]
        results["pretrained"]["pretrain_loss_final"] = pre_info["loss_final"]
        anchor_new = _curve_from_json(results["pretrained"]["new_curve"])
        anchor_old = _curve_from_json(results["pretrained"]["old_curve"])

        for strategy, alpha in cfg.runs():
            label = run_label(strategy, alpha)
            d = run_dir / f"seed{seed}" / label
            tcfg = TrainConfig(strategy=strategy, iterations=cfg.finetune_iters, seed=seed, alpha=alpha,
                               batch_size=cfg.batch_size, lambda_low=cfg.new_low, lambda_high=cfg.new_high)
            key = _digest(hashlib.sha256(base.to_bytes()).hexdigest() + tcfg.to_text() + f"{cfg.new_source}:{cfg.old_source}:{cfg.n_train}")
            step = _Step(d / "train", key)
            info = step.load()
            if info is None or not (d / "train" / "final.ckpt").exists():
                echo(f"[seed {seed}] fine-tuning {label} for {cfg.finetune_iters} iterations")
                new_train = _dataset(cfg.new_source, "train", cfg.n_train)
                replay = None
                if strategy == "kr":
                    replay = ReplayBuffer(_dataset(cfg.old_source, "train", cfg.n_train), base,
                                          LambdaDistribution(cfg.old_low, cfg.old_high))
                res = finetune(tcfg, new_train, replay, base, out_dir=d / "train",
                               progress=_progress(echo, f"seed {seed} {label}", cfg.finetune_iters))
                info = step.save({"seconds": res.seconds})
                model = res.model
            else:
                model = Model.load(d / "train" / "final.ckpt")
            r = evaluated(label, model, info["seconds"])
            r["new_bd_rate"] = _safe_bd(anchor_new, _curve_from_json(r["new_curve"]))
            r["old_bd_rate"] = _safe_bd(anchor_old, _curve_from_json(r["old_curve"]))
            results[label] = r
        results["pretrained"]["new_bd_rate"] = 0.0
        results["pretrained"]["old_bd_rate"] = 0.0
        per_seed[seed] = results

    result = ScenarioResult(cfg, per_seed, run_dir)
    write_summary(result)
    write_manifest(run_dir)
    return result


def write_summary(result: ScenarioResult) -> None:
    """summary.csv (seed-averaged, one row per model) and summary.svg (new-data RD curves of the first seed)."""
    cfg = result.config
    cols = ["model", "old_psnr", "old_delta_psnr", "old_bd_rate", "new_psnr", "new_delta_psnr", "new_bd_rate", "avg_bd_rate",
            "latents_equal"]
    lines = [",".join(cols)]
    base_new = result.mean("pretrained", "new_psnr")
    for label in result.labels():
        old_bd = result.mean(label, "old_bd_rate")
        new_bd = result.mean(label, "new_bd_rate")
        eq = all(result.per_seed[s][label]["latents_equal"] for s in result.per_seed)
        row = [
            label,
            f"{result.mean(label, 'old_psnr'):.4f}",
            f"{result.mean(label, 'old_delta_psnr'):.4f}",
            f"{old_bd:.4f}",
            f"{result.mean(label, 'new_psnr'):.4f}",
            f"{result.mean(label, 'new_psnr') - base_new:.4f}",
            f"{new_bd:.4f}",
            f"{0.5 * (old_bd + new_bd):.4f}" if math.isfinite(old_bd) and math.isfinite(new_bd) else "nan",
            str(int(eq)),
        ]
        lines.append(",".join(row))
    (result.run_dir / "summary.csv").write_text("\n".join(lines) + "\n")
    first = sorted(result.per_seed)[0]
    curves = [(lab, _curve_from_json(result.per_seed[first][lab]["new_curve"])) for lab in result.labels()]
    plot_curves(curves, result.run_dir / "summary.svg", title=f"{cfg.name}: new data (seed {first})")
