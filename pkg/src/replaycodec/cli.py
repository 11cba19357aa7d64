"""Command-line interface: ``replaycodec <command> [options]``.

Commands
--------
gen-data      write a dataset manifest (and optionally PPM canvases)
pretrain      train a fresh model
finetune      fine-tune a checkpoint with ft_enc / ft_enc_dec / kr
encode        image (.ppm) -> bitstream (.ccbs)
decode        bitstream -> image; ``--force-decode`` skips the entropy-model check
eval-rd       RD sweep of a checkpoint -> CSV + SVG
bd-rate       BD-rate between two RD CSV files
check-compat  decode archived bitstreams with an old and a new checkpoint
scenario      full protocol: data -> pretrain -> archive -> fine-tune -> reports

Exit status is 0 on success, 2 for usage errors and 1 for failures; the
failing stage is named on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("replaycodec")


def _range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'low,high', got {text!r}") from None
    if not 0 < lo <= hi:
        raise argparse.ArgumentTypeError(f"need 0 < low <= high, got {text!r}")
    return lo, hi


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _load_dataset(path):
    from .data import read_manifest

    return read_manifest(path)


def _model_config(args):
    from .codec import ModelConfig

    if getattr(args, "model_config", None):
        cfg = ModelConfig.from_text(Path(args.model_config).read_text())
    else:
        cfg = ModelConfig()
    if getattr(args, "arch", None):
        cfg = cfg.replace(variant=args.arch)
    return cfg


def _train_config(args, strategy: str):
    from .training import TrainConfig

    cfg = TrainConfig.from_text(Path(args.config).read_text()) if args.config else TrainConfig()
    kw = {"strategy": strategy}
    for name in ("iterations", "seed", "alpha", "batch_size", "lr", "ema_decay", "kr_mode", "replay_quant"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    if getattr(args, "lambda_range", None):
        kw["lambda_low"], kw["lambda_high"] = args.lambda_range
    return cfg.replace(**kw)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .data import make_dataset, save_ppm, write_manifest

    ds = make_dataset(args.kind, args.seed, args.count)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(ds, out)
    if args.ppm_dir:
        d = Path(args.ppm_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(ds.test_images() if args.crop else ds.canvases):
            save_ppm(d / f"{args.kind}_{i:05d}.ppm", img)
    print(f"wrote {out} ({ds.count} images of {args.kind}, seed {ds.seed})")
    return 0


def _progress(every):
    def cb(it, bd):
        if every and (it + 1) % every == 0:
            print(f"iter {it + 1}: loss {bd.combined:.5f}  bpp {bd.bpp:.4f}  mse {bd.distortion:.6f}", flush=True)

    return cb


def cmd_pretrain(args) -> int:
    from .codec import Model
    from .training import pretrain

    cfg = _train_config(args, "pretrain")
    data = _load_dataset(args.data)
    model = Model(_model_config(args).replace(lambda_low=cfg.lambda_low, lambda_high=cfg.lambda_high, init_seed=cfg.seed))
    res = pretrain(cfg, data, model, out_dir=args.out_dir, progress=_progress(args.print_every))
    (Path(args.out_dir) / "train.cfg").write_text(cfg.to_text())
    print(f"pretrained {cfg.iterations} iterations in {res.seconds:.1f} s -> {Path(args.out_dir) / 'final.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    from .codec import Model
    from .training import LambdaDistribution, ReplayBuffer, finetune

    cfg = _train_config(args, args.strategy)
    base = Model.load(args.base)
    data = _load_dataset(args.data)
    replay = None
    if args.strategy == "kr":
        if not args.replay_data:
            raise SystemExit("finetune: strategy kr needs --replay-data")
        old = args.old_lambda_range or (base.config.lambda_low, base.config.lambda_high)
        replay = ReplayBuffer(_load_dataset(args.replay_data), base, LambdaDistribution(*old))
    res = finetune(cfg, data, replay, base, out_dir=args.out_dir, progress=_progress(args.print_every))
    (Path(args.out_dir) / "train.cfg").write_text(cfg.to_text())
    print(f"fine-tuned ({args.strategy}) {cfg.iterations} iterations in {res.seconds:.1f} s -> {Path(args.out_dir) / 'final.ckpt'}")
    return 0


def cmd_encode(args) -> int:
    from .bitstream import encode_image
    from .codec import Model
    from .data import load_ppm

    model = Model.load(args.ckpt)
    b = encode_image(load_ppm(args.input), args.lam, model)
    b.save(args.out)
    print(f"{args.out}: {b.nbytes} bytes, {b.bpp:.4f} bpp")
    return 0


def cmd_decode(args) -> int:
    from .bitstream import EncodedImage, decode_image
    from .codec import Model
    from .data import save_ppm

    model = Model.load(args.ckpt)
    rec, _ = decode_image(EncodedImage.load(args.input), model, force=args.force_decode)
    save_ppm(args.out, rec)
    print(f"wrote {args.out}" + (" (forced: entropy-model check skipped)" if args.force_decode else ""))
    return 0


def cmd_eval_rd(args) -> int:
    from .codec import Model
    from .evaluation import lambda_grid, plot_curves, rd_sweep

    model = Model.load(args.ckpt)
    data = _load_dataset(args.data)
    images = data.test_images()
    if args.count:
        images = images[: args.count]
    lams = args.lambdas or lambda_grid(*(args.lambda_range or (model.config.lambda_low, model.config.lambda_high)), args.grid)
    curve = rd_sweep(model, images, lams, dataset=str(args.data), checkpoint=str(args.ckpt))
    curve.save_csv(args.csv)
    if args.svg:
        plot_curves([(Path(args.ckpt).stem, curve)], args.svg)
    for p in curve.points:
        print(f"lambda {p.lam:10.3f}  bpp {p.bpp:.4f}  psnr {p.psnr:.3f}")
    return 0


def cmd_bd_rate(args) -> int:
    from .evaluation import RDCurve, bd_rate

    value = bd_rate(RDCurve.load_csv(args.anchor), RDCurve.load_csv(args.test))
    print(f"{value:.4f}")
    return 0


def cmd_check_compat(args) -> int:
    from .bitstream import EncodedImage, compatibility_report
    from .codec import Model
    from .data import load_ppm

    streams = [EncodedImage.load(p) for p in args.bitstreams]
    if len(args.originals) != len(streams):
        raise SystemExit(f"check-compat: {len(streams)} bitstreams but {len(args.originals)} originals")
    originals = [load_ppm(p) for p in args.originals]
    rep = compatibility_report(streams, Model.load(args.old), Model.load(args.new), originals)
    text = rep.to_csv()
    if args.csv:
        Path(args.csv).write_text(text)
    sys.stdout.write(text)
    print(f"# mean psnr old {rep.mean_old:.4f}  new {rep.mean_new:.4f}  delta {rep.mean_delta:.4f}  latents_equal {rep.all_latents_equal}")
    return 0


def cmd_scenario(args) -> int:
    from .scenario import SCENARIOS, run_scenario

    cfg = SCENARIOS[args.name]
    kw = {}
    if args.seeds is not None:
        kw["seeds"] = ",".join(str(s) for s in range(args.seeds))
    if args.alpha_grid:
        kw["alpha_grid"] = ",".join(f"{a:g}" for a in args.alpha_grid)
    for name in ("arch", "alpha", "strategies", "pretrain_iters", "finetune_iters", "n_train", "n_test", "grid_size"):
        v = getattr(args, name)
        if v is not None:
            kw[name] = v
    cfg = cfg.replace(**kw)
    res = run_scenario(cfg, args.run_dir, cache_dir=args.cache_dir, echo=lambda s: print(s, flush=True))
    sys.stdout.write((res.run_dir / "summary.csv").read_text())
    return 0


def _write_run_manifest(args) -> None:
    d = getattr(args, "out_dir", None)
    if d and Path(d).is_dir():
        from .scenario import write_manifest

        write_manifest(d)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replaycodec", description="Backward-compatible learned image compression toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset manifest")
    p.add_argument("--kind", choices=("source_a", "source_b"), default="source_a")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=2048)
    p.add_argument("--out", required=True, help="manifest path")
    p.add_argument("--ppm-dir", help="also write images as PPM files here")
    p.add_argument("--crop", action="store_true", help="write 32x32 evaluation crops instead of canvases")
    p.set_defaults(func=cmd_gen_data, stage="gen-data")

    def train_opts(p):
        p.add_argument("--data", required=True, help="dataset manifest")
        p.add_argument("--out-dir", required=True)
        p.add_argument("--config", help="training key = value file")
        p.add_argument("--iterations", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--lambda-range", type=_range, help="low,high (default 32,1024)")
        p.add_argument("--print-every", type=int, default=100)

    p = sub.add_parser("pretrain", help="train a model from scratch")
    train_opts(p)
    p.add_argument("--model-config", help="model key = value file")
    p.add_argument("--arch", choices=("parallel", "sequential"))
    p.add_argument("--ema-decay", type=float)
    p.set_defaults(func=cmd_pretrain, stage="pretrain")

    p = sub.add_parser("finetune", help="fine-tune a checkpoint with the entropy model frozen")
    train_opts(p)
    p.add_argument("--base", required=True, help="pre-trained checkpoint")
    p.add_argument("--strategy", choices=("ft_enc", "ft_enc_dec", "kr"), default="kr")
    p.add_argument("--alpha", type=float)
    p.add_argument("--replay-data", help="old training data manifest (kr)")
    p.add_argument("--old-lambda-range", type=_range, help="replay lambda range (default: base model's)")
    p.add_argument("--kr-mode", choices=("two_batch", "split"))
    p.add_argument("--replay-quant", choices=("round", "noise"))
    p.set_defaults(func=cmd_finetune, stage="finetune")

    p = sub.add_parser("encode", help="compress a PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode, stage="encode")

    p = sub.add_parser("decode", help="decompress a .ccbs bitstream")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force-decode", action="store_true", help="decode even if the entropy model does not match")
    p.set_defaults(func=cmd_decode, stage="decode")

    p = sub.add_parser("eval-rd", help="rate-distortion sweep")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset manifest (evaluation crops are used)")
    p.add_argument("--count", type=int, default=0, help="use only the first N images")
    p.add_argument("--lambdas", type=_floats)
    p.add_argument("--lambda-range", type=_range)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--csv", required=True)
    p.add_argument("--svg")
    p.set_defaults(func=cmd_eval_rd, stage="eval-rd")

    p = sub.add_parser("bd-rate", help="BD-rate (percent) of --test against --anchor")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_bd_rate, stage="bd-rate")

    p = sub.add_parser("check-compat", help="decode bitstreams with old and new checkpoints")
    p.add_argument("--old", required=True)
    p.add_argument("--new", required=True)
    p.add_argument("--bitstreams", nargs="+", required=True)
    p.add_argument("--originals", nargs="+", required=True, help="PPM originals, same order as --bitstreams")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_check_compat, stage="check-compat")

    p = sub.add_parser("scenario", help="run a complete continual-compression scenario")
    p.add_argument("name", choices=("data_incremental", "rate_inc_low_to_high", "rate_inc_high_to_low"))
    p.add_argument("--run-dir", required=True)
    p.add_argument("--cache-dir", help="share pre-trained checkpoints between runs")
    p.add_argument("--seeds", type=int, help="number of seeds (0..n-1)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--alpha-grid", type=_floats, help="e.g. 0,0.25,0.5,0.75,1.0")
    p.add_argument("--arch", choices=("parallel", "sequential"))
    p.add_argument("--strategies", help="comma-separated subset of ft_enc,ft_enc_dec,kr")
    p.add_argument("--pretrain-iters", type=int)
    p.add_argument("--finetune-iters", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--grid-size", type=int)
    p.set_defaults(func=cmd_scenario, stage="scenario")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
        _write_run_manifest(args)
        return rc
    except SystemExit:
        raise
    except Exception as exc:  # report the stage, keep partial artifacts on disk
        log.debug("traceback", exc_info=True)
        print(f"replaycodec {args.stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
