"""Command-line surface tying the library into reproducible workflows.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O error,
4 corrupt data (checkpoint CRC / version).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import engine as en
from . import model as md
from . import synth as sy
from . import training as tr
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (ConfigError, apply_overrides, build_configs,
                     load_config_file, serialize_configs)
from .imageio import ImageIOError, read_ppm, write_ppm
from .metrics import MetricsReport, psnr, ssim

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CORRUPT = 4

# published cost figures for this architecture at 4K input (informational)
REFERENCE_PARAMS = 14.824e6
REFERENCE_MACS = 1.190e12


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _load_effective_config(args):
    values = {}
    if getattr(args, "config", None):
        values = load_config_file(args.config)
    values = apply_overrides(values, getattr(args, "set", None))
    return build_configs(values)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    ranges = sy.SynthRanges()
    if args.config:
        _model, _train, ranges = _load_effective_config(args)
    try:
        rows = sy.make_dataset(
            clean_dir=args.clean_dir, n=args.n, ranges=ranges, out_dir=args.out,
            preset=args.preset, seed=args.seed, misalign=args.misalign,
        )
    except FileNotFoundError as exc:
        _err(str(exc))
        return EXIT_IO
    except OSError as exc:
        _err(str(exc))
        return EXIT_IO
    print(f"wrote {len(rows)} pairs to {args.out}")
    return EXIT_OK


def cmd_train(args):
    model_cfg, train_cfg, _ranges = _load_effective_config(args)
    if args.seed is not None:
        from dataclasses import replace
        train_cfg = replace(train_cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    dataset = tr.PairDataset(args.data)
    model_cfg = model_cfg.with_k_for_crop(train_cfg.crop, train_cfg.crop)
    (out / "config.resolved").write_text(
        serialize_configs(model_cfg, train_cfg), encoding="utf-8")

    start_step = 0
    optim_state = None
    if args.resume:
        ck = load_checkpoint(args.resume)
        params = ck.params
        start_step = ck.step
        if ck.optim_m:
            optim_state = tr.OptimState(m=ck.optim_m, v=ck.optim_v, t=ck.step)
    else:
        params = md.build_model(model_cfg, train_cfg.seed)

    try:
        params, optim_state, last = tr.train(
            params, dataset, train_cfg, model_cfg, out,
            start_step=start_step, optim_state=optim_state,
            max_steps=args.max_steps)
    except tr.TrainingAbort as exc:
        _err(f"training aborted: {exc} (last checkpoint retained)")
        return EXIT_CHECK
    final_step = last[0] if last else start_step
    save_checkpoint(out / "final.mznt", params, model_cfg, final_step,
                    train_cfg.proxy_seed, optim_state=optim_state)
    if last:
        print(f"finished at step {last[0]}: loss {last[5]:.6f}, train psnr {last[6]:.2f} dB")
    return EXIT_OK


def _tlc_window(value):
    if value is None or value == "off":
        return None
    return int(value)


def _iter_images(path):
    p = Path(path)
    if p.is_dir():
        return sorted(p.glob("*.ppm"))
    return [p]


def cmd_demoire(args):
    try:
        ck = load_checkpoint(args.ckpt)
    except CheckpointError as exc:
        _err(str(exc))
        return EXIT_CORRUPT
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    window = _tlc_window(args.tlc)
    failures = 0
    images = _iter_images(args.input)
    if not images:
        _err(f"no input images at {args.input}")
        return EXIT_IO
    for img_path in images:
        try:
            image = read_ppm(img_path)
        except (ImageIOError, OSError) as exc:
            _err(f"skipping {img_path}: {exc}")
            failures += 1
            continue
        restored = md.infer_padded(ck.params, image, ck.model_config, tlc_window=window)
        write_ppm(out / img_path.name, restored)
    if failures:
        return EXIT_IO
    print(f"wrote {len(images)} restored images to {out}")
    return EXIT_OK


def cmd_eval(args):
    preds = _iter_images(args.pred_dir)
    gts = _iter_images(args.gt_dir)
    if len(preds) != len(gts) or not preds:
        _err(f"directory mismatch: {len(preds)} predictions vs {len(gts)} references")
        return EXIT_IO
    report = MetricsReport()
    for pp, gp in zip(preds, gts):
        a = read_ppm(pp)
        b = read_ppm(gp)
        report.add(pp.name, psnr(a, b), ssim(a, b))
    print(report.render())
    if args.out:
        Path(args.out).write_text(report.to_tsv(), encoding="utf-8")
    return EXIT_OK


def cmd_count(args):
    model_cfg, _train, _ranges = _load_effective_config(args)
    try:
        w, h = (int(t) for t in args.res.lower().split("x"))
    except ValueError:
        _err(f"--res must look like 3840x2160, got {args.res!r}")
        return EXIT_USAGE
    if model_cfg.mslkb_k == "auto":
        model_cfg = model_cfg.with_k_for_crop(args.crop, args.crop)
    params = md.build_model(model_cfg, seed=0)
    preport = md.count_params(params)
    mreport = md.count_macs(model_cfg, h, w)
    print(preport.render())
    print()
    print(mreport.render())
    print()
    print(f"totals: {preport.total / 1e6:.3f} M params, {mreport.total / 1e12:.3f} T multiplies at {w}x{h}")
    print(f"reference values for this architecture: {REFERENCE_PARAMS / 1e6:.3f} M params, "
          f"{REFERENCE_MACS / 1e12:.3f} T MACs at 4K")
    print("note: the published figures do not state the base channel width; totals here "
          "use the configured width and are a calibration comparison, not an equality check.")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_gradient_suite

    model_cfg, _train, _ranges = _load_effective_config(args)
    failures, trials = run_gradient_suite(
        trials=args.trials, tol=args.tol, seed=args.seed,
        dilations=model_cfg.dilations[0], verbose=True)
    if failures:
        _err(f"{failures} of {trials} gradient checks failed")
        return EXIT_CHECK
    print(f"all {trials} gradient checks passed (tol {args.tol:g})")
    return EXIT_OK


def cmd_aligncheck(args):
    rows = sy.read_manifest(Path(args.data) / "manifest.tsv")
    print("index\ttrue_dx\ttrue_dy\test_dx\test_dy\tresidual")
    worst = 0.0
    for row in rows:
        moire = read_ppm(Path(args.data) / row["moire"])
        clean = read_ppm(Path(args.data) / row["gt"])
        try:
            dx, dy = sy.estimate_translation(clean, moire, search_radius=args.radius)
        except sy.AlignmentError as exc:
            _err(f"pair {row['index']}: {exc}")
            return EXIT_CHECK
        tdx = row["true_dx"] or 0.0
        tdy = row["true_dy"] or 0.0
        resid = max(abs(dx - tdx), abs(dy - tdy))
        worst = max(worst, resid)
        print(f"{row['index']}\t{tdx:.3f}\t{tdy:.3f}\t{dx:.3f}\t{dy:.3f}\t{resid:.3f}")
    print(f"worst residual: {worst:.3f} px")
    return EXIT_OK if worst <= 0.5 else EXIT_CHECK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="mznet", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic (moire, clean) dataset")
    p.add_argument("--clean-dir", help="directory of clean PPM images (natural preset)")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=("natural", "inspection"), default="natural")
    p.add_argument("--misalign", type=float, default=0.0,
                   help="max |offset| in px injected into the moire image")
    p.add_argument("--config", help="config file providing synth.* ranges")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("train", help="train a model on a synthesized dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted config override, e.g. train.lr_init=2e-4")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("demoire", help="restore images with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--tlc", default="off", help="local pooling window, or 'off'")
    p.set_defaults(func=cmd_demoire)

    p = subs.add_parser("eval", help="PSNR/SSIM of a prediction dir vs reference dir")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", help="write the TSV report here")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("count", help="parameter and multiply accounting")
    p.add_argument("--config")
    p.add_argument("--res", default="3840x2160", help="input resolution WxH")
    p.add_argument("--crop", type=int, default=768,
                   help="training crop used to resolve an 'auto' bottleneck kernel")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_count)

    p = subs.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--config")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("aligncheck", help="verify translation recovery on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--radius", type=int, default=8)
    p.set_defaults(func=cmd_aligncheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth" and args.preset == "natural" and not args.clean_dir:
        parser.error("synth --preset natural requires --clean-dir")
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except CheckpointError as exc:
        _err(str(exc))
        return EXIT_CORRUPT
    except (ImageIOError, FileNotFoundError) as exc:
        _err(str(exc))
        return EXIT_IO
    except (en.ShapeError, ValueError) as exc:
        _err(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
