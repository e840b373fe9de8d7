"""Command line entry point: ``lfcodec <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np


def _load_model(path):
    from .model import load_checkpoint

    model, _meta = load_checkpoint(path)
    model.eval()
    return model


def _load_grid(path):
    from .lfdata import center_crop_views, load_sai_grid

    return center_crop_views(load_sai_grid(path))


def cmd_compress(args) -> int:
    from .codec import encode_lightfield

    grid = _load_grid(args.input)
    data = encode_lightfield(grid, _load_model(args.model), threads=args.threads)
    Path(args.output).write_bytes(data)
    bpp = 8 * len(data) / (grid.u_count * grid.v_count * grid.h * grid.w)
    print(f"{args.output}: {len(data)} bytes, {bpp:.4f} bpp")
    return 0


def cmd_decompress(args) -> int:
    from .codec import decode_lightfield
    from .lfdata import save_sai_grid

    data = Path(args.input).read_bytes()
    grid = decode_lightfield(data, _load_model(args.model), threads=args.threads)
    save_sai_grid(grid, args.output, bit_depth=args.bit_depth)
    print(f"{args.output}: {grid.v_count}x{grid.u_count} views of {grid.h}x{grid.w}")
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_training_log
    from .training import TrainConfig, train_loop

    cfg = TrainConfig(
        lam=args.lam,
        steps=args.steps,
        channels=args.channels,
        hidden=args.hidden or args.channels,
        seed=args.seed,
        learning_rate=args.lr,
        batch_size=args.batch,
        patch_size=args.patch,
        stride=args.stride,
        use_disparity=not args.no_disparity,
        share_disparity=args.share_disparity,
        checkpoint_every=args.checkpoint_every,
    )
    res = train_loop(cfg, args.manifest, args.out, resume=not args.fresh)
    plot_training_log(res.records, Path(args.out) / "rd_log.png")
    last = res.records[-1] if res.records else None
    print(f"checkpoint: {res.checkpoint}")
    if last is not None:
        print(f"final step {last.step}: L={last.loss:.5f} rate={last.rate_bpp:.4f} bpp mse={last.mse:.6f}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate_reconstruction, point_dict, write_report
    from .metrics import psnr, rgb_to_y
    from .plotting import plot_view_psnr

    ref = _load_grid(args.ref)
    rec = _load_grid(args.rec)
    if ref.views.shape != rec.views.shape:
        print(f"error: reference {ref.views.shape} and reconstruction {rec.views.shape} differ", file=sys.stderr)
        return 2
    n_bytes = Path(args.bitstream).stat().st_size
    point = evaluate_reconstruction(ref, rec, n_bytes, scene=Path(args.ref).name, standard=args.luma)
    per_view = np.array(
        [[psnr(rgb_to_y(ref.view(r, c), args.luma), rgb_to_y(rec.view(r, c), args.luma))
          for c in range(ref.u_count)] for r in range(ref.v_count)]
    )
    report = {"point": point_dict(point), "bytes": n_bytes, "per_view_psnr_y": per_view.tolist(), "luma": args.luma}
    out = write_report(args.out, report)
    plot_view_psnr(per_view, out.with_suffix(".png"))
    print(json.dumps(point_dict(point), indent=2))
    return 0


def cmd_bdrate(args) -> int:
    from .evaluate import RDCurve
    from .metrics import bd_metrics

    a = RDCurve.from_csv(args.curve_a)
    b = RDCurve.from_csv(args.curve_b)
    res = bd_metrics(a.with_metric(args.metric), b.with_metric(args.metric))
    fmt = lambda v: "undefined (no overlap)" if math.isnan(v) else f"{v:+.4f}"  # noqa: E731
    print(f"{b.name} vs {a.name} on {args.metric}")
    print(f"BD-BR:   {fmt(res.bd_br_percent)} %")
    print(f"BD-PSNR: {fmt(res.bd_psnr_db)} dB")
    if res.low_confidence:
        print("note: fewer than four points per curve, lower-degree fit (low confidence)")
    return 0


def cmd_sweep_eval(args) -> int:
    from .evaluate import RDCurve, RDPoint, evaluate_codec
    from .plotting import plot_rd_curves

    grids = [(_load_grid(p), Path(p).name) for p in args.ref]
    points = []
    for ckpt in args.checkpoints:
        model = _load_model(ckpt)
        pts = [evaluate_codec(model, g, threads=args.threads, scene=name).point for g, name in grids]
        fields = ("bpp", "psnr_y", "msssim_y_db", "psnr_rgb")
        mean = {f: float(np.mean([getattr(p, f) for p in pts])) for f in fields}
        points.append(RDPoint(scene=Path(ckpt).parent.name or Path(ckpt).stem, **mean))
        print(f"{ckpt}: {mean['bpp']:.4f} bpp, PSNR_Y {mean['psnr_y']:.2f} dB, MS-SSIM_Y {mean['msssim_y_db']:.2f} dB")
    curve = RDCurve(points, args.name)
    curve.to_csv(args.out)
    curves = [curve] + [RDCurve.from_csv(p) for p in args.compare]
    plot_rd_curves(curves, Path(args.out).with_suffix(".png"))
    print(f"curve: {args.out}")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import make_corpus, write_corpus

    grids = make_corpus(args.scenes, h=args.size, w=args.size, parallax=args.parallax, seed=args.seed)
    manifest = write_corpus(args.out, grids)
    print(f"manifest: {manifest}")
    return 0


def cmd_dump_disparity(args) -> int:
    import torch

    from .codec import _row_tensor, padded_size
    from .entropy import QuantizerMode, quantize
    from .plotting import save_disparity_maps

    grid = _load_grid(args.input)
    model = _load_model(args.model)
    if model.disparity is None:
        print("error: model has no disparity modules", file=sys.stderr)
        return 2
    ph, pw = padded_size(grid.h, model.pad_multiple), padded_size(grid.w, model.pad_multiple)
    out = Path(args.out)
    for r in args.rows or range(grid.v_count):
        x = _row_tensor(grid.views[r], ph, pw)
        with torch.no_grad():
            y, z = model.analyze(x, torch.tensor([r]))
            _, flows, _ = model.synthesize(quantize(y, QuantizerMode.ROUND), quantize(z, QuantizerMode.ROUND))
        maps = flows[0].permute(0, 2, 3, 1).numpy()[:, : grid.h, : grid.w]
        path = save_disparity_maps(maps, out / f"row_{r}.png", row_index=r)
        print(path)
    return 0


def cmd_benchmark(args) -> int:
    from .evaluate import benchmark_timing, write_report

    grids = [_load_grid(p) for p in args.ref]
    model = _load_model(args.model)
    report = {f"threads_{t}": benchmark_timing(grids, model, t) for t in args.threads}
    if args.out:
        write_report(args.out, report)
    print(json.dumps(report, indent=2))
    return 0


def cmd_experiment(args) -> int:
    from .experiments import PSNR_FLOOR_DB, disparity_effect, rd_behavior

    root = Path(args.cache) if args.cache else None
    if args.which == "rd":
        res = rd_behavior(args.steps, root)
        for tag in ("lo", "hi"):
            r = res[tag]
            lam = r["train_config"]["lam"]
            print(f"lambda {lam:g}: {r['bpp']:.4f} bpp, mse {r['mse']:.6f}, PSNR_Y {r['psnr_y']:.2f} dB")
        print(f"bpp increases: {res['bpp_increases']}, mse decreases: {res['mse_decreases']}, "
              f"PSNR_Y >= {PSNR_FLOOR_DB}: {res['psnr_floor_met']}, training {res['train_seconds'] / 3600:.2f} h")
    else:
        res = disparity_effect(args.steps, root)
        print(f"held-out mse: full {res['full']['mse']:.6f}, no disparity {res['nodisp']['mse']:.6f}")
        print(f"full model better: {res['full_beats_nodisp']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfcodec", description="Disparity-aware light field codec.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="encode an SAI directory into a container file")
    p.add_argument("--input", required=True, help="SAI grid directory")
    p.add_argument("--model", required=True, help="checkpoint .npz")
    p.add_argument("--output", required=True, help="output .lfda file")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode a container file into an SAI directory")
    p.add_argument("--input", required=True, help=".lfda file")
    p.add_argument("--model", required=True, help="checkpoint .npz")
    p.add_argument("--output", required=True, help="output SAI directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("train", help="train one model at a fixed lambda")
    p.add_argument("--manifest", required=True, help="text file listing SAI grid directories")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--hidden", type=int, default=None, help="hidden width (default: --channels)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=30)
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--stride", type=int, default=16)
    p.add_argument("--no-disparity", action="store_true", help="train the color path only")
    p.add_argument("--share-disparity", action="store_true", help="one set of weights for all disparity modules")
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint in --out")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a reconstruction against its reference")
    p.add_argument("--ref", required=True)
    p.add_argument("--rec", required=True)
    p.add_argument("--bitstream", required=True, help="container whose size sets the bpp")
    p.add_argument("--out", required=True, help="report .json (a per-view PSNR figure is written beside it)")
    p.add_argument("--luma", choices=("bt709", "bt601"), default="bt709")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bdrate", help="Bjontegaard deltas of curve B against curve A")
    p.add_argument("--curve-a", required=True)
    p.add_argument("--curve-b", required=True)
    p.add_argument("--metric", choices=("psnr_y", "msssim_y_db", "psnr_rgb"), default="psnr_y")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("sweep-eval", help="evaluate several checkpoints into one RD curve")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--ref", nargs="+", required=True, help="held-out SAI directories")
    p.add_argument("--out", required=True, help="curve .csv (an RD figure is written beside it)")
    p.add_argument("--name", default="proposed")
    p.add_argument("--compare", nargs="*", default=[], help="extra curve CSVs to draw")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_sweep_eval)

    p = sub.add_parser("synth", help="write a synthetic light field corpus and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=5)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--parallax", choices=("h", "v", "hv"), default="hv")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("dump-disparity", help="false-color images of decoded disparity maps")
    p.add_argument("--input", required=True, help="SAI grid directory")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rows", type=int, nargs="*", help="row indices (default: all)")
    p.set_defaults(func=cmd_dump_disparity)

    p = sub.add_parser("benchmark", help="average encode/decode wall time")
    p.add_argument("--ref", nargs="+", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--threads", type=int, nargs="+", default=[1, 8])
    p.add_argument("--out", help="optional report .json")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("experiment", help="desk-scale training experiments (cached)")
    p.add_argument("which", choices=("rd", "disparity"), help="lambda pair on h+v parallax, or disparity ablation")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--cache", help="cache directory (default: $LFCODEC_CACHE or ~/.cache/lfcodec)")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
