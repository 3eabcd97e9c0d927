"""``spcnn`` command line.

Exit codes: 0 success, 2 configuration or data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data, evalkit, gradcheck, spnet, trainer
from .errors import NumericError, SPCNNError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("spcnn")


def _fail(msg: str, code: int = EXIT_CONFIG) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def cmd_train(args) -> int:
    run = cfgmod.load_config(args.config)
    train_cfg = run.train
    if args.iterations is not None:
        train_cfg = dataclasses.replace(train_cfg, iterations=args.iterations)
    out_dir = Path(args.output) if args.output else run.output_dir
    if out_dir is None:
        return _fail("no output directory: set [run] output_dir or pass --output")
    if run.manifest is None:
        return _fail("config has no [data] manifest")
    if not run.manifest.is_file():
        return _fail(f"manifest not found: {run.manifest}")
    manifest, stats = data.load_manifest(run.manifest)
    spec = run.network
    if not run.class_count_explicit:
        spec = dataclasses.replace(spec, class_count=len(manifest.class_names))
    elif spec.class_count != len(manifest.class_names):
        return _fail(f"config class_count {spec.class_count} but manifest lists "
                     f"{len(manifest.class_names)} classes")
    log.info("train split %d, test split %d", stats.role_counts["train"], stats.role_counts["test"])
    mean = data.compute_mean_image(manifest, spec.canonical_size)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "mean_image.npy", mean)
    state = spnet.init_params(spec, train_cfg.seed)
    split = trainer.PreparedSplit(manifest, "train", spec, mean, images_only=True)
    try:
        result = trainer.train(spec, state, split, train_cfg, out_dir=out_dir,
                               class_names=manifest.class_names)
    except NumericError as exc:
        return _fail(f"{exc} (last good snapshot kept in {out_dir})", EXIT_NUMERIC)
    spnet.save_checkpoint(out_dir / "final.spcn", result.checkpoint)
    if result.losses:
        print(f"final_loss={result.losses[-1]:.6f}")
    if result.accuracies:
        print(f"train_accuracy={100 * result.accuracies[-1][1]:.2f}")
    print(f"checkpoint={out_dir / 'final.spcn'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = spnet.load_checkpoint(args.checkpoint)
    manifest, _ = data.load_manifest(args.manifest)
    if len(manifest.class_names) != ckpt.spec.class_count:
        return _fail(f"checkpoint has {ckpt.spec.class_count} classes, manifest "
                     f"{len(manifest.class_names)}")
    if ckpt.mean_image is None:
        return _fail("checkpoint carries no mean image")
    result = evalkit.evaluate(ckpt.state, ckpt.spec, ckpt.mean_image, manifest,
                              video_aggregate=args.video_aggregate)
    evalkit.emit_report(result.confusion, result.average_accuracy, args.out,
                        manifest.class_names)
    evalkit.write_sample_log(result.samples, manifest.class_names,
                             os.path.join(args.out, "samples.csv"))
    print(f"average_accuracy={result.average_accuracy:.2f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = spnet.load_checkpoint(args.checkpoint)
    if ckpt.mean_image is None:
        return _fail("checkpoint carries no mean image")
    if args.video:
        scores, pred = evalkit.predict_video(
            ckpt.state, ckpt.spec, ckpt.mean_image, data.load_frame_sequence(args.path),
            args.video_aggregate)
    else:
        scores, pred = evalkit.predict_image(
            ckpt.state, ckpt.spec, ckpt.mean_image, data.load_image(args.path))
    names = ckpt.class_names or tuple(str(i) for i in range(ckpt.spec.class_count))
    print(" ".join([names[pred].replace(" ", "_")] + [f"{p:.6f}" for p in scores]))
    return EXIT_OK


def format_shapes(spec: spnet.NetworkSpec) -> str:
    lines = []
    for i, (stream, window) in enumerate(zip(
            spec.streams, spnet.region_windows(spec.canonical_size, spec.canonical_size,
                                               spec.pyramid_levels))):
        level, gx, gy = window[:3]
        table, width = spnet.infer_shapes(stream)
        lines.append(f"stream {i} level={level} grid=({gx},{gy}) input="
                     f"{stream.in_channels}x{stream.input_size}x{stream.input_size}")
        for row in table:
            c, h, w = row.shape
            lines.append(f"  {row.name:<8} {c}x{h}x{w}")
        lines.append(f"  flattened={width}")
    lines.append(f"concat_width={spnet.concat_width(spec)}")
    lines.append(f"param_count={spnet.param_count(spec)}")
    return "\n".join(lines)


def cmd_shapes(args) -> int:
    if args.config:
        spec = cfgmod.load_config(args.config).network
    else:
        spec = cfgmod.profile_network(args.profile)
    if args.levels is not None:
        spec = dataclasses.replace(spec, pyramid_levels=args.levels)
    print(format_shapes(spec))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dtype = np.dtype(args.dtype).type
    results = gradcheck.run_suite(args.seed, dtype, broken=tuple(args.break_layer or ()))
    limit = gradcheck.THRESHOLD[dtype]
    for name, err in results.items():
        bound = gradcheck.END_TO_END_THRESHOLD if name == "network" else limit
        status = "ok" if err < bound else "FAIL"
        print(f"{name:<13} max_rel_error={err:.3e} threshold={bound:.0e} {status}")
    ok = gradcheck.passed(results, dtype)
    print("gradcheck " + ("passed" if ok else "failed"))
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_synth(args) -> int:
    manifest = data.gen_synthetic(
        args.classes, args.samples, args.size, args.seed, args.noise, args.out,
        test_per_class=args.test_samples, videos_per_class=args.videos)
    print(f"manifest={Path(args.out) / 'manifest.txt'} entries={len(manifest.entries)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spcnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--iterations", type=int)
    t.add_argument("--output", help="overrides [run] output_dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest's test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--video-aggregate", choices=("mean", "vote"), default="mean")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="classify one image or frame directory")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("path")
    pr.add_argument("--video", action="store_true", help="path is a frame directory")
    pr.add_argument("--video-aggregate", choices=("mean", "vote"), default="mean")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("shapes", help="print per-stream layer shapes and concat width")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--config")
    g.add_argument("--profile", choices=cfgmod.PROFILES, default="paper")
    s.add_argument("--levels", type=int)
    s.set_defaults(func=cmd_shapes)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    gc.add_argument("--break-layer", action="append", help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)

    sy = sub.add_parser("synth", help="generate the synthetic quadrant dataset")
    sy.add_argument("--classes", type=int, default=8)
    sy.add_argument("--samples", type=int, default=50, help="train samples per class")
    sy.add_argument("--test-samples", type=int, default=0, help="test samples per class")
    sy.add_argument("--videos", type=int, default=0, help="test videos per class")
    sy.add_argument("--size", type=int, default=64)
    sy.add_argument("--noise", type=float, default=20.0)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    except (SPCNNError, OSError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
