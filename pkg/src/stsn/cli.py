"""Command-line entry point: ``stsn {gen-data,train,eval,viz-offsets,experiment}``.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 non-finite loss, 5 checkpoint/data
incompatibility, 6 index out of range.
"""

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config
from .evaluate import EvalConfig, evaluate
from .model import init_params
from .synthvid import ClipConfig, DatasetError, generate_dataset, read_dataset, write_dataset
from .train import TrainingError, train

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_COMPAT = 5
EXIT_RANGE = 6

log = logging.getLogger("stsn")


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError("image size must be positive")
    return h, w


def _prob(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("probability must lie in [0, 1]")
    return v


def _positive(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _non_negative(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="stsn", description="Spatiotemporal sampling network on synthetic video.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic video dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--clips", type=_positive, default=200)
    g.add_argument("--frames", type=_positive, default=9)
    g.add_argument("--size", type=_size, default=(64, 64))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--occlusion-prob", type=_prob, default=0.7)
    g.add_argument("--blur-prob", type=_prob, default=0.5)
    g.add_argument("--noise-std", type=float, default=0.03)
    g.add_argument("--identical-frames", action="store_true", help="static control clips (no motion)")

    t = sub.add_parser("train", help="train STSN (or the static SSN baseline)")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--config", type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--static-baseline", action="store_true", help="SSN: reference frame only (K = 0)")
    t.add_argument("--seed", type=int, help="overrides train.seed")
    t.add_argument("--iterations", type=_positive, help="overrides train.iterations")
    t.add_argument("--loss-csv", type=Path, help="default: <out>.loss.csv")

    e = sub.add_parser("eval", help="mAP@0.5 and temporal ablations")
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--K", type=_non_negative, nargs="+")
    e.add_argument("--stride", type=_positive, nargs="+", default=[1])
    e.add_argument("--report", required=True, type=Path)
    e.add_argument("--weights", type=Path, help="weight profile CSV (default: <report>.weights.csv)")
    e.add_argument("--offsets", type=Path, help="offset diagnostics CSV (default: <report>.offsets.csv)")
    e.add_argument("--score-threshold", type=_prob, default=0.05)
    e.add_argument("--workers", type=_positive, default=1)

    v = sub.add_parser("viz-offsets", help="export offset-tracking images and CSV")
    v.add_argument("--ckpt", required=True, type=Path)
    v.add_argument("--data", required=True, type=Path)
    v.add_argument("--clip", required=True, type=int)
    v.add_argument("--frame", required=True, type=int)
    v.add_argument("--out", required=True, type=Path)
    v.add_argument("--K", type=_non_negative)
    v.add_argument("--stride", type=_positive)
    v.add_argument("--object", type=int, default=0)

    x = sub.add_parser("experiment", help="SSN vs STSN desk-scale experiment")
    x.add_argument("--out", required=True, type=Path)
    x.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    x.add_argument("--iterations", type=_positive, default=3000)
    x.add_argument("--train-clips", type=_positive, default=200)
    x.add_argument("--eval-clips", type=_positive, default=50)
    return p


def _read_data(path):
    try:
        return read_dataset(path)
    except DatasetError as exc:
        raise CommandError(str(exc), EXIT_IO) from exc


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CommandError(str(exc), EXIT_IO) from exc
    except CheckpointError as exc:
        raise CommandError(f"{path}: {exc}", EXIT_COMPAT) from exc


def _check_compat(config, clips):
    dims = clips[0].frames.shape[1:]
    want = (config.in_channels, config.image_h, config.image_w)
    if tuple(dims) != want:
        raise CommandError(f"checkpoint expects frames {list(want)}, data has {list(dims)}", EXIT_COMPAT)


def cmd_gen_data(args):
    h, w = args.size
    try:
        cfg = ClipConfig(
            frames=args.frames, image_h=h, image_w=w, occlusion_prob=args.occlusion_prob,
            blur_prob=args.blur_prob, noise_std=args.noise_std, identical_frames=args.identical_frames,
            seed=args.seed,
        )
        clips = generate_dataset(cfg, args.clips)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_USAGE) from exc
    try:
        write_dataset(clips, args.out)
    except OSError as exc:
        raise CommandError(str(exc), EXIT_IO) from exc
    degraded = sum(int(c.degraded.sum()) for c in clips)
    print(f"clips={len(clips)} frames={args.frames} degraded={degraded}")


def cmd_train(args):
    try:
        run = load_run_config(args.config) if args.config else RunConfig()
    except OSError as exc:
        raise CommandError(str(exc), EXIT_IO) from exc
    except ConfigError as exc:
        raise CommandError(str(exc), EXIT_USAGE) from exc
    clips = _read_data(args.data)
    if not clips:
        raise CommandError("dataset is empty", EXIT_USAGE)
    if run.data.max_clips:
        clips = clips[: run.data.max_clips]
    _, c, h, w = clips[0].frames.shape
    try:
        model_cfg = replace(run.model, image_h=h, image_w=w, in_channels=c)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_COMPAT) from exc
    tcfg = run.train
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.iterations is not None:
        tcfg = replace(tcfg, iterations=args.iterations)
    if args.static_baseline:
        model_cfg = replace(model_cfg, K=0)
        tcfg = replace(tcfg, K_train=0)
    else:
        model_cfg = replace(model_cfg, K=tcfg.K_train)
    params = init_params(model_cfg, seed=tcfg.seed)
    try:
        result = train(params, clips, model_cfg, tcfg, static_baseline=args.static_baseline)
    except TrainingError as exc:
        raise CommandError(str(exc), EXIT_NUMERIC) from exc
    loss_csv = args.loss_csv or args.out.with_name(args.out.name + ".loss.csv")
    try:
        save_checkpoint(args.out, model_cfg, result.params)
        with open(loss_csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iteration", "loss"])
            wr.writerows((i, repr(v)) for i, v in enumerate(result.losses))
    except OSError as exc:
        raise CommandError(str(exc), EXIT_IO) from exc
    tail = result.losses[-50:]
    print(f"trained {tcfg.iterations} iterations, final loss {sum(tail) / len(tail):.5f} -> {args.out}")


def cmd_eval(args):
    config, params = _load_ckpt(args.ckpt)
    clips = _read_data(args.data)
    if not clips:
        raise CommandError("dataset is empty", EXIT_USAGE)
    _check_compat(config, clips)
    Ks = args.K if args.K is not None else [config.K]
    rows, offset_rows = [], []
    profile = None
    for stride in args.stride:
        for K in Ks:
            ecfg = EvalConfig(K_eval=K, temporal_stride=stride, score_threshold=args.score_threshold, workers=args.workers)
            rep = evaluate(params, config, clips, ecfg)
            rows.append((K, stride, rep.mAP))
            for k, dy, dx in rep.mean_offsets:
                offset_rows.append((K, stride, k, dy, dx, rep.mean_offset_magnitude))
            if profile is None or (stride == args.stride[0] and K == max(Ks)):
                profile = rep.weight_profile
            print(f"K={K} stride={stride} mAP={rep.mAP:.4f} mean|offset|={rep.mean_offset_magnitude:.3f} cells")
    weights_csv = args.weights or args.report.with_name(args.report.name + ".weights.csv")
    offsets_csv = args.offsets or args.report.with_name(args.report.name + ".offsets.csv")
    try:
        _write_csv(args.report, ["K", "stride", "mAP"], [(K, s, repr(m)) for K, s, m in rows])
        _write_csv(weights_csv, ["k", "mean_weight"], [(k, repr(w)) for k, w in profile])
        _write_csv(offsets_csv, ["K", "stride", "k", "mean_dy", "mean_dx", "mean_abs_offset"], offset_rows)
    except OSError as exc:
        raise CommandError(str(exc), EXIT_IO) from exc


def cmd_viz_offsets(args):
    from .viz import viz_offsets

    config, params = _load_ckpt(args.ckpt)
    clips = _read_data(args.data)
    if not 0 <= args.clip < len(clips):
        raise CommandError(f"clip {args.clip} out of range (0..{len(clips) - 1})", EXIT_RANGE)
    clip = clips[args.clip]
    if not 0 <= args.frame < clip.num_frames:
        raise CommandError(f"frame {args.frame} out of range (0..{clip.num_frames - 1})", EXIT_RANGE)
    if not 0 <= args.object < len(clip.classes):
        raise CommandError(f"object {args.object} out of range", EXIT_RANGE)
    _check_compat(config, clips)
    try:
        rows = viz_offsets(params, config, clip, args.frame, args.out, K=args.K, temporal_stride=args.stride, obj=args.object)
    except OSError as exc:
        raise CommandError(str(exc), EXIT_IO) from exc
    print(f"wrote {len(rows)} supporting-frame images to {args.out}")


def cmd_experiment(args):
    from .experiment import ExperimentConfig, run_experiment

    cfg = ExperimentConfig(
        seeds=tuple(args.seeds), iterations=args.iterations, train_clips=args.train_clips, eval_clips=args.eval_clips
    )
    try:
        summary = run_experiment(cfg, out_dir=args.out)
    except TrainingError as exc:
        raise CommandError(str(exc), EXIT_NUMERIC) from exc
    print(summary.describe())


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "viz-offsets": cmd_viz_offsets,
    "experiment": cmd_experiment,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors, --help, --version
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except CommandError as exc:
        print(f"stsn {args.command}: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
