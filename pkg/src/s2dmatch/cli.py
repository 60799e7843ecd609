"""Command-line entry point: ``s2dmatch <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or invalid
input, or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _weights(args):
    from .backbone import Weights, load_weights, preset

    if args.weights:
        return load_weights(args.weights)
    return Weights.init(preset(args.preset), seed=args.seed)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")


def _human(text: str) -> None:
    sys.stderr.write(text + "\n")


def _detector_kwargs(args) -> dict:
    return {"max_keypoints": args.max_keypoints, "nms_radius": args.nms_radius, "min_score": args.min_score}


# subcommands ------------------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .backbone import Weights, preset
    from .imageio import load_image
    from .training import TRAIN_PRESETS, TrainConfig, train
    from dataclasses import asdict

    overrides = {k: v for k, v in {
        "epochs": args.epochs,
        "steps_per_epoch": args.steps_per_epoch,
        "crop_size": args.crop,
        "holdout_pairs": args.holdout_pairs,
        "holdout_every": args.holdout_every,
        "batch_pairs": args.batch_pairs,
    }.items() if v is not None}
    cfg = TrainConfig(**{**asdict(TRAIN_PRESETS[args.schedule]), **overrides, "seed": args.seed})
    weights = Weights.init(preset(args.preset), seed=args.seed)
    bases = [load_image(p, gray=True) for p in args.base_images] or None
    records = train(cfg, weights, bases, args.out, args.report, log=_emit)
    last = records[-1]
    _human(f"trained {cfg.total_steps} steps; final loss {last['mean_loss']:.4f}; weights -> {args.out}")
    return 0


def cmd_match(args) -> int:
    from .detector import import_keypoints
    from .imageio import load_image
    from .matcher import MatchConfig, match_pair, write_matches

    img_a = load_image(args.image_a, gray=True)
    img_b = load_image(args.image_b, gray=True)
    kps = None
    if args.keypoints:
        h, w = img_a.shape
        kps = import_keypoints(args.keypoints, image_size=(w, h))
    cfg = MatchConfig(tau=args.tau, cyclic_check=not args.no_cyclic, aggregation=args.aggregation, mode=args.mode)
    matches = match_pair(img_a, kps, img_b, _weights(args), cfg, _detector_kwargs(args))
    write_matches(args.out, matches)
    _emit({"matches": len(matches), "out": str(args.out)})
    return 0


def cmd_eval_mma(args) -> int:
    from .evaluation import evaluate_sequences, write_report
    from .matcher import MatchConfig

    cfg = MatchConfig(tau=args.tau, cyclic_check=not args.no_cyclic, aggregation=args.aggregation, mode=args.mode)
    report = evaluate_sequences(args.manifest, _weights(args), cfg, _detector_kwargs(args))
    if args.json:
        write_report(report, args.json, args.csv)
    agg = report["aggregate"]
    for t, v in agg["mma_match_weighted"].items():
        _emit({"threshold": int(t), "mma": v, "mma_per_pair": agg["mma_per_pair"][t]})
    for t in ("1", "3", "5"):
        v = agg["mma_match_weighted"].get(t)
        _human(f"MMA@{t} = {'undefined' if v is None else f'{v:.3f}'}")
    _human(f"pairs {agg['n_pairs']}  matches {agg['n_matches']}  skipped {len(report['skipped'])}")
    return 0


def cmd_pose_noise(args) -> int:
    from .pose import noise_sweep

    res = noise_sweep(args.seed, args.sigmas, args.trials, args.inlier_px, args.iterations)
    if args.csv or args.json:
        res.write(args.csv or Path(args.json).with_suffix(".csv"), args.json or Path(args.csv).with_suffix(".json"))
    for row in res.summary:
        _emit(row)
        _human(f"sigma {row['sigma']:>5g}px  median pos {row['median_pos_err_m']:.4g} m  "
               f"median rot {row['median_rot_err_deg']:.4g} deg  recall(0.25m,2deg) {row['recall']['0.25m_2.0deg']:.3f}")
    return 0


def cmd_bench_time(args) -> int:
    from .matcher import benchmark_online_time
    from .training import synthetic_image

    query = synthetic_image(np.random.default_rng(args.seed), args.size)
    rep = benchmark_online_time(_weights(args), query, args.n, args.k, args.mode, args.repeats, args.seed,
                                args.aggregation)
    _emit(rep.__dict__)
    if args.out:
        from ._atomic import atomic_write_text

        atomic_write_text(args.out, rep.to_json() + "\n")
    _human(f"t_A {rep.t_A_ms:.2f} ms  t_B {rep.t_B_ms:.2f} ms  t_C {rep.t_C_ms:.4f} ms  "
           f"modeled {rep.modeled_total_s:.4f} s  measured {rep.measured_total_s:.4f} s")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck_suite

    reports = gradcheck_suite(args.seed, args.tolerance)
    for r in reports:
        _emit({"check": r.label, "max_rel_error": r.max_rel_error, "passed": r.passed})
        _human(str(r))
    return 0 if all(r.passed for r in reports) else 2


def cmd_detect(args) -> int:
    from .detector import export_keypoints, harris
    from .imageio import load_image

    kps = harris(load_image(args.image, gray=True), k=args.k, border=args.border, **_detector_kwargs(args))
    export_keypoints(args.out, kps)
    _emit({"keypoints": len(kps), "out": str(args.out)})
    return 0


# parser --------------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="s2dmatch", description="Sparse-to-dense feature matching toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 gives bitwise-reproducible runs)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def network(sp):
        sp.add_argument("--weights", type=Path, help="S2DW weight file (default: fresh weights from --preset/--seed)")
        sp.add_argument("--preset", default="desk2", choices=["desk", "desk2", "vgg16"])
        sp.add_argument("--seed", type=int, default=0)

    def matching(sp):
        sp.add_argument("--tau", type=float, default=0.20)
        sp.add_argument("--mode", choices=["s2d", "s2s"], default="s2d")
        sp.add_argument("--aggregation", choices=["add", "concat"], default="add")
        sp.add_argument("--no-cyclic", action="store_true", help="skip the cyclic consistency check")

    def detection(sp):
        sp.add_argument("--max-keypoints", type=int, default=1000)
        sp.add_argument("--nms-radius", type=int, default=4)
        sp.add_argument("--min-score", type=float, default=1e-3)

    sp = sub.add_parser("train", help="train a backbone on synthetic homography pairs")
    sp.add_argument("--preset", default="desk2", choices=["desk", "desk2", "vgg16"])
    sp.add_argument("--schedule", default="desk", choices=["desk", "full"])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--steps-per-epoch", type=int)
    sp.add_argument("--batch-pairs", type=int)
    sp.add_argument("--crop", type=int)
    sp.add_argument("--holdout-pairs", type=int)
    sp.add_argument("--holdout-every", type=int)
    sp.add_argument("--base-images", nargs="*", default=[], type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--report", type=Path)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("match", help="match keypoints of image A into image B")
    sp.add_argument("image_a", type=Path)
    sp.add_argument("image_b", type=Path)
    sp.add_argument("--keypoints", type=Path, help="keypoints of A (default: Harris)")
    sp.add_argument("--out", type=Path, required=True)
    network(sp)
    matching(sp)
    detection(sp)
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("eval-mma", help="MMA over a sequence manifest")
    sp.add_argument("manifest", type=Path)
    sp.add_argument("--json", type=Path)
    sp.add_argument("--csv", type=Path)
    network(sp)
    matching(sp)
    detection(sp)
    sp.set_defaults(func=cmd_eval_mma)

    sp = sub.add_parser("pose-noise", help="pose error under 2D noise")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--sigmas", type=_floats, default=[0.0, 1.0, 2.0, 4.0, 8.0])
    sp.add_argument("--trials", type=int, default=200)
    sp.add_argument("--inlier-px", type=float)
    sp.add_argument("--iterations", type=int, default=100)
    sp.add_argument("--csv", type=Path)
    sp.add_argument("--json", type=Path)
    sp.set_defaults(func=cmd_pose_noise)

    sp = sub.add_parser("bench-time", help="online time decomposition t_A + t_B + N*K*t_C")
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--k", type=int, default=100)
    sp.add_argument("--size", type=_size, default=(120, 160), help="query size HxW")
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--mode", choices=["s2d", "s2s"], default="s2d")
    sp.add_argument("--aggregation", choices=["add", "concat"], default="add")
    sp.add_argument("--out", type=Path)
    network(sp)
    sp.set_defaults(func=cmd_bench_time)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every op and the pipeline")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("detect", help="Harris keypoints of one image")
    sp.add_argument("image", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--k", type=float, default=0.05)
    sp.add_argument("--border", type=int, default=0)
    detection(sp)
    sp.set_defaults(func=cmd_detect)
    return p


def main(argv=None) -> int:
    from .backbone import ConfigError, KeypointBoundsError, WeightFormatError
    from .detector import KeypointFileError
    from .evaluation import ManifestError
    from .imageio import ImageFormatError
    from .pose import DegenerateConfigurationError
    from .training import TrainingDivergedError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    data_errors = (
        OSError, ValueError, ConfigError, KeypointBoundsError, WeightFormatError, KeypointFileError,
        ManifestError, ImageFormatError, DegenerateConfigurationError, TrainingDivergedError,
    )
    try:
        with threadpool_limits(args.threads):
            return args.func(args)
    except data_errors as exc:
        sys.stderr.write(f"s2dmatch {args.command}: error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
