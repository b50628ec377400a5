"""Command line: register, train, bench, gen.

Every subcommand accepts ``--config file.json``; keys are option names
(``max_iters`` or ``max-iters``) and explicit flags win over the file.
Exit status is 0 on success, 1 on a runtime error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import ablation_presets, run_benchmark, run_curriculum_ablation
from .errors import RegistrationError
from .features import encoder_forward, handcrafted_features, load_weights, save_weights
from .fileio import FORMATS, load_pose, load_shape, normalize_shape, save_ply, save_pose
from .geometry import PointCloud, Pose, rotation_error_deg
from .registration import RegistrationConfig, register
from .shapes import SHAPE_KINDS, MeshShape, procedural_shape, sample_mesh_surface, shape_set
from .training import CurriculumSchedule, TrainConfig, train

PRESETS = ("paper45", "paper90", "ablation-kernel", "ablation-ell", "ablation-curriculum")


class UsageError(Exception):
    pass


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rkhs-reg", description="Correspondence-free SE(3) registration in an RKHS.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="{register,train,bench,gen}")
    sub.required = True

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="JSON file supplying defaults for any option")
        return p

    p = add("register", "align <src> onto <tgt>; prints the pose h with h*src ~ tgt")
    p.add_argument("src", type=Path)
    p.add_argument("tgt", type=Path)
    p.add_argument("--mode", choices=("handcrafted", "encoder"), default="handcrafted")
    p.add_argument("--weights", type=Path)
    p.add_argument("--ell0", type=float, default=0.3)
    p.add_argument("--max-iters", type=int, default=300)
    p.add_argument("--kernel", choices=("rbf_tanh", "rbf"), default="rbf_tanh")
    p.add_argument("--n", type=int, default=1024, help="points sampled from mesh inputs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalize", action="store_true", help="register in unit-diagonal coordinates of <tgt>")
    p.add_argument("--truth", type=Path, help="pose JSON; adds rot_err_deg to the output")
    p.add_argument("--out", type=Path)

    p = add("train", "train the encoder on every shape file in <data-dir>")
    p.add_argument("data_dir", type=Path)
    p.add_argument("--curriculum", type=_floats, default=(1.0, 10.0, 20.0, 30.0, 45.0))
    p.add_argument("--epochs", type=int, default=20, help="epochs per stage")
    p.add_argument("--max-epochs", type=int, help="total epoch budget")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--n-points", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("weights.bin"))
    p.add_argument("--log", type=Path)

    p = add("bench", "run a benchmark or ablation preset on procedural shapes")
    p.add_argument("--preset", choices=PRESETS, default="paper45")
    p.add_argument("--trials", type=int, default=10, help="trials per method and cell")
    p.add_argument("--shapes", type=int, default=10, help="number of procedural shapes")
    p.add_argument("--n-points", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", type=Path, help="encoder weights; handcrafted features otherwise")
    p.add_argument("--epochs", type=int, default=3, help="epochs per stage (ablation-curriculum)")
    p.add_argument("--out", type=Path, default=Path("report.csv"))

    p = add("gen", "sample a procedural shape to a PLY file")
    p.add_argument("shape", choices=SHAPE_KINDS)
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    try:
        data = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    options = {a.dest: a for a in sub._actions if a.option_strings and a.dest not in ("help", "config")}
    defaults = {}
    for key, value in data.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in options:
            raise UsageError(f"unknown option {key!r} in config file for {args.command!r}")
        action = options[dest]
        if action.type is not None and value is not None and not isinstance(value, bool):
            value = action.type(",".join(map(str, value)) if isinstance(value, list) else str(value))
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _as_cloud(shape, n: int, seed: int) -> PointCloud:
    if isinstance(shape, MeshShape):
        return sample_mesh_surface(shape, n, np.random.default_rng(seed))
    return shape


def _cmd_register(args) -> int:
    src = _as_cloud(load_shape(args.src), args.n, args.seed)
    tgt = _as_cloud(load_shape(args.tgt), args.n, args.seed)
    center, scale = np.zeros(3), 1.0
    if args.normalize:
        tgt, center, scale = normalize_shape(tgt)
        src = PointCloud((src.points - center) * scale, src.labels)
    cfg = RegistrationConfig(max_iters=args.max_iters, ell_init=args.ell0, kernel=args.kernel)
    if args.mode == "encoder":
        if args.weights is None:
            raise UsageError("--mode encoder needs --weights")
        weights = load_weights(args.weights)
        fx, fz = encoder_forward(tgt, weights), encoder_forward(src, weights)
    else:
        fx, fz = handcrafted_features(tgt), handcrafted_features(src)
    res = register(fx, fz, cfg)
    pose = res.pose
    if args.normalize:
        # undo x -> (x - c) s on both sides
        pose = Pose(pose.rotation, pose.translation / scale + center - pose.rotation @ center)
    truth = load_pose(args.truth) if args.truth else None
    np.set_printoptions(precision=9, suppress=True)
    print(pose.as_matrix())
    print(f"final_ell {res.final_ell:.6g}")
    print(f"iterations {res.iterations}")
    print(f"converged {res.converged}")
    if truth is not None:
        print(f"rot_err_deg {rotation_error_deg(pose, truth):.6g}")
    if args.out:
        meta = dict(final_ell=res.final_ell, iterations=res.iterations, converged=res.converged)
        if args.normalize:
            meta["normalization"] = {"center": [float(v) for v in center], "scale": float(scale)}
        save_pose(args.out, pose, truth, **meta)
    return 0


def _load_dataset(data_dir: Path) -> list:
    files = sorted(p for p in data_dir.iterdir() if p.suffix.lower() in FORMATS)
    if not files:
        raise RegistrationError(f"no shape files ({', '.join(sorted(FORMATS))}) in {data_dir}")
    return [load_shape(p, normalize=True) for p in files]


def _cmd_train(args) -> int:
    dataset = _load_dataset(args.data_dir)
    schedule = CurriculumSchedule(args.curriculum, args.epochs)
    config = TrainConfig(outer_lr=args.lr, batch_size=args.batch, seed=args.seed, max_epochs=args.max_epochs, n_points=args.n_points)
    result = train(dataset, schedule, config, log_path=args.log)
    save_weights(result.weights, args.out)
    last = result.log[-1]
    print(f"epochs {last['epoch']} stage {last['stage_deg']:g} val_rot_err_deg {last['val_rot_err_deg']:.4f}")
    return 0


def _cmd_bench(args) -> int:
    shapes = shape_set(args.shapes, seed=args.seed)
    if args.preset == "ablation-curriculum":
        rng = np.random.default_rng(args.seed)
        dataset = [sample_mesh_surface(m, 4 * 1024, rng) for m in shape_set(max(args.shapes, 2), seed=args.seed)]
        seeds = tuple(range(args.seed, args.seed + args.trials))
        result = run_curriculum_ablation(dataset, seeds, epochs_per_stage=args.epochs)
        result.to_csv(args.out)
        print(f"curriculum mean val rot err {result.mean('curriculum'):.4f} deg")
        print(f"direct     mean val rot err {result.mean('direct'):.4f} deg")
        return 0
    weights = load_weights(args.weights) if args.weights else None
    preset = ablation_presets(weights)[args.preset]
    report = run_benchmark(
        shapes, preset.methods, preset.init_angles, preset.specs, args.trials,
        out=args.out, n_points=args.n_points, seed=args.seed, cycle_shapes=True,
    )
    print(report.summary())
    return 0


def _cmd_gen(args) -> int:
    rng = np.random.default_rng(args.seed)
    mesh = procedural_shape(args.shape, rng)
    save_ply(sample_mesh_surface(mesh, args.n, rng), args.out)
    return 0


COMMANDS = {"register": _cmd_register, "train": _cmd_train, "bench": _cmd_bench, "gen": _cmd_gen}


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:  # argparse reports usage errors this way
        return int(exc.code or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rkhs-reg: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rkhs-reg: error: {exc}", file=sys.stderr)
        return 2
    except (RegistrationError, OSError, ValueError) as exc:
        print(f"rkhs-reg: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
