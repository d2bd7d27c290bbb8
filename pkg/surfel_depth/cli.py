"""
This module contains the command-line entry point of the surfel depth estimator.

Subcommands: run, synth, synth-bench, check-jacobians and eval. Every
subcommand returns a dict that is printed as JSON.
"""
import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

from .modules.configurations import (
    RunConfig,
    SceneSpec,
    build_run_config,
    load_config_file,
    threads_from_env,
)
from .modules.dataset_io import read_depth_pfm, write_synthetic_sequence
from .modules.exceptions import SurfelDepthError
from .modules.pipeline import DEFAULT_BENCH_RADII, check_jacobians, run, synth_bench
from .modules.synthetic_oracle import (
    MOTIONS,
    SCENES,
    evaluate_inverse_depth,
    scene_from_spec,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
EXIT_FAILURE = 1
EXIT_JACOBIAN_GATE = 3

# flags whose destination is a configuration key
_CONFIG_FLAGS = (
    "output_dir",
    "image_dir",
    "calibration",
    "trajectory",
    "scene",
    "motion",
    "frames",
    "scale",
    "noise_sigma",
    "radius_px",
    "seed",
    "export_interval",
    "window_size",
    "max_iterations",
    "huber_delta",
    "alpha",
    "beta",
    "normal_jacobian_enabled",
)


def _add_scene_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scene", choices=sorted(SCENES))
    parser.add_argument("--motion", choices=list(MOTIONS))
    parser.add_argument("--frames", type=int)
    parser.add_argument("--scale", type=float, help="resolution relative to 640x480")
    parser.add_argument("--noise-sigma", type=float)


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key = value configuration file")
    parser.add_argument("--output-dir", type=Path)
    parser.add_argument("--image-dir", type=Path)
    parser.add_argument("--calibration", type=Path)
    parser.add_argument("--trajectory", type=Path)
    _add_scene_flags(parser)
    parser.add_argument("--radius-px", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--export-interval", type=int)
    parser.add_argument("--window-size", type=int)
    parser.add_argument("--max-iterations", type=int)
    parser.add_argument("--huber-delta", type=float)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument(
        "--no-normal-jacobian",
        dest="normal_jacobian_enabled",
        action="store_const",
        const=False,
        help="optimize inverse depth only (normals frozen)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surfel-depth",
        description="Dense monocular depth from photometrically optimized surfels",
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    parser.add_argument("--quiet", action="store_true", help="hide progress bars")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="estimate depth over a sequence")
    _add_run_flags(run_parser)

    synth_parser = commands.add_parser(
        "synth", help="render a synthetic sequence in the dataset layout"
    )
    _add_scene_flags(synth_parser)
    synth_parser.add_argument("--seed", type=int, default=0)
    synth_parser.add_argument("--output-dir", type=Path, required=True)

    bench_parser = commands.add_parser(
        "synth-bench", help="radius and normal-Jacobian sweep on a synthetic scene"
    )
    _add_run_flags(bench_parser)
    bench_parser.add_argument(
        "--radii", type=float, nargs="+", default=list(DEFAULT_BENCH_RADII)
    )
    bench_parser.add_argument("--csv", type=Path, help="default <output-dir>/bench.csv")

    check_parser = commands.add_parser(
        "check-jacobians", help="finite-difference check of the analytic derivatives"
    )
    check_parser.add_argument("--seed", type=int, default=0)
    check_parser.add_argument("--trials", type=int, default=100)
    check_parser.add_argument(
        "--corrupt-normal-jacobian", type=float, default=0.0, help=argparse.SUPPRESS
    )

    eval_parser = commands.add_parser(
        "eval", help="compare an inverse-depth PFM with a reference PFM"
    )
    eval_parser.add_argument("estimate", type=Path)
    eval_parser.add_argument("reference", type=Path)
    return parser


def settings_from_args(args: argparse.Namespace) -> dict[str, Any]:
    """Configuration file values overridden by the flags that were given."""
    settings: dict[str, Any] = {}
    if getattr(args, "config", None) is not None:
        settings.update(load_config_file(args.config))
    for key in _CONFIG_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    settings["threads"] = threads_from_env()
    return settings


def _finite_or_none(values: dict[str, Any]) -> dict[str, Any]:
    return {
        k: None if isinstance(v, float) and not math.isfinite(v) else v
        for k, v in values.items()
    }


def handler(args: argparse.Namespace) -> dict[str, Any]:
    """
    Execute one subcommand.

    Parameters
    ----------
    args : argparse.Namespace
        Parsed arguments; `args.command` names the subcommand.

    Returns
    -------
    dict[str, Any]
        JSON-serializable result of the subcommand.
    """
    progress = not args.quiet

    if args.command == "run":
        config: RunConfig = build_run_config(settings_from_args(args))
        summary = run(config, progress=progress)
        return {
            "message": "run",
            "frames": summary.frames,
            "keyframes": summary.keyframes,
            "surfels": summary.surfels,
            "artifacts": summary.artifacts,
            "evaluation": (
                None
                if summary.evaluation is None
                else _finite_or_none(asdict(summary.evaluation))
            ),
        }

    if args.command == "synth":
        defaults = SceneSpec()
        spec = SceneSpec(
            scene=args.scene or defaults.scene,
            motion=args.motion or defaults.motion,
            frames=args.frames or defaults.frames,
            scale=args.scale or defaults.scale,
            noise_sigma=args.noise_sigma or defaults.noise_sigma,
        )
        scene, trajectory, intrinsics = scene_from_spec(spec, args.seed)
        manifest = write_synthetic_sequence(
            scene,
            trajectory,
            intrinsics,
            args.output_dir,
            spec.noise_sigma,
            args.seed,
            threads_from_env(),
        )
        return {
            "message": "synth",
            "frames": len(trajectory),
            "image_dir": str(manifest.image_dir),
            "calibration": str(manifest.calibration),
            "trajectory": str(manifest.trajectory),
        }

    if args.command == "synth-bench":
        settings = settings_from_args(args)
        settings.setdefault("scene", SceneSpec().scene)
        config = build_run_config(settings)
        csv_path = args.csv or Path(config.output_dir) / "bench.csv"
        Path(config.output_dir).mkdir(parents=True, exist_ok=True)
        table = synth_bench(config, args.radii, csv_path, progress=progress)
        return {
            "message": "synth-bench",
            "csv": str(csv_path),
            "rows": [_finite_or_none(row) for row in table.to_dict("records")],
        }

    if args.command == "check-jacobians":
        report = check_jacobians(
            args.seed, args.trials, args.corrupt_normal_jacobian
        )
        return {"message": "check-jacobians", **report.to_dict()}

    # eval
    metrics = evaluate_inverse_depth(
        read_depth_pfm(args.estimate), read_depth_pfm(args.reference)
    )
    return {"message": "eval", **_finite_or_none(asdict(metrics))}


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)

    if args.command == "check-jacobians" and args.trials <= 0:
        parser.error(f"--trials must be positive, got {args.trials}")

    try:
        result = handler(args)
    except SurfelDepthError as err:
        logger.error("%s", err)
        return EXIT_FAILURE

    print(json.dumps(result, indent=2, sort_keys=True))
    if result.get("passed") is False:
        return EXIT_JACOBIAN_GATE
    return 0


if __name__ == "__main__":
    sys.exit(main())
