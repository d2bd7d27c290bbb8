"""
This module wires the estimator together: it streams posed frames into a
keyframe, optimizes the keyframe's surfels after every frame, hands surfels
over to a new keyframe when the camera has moved far enough, and exports
depth, normal and point-cloud artifacts.

It also holds the verification entry points: the finite-difference Jacobian
gate and the synthetic radius / normals benchmark.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import pandas as pd
from tqdm import tqdm

from .configurations import (
    ExportConfig,
    KeyframePolicy,
    OptimizerConfig,
    RunConfig,
)
from .core_geometry import CameraIntrinsics, GrayImage, Pose, backproject_ray
from .dataset_io import (
    load_calibration,
    load_sequence,
    load_trajectory,
    write_depth_pfm,
    write_depth_png,
    write_normal_png,
    write_ply,
    write_surfel_map,
)
from .exceptions import ConfigurationError
from .photometric_optimizer import (
    Frame,
    accumulate_normal_equations,
    jacobian_inverse_depth,
    optimize_keyframe,
    surfel_cost,
)
from .surfel_map import (
    Keyframe,
    RasterBuffers,
    Surfel,
    change_reference_frame,
    initialize_surfels,
    pixel_normals,
    plane_inverse_depth,
    prune_surfels,
    rasterize,
    surfel_footprints,
)
from .synthetic_oracle import (
    PlanePatch,
    PlaneScene,
    ProceduralTexture,
    ReconstructionMetrics,
    SceneView,
    evaluate_reconstruction,
    preset_intrinsics,
    render,
    scene_from_spec,
)

logger = logging.getLogger(__name__)

JACOBIAN_TOLERANCE = 1e-4
DEFAULT_BENCH_RADII = (5.0, 10.0, 12.0)


@dataclass
class RunSummary:
    """Outcome of one pipeline run."""

    frames: int = 0
    keyframes: int = 0
    surfels: int = 0
    artifacts: list[str] = field(default_factory=list)
    evaluation: ReconstructionMetrics | None = None


def keyframe_change_due(
    pose_kf_to_frame: Pose,
    mean_inv_depth: float,
    age: int,
    policy: KeyframePolicy,
) -> bool:
    """
    Whether the newest frame should become the keyframe.

    True when the camera moved farther than `translation_threshold` relative to
    the mean scene depth, or the keyframe is older than `max_window_age`
    frames.
    """
    baseline = float(np.linalg.norm(pose_kf_to_frame.translation))
    return (
        baseline * mean_inv_depth > policy.translation_threshold
        or age > policy.max_window_age
    )


def _mean_inv_depth(keyframe: Keyframe, fallback: float) -> float:
    if not keyframe.surfels:
        return fallback
    return float(np.mean([s.inv_depth for s in keyframe.surfels]))


def export_artifacts(
    keyframe: Keyframe,
    buffers: RasterBuffers,
    directory: Path,
    export: ExportConfig,
) -> list[Path]:
    """Write depth, normal, point-cloud and surfel-map files for a keyframe."""
    directory.mkdir(parents=True, exist_ok=True)
    written = [directory / "depth.pfm", directory / "surfels.txt"]
    write_depth_pfm(buffers, written[0])
    write_surfel_map(keyframe, written[1])
    if export.export_png:
        normals = pixel_normals(keyframe, buffers)
        written.append(directory / "depth.png")
        written.append(write_depth_png(buffers, written[-1]))
        written.append(directory / "normals.png")
        write_normal_png(normals, written[-1], buffers.valid)
    if export.export_ply:
        written.append(directory / "cloud.ply")
        write_ply(keyframe, buffers, written[-1])
    return written


FrameStream = Iterator[tuple[float, GrayImage, Pose]]


def _frame_source(
    config: RunConfig,
) -> tuple[CameraIntrinsics, int, FrameStream, PlaneScene | None]:
    """Intrinsics, frame count, (timestamp, image, pose) stream and the scene."""
    if config.dataset is not None:
        intrinsics = load_calibration(config.dataset.calibration)
        total = len(load_trajectory(config.dataset.trajectory))
        return intrinsics, total, load_sequence(config.dataset), None

    spec = config.synthetic
    assert spec is not None
    scene, trajectory, intrinsics = scene_from_spec(spec, config.seed)

    def rendered() -> FrameStream:
        for index, (timestamp, pose) in enumerate(
            zip(trajectory.timestamps, trajectory.poses)
        ):
            image, _, _ = render(
                scene,
                pose,
                intrinsics,
                spec.noise_sigma,
                config.seed + index,
                config.threads,
            )
            yield timestamp, image, pose

    return intrinsics, len(trajectory), rendered(), scene


def _start_keyframe(
    config: RunConfig,
    image: GrayImage,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    index: int,
) -> Keyframe:
    keyframe = Keyframe(
        image=image,
        pose=pose,
        intrinsics=intrinsics,
        window_size=config.optimizer.window_size,
        radius_px=config.radius_px,
        stamp=index,
    )
    buffers = rasterize(keyframe, config.threads)
    keyframe.add_surfels(initialize_surfels(keyframe, buffers, config.init))
    return keyframe


def run(config: RunConfig, progress: bool = True) -> RunSummary:
    """
    Estimate depth over a whole sequence and write the run's artifacts.

    Per frame: append it to the keyframe window, optimize every surfel, then
    either hand the surfels over to this frame (and fill uncovered regions
    with new surfels) or keep the keyframe. Writes `metrics.jsonl`
    (deterministic per-frame records), `timings.jsonl`, the final artifacts
    and, for synthetic scenes, `evaluation.json`.

    Parameters
    ----------
    config : RunConfig
        Validated run configuration.
    progress : bool
        Show a tqdm progress bar.

    Returns
    -------
    RunSummary
        Frame, keyframe and surfel counts, artifact paths and the evaluation.
    """
    config.validate()
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    intrinsics, total, frames, scene = _frame_source(config)
    policy = config.keyframe_policy
    summary = RunSummary()
    metrics: list[dict] = []
    timings: list[dict] = []

    keyframe: Keyframe | None = None
    keyframe_index = 0
    buffers: RasterBuffers | None = None
    for index, (timestamp, image, pose) in enumerate(
        tqdm(frames, total=total, desc="frames", disable=not progress)
    ):
        started = time.perf_counter()
        if (image.width, image.height) != (intrinsics.width, intrinsics.height):
            raise ConfigurationError(
                f"frame {index}: image is {image.width}x{image.height}, "
                f"calibration expects {intrinsics.width}x{intrinsics.height}"
            )
        record = {
            "frame": index,
            "timestamp": timestamp,
            "keyframe_changed": False,
            "new_surfels": 0,
            "dropped_surfels": 0,
            "processed": 0,
            "skipped": 0,
            "converged_fraction": 0.0,
            "iterations": 0,
            "mean_cost_before": 0.0,
            "mean_cost_after": 0.0,
        }
        if keyframe is None:
            keyframe = _start_keyframe(config, image, pose, intrinsics, index)
            keyframe_index = index
            summary.keyframes += 1
            record["keyframe_changed"] = True
            record["new_surfels"] = len(keyframe.surfels)
            optimize_seconds = 0.0
        else:
            frame = Frame(
                image=image,
                pose_kf_to_frame=pose.inverse().compose(keyframe.pose),
                timestamp=timestamp,
                index=index,
            )
            try:
                keyframe.append_frame(frame)
            except ValueError as err:
                logger.warning("skipping frame %d: %s", index, err)
                continue
            keyframe.stamp = index

            optimize_started = time.perf_counter()
            stats = optimize_keyframe(keyframe, config.optimizer, config.threads)
            optimize_seconds = time.perf_counter() - optimize_started
            record.update(
                processed=stats.processed,
                skipped=stats.skipped,
                converged_fraction=stats.converged / max(1, stats.processed),
                iterations=stats.iterations,
                mean_cost_before=stats.mean_cost_before,
                mean_cost_after=stats.mean_cost_after,
            )

            mean_inv_depth = _mean_inv_depth(keyframe, config.init.bootstrap_inv_depth)
            if keyframe_change_due(
                frame.pose_kf_to_frame, mean_inv_depth, index - keyframe_index, policy
            ):
                keyframe, handover = change_reference_frame(
                    keyframe, frame.pose_kf_to_frame, image
                )
                # the new keyframe observes itself with zero parallax
                keyframe.window = [f for f in keyframe.window if f.index != index]
                keyframe.stamp = index
                pruned = prune_surfels(
                    keyframe, policy.prune_residual, policy.prune_age, index
                )
                fresh = initialize_surfels(
                    keyframe, rasterize(keyframe, config.threads), config.init
                )
                keyframe.add_surfels(fresh)
                keyframe_index = index
                summary.keyframes += 1
                record.update(
                    keyframe_changed=True,
                    new_surfels=len(fresh),
                    dropped_surfels=handover.dropped_behind
                    + handover.dropped_outside
                    + pruned,
                )

        summary.frames += 1
        buffers = rasterize(keyframe, config.threads)
        record["surfels"] = len(keyframe.surfels)
        record["coverage"] = float(np.mean(buffers.valid))
        metrics.append(record)
        timings.append(
            {
                "frame": index,
                "optimize_seconds": optimize_seconds,
                "total_seconds": time.perf_counter() - started,
            }
        )

        interval = config.export.export_interval
        if interval > 0 and (index + 1) % interval == 0:
            export_artifacts(
                keyframe, buffers, output_dir / "frames" / f"{index:06d}", config.export
            )

    if keyframe is None or buffers is None:
        logger.warning("no frames were processed")
        _write_jsonl(metrics, output_dir / "metrics.jsonl")
        _write_jsonl(timings, output_dir / "timings.jsonl")
        return summary

    written = export_artifacts(keyframe, buffers, output_dir, config.export)
    summary.artifacts = [str(path) for path in written]
    summary.surfels = len(keyframe.surfels)
    _write_jsonl(metrics, output_dir / "metrics.jsonl")
    _write_jsonl(timings, output_dir / "timings.jsonl")

    if scene is not None:
        _, gt_inv_depth, gt_normals = render(
            scene, keyframe.pose, intrinsics, threads=config.threads
        )
        summary.evaluation = evaluate_reconstruction(
            buffers, pixel_normals(keyframe, buffers), gt_inv_depth, gt_normals
        )
        with open(output_dir / "evaluation.json", "w", encoding="utf-8") as f:
            json.dump(asdict(summary.evaluation), f, indent=2, sort_keys=True)
            f.write("\n")

    logger.info(
        "processed %d frames, %d keyframes, %d surfels",
        summary.frames,
        summary.keyframes,
        summary.surfels,
    )
    return summary


def _write_jsonl(records: list[dict], path: Path) -> None:
    if not records:
        path.write_text("", encoding="utf-8")
        return
    pd.DataFrame(records).to_json(path, orient="records", lines=True)


@dataclass
class JacobianReport:
    """Largest relative errors of the analytic derivatives over all trials."""

    trials: int = 0
    tolerance: float = JACOBIAN_TOLERANCE
    max_depth_jacobian_error: float = 0.0
    max_cost_gradient_error: float = 0.0
    max_factoring_error: float = 0.0
    failed_trials: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failed_trials

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(numeric)), float(np.linalg.norm(analytic)))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric)) / scale


def _block_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst relative error of the normal block and the inverse-depth block."""
    return max(
        _relative_error(analytic[..., :3], numeric[..., :3]),
        _relative_error(analytic[..., 3:], numeric[..., 3:]),
    )


def _perturbed(surfel: Surfel, parameter: int, step: float) -> Surfel:
    if parameter == 3:
        return replace(surfel, inv_depth=surfel.inv_depth + step)
    normal = surfel.normal.copy()
    normal[parameter] += step
    return replace(surfel, normal=normal)


def _jacobian_trial(
    rng: np.random.Generator,
    intrinsics: CameraIntrinsics,
    config: OptimizerConfig,
    corrupt_normal_jacobian: float,
) -> tuple[float, float, float]:
    """One random scene, surfel and window; returns the three relative errors."""
    plane_normal = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), -1.0])
    depth = rng.uniform(1.5, 3.0)
    scene = PlaneScene(
        patches=[PlanePatch.from_normal((0.0, 0.0, depth), plane_normal, (50.0, 50.0))],
        texture=ProceduralTexture.random(int(rng.integers(0, 2**31))),
    )
    reference, gt_inv_depth, gt_normals = render(scene, Pose.identity(), intrinsics)
    keyframe = Keyframe(
        image=reference,
        pose=Pose.identity(),
        intrinsics=intrinsics,
        window_size=3,
        radius_px=6.0,
    )
    for index in range(3):
        world_from_frame = Pose.from_rotation_vector(
            rng.uniform(-0.01, 0.01, 3), rng.uniform(-0.05, 0.05, 3)
        )
        keyframe.append_frame(
            Frame(
                image=SceneView(scene, world_from_frame, intrinsics),
                pose_kf_to_frame=world_from_frame.inverse(),
                timestamp=float(index),
                index=index + 1,
            )
        )

    x = int(rng.integers(30, intrinsics.width - 30))
    y = int(rng.integers(30, intrinsics.height - 30))
    tilt = Pose.from_rotation_vector(rng.uniform(-0.15, 0.15, 3), np.zeros(3))
    surfel = Surfel.create(
        0,
        backproject_ray((x, y), intrinsics),
        gt_inv_depth[y, x] * rng.uniform(0.9, 1.1),
        tilt.rotate(gt_normals[y, x]),
        keyframe.radius_px,
    )
    keyframe.add_surfels([surfel])
    footprint = surfel_footprints(rasterize(keyframe))[surfel.id]
    corruption = np.array([1.0 + corrupt_normal_jacobian] * 3 + [1.0])

    # d id_u / d [n, id] at a few footprint pixels
    pixels = footprint[rng.choice(len(footprint), size=5, replace=False)]
    analytic_rows, numeric_rows = [], []
    for u in pixels:
        analytic_rows.append(jacobian_inverse_depth(surfel, u, intrinsics) * corruption)
        row = np.zeros(4)
        for parameter in range(4):
            step = 1e-6 * (surfel.inv_depth if parameter == 3 else 1.0)
            plus = plane_inverse_depth(
                _perturbed(surfel, parameter, step), u, intrinsics
            )
            minus = plane_inverse_depth(
                _perturbed(surfel, parameter, -step), u, intrinsics
            )
            row[parameter] = (plus - minus) / (2.0 * step)
        numeric_rows.append(row)
    depth_error = _block_error(np.array(analytic_rows), np.array(numeric_rows))

    # gradient of the full Huber cost
    _, gradient, _, _ = accumulate_normal_equations(surfel, keyframe, config, footprint)
    _, per_frame_gradient, _, _ = accumulate_normal_equations(
        surfel, keyframe, config, footprint, reuse_depth_jacobian=False
    )
    numeric = np.zeros(4)
    for parameter in range(4):
        step = 1e-6 * (surfel.inv_depth if parameter == 3 else 1.0)
        plus, _ = surfel_cost(
            _perturbed(surfel, parameter, step), keyframe, config, footprint
        )
        minus, _ = surfel_cost(
            _perturbed(surfel, parameter, -step), keyframe, config, footprint
        )
        numeric[parameter] = (plus - minus) / (2.0 * step)
    gradient_error = _block_error(gradient * corruption, numeric)
    factoring_error = _relative_error(gradient, per_frame_gradient)
    return depth_error, gradient_error, factoring_error


def check_jacobians(
    seed: int,
    trials: int,
    corrupt_normal_jacobian: float = 0.0,
    tolerance: float = JACOBIAN_TOLERANCE,
    intrinsics: CameraIntrinsics | None = None,
) -> JacobianReport:
    """
    Compare analytic derivatives with central finite differences.

    Each trial draws a textured plane, a perturbed surfel and three nearby
    frames rendered analytically, then checks d id_u / d [n, id] and the
    gradient of the Huber photometric cost, block by block (normal, inverse
    depth), against central differences.

    Parameters
    ----------
    seed : int
        Seed of the trial generator.
    trials : int
        Number of trials, at least 1.
    corrupt_normal_jacobian : float
        Relative scaling applied to the analytic normal block before the
        comparison; non-zero values exercise the gate's sensitivity.
    tolerance : float
        Largest accepted relative error.
    intrinsics : CameraIntrinsics | None
        Camera of the trials (160x120 preset by default).

    Returns
    -------
    JacobianReport
        Worst errors and the indices of failed trials.
    """
    if trials <= 0:
        raise ValueError(f"trials must be positive, got {trials}")
    camera = intrinsics if intrinsics is not None else preset_intrinsics(0.25)
    config = OptimizerConfig(min_valid_pixels=1)
    rng = np.random.default_rng(seed)
    report = JacobianReport(trials=trials, tolerance=tolerance)
    for trial in range(trials):
        depth_error, gradient_error, factoring_error = _jacobian_trial(
            rng, camera, config, corrupt_normal_jacobian
        )
        report.max_depth_jacobian_error = max(
            report.max_depth_jacobian_error, depth_error
        )
        report.max_cost_gradient_error = max(
            report.max_cost_gradient_error, gradient_error
        )
        report.max_factoring_error = max(report.max_factoring_error, factoring_error)
        errors = (depth_error, gradient_error, factoring_error)
        if not all(error <= tolerance for error in errors):
            report.failed_trials.append(trial)
    if report.failed_trials:
        logger.warning(
            "jacobian check failed in %d of %d trials",
            len(report.failed_trials),
            trials,
        )
    return report


def synth_bench(
    base: RunConfig,
    radii: Iterable[float] = DEFAULT_BENCH_RADII,
    output_csv: Path | None = None,
    progress: bool = False,
) -> pd.DataFrame:
    """
    Run the pipeline on a synthetic scene for every radius, with the normal
    Jacobian on and off, and tabulate the reconstruction metrics.

    Each cell writes its artifacts under `<output_dir>/r<radius>_<on|off>`.
    """
    if base.synthetic is None:
        raise ConfigurationError("synth-bench needs a synthetic scene")
    rows = []
    for radius in radii:
        for enabled in (True, False):
            label = f"r{radius:g}_{'on' if enabled else 'off'}"
            config = replace(
                base,
                radius_px=float(radius),
                output_dir=Path(base.output_dir) / label,
                optimizer=replace(base.optimizer, normal_jacobian_enabled=enabled),
                export=replace(base.export, export_ply=False, export_interval=0),
            )
            logger.info("bench cell %s", label)
            summary = run(config, progress=progress)
            evaluation = summary.evaluation
            assert evaluation is not None
            rows.append(
                {
                    "radius_px": float(radius),
                    "normals": "on" if enabled else "off",
                    **asdict(evaluation),
                    "surfels": summary.surfels,
                    "keyframes": summary.keyframes,
                }
            )
    table = pd.DataFrame(rows)
    if output_csv is not None:
        table.to_csv(output_csv, index=False, float_format="%.10g")
    return table

