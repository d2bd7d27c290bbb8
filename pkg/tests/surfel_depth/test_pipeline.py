"""
Tests for the run loop, artifact export, the Jacobian gate and the benchmark.

Runs use the 160x120 preset and a handful of frames.
"""
import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_array_equal

from surfel_depth.modules.configurations import (
    DatasetManifest,
    ExportConfig,
    KeyframePolicy,
    RunConfig,
    SceneSpec,
)
from surfel_depth.modules.core_geometry import Pose
from surfel_depth.modules.dataset_io import (
    read_depth_pfm,
    read_surfel_map,
    write_synthetic_sequence,
)
from surfel_depth.modules.exceptions import ConfigurationError
from surfel_depth.modules.pipeline import (
    check_jacobians,
    keyframe_change_due,
    run,
    synth_bench,
)
from surfel_depth.modules.synthetic_oracle import (
    make_scene,
    make_trajectory,
    preset_intrinsics,
)

SMALL = preset_intrinsics(0.25)


def synthetic_config(
    output_dir: Path, scene: str = "fronto", frames: int = 6, **overrides: object
) -> RunConfig:
    config = RunConfig(
        output_dir=output_dir,
        synthetic=SceneSpec(scene=scene, motion="strafe", frames=frames, scale=0.25),
    )
    for name, value in overrides.items():
        setattr(config, name, value)
    return config


class TestKeyframeChange:
    policy = KeyframePolicy(translation_threshold=0.15, max_window_age=20)

    def test_relative_baseline(self) -> None:
        moved = Pose(np.eye(3), [0.1, 0.0, 0.0])
        assert keyframe_change_due(moved, 2.0, 3, self.policy)
        assert not keyframe_change_due(moved, 1.0, 3, self.policy)

    def test_age(self) -> None:
        assert keyframe_change_due(Pose.identity(), 0.5, 21, self.policy)
        assert not keyframe_change_due(Pose.identity(), 0.5, 20, self.policy)


class TestRun:
    def test_synthetic_run_writes_artifacts(self, tmp_path: Path) -> None:
        summary = run(synthetic_config(tmp_path), progress=False)
        assert summary.frames == 6
        assert summary.keyframes >= 1
        assert summary.surfels > 0
        for name in (
            "depth.pfm",
            "depth.png",
            "depth.txt",
            "normals.png",
            "cloud.ply",
            "surfels.txt",
            "metrics.jsonl",
            "timings.jsonl",
            "evaluation.json",
        ):
            assert (tmp_path / name).is_file(), name

        metrics = pd.read_json(tmp_path / "metrics.jsonl", lines=True)
        assert list(metrics["frame"]) == list(range(6))
        assert bool(metrics["keyframe_changed"].iloc[0])
        assert metrics["processed"].iloc[1:].sum() > 0

        evaluation = json.loads((tmp_path / "evaluation.json").read_text())
        assert evaluation["coverage"] > 0.5
        assert summary.evaluation is not None
        assert summary.evaluation.overlap_pixels > 0

        depth = read_depth_pfm(tmp_path / "depth.pfm")
        assert depth.shape == (120, 160)
        _, _, surfels = read_surfel_map(tmp_path / "surfels.txt")
        assert len(surfels) == summary.surfels

    def test_metrics_are_deterministic(self, tmp_path: Path) -> None:
        run(synthetic_config(tmp_path / "a", scene="slanted"), progress=False)
        run(synthetic_config(tmp_path / "b", scene="slanted"), progress=False)
        first = (tmp_path / "a" / "metrics.jsonl").read_bytes()
        assert first == (tmp_path / "b" / "metrics.jsonl").read_bytes()

    def test_thread_count_does_not_change_the_depth(self, tmp_path: Path) -> None:
        run(synthetic_config(tmp_path / "one", threads=1), progress=False)
        run(synthetic_config(tmp_path / "two", threads=2), progress=False)
        assert_array_equal(
            read_depth_pfm(tmp_path / "one" / "depth.pfm"),
            read_depth_pfm(tmp_path / "two" / "depth.pfm"),
        )

    def test_keyframe_changes_hand_over_surfels(self, tmp_path: Path) -> None:
        config = synthetic_config(
            tmp_path,
            frames=8,
            keyframe_policy=KeyframePolicy(max_window_age=2),
        )
        summary = run(config, progress=False)
        metrics = pd.read_json(tmp_path / "metrics.jsonl", lines=True)
        assert summary.keyframes == int(metrics["keyframe_changed"].sum())
        assert summary.keyframes >= 3
        assert (metrics["surfels"] > 0).all()

    def test_periodic_export(self, tmp_path: Path) -> None:
        config = synthetic_config(
            tmp_path, export=ExportConfig(export_interval=3, export_ply=False)
        )
        summary = run(config, progress=False)
        assert (tmp_path / "frames" / "000002" / "depth.pfm").is_file()
        assert (tmp_path / "frames" / "000005" / "normals.png").is_file()
        assert not (tmp_path / "cloud.ply").exists()
        assert not any(path.endswith(".ply") for path in summary.artifacts)

    def test_dataset_run(self, tmp_path: Path) -> None:
        manifest = write_synthetic_sequence(
            make_scene("fronto"),
            make_trajectory("strafe", 4),
            SMALL,
            tmp_path / "dataset",
        )
        config = RunConfig(output_dir=tmp_path / "out", dataset=manifest)
        summary = run(config, progress=False)
        assert summary.frames == 4
        assert summary.evaluation is None
        assert not (tmp_path / "out" / "evaluation.json").exists()

    def test_image_size_must_match_calibration(self, tmp_path: Path) -> None:
        manifest = write_synthetic_sequence(
            make_scene("fronto"),
            make_trajectory("strafe", 2),
            SMALL,
            tmp_path / "dataset",
        )
        (tmp_path / "dataset" / "calib.txt").write_text(
            "65.625 65.625 39.9375 29.9375 80 60\n"
        )
        config = RunConfig(output_dir=tmp_path / "out", dataset=manifest)
        with pytest.raises(ConfigurationError):
            run(config, progress=False)


class TestJacobianGate:
    def test_passes(self) -> None:
        report = check_jacobians(seed=0, trials=3)
        assert report.passed, report.to_dict()
        assert report.max_depth_jacobian_error < 1e-4
        assert report.max_cost_gradient_error < 1e-4
        assert report.max_factoring_error < 1e-9

    def test_detects_a_corrupted_normal_block(self) -> None:
        report = check_jacobians(seed=0, trials=2, corrupt_normal_jacobian=0.01)
        assert not report.passed
        assert report.failed_trials == [0, 1]
        assert report.to_dict()["passed"] is False

    def test_needs_a_trial(self) -> None:
        with pytest.raises(ValueError):
            check_jacobians(seed=0, trials=0)


class TestSynthBench:
    def test_table(self, tmp_path: Path) -> None:
        base = synthetic_config(tmp_path, scene="slanted", frames=4)
        csv_path = tmp_path / "bench.csv"
        table = synth_bench(base, radii=(6.0,), output_csv=csv_path)
        assert list(table["normals"]) == ["on", "off"]
        assert set(table.columns) >= {
            "radius_px",
            "inv_depth_rmse",
            "mean_normal_error_deg",
            "coverage",
            "surfels",
        }
        assert (tmp_path / "r6_on" / "depth.pfm").is_file()
        assert (tmp_path / "r6_off" / "depth.pfm").is_file()
        assert len(pd.read_csv(csv_path)) == 2

    def test_frozen_normals_keep_the_bootstrap_orientation(
        self, tmp_path: Path
    ) -> None:
        base = synthetic_config(tmp_path, scene="slanted", frames=10)
        table = synth_bench(base, radii=(10.0,)).set_index("normals")
        # strafing keeps the rotation fixed, so fronto-parallel normals stay put
        assert table.loc["off", "mean_normal_error_deg"] == pytest.approx(30.0)
        assert (
            table.loc["on", "mean_normal_error_deg"]
            < table.loc["off", "mean_normal_error_deg"]
        )
        assert (
            table.loc["on", "mean_relative_depth_error"]
            < table.loc["off", "mean_relative_depth_error"]
        )

    def test_normal_optimization_reaches_five_percent_depth_error(
        self, tmp_path: Path
    ) -> None:
        base = synthetic_config(tmp_path, scene="corner", frames=30)
        table = synth_bench(base, radii=(12.0,)).set_index("normals")
        assert table.loc["on", "mean_relative_depth_error"] < 0.05
        assert table.loc["off", "mean_relative_depth_error"] > 0.05

    def test_needs_a_synthetic_scene(self, tmp_path: Path) -> None:
        manifest = DatasetManifest(tmp_path, tmp_path / "c.txt", tmp_path / "t.txt")
        base = RunConfig(output_dir=tmp_path, dataset=manifest)
        with pytest.raises(ConfigurationError):
            synth_bench(base)
