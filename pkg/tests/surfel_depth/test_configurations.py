"""
Tests for configuration data classes and key = value config files.
"""
import os
from pathlib import Path

import pytest

from surfel_depth.modules.configurations import (
    THREADS_ENV_VAR,
    OptimizerConfig,
    RunConfig,
    SceneSpec,
    build_run_config,
    load_config_file,
    threads_from_env,
)
from surfel_depth.modules.exceptions import ConfigurationError

EXAMPLE_CONFIG = os.path.join(
    os.path.dirname(__file__), "../../config/synthetic_corner.conf"
)


def test_defaults_are_valid() -> None:
    config = RunConfig(synthetic=SceneSpec())
    config.validate()
    assert config.optimizer.huber_delta == 0.035
    assert config.init.alpha == 1.0 and config.init.beta == 2.5
    assert config.keyframe_policy.translation_threshold == 0.15


def test_example_config_file() -> None:
    config = build_run_config(load_config_file(EXAMPLE_CONFIG))
    assert config.synthetic is not None
    assert config.synthetic.scene == "corner"
    assert config.synthetic.scale == 0.5
    assert config.output_dir == Path("output/corner_strafe")
    assert config.export.export_interval == 20
    assert config.dataset is None


def test_keys_are_normalized_and_coerced(tmp_path: Path) -> None:
    path = tmp_path / "run.conf"
    path.write_text(
        "# slanted ablation\n"
        "SCENE=slanted\n"
        "radius-px=6\n"
        "Huber_Delta=0.05\n"
        "NORMAL_JACOBIAN_ENABLED=false\n"
        "PRUNE_RESIDUAL=0.2\n"
    )
    config = build_run_config(load_config_file(path))
    assert config.radius_px == 6.0
    assert config.optimizer.huber_delta == 0.05
    assert config.optimizer.normal_jacobian_enabled is False
    assert config.keyframe_policy.prune_residual == 0.2
    assert config.synthetic == SceneSpec(scene="slanted")


def test_flags_override_file_values(tmp_path: Path) -> None:
    path = tmp_path / "run.conf"
    path.write_text("SCENE=fronto\nSEED=3\n")
    settings: dict[str, object] = {**load_config_file(path), "seed": 9, "frames": 5}
    config = build_run_config(settings)
    assert config.seed == 9
    assert config.synthetic is not None and config.synthetic.frames == 5


def test_dataset_keys(tmp_path: Path) -> None:
    config = build_run_config(
        {
            "image_dir": tmp_path / "images",
            "calibration": str(tmp_path / "calib.txt"),
            "trajectory": str(tmp_path / "groundtruth.txt"),
        }
    )
    assert config.dataset is not None
    assert config.dataset.calibration == tmp_path / "calib.txt"
    assert config.dataset.association_tolerance == 0.01


@pytest.mark.parametrize(
    "settings",
    [
        {"scene": "fronto", "colour": "blue"},
        {},
        {"scene": "fronto", "image_dir": "a", "calibration": "b", "trajectory": "c"},
        {"image_dir": "a", "calibration": "b"},
        {"scene": "fronto", "radius_px": "1.5"},
        {"scene": "fronto", "normal_jacobian_enabled": "maybe"},
        {"scene": "fronto", "max_iterations": "ten"},
        {"scene": "fronto", "lm_down": "1.5"},
        {"scene": "fronto", "export_interval": "-1"},
    ],
)
def test_invalid_settings(settings: dict) -> None:
    with pytest.raises(ConfigurationError):
        build_run_config(settings)


def test_missing_config_file(tmp_path: Path) -> None:
    with pytest.raises(ConfigurationError):
        load_config_file(tmp_path / "absent.conf")


def test_optimizer_validation() -> None:
    OptimizerConfig().validate()
    with pytest.raises(ConfigurationError):
        OptimizerConfig(lm_up=1.0).validate()
    with pytest.raises(ConfigurationError):
        OptimizerConfig(min_inv_depth=1.0, max_inv_depth=0.5).validate()


class TestThreadsFromEnv:
    def test_default(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.delenv(THREADS_ENV_VAR, raising=False)
        assert threads_from_env() == 1

    def test_value(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setenv(THREADS_ENV_VAR, "4")
        assert threads_from_env() == 4

    @pytest.mark.parametrize("raw", ["0", "-2", "many"])
    def test_invalid(self, monkeypatch: pytest.MonkeyPatch, raw: str) -> None:
        monkeypatch.setenv(THREADS_ENV_VAR, raw)
        with pytest.raises(ConfigurationError):
            threads_from_env()
