"""
Shared fixtures for the surfel depth tests: a 160x120 camera, seeded planar
scenes and keyframes observed through analytically rendered frames.
"""
import os
import sys
from typing import Callable

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), "../../"))
# pylint: disable=wrong-import-position
# pylint: disable=import-error
from surfel_depth.modules.core_geometry import CameraIntrinsics, Pose
from surfel_depth.modules.photometric_optimizer import Frame
from surfel_depth.modules.surfel_map import Keyframe
from surfel_depth.modules.synthetic_oracle import (
    PlaneScene,
    SceneView,
    preset_intrinsics,
    render,
    single_plane_scene,
)

KeyframeFactory = Callable[..., Keyframe]


@pytest.fixture
def small_camera() -> CameraIntrinsics:
    """The 640x480 preset scaled to 160x120."""
    return preset_intrinsics(0.25)


@pytest.fixture
def tiny_camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=60.0, fy=60.0, cx=31.5, cy=23.5, width=64, height=48)


@pytest.fixture
def fronto_scene() -> PlaneScene:
    return single_plane_scene(depth=2.0, tilt_deg=0.0, seed=3)


@pytest.fixture
def slanted_scene() -> PlaneScene:
    return single_plane_scene(depth=2.0, tilt_deg=30.0, seed=5)


@pytest.fixture
def analytic_keyframe() -> KeyframeFactory:
    """
    Build a keyframe at the world origin whose window holds frames rendered
    analytically at the given camera centers (identity rotation).
    """

    def build(
        scene: PlaneScene,
        intrinsics: CameraIntrinsics,
        centers: list[tuple[float, float, float]],
        radius_px: float = 10.0,
    ) -> Keyframe:
        reference, _, _ = render(scene, Pose.identity(), intrinsics)
        keyframe = Keyframe(
            image=reference,
            pose=Pose.identity(),
            intrinsics=intrinsics,
            window_size=max(1, len(centers)),
            radius_px=radius_px,
        )
        for index, center in enumerate(centers):
            world_from_frame = Pose(np.eye(3), center)
            keyframe.append_frame(
                Frame(
                    image=SceneView(scene, world_from_frame, intrinsics),
                    pose_kf_to_frame=world_from_frame.inverse(),
                    timestamp=float(index + 1),
                    index=index + 1,
                )
            )
        return keyframe

    return build
