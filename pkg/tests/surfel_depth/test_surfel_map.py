"""
Tests for surfel storage, rasterization, initialization, hand-over and pruning.
"""
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from surfel_depth.modules.configurations import InitParams
from surfel_depth.modules.core_geometry import (
    CameraIntrinsics,
    GrayImage,
    Pose,
    backproject_ray,
    backproject_rays,
    project_points,
)
from surfel_depth.modules.exceptions import BehindCameraError, DegeneratePlaneError
from surfel_depth.modules.photometric_optimizer import Frame
from surfel_depth.modules.surfel_map import (
    EMPTY,
    Keyframe,
    Surfel,
    change_reference_frame,
    initialize_surfels,
    pixel_normals,
    plane_inverse_depth,
    prune_surfels,
    rasterize,
    rasterize_brute_force,
    surfel_footprints,
)
from surfel_depth.modules.synthetic_oracle import (
    PlaneScene,
    ground_truth_surfels,
    render,
)


CENTERED = CameraIntrinsics(fx=60.0, fy=60.0, cx=32.0, cy=24.0, width=64, height=48)


def make_keyframe(intrinsics: CameraIntrinsics, radius_px: float = 10.0) -> Keyframe:
    image = GrayImage(np.full((intrinsics.height, intrinsics.width), 0.5))
    return Keyframe(
        image=image, pose=Pose.identity(), intrinsics=intrinsics, radius_px=radius_px
    )


def surfel_at(
    surfel_id: int,
    pixel: tuple[float, float],
    inv_depth: float,
    intrinsics: CameraIntrinsics,
    normal: tuple[float, float, float] = (0.0, 0.0, -1.0),
    radius_px: float = 10.0,
) -> Surfel:
    ray = backproject_ray(pixel, intrinsics)
    return Surfel.create(surfel_id, ray, inv_depth, normal, radius_px)


def ground_truth_keyframe(
    scene: PlaneScene, intrinsics: CameraIntrinsics, radius_px: float, spacing: int
) -> tuple[Keyframe, np.ndarray, np.ndarray]:
    """A keyframe at the origin holding exact surfels of the rendered scene."""
    image, inv_depth, normals = render(scene, Pose.identity(), intrinsics)
    keyframe = Keyframe(
        image=image, pose=Pose.identity(), intrinsics=intrinsics, radius_px=radius_px
    )
    keyframe.add_surfels(
        ground_truth_surfels(inv_depth, normals, intrinsics, radius_px, spacing)
    )
    return keyframe, inv_depth, normals


class TestSurfel:
    def test_create_orients_normal_towards_camera(
        self, tiny_camera: CameraIntrinsics
    ) -> None:
        surfel = surfel_at(0, (31.5, 23.5), 0.5, tiny_camera, normal=(0, 0, 2.0))
        assert_allclose(surfel.normal, [0.0, 0.0, -1.0])
        assert float(surfel.normal @ surfel.ray) < 0.0

    def test_position_and_center(self, tiny_camera: CameraIntrinsics) -> None:
        surfel = surfel_at(0, (40.0, 10.0), 0.25, tiny_camera)
        assert surfel.position[2] == pytest.approx(4.0)
        assert_allclose(surfel.center_pixel(tiny_camera), [40.0, 10.0])

    def test_rejects_non_positive_inverse_depth(self) -> None:
        with pytest.raises(ValueError):
            Surfel(0, np.array([0, 0, 1.0]), 0.0, np.array([0, 0, -1.0]), 5.0)


class TestKeyframe:
    def test_window_evicts_oldest(self, tiny_camera: CameraIntrinsics) -> None:
        keyframe = make_keyframe(tiny_camera)
        keyframe.window_size = 3
        for index in range(5):
            keyframe.append_frame(
                Frame(keyframe.image, Pose.identity(), 0.1 * index, index)
            )
        assert [f.index for f in keyframe.window] == [2, 3, 4]

    def test_window_rejects_non_increasing_timestamps(
        self, tiny_camera: CameraIntrinsics
    ) -> None:
        keyframe = make_keyframe(tiny_camera)
        keyframe.append_frame(Frame(keyframe.image, Pose.identity(), 1.0, 1))
        with pytest.raises(ValueError):
            keyframe.append_frame(Frame(keyframe.image, Pose.identity(), 1.0, 2))

    def test_surfel_ids_are_never_reused(self, tiny_camera: CameraIntrinsics) -> None:
        keyframe = make_keyframe(tiny_camera)
        keyframe.add_surfels([surfel_at(4, (10, 10), 0.5, tiny_camera)])
        assert keyframe.next_surfel_id == 5
        with pytest.raises(ValueError):
            keyframe.add_surfels([surfel_at(2, (20, 20), 0.5, tiny_camera)])


class TestPlaneInverseDepth:
    def test_fronto_parallel_is_constant(self, tiny_camera: CameraIntrinsics) -> None:
        surfel = surfel_at(0, (31.5, 23.5), 0.5, tiny_camera)
        for u in [(31.5, 23.5), (0.0, 0.0), (63.0, 47.0)]:
            assert plane_inverse_depth(surfel, u, tiny_camera) == pytest.approx(0.5)

    def test_center_pixel_returns_surfel_inverse_depth(
        self, tiny_camera: CameraIntrinsics
    ) -> None:
        surfel = surfel_at(0, (12.0, 30.0), 0.4, tiny_camera, normal=(0.3, -0.2, -1))
        center = surfel.center_pixel(tiny_camera)
        assert plane_inverse_depth(surfel, center, tiny_camera) == pytest.approx(0.4)

    def test_plane_through_camera_center(self, tiny_camera: CameraIntrinsics) -> None:
        surfel = Surfel(
            0, np.array([0.0, 0.0, 1.0]), 1.0, np.array([1.0, 0.0, 0.0]), 5.0
        )
        with pytest.raises(DegeneratePlaneError):
            plane_inverse_depth(surfel, (31.5, 23.5), tiny_camera)

    def test_plane_behind_camera(self, tiny_camera: CameraIntrinsics) -> None:
        normal = np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)
        surfel = Surfel(0, np.array([0.0, 0.0, 1.0]), 1.0, normal, 5.0)
        # inverse depth along the x axis is 1 - x, negative past x = 1
        with pytest.raises(BehindCameraError):
            plane_inverse_depth(surfel, (200.0, 23.5), tiny_camera)


class TestRasterize:
    def test_open_disk(self) -> None:
        keyframe = make_keyframe(CENTERED)
        keyframe.add_surfels([surfel_at(0, (32, 24), 0.5, CENTERED, radius_px=2)])
        buffers = rasterize(keyframe)
        assert int(buffers.valid.sum()) == 9
        assert buffers.surfel_index[24, 34] == EMPTY
        assert buffers.surfel_index[25, 33] == 0

    def test_radius_three_covers_25_pixels(self) -> None:
        keyframe = make_keyframe(CENTERED)
        keyframe.add_surfels([surfel_at(0, (32, 24), 0.5, CENTERED, radius_px=3)])
        buffers = rasterize(keyframe)
        assert int(buffers.valid.sum()) == 25
        assert_allclose(buffers.inv_depth[buffers.valid], 0.5)

    def test_nearer_surfel_wins(self, tiny_camera: CameraIntrinsics) -> None:
        keyframe = make_keyframe(tiny_camera)
        keyframe.add_surfels(
            [
                surfel_at(0, (32, 24), 0.5, tiny_camera, radius_px=4),
                surfel_at(1, (32, 24), 1.0, tiny_camera, radius_px=4),
            ]
        )
        buffers = rasterize(keyframe)
        assert set(np.unique(buffers.surfel_index[buffers.valid])) == {1}

    def test_tie_goes_to_lower_id(self, tiny_camera: CameraIntrinsics) -> None:
        keyframe = make_keyframe(tiny_camera)
        keyframe.add_surfels(
            [
                surfel_at(0, (30, 24), 0.5, tiny_camera, radius_px=4),
                surfel_at(1, (32, 24), 0.5, tiny_camera, radius_px=4),
            ]
        )
        buffers = rasterize(keyframe)
        assert buffers.surfel_index[24, 31] == 0
        assert buffers.surfel_index[24, 35] == 1

    def test_empty_keyframe(self, tiny_camera: CameraIntrinsics) -> None:
        buffers = rasterize(make_keyframe(tiny_camera))
        assert not buffers.valid.any()
        assert buffers.inv_depth.shape == (48, 64)

    def test_matches_brute_force(self, tiny_camera: CameraIntrinsics) -> None:
        rng = np.random.default_rng(7)
        keyframe = make_keyframe(tiny_camera)
        surfels = []
        for surfel_id in range(50):
            pixel = rng.uniform([-3, -3], [66, 50])
            normal = np.array([*rng.uniform(-0.6, 0.6, size=2), -1.0])
            surfels.append(
                surfel_at(
                    surfel_id,
                    tuple(pixel),
                    rng.uniform(0.2, 2.0),
                    tiny_camera,
                    normal=tuple(normal),
                    radius_px=rng.uniform(2.0, 9.0),
                )
            )
        keyframe.add_surfels(surfels)
        fast = rasterize(keyframe)
        slow = rasterize_brute_force(keyframe)
        assert_array_equal(fast.surfel_index, slow.surfel_index)
        assert_allclose(fast.inv_depth, slow.inv_depth, rtol=0, atol=1e-12)

    def test_thread_count_does_not_change_the_result(
        self, tiny_camera: CameraIntrinsics
    ) -> None:
        keyframe = make_keyframe(tiny_camera, radius_px=6.0)
        keyframe.add_surfels(
            initialize_surfels(keyframe, rasterize(keyframe), InitParams(beta=2.0))
        )
        single = rasterize(keyframe, threads=1)
        several = rasterize(keyframe, threads=3)
        assert_array_equal(single.surfel_index, several.surfel_index)
        assert_array_equal(single.inv_depth, several.inv_depth)

    def test_footprints_partition_valid_pixels(
        self, tiny_camera: CameraIntrinsics
    ) -> None:
        keyframe = make_keyframe(tiny_camera)
        keyframe.add_surfels(
            [
                surfel_at(0, (20, 20), 0.5, tiny_camera, radius_px=5),
                surfel_at(1, (24, 20), 0.8, tiny_camera, radius_px=5),
            ]
        )
        buffers = rasterize(keyframe)
        footprints = surfel_footprints(buffers)
        assert sum(len(p) for p in footprints.values()) == int(buffers.valid.sum())
        for surfel_id, pixels in footprints.items():
            xs, ys = pixels[:, 0].astype(int), pixels[:, 1].astype(int)
            assert np.all(buffers.surfel_index[ys, xs] == surfel_id)

    def test_pixel_normals(self, tiny_camera: CameraIntrinsics) -> None:
        keyframe = make_keyframe(tiny_camera)
        keyframe.add_surfels(
            [surfel_at(0, (20, 20), 0.5, tiny_camera, normal=(0.2, 0.0, -1.0))]
        )
        buffers = rasterize(keyframe)
        normals = pixel_normals(keyframe, buffers)
        assert_allclose(normals[20, 20], keyframe.surfels[0].normal)
        assert_array_equal(normals[0, 63], [0.0, 0.0, 0.0])


class TestInitializeSurfels:
    def test_bootstrap_on_empty_keyframe(self, tiny_camera: CameraIntrinsics) -> None:
        keyframe = make_keyframe(tiny_camera)
        created = initialize_surfels(keyframe, rasterize(keyframe), InitParams())
        assert created
        assert [s.id for s in created] == list(range(len(created)))
        assert_allclose(created[0].center_pixel(tiny_camera), [0.0, 0.0], atol=1e-9)
        for surfel in created:
            assert surfel.inv_depth == pytest.approx(1.0)
            assert_allclose(surfel.normal, [0.0, 0.0, -1.0])
        assert keyframe.surfels == []

    def test_centers_respect_isolation_distance(
        self, tiny_camera: CameraIntrinsics
    ) -> None:
        keyframe = make_keyframe(tiny_camera)
        created = initialize_surfels(keyframe, rasterize(keyframe), InitParams())
        centers = np.array([s.center_pixel(tiny_camera) for s in created])
        gaps = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        np.fill_diagonal(gaps, np.inf)
        assert gaps.min() > keyframe.radius_px

    def test_second_pass_adds_nothing(self, tiny_camera: CameraIntrinsics) -> None:
        keyframe = make_keyframe(tiny_camera)
        params = InitParams()
        keyframe.add_surfels(initialize_surfels(keyframe, rasterize(keyframe), params))
        assert initialize_surfels(keyframe, rasterize(keyframe), params) == []

    def test_respects_surfel_cap(self, tiny_camera: CameraIntrinsics) -> None:
        keyframe = make_keyframe(tiny_camera, radius_px=4.0)
        created = initialize_surfels(
            keyframe, rasterize(keyframe), InitParams(max_surfels=3)
        )
        assert len(created) == 3

    def test_inherits_plane_from_neighbor(self, tiny_camera: CameraIntrinsics) -> None:
        keyframe = make_keyframe(tiny_camera)
        existing = surfel_at(0, (9, 0), 0.5, tiny_camera, normal=(0.3, 0.0, -1.0))
        keyframe.add_surfels([existing])
        created = initialize_surfels(keyframe, rasterize(keyframe), InitParams())
        first = created[0]
        assert first.id == 1
        assert_allclose(first.center_pixel(tiny_camera), [30.0, 0.0], atol=1e-9)
        expected = plane_inverse_depth(existing, (30.0, 0.0), tiny_camera)
        assert first.inv_depth == pytest.approx(expected)
        assert_allclose(first.normal, existing.normal)

    def test_half_covered_plane_is_completed_exactly(
        self, small_camera: CameraIntrinsics, slanted_scene: PlaneScene
    ) -> None:
        keyframe, inv_depth, normals = ground_truth_keyframe(
            slanted_scene, small_camera, 8.0, 12
        )
        left = [s for s in keyframe.surfels if s.center_pixel(small_camera)[0] < 80]
        keyframe.surfels = left
        created = initialize_surfels(keyframe, rasterize(keyframe), InitParams())
        assert len(created) > 0
        for surfel in created:
            x, y = np.rint(surfel.center_pixel(small_camera)).astype(int)
            assert x > 80
            assert surfel.inv_depth == pytest.approx(inv_depth[y, x], abs=1e-9)
            assert_allclose(surfel.normal, normals[y, x], atol=1e-9)


class TestChangeReferenceFrame:
    def build(self, intrinsics: CameraIntrinsics) -> Keyframe:
        keyframe = make_keyframe(intrinsics)
        keyframe.add_surfels(
            [
                surfel_at(0, (20, 20), 0.5, intrinsics, normal=(0.2, 0.1, -1.0)),
                surfel_at(1, (40, 30), 0.25, intrinsics),
            ]
        )
        keyframe.append_frame(
            Frame(keyframe.image, Pose(np.eye(3), [0.1, 0.0, 0.0]), 1.0, 1)
        )
        return keyframe

    def test_identity_keeps_everything(self, tiny_camera: CameraIntrinsics) -> None:
        keyframe = self.build(tiny_camera)
        moved, stats = change_reference_frame(
            keyframe, Pose.identity(), keyframe.image
        )
        assert stats.kept == 2 and stats.dropped_behind == stats.dropped_outside == 0
        for before, after in zip(keyframe.surfels, moved.surfels):
            assert before.id == after.id
            assert_allclose(after.ray, before.ray)
            assert after.inv_depth == pytest.approx(before.inv_depth)

    def test_world_positions_are_preserved(
        self, tiny_camera: CameraIntrinsics
    ) -> None:
        keyframe = self.build(tiny_camera)
        pose = Pose.from_rotation_vector([0.02, -0.03, 0.01], [0.05, 0.02, -0.1])
        moved, _ = change_reference_frame(keyframe, pose, keyframe.image)
        for before, after in zip(keyframe.surfels, moved.surfels):
            assert_allclose(
                moved.pose.transform_points(after.position),
                keyframe.pose.transform_points(before.position),
                atol=1e-9,
            )
            assert_allclose(after.ray[2], 1.0)
            assert float(after.normal @ after.ray) < 0.0
        old_frame, new_frame = keyframe.window[0], moved.window[0]
        point = np.array([0.3, -0.1, 2.0])
        assert_allclose(
            new_frame.pose_kf_to_frame.transform_points(pose.transform_points(point)),
            old_frame.pose_kf_to_frame.transform_points(point),
            atol=1e-12,
        )

    def test_round_trip(self, tiny_camera: CameraIntrinsics) -> None:
        keyframe = self.build(tiny_camera)
        pose = Pose.from_rotation_vector([0.01, 0.02, 0.0], [0.03, 0.0, 0.05])
        there, _ = change_reference_frame(keyframe, pose, keyframe.image)
        back, _ = change_reference_frame(there, pose.inverse(), keyframe.image)
        for before, after in zip(keyframe.surfels, back.surfels):
            assert after.inv_depth == pytest.approx(before.inv_depth, rel=1e-9)
            assert_allclose(after.normal, before.normal, atol=1e-9)

    def test_depth_map_matches_the_warped_depth_map(
        self, small_camera: CameraIntrinsics, slanted_scene: PlaneScene
    ) -> None:
        keyframe, _, _ = ground_truth_keyframe(slanted_scene, small_camera, 8.0, 10)
        before = rasterize(keyframe)
        pose = Pose.from_rotation_vector([0.01, -0.02, 0.005], [0.04, -0.02, 0.03])
        moved, _ = change_reference_frame(keyframe, pose, keyframe.image)
        after = rasterize(moved)
        old = keyframe.surfel_by_id()

        ys, xs = np.nonzero(after.valid)
        rays = backproject_rays(np.stack([xs, ys], axis=1), small_camera)
        points = pose.inverse().transform_points(
            rays / after.inv_depth[ys, xs][:, None]
        )
        pixels, in_front = project_points(points, small_camera)
        covisible = in_front & small_camera.contains(pixels)
        warped, expected = [], []
        for k in np.flatnonzero(covisible):
            x, y = np.rint(pixels[k]).astype(int)
            owner = int(before.surfel_index[y, x])
            if owner == EMPTY:
                continue
            warped.append(1.0 / points[k, 2])
            expected.append(plane_inverse_depth(old[owner], pixels[k], small_camera))
        assert len(warped) > 0.8 * len(xs)
        assert_allclose(warped, expected, atol=1e-4)

    def test_drops_surfels_behind(self, tiny_camera: CameraIntrinsics) -> None:
        keyframe = self.build(tiny_camera)
        # surfel 0 sits at depth 2, surfel 1 at depth 4
        moved, stats = change_reference_frame(
            keyframe, Pose(np.eye(3), [0.0, 0.0, -3.0]), keyframe.image
        )
        assert stats.dropped_behind == 1
        assert [s.id for s in moved.surfels] == [1]
        assert moved.next_surfel_id == keyframe.next_surfel_id

    def test_drops_surfels_outside(self, tiny_camera: CameraIntrinsics) -> None:
        keyframe = self.build(tiny_camera)
        moved, stats = change_reference_frame(
            keyframe, Pose(np.eye(3), [10.0, 0.0, 0.0]), keyframe.image
        )
        assert stats.dropped_outside == 2
        assert moved.surfels == []


class TestPruneSurfels:
    def test_residual_and_age(self, tiny_camera: CameraIntrinsics) -> None:
        keyframe = make_keyframe(tiny_camera)
        surfels = [surfel_at(i, (10 + 10 * i, 20), 0.5, tiny_camera) for i in range(3)]
        surfels[0].last_residual = 0.5
        surfels[1].last_seen = 2
        surfels[2].last_seen = 30
        keyframe.add_surfels(surfels)
        removed = prune_surfels(keyframe, max_residual=0.1, max_age=20, now=30)
        assert removed == 2
        assert [s.id for s in keyframe.surfels] == [2]
