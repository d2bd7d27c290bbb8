"""
This module generates ground truth: textured piecewise-planar scenes, camera
trajectories through them, and renders with exact inverse depth and normals
at every pixel.

Scenes are textured by a smooth procedural field with an analytic gradient,
so a `SceneView` can be sampled at any sub-pixel coordinate with exact image
gradients.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from .configurations import SceneSpec
from .core_geometry import (
    BoolArray,
    CameraIntrinsics,
    FloatArray,
    GrayImage,
    Pose,
    backproject_rays,
)
from .exceptions import ConfigurationError, EmptyOverlapError
from .parallel import chunked, parallel_map
from .surfel_map import RasterBuffers, Surfel

logger = logging.getLogger(__name__)

BACKGROUND_INTENSITY = 0.5
MIN_HIT_DEPTH = 1e-9

# 640x480 pinhole camera of the desk-scale presets
DEFAULT_INTRINSICS = CameraIntrinsics(
    fx=525.0, fy=525.0, cx=319.5, cy=239.5, width=640, height=480
)


@dataclass
class ProceduralTexture:
    """Sum of plane waves in patch coordinates; values stay inside [0.05, 0.95]."""

    frequencies: FloatArray
    phases: FloatArray
    amplitudes: FloatArray

    @classmethod
    def random(
        cls,
        seed: int,
        waves: int = 6,
        min_frequency: float = 2.0,
        max_frequency: float = 7.0,
    ) -> "ProceduralTexture":
        rng = np.random.default_rng(seed)
        angles = rng.uniform(0.0, math.pi, waves)
        magnitudes = rng.uniform(min_frequency, max_frequency, waves)
        frequencies = np.stack(
            [magnitudes * np.cos(angles), magnitudes * np.sin(angles)], axis=1
        )
        weights = rng.uniform(0.5, 1.0, waves)
        return cls(
            frequencies=frequencies,
            phases=rng.uniform(0.0, 2.0 * math.pi, waves),
            amplitudes=0.45 * weights / weights.sum(),
        )

    def evaluate(self, coords: FloatArray) -> tuple[FloatArray, FloatArray]:
        """Texture values (N,) and gradients (N, 2) at plane coordinates (N, 2)."""
        arg = 2.0 * math.pi * coords @ self.frequencies.T + self.phases
        values = 0.5 + np.sin(arg) @ self.amplitudes
        gradient = (np.cos(arg) * self.amplitudes) @ (2.0 * math.pi * self.frequencies)
        return values, gradient


@dataclass
class PlanePatch:
    """Rectangle [a_min, a_max] x [b_min, b_max] on a plane, in basis (e1, e2)."""

    point: FloatArray
    normal: FloatArray
    basis_u: FloatArray
    basis_v: FloatArray
    bounds: tuple[float, float, float, float]
    texture_offset: FloatArray = field(default_factory=lambda: np.zeros(2))

    @classmethod
    def from_normal(
        cls,
        point: ArrayLike,
        normal: ArrayLike,
        half_extent: tuple[float, float],
        texture_offset: ArrayLike = (0.0, 0.0),
    ) -> "PlanePatch":
        n = np.asarray(normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        helper = np.array([0.0, 1.0, 0.0])
        if abs(n[1]) >= 0.9:
            helper = np.array([1.0, 0.0, 0.0])
        e1 = np.cross(helper, n)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return cls(
            point=np.asarray(point, dtype=np.float64),
            normal=n,
            basis_u=e1,
            basis_v=e2,
            bounds=(-half_extent[0], half_extent[0], -half_extent[1], half_extent[1]),
            texture_offset=np.asarray(texture_offset, dtype=np.float64),
        )


@dataclass
class PlaneScene:
    """Textured planar patches in world coordinates."""

    patches: list[PlanePatch]
    texture: ProceduralTexture


@dataclass
class Trajectory:
    """Timestamps with world-from-camera poses, strictly increasing in time."""

    timestamps: list[float]
    poses: list[Pose]

    def __post_init__(self) -> None:
        if len(self.timestamps) != len(self.poses):
            raise ValueError("trajectory needs one pose per timestamp")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError("trajectory timestamps must increase strictly")

    def __len__(self) -> int:
        return len(self.timestamps)


@dataclass
class _Hits:
    depth: FloatArray
    patch: np.ndarray
    coords: FloatArray


def _intersect_all(
    scene: PlaneScene, origin: FloatArray, directions: FloatArray
) -> _Hits:
    """Nearest positive hit of each direction (N, 3); patch -1 marks a miss."""
    count = len(directions)
    best = np.full(count, np.inf)
    patch_index = np.full(count, -1, dtype=np.int64)
    coords = np.zeros((count, 2))
    for index, patch in enumerate(scene.patches):
        facing = directions @ patch.normal
        distance = float(patch.normal @ (patch.point - origin))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(facing != 0.0, distance / facing, np.inf)
        hit = np.asarray(np.isfinite(t) & (t > MIN_HIT_DEPTH))
        offset = origin[None, :] + t[:, None] * directions - patch.point[None, :]
        a = offset @ patch.basis_u
        b = offset @ patch.basis_v
        a_min, a_max, b_min, b_max = patch.bounds
        hit &= (a >= a_min) & (a <= a_max) & (b >= b_min) & (b <= b_max)
        closer = hit & (t < best)
        best[closer] = t[closer]
        patch_index[closer] = index
        coords[closer, 0] = a[closer]
        coords[closer, 1] = b[closer]
    best[patch_index < 0] = np.inf
    return _Hits(best, patch_index, coords)


def intersect(
    scene: PlaneScene, origin: ArrayLike, direction: ArrayLike
) -> tuple[float, int, FloatArray] | None:
    """
    Nearest patch hit along a ray, as (t, patch index, unit normal).

    t is the ray parameter, the depth when `direction` has unit z in the
    camera. Returns None on a miss.
    """
    d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    if not np.linalg.norm(d) > 0.0:
        raise ValueError("ray direction must be non-zero")
    hits = _intersect_all(scene, np.asarray(origin, dtype=np.float64), d)
    if hits.patch[0] < 0:
        return None
    index = int(hits.patch[0])
    return float(hits.depth[0]), index, scene.patches[index].normal.copy()


def intersect_plane_bisection(
    point: ArrayLike,
    normal: ArrayLike,
    origin: ArrayLike,
    direction: ArrayLike,
    t_max: float = 1e3,
    tolerance: float = 1e-10,
) -> float | None:
    """Ray parameter where a ray crosses a plane, found by marching and bisection."""
    p0 = np.asarray(point, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)

    def side(t: float) -> float:
        return float(n @ (o + t * d - p0))

    lower, step = 0.0, 1e-2
    while lower < t_max:
        upper = lower + step
        if side(lower) == 0.0:
            return lower
        if side(lower) * side(upper) <= 0.0:
            while upper - lower > tolerance:
                middle = 0.5 * (lower + upper)
                if side(lower) * side(middle) <= 0.0:
                    upper = middle
                else:
                    lower = middle
            return 0.5 * (lower + upper)
        lower, step = upper, step * 1.05
    return None


class SceneView:
    """
    The scene seen from a camera pose, sampled analytically.

    Intensities come straight from the texture at the ray's hit point and
    gradients from differentiating that hit point wrt the pixel coordinate.
    Misses and coordinates outside [1, width - 2] x [1, height - 2] are
    invalid, the same margin a bilinear image needs.
    """

    def __init__(
        self, scene: PlaneScene, pose: Pose, intrinsics: CameraIntrinsics
    ) -> None:
        self.scene = scene
        self.pose = pose
        self.intrinsics = intrinsics

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def shade(
        self, u: FloatArray
    ) -> tuple[FloatArray, FloatArray, BoolArray, FloatArray, np.ndarray]:
        """Intensity, gradient, hit mask, camera depth and patch index at u (N, 2)."""
        uv = np.asarray(u, dtype=np.float64).reshape(-1, 2)
        k = self.intrinsics
        rotation = self.pose.rotation
        directions = self.pose.rotate(backproject_rays(uv, k))
        origin = self.pose.translation
        hits = _intersect_all(self.scene, origin, directions)
        hit = np.asarray(hits.patch >= 0)

        values = np.full(len(uv), BACKGROUND_INTENSITY)
        gradients = np.zeros((len(uv), 2))
        for index, patch in enumerate(self.scene.patches):
            mine = hits.patch == index
            if not np.any(mine):
                continue
            texture_values, texture_gradient = self.scene.texture.evaluate(
                hits.coords[mine] + patch.texture_offset
            )
            values[mine] = texture_values
            d = directions[mine]
            t = hits.depth[mine]
            facing = d @ patch.normal
            for axis, focal in ((0, k.fx), (1, k.fy)):
                d_direction = rotation[:, axis] / focal
                d_t = -t * float(patch.normal @ d_direction) / facing
                d_point = d_t[:, None] * d + t[:, None] * d_direction[None, :]
                gradients[mine, axis] = (
                    texture_gradient[:, 0] * (d_point @ patch.basis_u)
                    + texture_gradient[:, 1] * (d_point @ patch.basis_v)
                )
        return values, gradients, hit, hits.depth, hits.patch

    def sample(self, u: FloatArray) -> tuple[FloatArray, FloatArray, BoolArray]:
        uv = np.asarray(u, dtype=np.float64).reshape(-1, 2)
        values, gradients, hit, _, _ = self.shade(uv)
        inside = (
            np.isfinite(uv[:, 0])
            & np.isfinite(uv[:, 1])
            & (uv[:, 0] >= 1.0)
            & (uv[:, 0] <= self.width - 2.0)
            & (uv[:, 1] >= 1.0)
            & (uv[:, 1] <= self.height - 2.0)
        )
        return values, gradients, np.asarray(hit & inside)


def render(
    scene: PlaneScene,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    noise_sigma: float = 0.0,
    seed: int = 0,
    threads: int = 1,
) -> tuple[GrayImage, FloatArray, FloatArray]:
    """
    Render the scene from a world-from-camera pose.

    Returns
    -------
    tuple[GrayImage, FloatArray, FloatArray]
        The image, the ground-truth inverse depth (H, W) with 0 where no patch
        is hit, and camera-frame unit normals (H, W, 3) facing the camera
        (zero where no patch is hit).
    """
    view = SceneView(scene, pose, intrinsics)
    width, height = intrinsics.width, intrinsics.height

    def render_rows(rows: range) -> tuple[FloatArray, FloatArray, np.ndarray]:
        ys, xs = np.mgrid[rows.start : rows.stop, 0:width]
        uv = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        values, _, _, depth, patch = view.shade(uv)
        return values, depth, patch

    parts = parallel_map(render_rows, chunked(height, max(1, threads) * 4), threads)
    values = np.concatenate([p[0] for p in parts]).reshape(height, width)
    depth = np.concatenate([p[1] for p in parts]).reshape(height, width)
    patch = np.concatenate([p[2] for p in parts]).reshape(height, width)
    hit = patch >= 0

    inv_depth = np.zeros((height, width))
    inv_depth[hit] = 1.0 / depth[hit]

    normals = np.zeros((height, width, 3))
    world_normals = np.array([p.normal for p in scene.patches]).reshape(-1, 3)
    if np.any(hit):
        camera_normals = pose.inverse().rotate(world_normals)
        normals[hit] = camera_normals[patch[hit]]
        ys, xs = np.nonzero(hit)
        rays = backproject_rays(np.stack([xs, ys], axis=1), intrinsics)
        flip = np.sum(normals[hit] * rays, axis=1) > 0.0
        normals[ys[flip], xs[flip]] *= -1.0

    if noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        values = values + rng.normal(0.0, noise_sigma, values.shape)
    return GrayImage(np.clip(values, 0.0, 1.0)), inv_depth, normals


def ground_truth_surfels(
    gt_inv_depth: FloatArray,
    gt_normals: FloatArray,
    intrinsics: CameraIntrinsics,
    radius_px: float,
    spacing: int,
    first_id: int = 0,
) -> list[Surfel]:
    """Surfels on a pixel grid carrying the exact rendered depth and normal."""
    surfels: list[Surfel] = []
    offset = spacing // 2
    for y in range(offset, intrinsics.height, spacing):
        for x in range(offset, intrinsics.width, spacing):
            if gt_inv_depth[y, x] <= 0.0:
                continue
            ray = backproject_rays(np.array([x, y], dtype=np.float64), intrinsics)
            surfels.append(
                Surfel.create(
                    first_id + len(surfels),
                    ray,
                    float(gt_inv_depth[y, x]),
                    gt_normals[y, x],
                    radius_px,
                )
            )
    return surfels


@dataclass
class ReconstructionMetrics:
    """Depth and normal accuracy of an estimate against ground truth."""

    inv_depth_rmse: float
    mean_relative_depth_error: float
    mean_normal_error_deg: float
    coverage: float
    overlap_pixels: int


def evaluate_inverse_depth(
    estimated: FloatArray,
    ground_truth: FloatArray,
    estimated_normals: FloatArray | None = None,
    ground_truth_normals: FloatArray | None = None,
) -> ReconstructionMetrics:
    """
    Compare inverse-depth maps (0 marks invalid) and optionally normal maps.

    Raises
    ------
    EmptyOverlapError
        If no pixel is valid in both maps.
    """
    est = np.asarray(estimated, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {gt.shape}")
    both = (est > 0.0) & (gt > 0.0) & np.isfinite(est) & np.isfinite(gt)
    overlap = int(both.sum())
    if overlap == 0:
        raise EmptyOverlapError("estimate and ground truth share no valid pixel")

    rmse = float(np.sqrt(np.mean((est[both] - gt[both]) ** 2)))
    relative = float(np.mean(np.abs(gt[both] / est[both] - 1.0)))
    normal_error = float("nan")
    if estimated_normals is not None and ground_truth_normals is not None:
        cosine = np.sum(estimated_normals[both] * ground_truth_normals[both], axis=1)
        normal_error = float(np.degrees(np.mean(np.arccos(np.clip(cosine, -1.0, 1.0)))))
    coverage = float(np.mean((est > 0.0) & np.isfinite(est)))
    return ReconstructionMetrics(rmse, relative, normal_error, coverage, overlap)


def evaluate_reconstruction(
    buffers: RasterBuffers,
    normals: FloatArray,
    gt_inv_depth: FloatArray,
    gt_normals: FloatArray,
) -> ReconstructionMetrics:
    """Metrics of rasterized surfels (with their per-pixel normals) against a render."""
    estimated = np.where(buffers.valid, buffers.inv_depth, 0.0)
    return evaluate_inverse_depth(estimated, gt_inv_depth, normals, gt_normals)


def preset_intrinsics(scale: float = 1.0) -> CameraIntrinsics:
    return DEFAULT_INTRINSICS if scale == 1.0 else DEFAULT_INTRINSICS.scaled(scale)


def _tilted_normal(tilt_deg: float) -> FloatArray:
    tilt = math.radians(tilt_deg)
    return np.array([math.sin(tilt), 0.0, -math.cos(tilt)])


def single_plane_scene(
    depth: float = 2.0, tilt_deg: float = 0.0, seed: int = 0
) -> PlaneScene:
    """One large plane through (0, 0, depth), tilted about the camera's y axis."""
    return PlaneScene(
        patches=[
            PlanePatch.from_normal(
                (0.0, 0.0, depth), _tilted_normal(tilt_deg), (50.0, 50.0)
            )
        ],
        texture=ProceduralTexture.random(seed),
    )


def half_plane_scene(depth: float = 2.0, seed: int = 0) -> PlaneScene:
    """A fronto-parallel plane covering x <= 0 only; the rest is background."""
    patch = PlanePatch(
        point=np.array([0.0, 0.0, depth]),
        normal=np.array([0.0, 0.0, -1.0]),
        basis_u=np.array([1.0, 0.0, 0.0]),
        basis_v=np.array([0.0, 1.0, 0.0]),
        bounds=(-50.0, 0.0, -50.0, 50.0),
    )
    return PlaneScene(patches=[patch], texture=ProceduralTexture.random(seed))


def corner_scene(seed: int = 0) -> PlaneScene:
    """Desk-scale corner: back wall, side wall, floor and a slanted panel."""
    return PlaneScene(
        patches=[
            PlanePatch.from_normal((0.0, 0.0, 3.0), (0.0, 0.0, -1.0), (4.0, 3.0)),
            PlanePatch.from_normal(
                (1.2, 0.0, 2.0), (-1.0, 0.0, 0.0), (1.0, 3.0), texture_offset=(3.1, 0.7)
            ),
            PlanePatch.from_normal(
                (0.0, 0.8, 2.0), (0.0, -1.0, 0.0), (4.0, 1.0), texture_offset=(1.3, 5.2)
            ),
            PlanePatch.from_normal(
                (-0.5, 0.0, 1.8),
                _tilted_normal(-35.0),
                (0.45, 0.45),
                texture_offset=(7.7, 2.9),
            ),
        ],
        texture=ProceduralTexture.random(seed),
    )


SCENES = {
    "fronto": lambda seed: single_plane_scene(2.0, 0.0, seed),
    "slanted": lambda seed: single_plane_scene(2.0, 30.0, seed),
    "half_plane": lambda seed: half_plane_scene(2.0, seed),
    "corner": corner_scene,
}


def make_scene(name: str, seed: int = 0) -> PlaneScene:
    if name not in SCENES:
        choices = ", ".join(sorted(SCENES))
        raise ConfigurationError(f"unknown scene {name!r}; choose from {choices}")
    return SCENES[name](seed)


MOTIONS = ("strafe", "dolly", "backward", "rotate")


def make_trajectory(motion: str, frames: int, step: float = 0.01) -> Trajectory:
    """
    World-from-camera trajectory starting at the identity, 30 frames per second.

    strafe: lateral motion with a slight vertical sway; dolly: forward;
    backward: backward; rotate: pure small rotations (no parallax).
    """
    if motion not in MOTIONS:
        raise ConfigurationError(f"unknown motion {motion!r}")
    poses = []
    for i in range(frames):
        if motion == "strafe":
            translation = (step * i, 0.3 * step * math.sin(0.2 * i), 0.0)
            poses.append(Pose(np.eye(3), translation))
        elif motion == "dolly":
            poses.append(Pose(np.eye(3), (0.0, 0.0, step * i)))
        elif motion == "backward":
            poses.append(Pose(np.eye(3), (0.0, 0.0, -step * i)))
        else:
            angles = (0.5 * step * math.sin(0.3 * i), step * math.sin(0.2 * i), 0.0)
            poses.append(Pose.from_rotation_vector(angles, (0.0, 0.0, 0.0)))
    return Trajectory([i / 30.0 for i in range(frames)], poses)


def scene_from_spec(
    spec: SceneSpec, seed: int
) -> tuple[PlaneScene, Trajectory, CameraIntrinsics]:
    """Scene, trajectory and camera described by a SceneSpec."""
    return (
        make_scene(spec.scene, seed),
        make_trajectory(spec.motion, spec.frames),
        preset_intrinsics(spec.scale),
    )
