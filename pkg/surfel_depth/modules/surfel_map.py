"""
This module holds the surfel data model of a keyframe and the operations that
turn surfels into per-pixel inverse depth.

It includes the plane-induced inverse depth of a pixel, depth-buffered
rasterization of all surfels into the keyframe, creation of new surfels from
their neighbors, pruning, and hand-over of surfels to a new keyframe.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import ArrayLike

from .configurations import InitParams
from .core_geometry import (
    BoolArray,
    CameraIntrinsics,
    FloatArray,
    GrayImage,
    Pose,
    backproject_rays,
)
from .exceptions import BehindCameraError, DegeneratePlaneError
from .parallel import chunked, parallel_map

if TYPE_CHECKING:
    from .photometric_optimizer import Frame

logger = logging.getLogger(__name__)

EMPTY = -1
DEGENERATE_DENOMINATOR = 1e-12
# equal inverse depths within this tolerance are resolved by the lower surfel id
DEPTH_TIE_TOLERANCE = 1e-12
# surfels closer than this to the camera plane are dropped at a hand-over
MIN_HANDOVER_DEPTH = 1e-6
FRONTO_PARALLEL_NORMAL = np.array([0.0, 0.0, -1.0])


def enforce_camera_facing(normal: ArrayLike, ray: ArrayLike) -> FloatArray:
    """Normalize `normal` and flip it so that normal . ray < 0, row-wise on (N, 3)."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    away = np.sum(n * np.asarray(ray, dtype=np.float64), axis=-1, keepdims=True) > 0.0
    return np.asarray(np.where(away, -n, n))


@dataclass
class Surfel:
    """
    Oriented planar disk anchored on a keyframe ray.

    The 3-D center is ray / inv_depth; ray has z = 1 and lives in the keyframe
    camera frame, as does the unit normal.
    """

    id: int
    ray: FloatArray
    inv_depth: float
    normal: FloatArray
    radius_px: float
    last_residual: float = 0.0
    last_seen: int = 0
    created_at: int = 0

    def __post_init__(self) -> None:
        self.ray = np.asarray(self.ray, dtype=np.float64).reshape(3)
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        self.inv_depth = float(self.inv_depth)
        if not (math.isfinite(self.inv_depth) and self.inv_depth > 0.0):
            raise ValueError(f"surfel {self.id}: inverse depth {self.inv_depth}")

    @classmethod
    def create(
        cls,
        surfel_id: int,
        ray: ArrayLike,
        inv_depth: float,
        normal: ArrayLike,
        radius_px: float,
        stamp: int = 0,
    ) -> "Surfel":
        """Build a surfel, normalizing the ray to z = 1 and orienting the normal."""
        r = np.asarray(ray, dtype=np.float64)
        r = r / r[2]
        return cls(
            id=surfel_id,
            ray=r,
            inv_depth=inv_depth,
            normal=enforce_camera_facing(normal, r),
            radius_px=radius_px,
            last_seen=stamp,
            created_at=stamp,
        )

    @property
    def position(self) -> FloatArray:
        return self.ray / self.inv_depth

    def center_pixel(self, intrinsics: CameraIntrinsics) -> FloatArray:
        return np.array(
            [
                intrinsics.fx * self.ray[0] + intrinsics.cx,
                intrinsics.fy * self.ray[1] + intrinsics.cy,
            ]
        )


@dataclass
class SurfelArrays:
    """Packed view of a surfel collection for the vectorized kernels."""

    ids: np.ndarray
    rays: FloatArray
    inv_depths: FloatArray
    normals: FloatArray
    radii: FloatArray
    centers: FloatArray

    @classmethod
    def from_surfels(
        cls, surfels: list[Surfel], intrinsics: CameraIntrinsics
    ) -> "SurfelArrays":
        count = len(surfels)
        rays = np.array([s.ray for s in surfels]).reshape(count, 3)
        centers = np.empty((count, 2))
        centers[:, 0] = intrinsics.fx * rays[:, 0] + intrinsics.cx
        centers[:, 1] = intrinsics.fy * rays[:, 1] + intrinsics.cy
        return cls(
            ids=np.array([s.id for s in surfels], dtype=np.int64),
            rays=rays,
            inv_depths=np.array([s.inv_depth for s in surfels], dtype=np.float64),
            normals=np.array([s.normal for s in surfels]).reshape(count, 3),
            radii=np.array([s.radius_px for s in surfels], dtype=np.float64),
            centers=centers,
        )


@dataclass
class Keyframe:
    """
    Reference image, its pose, the surfels anchored on it and the window of
    posed frames observing it.

    `pose` is world-from-keyframe. `window` holds the most recent
    `window_size` frames strictly ordered by timestamp.
    """

    image: GrayImage
    pose: Pose
    intrinsics: CameraIntrinsics
    surfels: list[Surfel] = field(default_factory=list)
    window: list[Frame] = field(default_factory=list)
    window_size: int = 5
    radius_px: float = 10.0
    next_surfel_id: int = 0
    # frame counter of the most recent frame handled by this keyframe
    stamp: int = 0

    def add_surfels(self, surfels: list[Surfel]) -> None:
        for surfel in surfels:
            if surfel.id < self.next_surfel_id:
                raise ValueError(f"surfel id {surfel.id} already issued")
            self.surfels.append(surfel)
            self.next_surfel_id = surfel.id + 1

    def append_frame(self, frame: Frame) -> None:
        """Push a frame into the window, evicting the oldest past window_size."""
        if self.window and frame.timestamp <= self.window[-1].timestamp:
            raise ValueError(
                f"frame timestamp {frame.timestamp} does not follow "
                f"{self.window[-1].timestamp}"
            )
        self.window.append(frame)
        del self.window[: max(0, len(self.window) - self.window_size)]

    def surfel_arrays(self) -> SurfelArrays:
        return SurfelArrays.from_surfels(self.surfels, self.intrinsics)

    def surfel_by_id(self) -> dict[int, Surfel]:
        return {s.id: s for s in self.surfels}


@dataclass
class RasterBuffers:
    """Per-pixel inverse depth and generating surfel id; EMPTY marks no surfel."""

    inv_depth: FloatArray
    surfel_index: np.ndarray

    @classmethod
    def empty(cls, width: int, height: int) -> "RasterBuffers":
        return cls(
            inv_depth=np.zeros((height, width)),
            surfel_index=np.full((height, width), EMPTY, dtype=np.int64),
        )

    @property
    def valid(self) -> BoolArray:
        return np.asarray(self.surfel_index != EMPTY)

    @property
    def width(self) -> int:
        return int(self.inv_depth.shape[1])

    @property
    def height(self) -> int:
        return int(self.inv_depth.shape[0])

    def copy(self) -> "RasterBuffers":
        return RasterBuffers(self.inv_depth.copy(), self.surfel_index.copy())


@dataclass
class ReferenceChangeStats:
    """Outcome of a surfel hand-over between keyframes."""

    kept: int = 0
    dropped_behind: int = 0
    dropped_outside: int = 0


def plane_denominator(
    surfel_ray: FloatArray, surfel_inv_depth: float, normal: FloatArray
) -> float:
    """(r_s / id_s) . n_s, the denominator of the plane-induced inverse depth."""
    return float(
        (
            surfel_ray[0] * normal[0]
            + surfel_ray[1] * normal[1]
            + surfel_ray[2] * normal[2]
        )
        / surfel_inv_depth
    )


def plane_inverse_depths(
    pixel_rays: FloatArray,
    surfel_ray: FloatArray,
    surfel_inv_depth: float,
    normal: FloatArray,
) -> tuple[FloatArray, BoolArray]:
    """
    Inverse depth where the rays (M, 3) meet a surfel's plane.

    Returns the values and a mask that is False for degenerate planes and for
    intersections behind the camera.
    """
    a = (
        pixel_rays[:, 0] * normal[0]
        + pixel_rays[:, 1] * normal[1]
        + pixel_rays[:, 2] * normal[2]
    )
    denominator = plane_denominator(surfel_ray, surfel_inv_depth, normal)
    if not abs(denominator) >= DEGENERATE_DENOMINATOR:
        return np.zeros(len(pixel_rays)), np.zeros(len(pixel_rays), dtype=bool)
    values = a / denominator
    return values, np.asarray(np.isfinite(values) & (values > 0.0))


def plane_inverse_depth(
    surfel: Surfel, u: ArrayLike, intrinsics: CameraIntrinsics
) -> float:
    """
    Inverse depth of pixel u on the plane of `surfel`.

    Raises
    ------
    DegeneratePlaneError
        If (r_s / id_s) . n_s is below 1e-12 in magnitude.
    BehindCameraError
        If the plane is hit behind the camera along u's ray.
    """
    denominator = plane_denominator(surfel.ray, surfel.inv_depth, surfel.normal)
    if not abs(denominator) >= DEGENERATE_DENOMINATOR:
        raise DegeneratePlaneError(f"surfel {surfel.id}: plane through the origin")
    rays = backproject_rays(np.asarray(u, dtype=np.float64).reshape(1, 2), intrinsics)
    values, valid = plane_inverse_depths(
        rays, surfel.ray, surfel.inv_depth, surfel.normal
    )
    if not valid[0]:
        raise BehindCameraError(f"surfel {surfel.id}: plane behind the camera at {u}")
    return float(values[0])


def _disk_pixels(
    center: FloatArray, radius: float, width: int, height: int
) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixels strictly inside a disk, clipped to the image."""
    x0 = max(0, math.ceil(center[0] - radius))
    x1 = min(width - 1, math.floor(center[0] + radius))
    y0 = max(0, math.ceil(center[1] - radius))
    y1 = min(height - 1, math.floor(center[1] + radius))
    if x0 > x1 or y0 > y1:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    xs = xs.ravel()
    ys = ys.ravel()
    inside = (xs - center[0]) ** 2 + (ys - center[1]) ** 2 < radius**2
    return xs[inside], ys[inside]


def _surfel_candidates(
    packed: SurfelArrays, indices: range, intrinsics: CameraIntrinsics
) -> tuple[np.ndarray, FloatArray, np.ndarray]:
    """(flat pixel, inverse depth, surfel id) candidates for a chunk of surfels."""
    pixels, depths, ids = [], [], []
    for i in indices:
        xs, ys = _disk_pixels(
            packed.centers[i], packed.radii[i], intrinsics.width, intrinsics.height
        )
        if len(xs) == 0:
            continue
        rays = backproject_rays(np.stack([xs, ys], axis=1), intrinsics)
        values, valid = plane_inverse_depths(
            rays, packed.rays[i], packed.inv_depths[i], packed.normals[i]
        )
        pixels.append(ys[valid] * intrinsics.width + xs[valid])
        depths.append(values[valid])
        ids.append(np.full(int(valid.sum()), packed.ids[i], dtype=np.int64))
    if not pixels:
        return np.empty(0, dtype=np.intp), np.empty(0), np.empty(0, dtype=np.int64)
    return np.concatenate(pixels), np.concatenate(depths), np.concatenate(ids)


def depth_test(
    pixels: np.ndarray,
    depths: FloatArray,
    ids: np.ndarray,
    width: int,
    height: int,
) -> RasterBuffers:
    """
    Resolve candidate fragments per pixel: maximum inverse depth wins, the
    lower surfel id wins ties within DEPTH_TIE_TOLERANCE.
    """
    buffers = RasterBuffers.empty(width, height)
    if len(pixels) == 0:
        return buffers
    count = width * height
    best = np.full(count, -np.inf)
    np.maximum.at(best, pixels, depths)
    contender = depths >= best[pixels] - DEPTH_TIE_TOLERANCE
    winner = np.full(count, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(winner, pixels[contender], ids[contender])
    chosen = ids == winner[pixels]
    buffers.inv_depth.ravel()[pixels[chosen]] = depths[chosen]
    buffers.surfel_index.ravel()[pixels[chosen]] = ids[chosen]
    return buffers


def rasterize(keyframe: Keyframe, threads: int = 1) -> RasterBuffers:
    """
    Depth-buffered rasterization of all surfels into the keyframe.

    A pixel u is a candidate of surfel s when |center(s) - u| < radius and the
    plane of s meets u's ray in front of the camera; the candidate with the
    largest inverse depth (nearest) is kept.
    """
    intrinsics = keyframe.intrinsics
    if not keyframe.surfels:
        return RasterBuffers.empty(intrinsics.width, intrinsics.height)
    packed = keyframe.surfel_arrays()
    parts = parallel_map(
        lambda chunk: _surfel_candidates(packed, chunk, intrinsics),
        chunked(len(keyframe.surfels), max(1, threads) * 4),
        threads,
    )
    return depth_test(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        intrinsics.width,
        intrinsics.height,
    )


def rasterize_brute_force(keyframe: Keyframe) -> RasterBuffers:
    """Reference rasterizer: every pixel against every surfel, one at a time."""
    intrinsics = keyframe.intrinsics
    buffers = RasterBuffers.empty(intrinsics.width, intrinsics.height)
    for y in range(intrinsics.height):
        for x in range(intrinsics.width):
            candidates: list[tuple[float, int]] = []
            for surfel in keyframe.surfels:
                cx, cy = surfel.center_pixel(intrinsics)
                if not (x - cx) ** 2 + (y - cy) ** 2 < surfel.radius_px**2:
                    continue
                try:
                    depth = plane_inverse_depth(surfel, (x, y), intrinsics)
                except (DegeneratePlaneError, BehindCameraError):
                    continue
                candidates.append((depth, surfel.id))
            if not candidates:
                continue
            best = max(depth for depth, _ in candidates)
            depth, winner = min(
                (c for c in candidates if c[0] >= best - DEPTH_TIE_TOLERANCE),
                key=lambda c: c[1],
            )
            buffers.inv_depth[y, x] = depth
            buffers.surfel_index[y, x] = winner
    return buffers


def surfel_footprints(buffers: RasterBuffers) -> dict[int, np.ndarray]:
    """Pixels (M, 2) as (x, y) generated by each surfel, in row-major order."""
    flat = buffers.surfel_index.ravel()
    pixels = np.flatnonzero(flat != EMPTY)
    if len(pixels) == 0:
        return {}
    owners = flat[pixels]
    order = np.argsort(owners, kind="stable")
    pixels, owners = pixels[order], owners[order]
    ids, starts = np.unique(owners, return_index=True)
    groups = np.split(pixels, starts[1:])
    width = buffers.width
    return {
        int(i): np.stack([g % width, g // width], axis=1).astype(np.float64)
        for i, g in zip(ids, groups)
    }


def pixel_normals(keyframe: Keyframe, buffers: RasterBuffers) -> FloatArray:
    """Normal (H, W, 3) of the generating surfel of every pixel; zero when empty."""
    normals = np.zeros((buffers.height, buffers.width, 3))
    valid = buffers.valid
    if not np.any(valid) or not keyframe.surfels:
        return normals
    packed = keyframe.surfel_arrays()
    lookup = np.full(int(packed.ids.max()) + 1, -1, dtype=np.int64)
    lookup[packed.ids] = np.arange(len(packed.ids))
    rows = lookup[buffers.surfel_index[valid]]
    normals[valid] = packed.normals[rows]
    return normals


def _offset_disk(radius: float, strict: bool) -> tuple[np.ndarray, np.ndarray]:
    reach = math.ceil(radius)
    dy, dx = np.mgrid[-reach : reach + 1, -reach : reach + 1]
    distance = dx**2 + dy**2
    mask = distance < radius**2 if strict else distance <= radius**2
    return dx[mask], dy[mask]


def _window_values(
    field_2d: np.ndarray, x: int, y: int, dx: np.ndarray, dy: np.ndarray
) -> np.ndarray:
    xs, ys = x + dx, y + dy
    height, width = field_2d.shape
    inside = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
    return field_2d[ys[inside], xs[inside]]


def initialize_surfels(
    keyframe: Keyframe, buffers: RasterBuffers, params: InitParams
) -> list[Surfel]:
    """
    Place new surfels on empty pixels far from every rasterized pixel.

    Candidates are scanned row-major with a stride of ceil(alpha * r). A
    candidate u is accepted when no non-empty pixel lies within alpha * r of
    it. Its inverse depth is the mean over neighbor surfels (those owning a
    pixel within beta * r) of their plane's inverse depth at u, and its normal
    the normalized mean of their normals; without neighbors the bootstrap
    values are used. Accepted surfels are rasterized into a working copy of
    the buffers so they mask, and inform, later candidates.

    Parameters
    ----------
    keyframe : Keyframe
        The keyframe; new ids continue from keyframe.next_surfel_id.
    buffers : RasterBuffers
        Output of rasterize(keyframe).
    params : InitParams
        alpha, beta, bootstrap inverse depth and the surfel cap.

    Returns
    -------
    list[Surfel]
        The new surfels, not yet added to the keyframe.
    """
    intrinsics = keyframe.intrinsics
    radius = keyframe.radius_px
    capacity = params.max_surfels - len(keyframe.surfels)
    if capacity <= 0:
        return []

    work = buffers.copy()
    known = keyframe.surfel_by_id()
    isolation_dx, isolation_dy = _offset_disk(params.alpha * radius, strict=False)
    neighbor_dx, neighbor_dy = _offset_disk(params.beta * radius, strict=True)
    stride = max(1, math.ceil(params.alpha * radius))
    next_id = keyframe.next_surfel_id
    stamp = keyframe.stamp
    created: list[Surfel] = []

    for y in range(0, intrinsics.height, stride):
        for x in range(0, intrinsics.width, stride):
            if len(created) >= capacity:
                return created
            if work.surfel_index[y, x] != EMPTY:
                continue
            near = _window_values(work.surfel_index, x, y, isolation_dx, isolation_dy)
            if np.any(near != EMPTY):
                continue

            owners = _window_values(work.surfel_index, x, y, neighbor_dx, neighbor_dy)
            neighbor_ids = np.unique(owners[owners != EMPTY])
            ray = backproject_rays(np.array([[x, y]], dtype=np.float64), intrinsics)
            depths, normals = [], []
            for neighbor_id in neighbor_ids:
                neighbor = known[int(neighbor_id)]
                values, valid = plane_inverse_depths(
                    ray, neighbor.ray, neighbor.inv_depth, neighbor.normal
                )
                if valid[0]:
                    depths.append(values[0])
                    normals.append(neighbor.normal)

            inv_depth = params.bootstrap_inv_depth
            normal = FRONTO_PARALLEL_NORMAL
            if depths:
                inv_depth = float(np.mean(depths))
                mean_normal = np.mean(normals, axis=0)
                if np.linalg.norm(mean_normal) >= 1e-6:
                    normal = mean_normal

            surfel = Surfel.create(next_id, ray[0], inv_depth, normal, radius, stamp)
            next_id += 1
            created.append(surfel)
            known[surfel.id] = surfel
            _splat(work, surfel, intrinsics)

    if created:
        logger.debug("initialized %d surfels", len(created))
    return created


def _splat(
    buffers: RasterBuffers, surfel: Surfel, intrinsics: CameraIntrinsics
) -> None:
    """Depth-test one surfel into existing buffers in place."""
    xs, ys = _disk_pixels(
        surfel.center_pixel(intrinsics),
        surfel.radius_px,
        intrinsics.width,
        intrinsics.height,
    )
    if len(xs) == 0:
        return
    rays = backproject_rays(np.stack([xs, ys], axis=1), intrinsics)
    values, valid = plane_inverse_depths(
        rays, surfel.ray, surfel.inv_depth, surfel.normal
    )
    xs, ys, values = xs[valid], ys[valid], values[valid]
    current = buffers.inv_depth[ys, xs]
    owners = buffers.surfel_index[ys, xs]
    wins = (owners == EMPTY) | (values > current + DEPTH_TIE_TOLERANCE)
    buffers.inv_depth[ys[wins], xs[wins]] = values[wins]
    buffers.surfel_index[ys[wins], xs[wins]] = surfel.id


def change_reference_frame(
    keyframe: Keyframe, pose_old_to_new: Pose, image_new: GrayImage
) -> tuple[Keyframe, ReferenceChangeStats]:
    """
    Hand all surfels over to a new keyframe.

    Each center p moves to pose_old_to_new(p) and each normal n to R n; the
    new ray is the dehomogenized center and the new inverse depth 1 / z.
    Surfels ending up behind the new camera, or whose center projects farther
    than their radius outside the new image, are dropped. Window frames are
    re-expressed relative to the new keyframe.
    """
    intrinsics = keyframe.intrinsics
    stats = ReferenceChangeStats()
    survivors: list[Surfel] = []
    for surfel in keyframe.surfels:
        moved = pose_old_to_new.transform_points(surfel.position)
        if not moved[2] > MIN_HANDOVER_DEPTH:
            stats.dropped_behind += 1
            continue
        ray = moved / moved[2]
        center = np.array(
            [
                intrinsics.fx * ray[0] + intrinsics.cx,
                intrinsics.fy * ray[1] + intrinsics.cy,
            ]
        )
        if not intrinsics.contains(center, margin=surfel.radius_px):
            stats.dropped_outside += 1
            continue
        normal = pose_old_to_new.rotate(surfel.normal)
        survivors.append(
            replace(
                surfel,
                ray=ray,
                inv_depth=1.0 / moved[2],
                normal=enforce_camera_facing(normal, ray),
            )
        )
    stats.kept = len(survivors)

    old_from_new = pose_old_to_new.inverse()
    window = [
        replace(
            frame,
            pose_kf_to_frame=frame.pose_kf_to_frame.compose(old_from_new),
        )
        for frame in keyframe.window
    ]
    handed_over = Keyframe(
        image=image_new,
        pose=keyframe.pose.compose(old_from_new),
        intrinsics=intrinsics,
        surfels=survivors,
        window=window,
        window_size=keyframe.window_size,
        radius_px=keyframe.radius_px,
        next_surfel_id=keyframe.next_surfel_id,
        stamp=keyframe.stamp,
    )
    if stats.dropped_behind or stats.dropped_outside:
        logger.debug(
            "reference change dropped %d behind, %d outside",
            stats.dropped_behind,
            stats.dropped_outside,
        )
    return handed_over, stats


def prune_surfels(
    keyframe: Keyframe, max_residual: float, max_age: int, now: int | None = None
) -> int:
    """
    Remove surfels whose last residual exceeds `max_residual` or that were last
    seen more than `max_age` frames before `now` (default keyframe.stamp).
    """
    current = keyframe.stamp if now is None else now
    kept = [
        s
        for s in keyframe.surfels
        if not (s.last_residual > max_residual or current - s.last_seen > max_age)
    ]
    removed = len(keyframe.surfels) - len(kept)
    keyframe.surfels = kept
    return removed
