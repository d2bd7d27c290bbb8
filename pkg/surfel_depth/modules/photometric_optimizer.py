"""
This module estimates surfel parameters by Levenberg-Marquardt minimization
of the Huber photometric error between the keyframe and a window of posed
frames.

Every surfel has four optimized parameters: the three normal components and
its inverse depth. The normal is renormalized (and turned to face the camera)
after each update.

Surfels are independent problems, but they are solved together: the footprint
pixels of all surfels are warped and sampled in one pass per frame, the normal
equations are reduced per surfel, and the damped 4x4 systems are solved as a
batch with a damping factor per surfel.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .configurations import OptimizerConfig
from .core_geometry import (
    BoolArray,
    CameraIntrinsics,
    FloatArray,
    ImageSampler,
    Pose,
    backproject_ray,
    backproject_rays,
    huber,
    project,
    project_points,
    projection_jacobians,
    transform_point,
)
from .exceptions import DegeneratePlaneError, InsufficientObservationsError
from .parallel import parallel_map
from .surfel_map import (
    DEGENERATE_DENOMINATOR,
    Keyframe,
    RasterBuffers,
    Surfel,
    enforce_camera_facing,
    plane_denominator,
    rasterize,
    surfel_footprints,
)

logger = logging.getLogger(__name__)

IndexArray = NDArray[np.intp]

# a normal-equation diagonal below this carries no information
MIN_INFORMATION = 1e-18
PARAMETER_COUNT = 4


@dataclass(frozen=True, eq=False)
class Frame:
    """A photometric measurement: image, pose relative to the keyframe, time."""

    image: ImageSampler
    pose_kf_to_frame: Pose
    timestamp: float
    # frame counter of the sequence this frame came from
    index: int = 0


@dataclass(frozen=True)
class FrameWindow:
    """Frames frozen for one optimization pass."""

    frames: tuple[Frame, ...]

    @classmethod
    def snapshot(cls, keyframe: Keyframe) -> "FrameWindow":
        return cls(tuple(keyframe.window))

    @property
    def newest_index(self) -> int:
        return max((frame.index for frame in self.frames), default=-1)

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class SurfelUpdateStats:
    """Outcome of one surfel's Levenberg-Marquardt run."""

    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    valid_pixel_count: int = 0
    converged: bool = False
    # cost per valid observation, at the start and after every accepted step
    accepted_costs: list[float] = field(default_factory=list)


@dataclass
class KeyframeOptimizationStats:
    """Aggregate of one optimization pass over a keyframe."""

    processed: int = 0
    skipped: int = 0
    converged: int = 0
    iterations: int = 0
    mean_cost_before: float = 0.0
    mean_cost_after: float = 0.0


@dataclass(frozen=True)
class _FootprintBatch:
    """Footprint pixels of several surfels, concatenated surfel by surfel."""

    surfel_rays: FloatArray
    pixel_rays: FloatArray
    reference: FloatArray
    # batch position of the surfel owning each pixel, non-decreasing
    owner: IndexArray
    frames: tuple[Frame, ...]
    intrinsics: CameraIntrinsics
    config: OptimizerConfig

    def __len__(self) -> int:
        return len(self.surfel_rays)

    def subset(self, members: IndexArray) -> "_FootprintBatch":
        """The batch restricted to `members`, renumbered 0..len(members)-1."""
        remap = np.full(len(self), -1, dtype=np.intp)
        remap[members] = np.arange(len(members))
        position = remap[self.owner]
        keep = position >= 0
        return replace(
            self,
            surfel_rays=self.surfel_rays[members],
            pixel_rays=self.pixel_rays[keep],
            reference=self.reference[keep],
            owner=position[keep],
        )


@dataclass
class _Linearization:
    """Per-surfel normal equations, Huber cost and valid observation count."""

    hessian: FloatArray
    gradient: FloatArray
    cost: FloatArray
    valid: IndexArray

    @classmethod
    def zeros(cls, count: int) -> "_Linearization":
        return cls(
            hessian=np.zeros((count, PARAMETER_COUNT, PARAMETER_COUNT)),
            gradient=np.zeros((count, PARAMETER_COUNT)),
            cost=np.zeros(count),
            valid=np.zeros(count, dtype=np.intp),
        )

    def add(self, other: "_Linearization") -> None:
        self.hessian += other.hessian
        self.gradient += other.gradient
        self.cost += other.cost
        self.valid += other.valid

    def assign(
        self, rows: IndexArray, other: "_Linearization", picked: BoolArray
    ) -> None:
        self.hessian[rows] = other.hessian[picked]
        self.gradient[rows] = other.gradient[picked]
        self.cost[rows] = other.cost[picked]
        self.valid[rows] = other.valid[picked]


def _dot_rows(a: FloatArray, b: FloatArray) -> FloatArray:
    return np.asarray(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1] + a[:, 2] * b[:, 2])


def warp_pixel(
    u: ArrayLike, inv_depth: float, pose: Pose, intrinsics: CameraIntrinsics
) -> FloatArray:
    """
    Pixel where frame `pose` sees the point at inverse depth `inv_depth` on
    keyframe pixel u's ray.

    Raises
    ------
    BehindCameraError
        If the point is behind the frame's camera.
    """
    point = backproject_ray(u, intrinsics) / inv_depth
    return project(transform_point(pose, point), intrinsics)


def inverse_depth_jacobians(
    pixel_rays: FloatArray,
    surfel_rays: ArrayLike,
    surfel_inv_depths: ArrayLike,
    normals: ArrayLike,
    normal_jacobian_enabled: bool = True,
) -> FloatArray:
    """
    d id_u / d [n_s, id_s] for rays (M, 3), shape (M, 4).

    The surfel quantities are either one surfel's or given per row. With
    a = r_u . n and b = r_s . n, id_u = id_s a / b, so d id_u / d id_s = a / b
    and d id_u / d n = id_s (r_u b - a r_s) / b^2.
    """
    shape = pixel_rays.shape
    rays = np.broadcast_to(np.asarray(surfel_rays, dtype=np.float64), shape)
    normal = np.broadcast_to(np.asarray(normals, dtype=np.float64), shape)
    inv_depth = np.broadcast_to(
        np.asarray(surfel_inv_depths, dtype=np.float64), shape[:1]
    )
    a = _dot_rows(pixel_rays, normal)
    b = _dot_rows(rays, normal)
    jac = np.zeros((len(pixel_rays), PARAMETER_COUNT))
    jac[:, 3] = a / b
    if normal_jacobian_enabled:
        jac[:, :3] = (
            inv_depth[:, None]
            * (pixel_rays * b[:, None] - a[:, None] * rays)
            / (b * b)[:, None]
        )
    return jac


def jacobian_inverse_depth(
    surfel: Surfel,
    u: ArrayLike,
    intrinsics: CameraIntrinsics,
    normal_jacobian_enabled: bool = True,
) -> FloatArray:
    """
    Gradient of pixel u's plane-induced inverse depth wrt (n_s, id_s).

    Raises
    ------
    DegeneratePlaneError
        If the surfel plane is degenerate.
    """
    denominator = plane_denominator(surfel.ray, surfel.inv_depth, surfel.normal)
    if not abs(denominator) >= DEGENERATE_DENOMINATOR:
        raise DegeneratePlaneError(f"surfel {surfel.id}: plane through the origin")
    rays = backproject_rays(np.asarray(u, dtype=np.float64).reshape(1, 2), intrinsics)
    return inverse_depth_jacobians(
        rays, surfel.ray, surfel.inv_depth, surfel.normal, normal_jacobian_enabled
    )[0]


def _linearize(
    batch: _FootprintBatch,
    normals: FloatArray,
    inv_depths: FloatArray,
    threads: int = 1,
    with_jacobian: bool = True,
    reuse_depth_jacobian: bool = True,
) -> _Linearization:
    """Normal equations of every surfel of the batch at (normals, inv_depths)."""
    cfg = batch.config
    count = len(batch)
    total = _Linearization.zeros(count)

    denominators = _dot_rows(batch.surfel_rays, normals) / inv_depths
    degenerate = ~(np.abs(denominators) >= DEGENERATE_DENOMINATOR)
    safe = np.where(degenerate, 1.0, denominators)
    numerators = _dot_rows(batch.pixel_rays, normals[batch.owner])
    pixel_inv_depth = numerators / safe[batch.owner]
    on_plane = (
        ~degenerate[batch.owner]
        & np.isfinite(pixel_inv_depth)
        & (pixel_inv_depth > 0.0)
    )
    if not np.any(on_plane):
        return total
    owner = batch.owner[on_plane]
    rays = batch.pixel_rays[on_plane]
    depth = pixel_inv_depth[on_plane]
    reference = batch.reference[on_plane]
    points = rays / depth[:, None]

    def depth_jacobian() -> FloatArray:
        return inverse_depth_jacobians(
            rays,
            batch.surfel_rays[owner],
            inv_depths[owner],
            normals[owner],
            cfg.normal_jacobian_enabled,
        )

    # independent of the frame, so computed once for the whole window
    shared_jacobian = None
    if with_jacobian and reuse_depth_jacobian:
        shared_jacobian = depth_jacobian()

    def frame_terms(frame: Frame) -> _Linearization:
        terms = _Linearization.zeros(count)
        pose = frame.pose_kf_to_frame
        warped = pose.transform_points(points)
        pixels, in_front = project_points(warped, batch.intrinsics)
        values, image_gradients, in_bounds = frame.image.sample(pixels)
        ok: BoolArray = np.asarray(in_front & in_bounds)
        if not np.any(ok):
            return terms
        who = owner[ok]
        residual = values[ok] - reference[ok]
        costs, weights = huber(residual, cfg.huber_delta)
        terms.cost = np.bincount(who, weights=costs, minlength=count)
        terms.valid = np.bincount(who, minlength=count).astype(np.intp)
        if not with_jacobian:
            return terms

        # d p / d id_u = -r_u / id_u^2, carried through the frame rotation
        point_derivative = -pose.rotate(rays[ok]) / (depth[ok] ** 2)[:, None]
        pixel_derivative = np.einsum(
            "kij,kj->ki",
            projection_jacobians(warped[ok], batch.intrinsics),
            point_derivative,
        )
        residual_derivative = np.sum(image_gradients[ok] * pixel_derivative, axis=1)
        jac_id = shared_jacobian if shared_jacobian is not None else depth_jacobian()
        jac = residual_derivative[:, None] * jac_id[ok]
        weighted = jac * weights[:, None]
        outer = (weighted[:, :, None] * jac[:, None, :]).reshape(len(jac), -1)
        terms.hessian = np.stack(
            [
                np.bincount(who, weights=outer[:, k], minlength=count)
                for k in range(PARAMETER_COUNT * PARAMETER_COUNT)
            ],
            axis=1,
        ).reshape(count, PARAMETER_COUNT, PARAMETER_COUNT)
        terms.gradient = np.stack(
            [
                np.bincount(who, weights=weighted[:, k] * residual, minlength=count)
                for k in range(PARAMETER_COUNT)
            ],
            axis=1,
        )
        return terms

    # summed in window order, whatever the thread count
    for terms in parallel_map(frame_terms, batch.frames, threads):
        total.add(terms)
    return total


def _footprint(
    surfel: Surfel, keyframe: Keyframe, footprint: FloatArray | None
) -> FloatArray:
    if footprint is not None:
        return np.asarray(footprint, dtype=np.float64).reshape(-1, 2)
    pixels = surfel_footprints(rasterize(keyframe)).get(surfel.id)
    return np.empty((0, 2)) if pixels is None else pixels


def _gather(
    surfels: Sequence[Surfel],
    footprints: Sequence[FloatArray],
    keyframe: Keyframe,
    config: OptimizerConfig,
    frames: Sequence[Frame],
) -> _FootprintBatch:
    pixels = np.concatenate([np.empty((0, 2)), *footprints]).reshape(-1, 2)
    counts = [len(one) for one in footprints]
    xs = pixels[:, 0].astype(np.intp)
    ys = pixels[:, 1].astype(np.intp)
    return _FootprintBatch(
        surfel_rays=np.array([s.ray for s in surfels]).reshape(-1, 3),
        pixel_rays=backproject_rays(pixels, keyframe.intrinsics),
        reference=keyframe.image.intensities[ys, xs],
        owner=np.repeat(np.arange(len(surfels), dtype=np.intp), counts),
        frames=tuple(frames),
        intrinsics=keyframe.intrinsics,
        config=config,
    )


def _single(
    surfel: Surfel,
    keyframe: Keyframe,
    config: OptimizerConfig,
    footprint: FloatArray | None,
) -> _FootprintBatch:
    pixels = _footprint(surfel, keyframe, footprint)
    return _gather([surfel], [pixels], keyframe, config, keyframe.window)


def _parameters(surfels: Sequence[Surfel]) -> tuple[FloatArray, FloatArray]:
    normals = np.array([s.normal for s in surfels], dtype=np.float64).reshape(-1, 3)
    inv_depths = np.array([s.inv_depth for s in surfels], dtype=np.float64)
    return normals, inv_depths


def surfel_cost(
    surfel: Surfel,
    keyframe: Keyframe,
    config: OptimizerConfig,
    footprint: FloatArray | None = None,
) -> tuple[float, int]:
    """
    Huber photometric cost of a surfel over its footprint and the window.

    Parameters
    ----------
    surfel : Surfel
        The surfel hypothesis (its normal need not be unit length).
    keyframe : Keyframe
        Keyframe holding the reference image and the window of frames.
    config : OptimizerConfig
        Supplies the Huber delta and the minimum observation count.
    footprint : FloatArray | None
        Keyframe pixels (M, 2) of the surfel; rasterized when omitted.

    Returns
    -------
    tuple[float, int]
        The cost and the number of contributing (frame, pixel) pairs.

    Raises
    ------
    InsufficientObservationsError
        If fewer than config.min_valid_pixels pairs contribute.
    """
    batch = _single(surfel, keyframe, config, footprint)
    terms = _linearize(batch, *_parameters([surfel]), with_jacobian=False)
    valid = int(terms.valid[0])
    if valid < config.min_valid_pixels:
        raise InsufficientObservationsError(valid, config.min_valid_pixels)
    return float(terms.cost[0]), valid


def accumulate_normal_equations(
    surfel: Surfel,
    keyframe: Keyframe,
    config: OptimizerConfig,
    footprint: FloatArray | None = None,
    reuse_depth_jacobian: bool = True,
) -> tuple[FloatArray, FloatArray, float, int]:
    """
    Gauss-Newton normal equations of the surfel cost wrt (n_s, id_s).

    H = sum w J^T J and g = sum w J^T r over all valid (frame, pixel) pairs,
    with J = (d r / d id_u) (d id_u / d [n_s, id_s]) and w the Huber weight;
    g is the exact gradient of the Huber cost.

    Raises
    ------
    InsufficientObservationsError
        If fewer than config.min_valid_pixels pairs contribute.
    """
    batch = _single(surfel, keyframe, config, footprint)
    terms = _linearize(
        batch, *_parameters([surfel]), reuse_depth_jacobian=reuse_depth_jacobian
    )
    valid = int(terms.valid[0])
    if valid < config.min_valid_pixels:
        raise InsufficientObservationsError(valid, config.min_valid_pixels)
    return terms.hessian[0], terms.gradient[0], float(terms.cost[0]), valid


def step_improves(
    cost: ArrayLike,
    valid: ArrayLike,
    new_cost: ArrayLike,
    new_valid: ArrayLike,
    min_valid_pixels: int,
) -> BoolArray:
    """
    Whether a trial step lowers the cost per valid observation and keeps at
    least `min_valid_pixels` observations.

    Comparing per-observation costs stops a step from winning by warping
    footprint pixels out of the frames.
    """
    current = np.asarray(cost, dtype=np.float64) * np.asarray(new_valid)
    trial = np.asarray(new_cost, dtype=np.float64) * np.asarray(valid)
    return np.asarray((np.asarray(new_valid) >= min_valid_pixels) & (trial < current))


def _solve_damped(
    hessian: FloatArray, gradient: FloatArray, damping: FloatArray
) -> tuple[FloatArray, BoolArray]:
    """
    Solve (H + lambda diag(H)) delta = -g per surfel over its informative
    parameters; uninformative parameters get a zero step.
    """
    diagonal = np.diagonal(hessian, axis1=1, axis2=2)
    informative = diagonal > MIN_INFORMATION
    system = np.where(informative[:, :, None] & informative[:, None, :], hessian, 0.0)
    index = np.arange(PARAMETER_COUNT)
    system[:, index, index] += np.where(informative, damping[:, None] * diagonal, 1.0)
    rhs = np.where(informative, -gradient, 0.0)
    try:
        steps = np.linalg.solve(system, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        steps = np.full_like(rhs, np.nan)
        for row in range(len(system)):
            try:
                steps[row] = np.linalg.solve(system[row], rhs[row])
            except np.linalg.LinAlgError:
                continue
    solved = np.any(informative, axis=1) & np.all(np.isfinite(steps), axis=1)
    steps[~solved] = 0.0
    return steps, solved


def _optimize(
    surfels: Sequence[Surfel], batch: _FootprintBatch, stamp: int, threads: int = 1
) -> list[tuple[Surfel, SurfelUpdateStats]]:
    cfg = batch.config
    count = len(surfels)
    normals, inv_depths = _parameters(surfels)
    state = _linearize(batch, normals, inv_depths, threads)
    stats = [
        SurfelUpdateStats(
            initial_cost=float(state.cost[i]),
            final_cost=float(state.cost[i]),
            valid_pixel_count=int(state.valid[i]),
        )
        for i in range(count)
    ]
    running = state.valid >= cfg.min_valid_pixels
    unchanged = ~running
    for i in np.flatnonzero(running):
        stats[i].accepted_costs.append(float(state.cost[i] / state.valid[i]))
    damping = np.full(count, cfg.lm_lambda_init)

    for _ in range(cfg.max_iterations):
        exact = running & (state.cost == 0.0)
        for i in np.flatnonzero(exact):
            stats[i].converged = True
        running &= ~exact
        members = np.flatnonzero(running)
        if len(members) == 0:
            break

        steps, solved = _solve_damped(
            state.hessian[members], state.gradient[members], damping[members]
        )
        for i in members[~solved]:
            logger.debug("surfel %d: singular normal equations", surfels[i].id)
            if len(stats[i].accepted_costs) == 1:
                unchanged[i] = True
        running[members[~solved]] = False
        members, steps = members[solved], steps[solved]
        for i in members:
            stats[i].iterations += 1

        turned = np.any(steps[:, :3] != 0.0, axis=1)
        moved = normals[members] + steps[:, :3]
        collapsed = turned & ~(np.linalg.norm(moved, axis=1) > 1e-12)
        damping[members[collapsed]] *= cfg.lm_up
        members, steps = members[~collapsed], steps[~collapsed]
        turned, moved = turned[~collapsed], moved[~collapsed]
        if len(members) == 0:
            continue

        candidate_normals = normals[members].copy()
        candidate_normals[turned] = enforce_camera_facing(
            moved[turned], batch.surfel_rays[members[turned]]
        )
        candidate_depths = np.clip(
            inv_depths[members] + steps[:, 3], cfg.min_inv_depth, cfg.max_inv_depth
        )
        trial = _linearize(
            batch.subset(members), candidate_normals, candidate_depths, threads
        )
        better = step_improves(
            state.cost[members],
            state.valid[members],
            trial.cost,
            trial.valid,
            cfg.min_valid_pixels,
        )
        damping[members[~better]] *= cfg.lm_up

        accepted = members[better]
        before = state.cost[accepted] / state.valid[accepted]
        after = trial.cost[better] / trial.valid[better]
        normals[accepted] = candidate_normals[better]
        inv_depths[accepted] = candidate_depths[better]
        state.assign(accepted, trial, better)
        damping[accepted] *= cfg.lm_down
        settled = (before - after) / before < cfg.convergence_eps
        for i, mean_cost, done in zip(accepted, after, settled):
            stats[i].accepted_costs.append(float(mean_cost))
            if done:
                stats[i].converged = True
        running[accepted[settled]] = False

    results = []
    for i, surfel in enumerate(surfels):
        if unchanged[i]:
            results.append((surfel, stats[i]))
            continue
        stats[i].final_cost = float(state.cost[i])
        stats[i].valid_pixel_count = int(state.valid[i])
        updated = replace(
            surfel,
            normal=normals[i].copy(),
            inv_depth=float(inv_depths[i]),
            last_residual=float(state.cost[i] / state.valid[i]),
            last_seen=stamp,
        )
        results.append((updated, stats[i]))
    return results


def lm_update(
    surfel: Surfel,
    keyframe: Keyframe,
    config: OptimizerConfig,
    footprint: FloatArray | None = None,
) -> tuple[Surfel, SurfelUpdateStats]:
    """
    Levenberg-Marquardt refinement of one surfel.

    Each iteration solves (H + lambda diag(H)) delta = -g, renormalizes the
    moved normal, clamps the inverse depth to [min_inv_depth, max_inv_depth]
    and keeps the step only if the cost per valid observation drops
    (lambda *= lm_down), otherwise lambda *= lm_up. Stops after
    max_iterations or when an accepted step decreases that cost by less than
    convergence_eps relative.

    The surfel comes back unchanged when it has too few observations or its
    normal equations are singular.
    """
    batch = _single(surfel, keyframe, config, footprint)
    newest = FrameWindow.snapshot(keyframe).newest_index
    return _optimize([surfel], batch, max(newest, keyframe.stamp))[0]


def optimize_keyframe(
    keyframe: Keyframe,
    config: OptimizerConfig,
    threads: int = 1,
    buffers: RasterBuffers | None = None,
) -> KeyframeOptimizationStats:
    """
    Run lm_update over every surfel once, in place.

    A surfel takes part once the window holds a frame newer than its creation
    stamp. The window and footprints are frozen for the pass, so surfels are
    independent and the result does not depend on order or thread count.
    """
    stats = KeyframeOptimizationStats()
    if not keyframe.surfels:
        return stats
    if not keyframe.window:
        raise ValueError("optimize_keyframe needs a non-empty frame window")

    if buffers is None:
        buffers = rasterize(keyframe, threads)
    footprints = surfel_footprints(buffers)
    window = FrameWindow.snapshot(keyframe)
    newest = window.newest_index

    eligible = [
        position
        for position, surfel in enumerate(keyframe.surfels)
        if surfel.id in footprints and newest > surfel.created_at
    ]
    members = [keyframe.surfels[position] for position in eligible]
    batch = _gather(
        members,
        [footprints[surfel.id] for surfel in members],
        keyframe,
        config,
        window.frames,
    )
    results = _optimize(members, batch, newest, threads) if members else []

    surfels = list(keyframe.surfels)
    before, after = [], []
    for position, (surfel, result) in zip(eligible, results):
        surfels[position] = surfel
        if result.valid_pixel_count < config.min_valid_pixels:
            continue
        stats.processed += 1
        stats.converged += int(result.converged)
        stats.iterations += result.iterations
        before.append(result.accepted_costs[0])
        after.append(result.final_cost / result.valid_pixel_count)
    keyframe.surfels = surfels
    stats.skipped = len(surfels) - stats.processed
    if before:
        stats.mean_cost_before = float(np.mean(before))
        stats.mean_cost_after = float(np.mean(after))
    return stats
