"""
This module provides the shared math substrate of the surfel depth estimator:
the pinhole camera model, rigid-body poses, sub-pixel image sampling and the
Huber norm.

Conventions
-----------
- Pixel centers sit at integer coordinates (x, y) with the origin at the
  top-left corner; x grows to the right, y grows downwards.
- Back-projection is K^-1 [u_x, u_y, 1]^T (third component 1).
- Projection is dehomogenize(K p) and requires p_z > 0.
- Intensities are floats in [0, 1].
"""
from dataclasses import dataclass
from functools import cached_property
from typing import Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from .exceptions import BehindCameraError, ConfigurationError, OutOfBoundsError

FloatArray = NDArray[np.float64]
BoolArray = NDArray[np.bool_]

# smallest camera-frame depth accepted by the vectorized projections
MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError(
                f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}"
            )
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError(
                f"image size must be positive, got {self.width}x{self.height}"
            )
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ConfigurationError(
                f"principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height} image"
            )

    @property
    def inverse_matrix(self) -> FloatArray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics of the same camera with the image resampled by `factor`."""
        return CameraIntrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=max(1, int(round(self.width * factor))),
            height=max(1, int(round(self.height * factor))),
        )

    def contains(self, u: ArrayLike, margin: float = 0.0) -> BoolArray:
        """Whether pixel coordinates lie inside the image grown by `margin`."""
        uv = np.asarray(u, dtype=np.float64)
        x, y = uv[..., 0], uv[..., 1]
        return np.asarray(
            (x >= -margin)
            & (x <= self.width - 1 + margin)
            & (y >= -margin)
            & (y <= self.height - 1 + margin)
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """
    Rigid-body transform x -> R x + t.

    A pose named `a_to_b` (or `b_from_a`) maps coordinates expressed in frame a
    into frame b.
    """

    rotation: FloatArray
    translation: FloatArray

    def __post_init__(self) -> None:
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ValueError("pose contains non-finite values")
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(rotation) < 0:
            raise ValueError("rotation is a reflection")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, translation: ArrayLike, quaternion: ArrayLike) -> "Pose":
        """Build a pose from a translation and a unit quaternion (x, y, z, w)."""
        return cls(Rotation.from_quat(np.asarray(quaternion)).as_matrix(), translation)

    @classmethod
    def from_rotation_vector(
        cls, rotation_vector: ArrayLike, translation: ArrayLike
    ) -> "Pose":
        rotation = Rotation.from_rotvec(np.asarray(rotation_vector)).as_matrix()
        return cls(rotation, translation)

    def to_quaternion(self) -> FloatArray:
        """Unit quaternion (x, y, z, w) with w >= 0."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return np.asarray(-q if q[3] < 0 else q, dtype=np.float64)

    def to_matrix(self) -> FloatArray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """The pose applying `other` first, then `self`."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def rotate(self, vectors: ArrayLike) -> FloatArray:
        """Apply only the rotation (for directions and normals)."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def transform_points(self, points: ArrayLike) -> FloatArray:
        """Vectorized R p + t over the last axis of `points`."""
        return self.rotate(points) + self.translation


class ImageSampler(Protocol):
    """Anything that can be sampled at sub-pixel coordinates with gradients."""

    @property
    def width(self) -> int: ...

    @property
    def height(self) -> int: ...

    def sample(self, u: FloatArray) -> tuple[FloatArray, FloatArray, BoolArray]:
        """Return intensities (N,), gradients (N, 2) and validity (N,) at u (N, 2)."""
        ...


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Grayscale image with intensities in [0, 1], stored row-major (height, width)."""

    intensities: FloatArray

    def __post_init__(self) -> None:
        data = np.asarray(self.intensities, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"expected a 2-D intensity array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite intensities")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "intensities", data)

    @classmethod
    def from_uint8(cls, pixels: ArrayLike) -> "GrayImage":
        return cls(np.asarray(pixels, dtype=np.float64) / 255.0)

    @property
    def width(self) -> int:
        return int(self.intensities.shape[1])

    @property
    def height(self) -> int:
        return int(self.intensities.shape[0])

    @cached_property
    def gradients(self) -> tuple[FloatArray, FloatArray]:
        """Central-difference gradients (d/dx, d/dy); zero on the 1-px border."""
        img = self.intensities
        gx = np.zeros_like(img)
        gy = np.zeros_like(img)
        gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
        gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
        return gx, gy

    def sample(self, u: FloatArray) -> tuple[FloatArray, FloatArray, BoolArray]:
        """Bilinear intensity and bilinearly interpolated gradient at u (N, 2)."""
        uv = np.asarray(u, dtype=np.float64).reshape(-1, 2)
        x, y = uv[:, 0], uv[:, 1]
        valid = (
            np.isfinite(x)
            & np.isfinite(y)
            & (x >= 1.0)
            & (x <= self.width - 2.0)
            & (y >= 1.0)
            & (y <= self.height - 2.0)
        )
        values = np.zeros(len(uv))
        grads = np.zeros((len(uv), 2))
        if not np.any(valid):
            return values, grads, valid

        xv, yv = x[valid], y[valid]
        x0 = np.minimum(np.floor(xv).astype(np.intp), self.width - 3)
        y0 = np.minimum(np.floor(yv).astype(np.intp), self.height - 3)
        tx = xv - x0
        ty = yv - y0
        w00 = (1.0 - tx) * (1.0 - ty)
        w10 = tx * (1.0 - ty)
        w01 = (1.0 - tx) * ty
        w11 = tx * ty

        def interpolate(field: FloatArray) -> FloatArray:
            return np.asarray(
                w00 * field[y0, x0]
                + w10 * field[y0, x0 + 1]
                + w01 * field[y0 + 1, x0]
                + w11 * field[y0 + 1, x0 + 1]
            )

        gx, gy = self.gradients
        values[valid] = interpolate(self.intensities)
        grads[valid, 0] = interpolate(gx)
        grads[valid, 1] = interpolate(gy)
        return values, grads, valid


def backproject_ray(u: ArrayLike, intrinsics: CameraIntrinsics) -> FloatArray:
    """K^-1 [u_x, u_y, 1]; the returned ray has z = 1."""
    uv = np.asarray(u, dtype=np.float64)
    return np.array(
        [
            (uv[0] - intrinsics.cx) / intrinsics.fx,
            (uv[1] - intrinsics.cy) / intrinsics.fy,
            1.0,
        ]
    )


def backproject_rays(u: ArrayLike, intrinsics: CameraIntrinsics) -> FloatArray:
    """Vectorized backproject_ray over u (..., 2)."""
    uv = np.asarray(u, dtype=np.float64)
    rays = np.empty(uv.shape[:-1] + (3,))
    rays[..., 0] = (uv[..., 0] - intrinsics.cx) / intrinsics.fx
    rays[..., 1] = (uv[..., 1] - intrinsics.cy) / intrinsics.fy
    rays[..., 2] = 1.0
    return rays


def project(p: ArrayLike, intrinsics: CameraIntrinsics) -> FloatArray:
    """
    Project a camera-frame point into pixel coordinates.

    Raises
    ------
    BehindCameraError
        If p_z <= 0.
    """
    point = np.asarray(p, dtype=np.float64)
    if not point[2] > 0.0:
        raise BehindCameraError(f"point {point.tolist()} has z <= 0")
    return np.array(
        [
            intrinsics.fx * point[0] / point[2] + intrinsics.cx,
            intrinsics.fy * point[1] / point[2] + intrinsics.cy,
        ]
    )


def project_points(
    points: ArrayLike, intrinsics: CameraIntrinsics
) -> tuple[FloatArray, BoolArray]:
    """Vectorized projection; returns pixels (..., 2) and a z > 0 mask."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    valid = np.asarray(z > MIN_DEPTH)
    safe_z = np.where(valid, z, 1.0)
    uv = np.empty(p.shape[:-1] + (2,))
    uv[..., 0] = intrinsics.fx * p[..., 0] / safe_z + intrinsics.cx
    uv[..., 1] = intrinsics.fy * p[..., 1] / safe_z + intrinsics.cy
    return uv, valid


def dehomogenization_jacobian(p: ArrayLike) -> FloatArray:
    """d(x/z, y/z)/d(x, y, z) evaluated at p: [[1/z, 0, -x/z^2], [0, 1/z, -y/z^2]]."""
    x, y, z = np.asarray(p, dtype=np.float64)
    return np.array([[1.0 / z, 0.0, -x / z**2], [0.0, 1.0 / z, -y / z**2]])


def projection_jacobians(
    points: FloatArray, intrinsics: CameraIntrinsics
) -> FloatArray:
    """d(project(p))/dp for points (N, 3), shape (N, 2, 3); assumes z > 0."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    inv_z = 1.0 / z
    jac = np.zeros((len(points), 2, 3))
    jac[:, 0, 0] = intrinsics.fx * inv_z
    jac[:, 0, 2] = -intrinsics.fx * x * inv_z**2
    jac[:, 1, 1] = intrinsics.fy * inv_z
    jac[:, 1, 2] = -intrinsics.fy * y * inv_z**2
    return jac


def transform_point(pose: Pose, p: ArrayLike) -> FloatArray:
    """R p + t."""
    return pose.transform_points(np.asarray(p, dtype=np.float64).reshape(3))


def sample_bilinear(image: GrayImage, u: ArrayLike) -> tuple[float, FloatArray]:
    """
    Sample intensity and gradient at one sub-pixel coordinate.

    Raises
    ------
    OutOfBoundsError
        If u lies outside [1, width - 2] x [1, height - 2].
    """
    values, grads, valid = image.sample(np.asarray(u, dtype=np.float64).reshape(1, 2))
    if not valid[0]:
        raise OutOfBoundsError(
            f"{np.asarray(u).tolist()} outside the sampling margin of a "
            f"{image.width}x{image.height} image"
        )
    return float(values[0]), grads[0]


def huber(residual: ArrayLike, delta: float) -> tuple[FloatArray, FloatArray]:
    """
    Huber cost and IRLS weight; weight * r equals d(cost)/dr.

    Works element-wise on arrays; scalars come back as numpy scalars.
    """
    r = np.abs(np.asarray(residual, dtype=np.float64))
    inlier = r <= delta
    cost = np.where(inlier, 0.5 * r**2, delta * (r - 0.5 * delta))
    weight = np.where(inlier, 1.0, delta / np.where(inlier, 1.0, r))
    return cost[()], weight[()]
