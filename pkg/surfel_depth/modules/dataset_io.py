"""
This module reads image sequences with calibration and camera trajectories,
and writes depth maps, normal maps, point clouds and surfel maps.

Dataset layout
--------------
- `images/<timestamp>.png` grayscale (or color, converted) frames
- `calib.txt` one line `fx fy cx cy width height` (rectified images only)
- `groundtruth.txt` TUM trajectory lines `timestamp tx ty tz qx qy qz qw`
  giving world-from-camera poses
"""
import logging
from pathlib import Path
from typing import Iterator

import numpy as np
from numpy.typing import ArrayLike
from PIL import Image, UnidentifiedImageError

from .configurations import DatasetManifest
from .core_geometry import (
    BoolArray,
    CameraIntrinsics,
    FloatArray,
    GrayImage,
    Pose,
    backproject_rays,
)
from .exceptions import ConfigurationError, DatasetParseError
from .surfel_map import Keyframe, RasterBuffers, Surfel, pixel_normals
from .synthetic_oracle import PlaneScene, Trajectory, render

logger = logging.getLogger(__name__)

__all__ = [
    "DatasetManifest",
    "load_calibration",
    "write_calibration",
    "load_trajectory",
    "write_trajectory",
    "load_image",
    "write_image",
    "load_sequence",
    "associate_timestamp",
    "write_depth_pfm",
    "read_depth_pfm",
    "write_depth_png",
    "write_normal_png",
    "write_ply",
    "read_ply",
    "write_surfel_map",
    "read_surfel_map",
    "write_synthetic_sequence",
]

CALIBRATION_FIELDS = ("fx", "fy", "cx", "cy", "width", "height")
TRAJECTORY_FIELDS = ("timestamp", "tx", "ty", "tz", "qx", "qy", "qz", "qw")
SURFEL_FIELDS = (
    "id",
    "ray_x",
    "ray_y",
    "inv_depth",
    "n_x",
    "n_y",
    "n_z",
    "radius_px",
    "last_residual",
    "last_seen",
)
QUATERNION_TOLERANCE = 1e-3
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".pgm", ".ppm"}
TIMESTAMP_FORMAT = "%.6f"


def _unreadable(path: str | Path, err: Exception) -> DatasetParseError:
    """Line 0 marks a file that could not be opened or decoded at all."""
    return DatasetParseError(path, 0, f"cannot read file: {err}")


def _data_lines(path: Path) -> Iterator[tuple[int, list[str]]]:
    """Non-blank, non-comment lines as (1-based line number, fields)."""
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except (OSError, UnicodeDecodeError) as err:
        raise _unreadable(path, err) from err
    for number, line in enumerate(lines, start=1):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            yield number, stripped.replace(",", " ").split()


def _parse_float(path: Path, number: int, raw: str, name: str) -> float:
    try:
        value = float(raw)
    except ValueError as err:
        raise DatasetParseError(path, number, f"not a number: {raw!r}", name) from err
    if not np.isfinite(value):
        raise DatasetParseError(path, number, f"non-finite value {raw!r}", name)
    return value


def load_calibration(path: str | Path) -> CameraIntrinsics:
    """
    Parse a pinhole calibration file.

    Parameters
    ----------
    path : str | Path
        File holding one line `fx fy cx cy width height`, in pixels.

    Returns
    -------
    CameraIntrinsics
        The parsed intrinsics.

    Raises
    ------
    DatasetParseError
        On an unreadable file, a missing or malformed line, extra (distortion)
        fields, or values violating the camera invariants.
    """
    path = Path(path)
    lines = list(_data_lines(path))
    if not lines:
        raise DatasetParseError(path, 0, "no calibration line")
    if len(lines) > 1:
        raise DatasetParseError(path, lines[1][0], "expected a single calibration line")
    number, fields = lines[0]
    if len(fields) > len(CALIBRATION_FIELDS):
        raise DatasetParseError(
            path,
            number,
            f"expected 6 fields, got {len(fields)}: distortion coefficients are "
            "not supported, rectify the images first",
        )
    if len(fields) < len(CALIBRATION_FIELDS):
        raise DatasetParseError(path, number, f"expected 6 fields, got {len(fields)}")

    values = {
        name: _parse_float(path, number, raw, name)
        for name, raw in zip(CALIBRATION_FIELDS, fields)
    }
    for name in ("fx", "fy"):
        if not values[name] > 0:
            raise DatasetParseError(path, number, "focal length must be positive", name)
    for name in ("width", "height"):
        if values[name] != int(values[name]) or values[name] <= 0:
            raise DatasetParseError(
                path, number, "image size must be a positive integer", name
            )
    try:
        return CameraIntrinsics(
            fx=values["fx"],
            fy=values["fy"],
            cx=values["cx"],
            cy=values["cy"],
            width=int(values["width"]),
            height=int(values["height"]),
        )
    except ConfigurationError as err:
        raise DatasetParseError(path, number, str(err)) from err


def write_calibration(intrinsics: CameraIntrinsics, path: str | Path) -> None:
    k = intrinsics
    with open(path, "w", encoding="utf-8") as f:
        f.write(
            "%.17g %.17g %.17g %.17g %d %d\n"
            % (k.fx, k.fy, k.cx, k.cy, k.width, k.height)
        )


def load_trajectory(path: str | Path) -> Trajectory:
    """
    Parse a TUM trajectory file of world-from-camera poses.

    Quaternions (x, y, z, w) are renormalized when their norm is within
    1e-3 of one and rejected otherwise.

    Raises
    ------
    DatasetParseError
        On malformed lines, bad quaternions or non-increasing timestamps.
    """
    path = Path(path)
    timestamps: list[float] = []
    poses: list[Pose] = []
    for number, fields in _data_lines(path):
        if len(fields) != len(TRAJECTORY_FIELDS):
            raise DatasetParseError(
                path, number, f"expected 8 fields, got {len(fields)}"
            )
        values = [
            _parse_float(path, number, raw, name)
            for name, raw in zip(TRAJECTORY_FIELDS, fields)
        ]
        timestamp = values[0]
        if timestamps and timestamp <= timestamps[-1]:
            raise DatasetParseError(
                path,
                number,
                f"timestamp {fields[0]} does not increase "
                f"(previous {timestamps[-1]!r})",
                "timestamp",
            )
        quaternion = np.array(values[4:8])
        norm = float(np.linalg.norm(quaternion))
        if abs(norm - 1.0) > QUATERNION_TOLERANCE:
            raise DatasetParseError(
                path, number, f"quaternion norm {norm:.6f} is not 1", "quaternion"
            )
        timestamps.append(timestamp)
        poses.append(Pose.from_quaternion(values[1:4], quaternion / norm))
    return Trajectory(timestamps, poses)


def write_trajectory(trajectory: Trajectory, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for timestamp, pose in zip(trajectory.timestamps, trajectory.poses):
            values = [*pose.translation, *pose.to_quaternion()]
            f.write(
                TIMESTAMP_FORMAT % timestamp
                + " "
                + " ".join("%.17g" % v for v in values)
                + "\n"
            )


def load_image(path: str | Path) -> GrayImage:
    """Load an 8-bit image as grayscale intensities in [0, 1]."""
    try:
        with Image.open(path) as image:
            pixels = np.asarray(image.convert("L"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as err:
        raise _unreadable(path, err) from err
    return GrayImage.from_uint8(pixels)


def write_image(image: GrayImage, path: str | Path) -> None:
    pixels = np.round(image.intensities * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PNG")


def _index_images(image_dir: Path) -> tuple[FloatArray, list[Path]]:
    """Image files with numeric stems, sorted by their timestamp."""
    if not image_dir.is_dir():
        raise ConfigurationError(f"image directory not found: {image_dir}")
    entries = []
    for path in image_dir.iterdir():
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            entries.append((float(path.stem), path))
        except ValueError:
            logger.debug("ignoring image without a timestamp name: %s", path.name)
    entries.sort(key=lambda entry: (entry[0], entry[1].name))
    stamps = np.array([stamp for stamp, _ in entries], dtype=np.float64)
    return stamps, [path for _, path in entries]


def associate_timestamp(
    timestamp: float, stamps: FloatArray, tolerance: float
) -> int | None:
    """
    Index of the image for a trajectory timestamp in sorted `stamps`.

    An exact match wins; otherwise the nearest stamp within `tolerance`
    seconds (the earlier one on a tie). None when nothing qualifies.
    """
    if len(stamps) == 0:
        return None
    position = int(np.searchsorted(stamps, timestamp))
    if position < len(stamps) and stamps[position] == timestamp:
        return position
    candidates = [i for i in (position - 1, position) if 0 <= i < len(stamps)]
    best = min(candidates, key=lambda i: (abs(stamps[i] - timestamp), i))
    if abs(stamps[best] - timestamp) <= tolerance:
        return best
    return None


def load_sequence(
    manifest: DatasetManifest,
) -> Iterator[tuple[float, GrayImage, Pose]]:
    """
    Yield (timestamp, image, world-from-camera pose) per trajectory entry.

    Entries without an associated image are dropped; the drop count is
    logged once the sequence is exhausted.
    """
    trajectory = load_trajectory(manifest.trajectory)
    stamps, paths = _index_images(Path(manifest.image_dir))
    dropped = 0
    for timestamp, pose in zip(trajectory.timestamps, trajectory.poses):
        index = associate_timestamp(timestamp, stamps, manifest.association_tolerance)
        if index is None:
            dropped += 1
            continue
        yield timestamp, load_image(paths[index]), pose
    if dropped:
        logger.warning(
            "dropped %d of %d trajectory entries without a matching image",
            dropped,
            len(trajectory),
        )


def _depth_values(depth: RasterBuffers | ArrayLike) -> FloatArray:
    if isinstance(depth, RasterBuffers):
        return np.where(depth.valid, depth.inv_depth, 0.0)
    return np.asarray(depth, dtype=np.float64)


def write_depth_pfm(depth: RasterBuffers | ArrayLike, path: str | Path) -> None:
    """
    Write inverse depth as a little-endian grayscale PFM (scale -1.0).

    Rows are stored bottom to top as the format requires; invalid pixels
    hold 0.0.
    """
    values = _depth_values(depth)
    height, width = values.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(values).astype("<f4").tobytes())


def read_depth_pfm(path: str | Path) -> FloatArray:
    """Read a grayscale PFM into a (height, width) array, top row first."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            header = [f.readline().decode("ascii").strip() for _ in range(3)]
            payload = f.read()
    except (OSError, UnicodeDecodeError) as err:
        raise _unreadable(path, err) from err
    if header[0] != "Pf":
        raise DatasetParseError(path, 1, f"not a grayscale PFM: {header[0]!r}")
    try:
        width, height = (int(v) for v in header[1].split())
        scale = float(header[2])
    except ValueError as err:
        raise DatasetParseError(path, 2, "malformed PFM header") from err
    dtype = "<f4" if scale < 0 else ">f4"
    if len(payload) != 4 * width * height:
        raise DatasetParseError(
            path, 4, f"expected {4 * width * height} data bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return np.flipud(data).astype(np.float64)


def write_depth_png(depth: RasterBuffers | ArrayLike, path: str | Path) -> Path:
    """
    Write inverse depth as an 8-bit PNG, white for high inverse depth.

    Valid pixels are normalized per image onto 1..255 and invalid pixels are
    black. The min and max inverse depth go to a `.txt` sidecar next to the
    image, whose path is returned.
    """
    values = _depth_values(depth)
    valid = (values > 0.0) & np.isfinite(values)
    pixels = np.zeros(values.shape, dtype=np.uint8)
    sidecar = Path(path).with_suffix(".txt")
    if np.any(valid):
        low, high = float(values[valid].min()), float(values[valid].max())
        span = high - low
        scaled = (values[valid] - low) / span if span > 0 else np.ones(valid.sum())
        pixels[valid] = (1.0 + np.round(scaled * 254.0)).astype(np.uint8)
        limits = "%.17g %.17g\n" % (low, high)
    else:
        limits = "nan nan\n"
    Image.fromarray(pixels).save(path, format="PNG")
    sidecar.write_text(limits, encoding="utf-8")
    return sidecar


def write_normal_png(
    normals: FloatArray, path: str | Path, valid: BoolArray | None = None
) -> None:
    """
    Write unit normals (H, W, 3) as RGB, each axis mapped by (n + 1) / 2.

    Invalid pixels (zero normals unless `valid` is given) are black.
    """
    n = np.asarray(normals, dtype=np.float64)
    mask = np.linalg.norm(n, axis=2) > 0.0 if valid is None else np.asarray(valid)
    rgb = np.zeros(n.shape, dtype=np.uint8)
    mapped = np.floor((np.clip(n[mask], -1.0, 1.0) + 1.0) / 2.0 * 255.0 + 0.5)
    rgb[mask] = mapped.astype(np.uint8)
    Image.fromarray(rgb).save(path, format="PNG")


def write_ply(keyframe: Keyframe, buffers: RasterBuffers, path: str | Path) -> int:
    """
    Export every valid pixel as a world-frame point with normal and gray value.

    Returns
    -------
    int
        The number of vertices written.
    """
    valid = buffers.valid
    ys, xs = np.nonzero(valid)
    rays = backproject_rays(np.stack([xs, ys], axis=1), keyframe.intrinsics)
    points = keyframe.pose.transform_points(rays / buffers.inv_depth[ys, xs][:, None])
    normals = keyframe.pose.rotate(pixel_normals(keyframe, buffers)[ys, xs])
    gray = np.round(keyframe.image.intensities[ys, xs] * 255.0).astype(np.int64)

    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("ply\n")
        f.write("format ascii 1.0\n")
        f.write(f"element vertex {len(xs)}\n")
        for name in ("x", "y", "z", "nx", "ny", "nz"):
            f.write(f"property float {name}\n")
        f.write("property uchar gray\n")
        f.write("end_header\n")
        for point, normal, value in zip(points, normals, gray):
            f.write(
                "%.9g %.9g %.9g %.9g %.9g %.9g %d\n" % (*point, *normal, value)
            )
    return len(xs)


def read_ply(path: str | Path) -> tuple[FloatArray, FloatArray, np.ndarray]:
    """Read an ASCII PLY written by write_ply: points, normals and gray values."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except (OSError, UnicodeDecodeError) as err:
        raise _unreadable(path, err) from err
    try:
        end = lines.index("end_header")
        count = next(
            int(line.split()[2])
            for line in lines[:end]
            if line.startswith("element vertex")
        )
    except (ValueError, StopIteration, IndexError) as err:
        raise DatasetParseError(path, 1, "malformed PLY header") from err
    rows = lines[end + 1 : end + 1 + count]
    data = np.array([row.split() for row in rows], dtype=np.float64).reshape(count, 7)
    return data[:, :3], data[:, 3:6], data[:, 6].astype(np.int64)


def write_surfel_map(keyframe: Keyframe, path: str | Path) -> None:
    """
    Serialize a keyframe's surfels as text.

    The header line holds the keyframe pose `tx ty tz qx qy qz qw` and the
    intrinsics `fx fy cx cy width height`; each further line is one surfel
    `id ray_x ray_y inv_depth n_x n_y n_z radius_px last_residual last_seen`.
    """
    k = keyframe.intrinsics
    pose = keyframe.pose
    header = [*pose.translation, *pose.to_quaternion(), k.fx, k.fy, k.cx, k.cy]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(" ".join("%.17g" % v for v in header) + f" {k.width} {k.height}\n")
        for s in sorted(keyframe.surfels, key=lambda surfel: surfel.id):
            values = [s.ray[0], s.ray[1], s.inv_depth, *s.normal, s.radius_px]
            f.write(
                f"{s.id} "
                + " ".join("%.17g" % v for v in values)
                + " %.17g %d\n" % (s.last_residual, s.last_seen)
            )


def read_surfel_map(
    path: str | Path,
) -> tuple[Pose, CameraIntrinsics, list[Surfel]]:
    """Read a surfel map written by write_surfel_map."""
    path = Path(path)
    lines = list(_data_lines(path))
    if not lines:
        raise DatasetParseError(path, 0, "empty surfel map")
    number, header = lines[0]
    if len(header) != 13:
        raise DatasetParseError(
            path, number, f"expected 13 header fields, got {len(header)}"
        )
    values = [_parse_float(path, number, raw, "header") for raw in header]
    pose = Pose.from_quaternion(values[0:3], values[3:7])
    intrinsics = CameraIntrinsics(
        values[7], values[8], values[9], values[10], int(values[11]), int(values[12])
    )

    surfels = []
    for number, fields in lines[1:]:
        if len(fields) != len(SURFEL_FIELDS):
            raise DatasetParseError(
                path, number, f"expected {len(SURFEL_FIELDS)} fields, got {len(fields)}"
            )
        record = {
            name: _parse_float(path, number, raw, name)
            for name, raw in zip(SURFEL_FIELDS, fields)
        }
        surfels.append(
            Surfel(
                id=int(record["id"]),
                ray=np.array([record["ray_x"], record["ray_y"], 1.0]),
                inv_depth=record["inv_depth"],
                normal=np.array([record["n_x"], record["n_y"], record["n_z"]]),
                radius_px=record["radius_px"],
                last_residual=record["last_residual"],
                last_seen=int(record["last_seen"]),
            )
        )
    return pose, intrinsics, surfels


def write_synthetic_sequence(
    scene: PlaneScene,
    trajectory: Trajectory,
    intrinsics: CameraIntrinsics,
    directory: str | Path,
    noise_sigma: float = 0.0,
    seed: int = 0,
    threads: int = 1,
) -> DatasetManifest:
    """
    Render a trajectory into the dataset layout, plus `gt/<timestamp>.pfm`
    ground-truth inverse depth per frame.
    """
    root = Path(directory)
    image_dir = root / "images"
    gt_dir = root / "gt"
    image_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(
        image_dir=image_dir,
        calibration=root / "calib.txt",
        trajectory=root / "groundtruth.txt",
    )
    write_calibration(intrinsics, manifest.calibration)
    write_trajectory(trajectory, manifest.trajectory)
    for index, (timestamp, pose) in enumerate(
        zip(trajectory.timestamps, trajectory.poses)
    ):
        image, gt_inv_depth, _ = render(
            scene, pose, intrinsics, noise_sigma, seed + index, threads
        )
        name = TIMESTAMP_FORMAT % timestamp
        write_image(image, image_dir / f"{name}.png")
        write_depth_pfm(gt_inv_depth, gt_dir / f"{name}.pfm")
    logger.info("wrote %d synthetic frames to %s", len(trajectory), root)
    return manifest
