"""Rigid transforms, pinhole cameras, and perspective crop construction.

Conventions used throughout the package:

* Pixel (0, 0) is the *center* of the top-left pixel; x grows right, y grows
  down. An image of width W spans pixel centers 0 .. W-1.
* Rotations are stored as 3x3 row-major matrices acting on column vectors.
  Axis-angle appears only as the local chart for optimizer increments.
* Translations, depths and model coordinates are in millimeters.
* A :class:`Pose` maps model coordinates to camera coordinates,
  ``x_cam = R @ x_model + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBox, NonPositiveDepth

ROTATION_TOL = 1e-9


def _frozen(a, shape, name):
    arr = np.array(a, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


def rotation_defect(m: np.ndarray) -> float:
    """Frobenius distance of ``m^T m`` from the identity."""
    m = np.asarray(m, dtype=float)
    return float(np.linalg.norm(m.T @ m - np.eye(3)))


def check_rotation(m) -> np.ndarray:
    """Return ``m`` as a read-only array after validating it is a rotation.

    Raises ValueError if ``m`` is not orthonormal within ``ROTATION_TOL``
    or has determinant -1.
    """
    arr = _frozen(m, (3, 3), "rotation")
    if rotation_defect(arr) >= ROTATION_TOL:
        raise ValueError("matrix is not orthonormal")
    if np.linalg.det(arr) < 0:
        raise ValueError("matrix is a reflection, not a rotation")
    return arr


@dataclass(frozen=True)
class Pose:
    """Rigid model-to-camera transform (rotation matrix, translation mm)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,), "translation"))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map model-frame points (..., 3) into the camera frame."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics. Focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")


@dataclass(frozen=True)
class CropCamera:
    """Virtual pinhole camera looking at a region of a source camera.

    ``rotation_to_source`` maps crop-camera ray directions into the source
    camera frame; both cameras share the optical center, so the transform
    between the two camera frames is the pure rotation
    ``x_source = rotation_to_source @ x_crop``.
    """

    intrinsics: CameraIntrinsics
    rotation_to_source: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation_to_source", check_rotation(self.rotation_to_source))


def compose(a: Pose, b: Pose) -> Pose:
    """Pose that applies ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    return Pose(p.rotation.T, -(p.rotation.T @ p.translation))


def geodesic_deg(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees.

    Uses the atan2 form, which stays accurate near 0 and near 180 degrees
    where the bare arccos-of-trace expression loses precision.
    """
    rel = np.asarray(a, dtype=float).T @ np.asarray(b, dtype=float)
    w = np.array([rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]])
    sin_theta = 0.5 * np.linalg.norm(w)
    cos_theta = 0.5 * (np.trace(rel) - 1.0)
    return math.degrees(math.atan2(sin_theta, cos_theta))


def project(points, pose: Pose, cam: CameraIntrinsics) -> np.ndarray:
    """Project model-frame points (..., 3) to pixels (..., 2).

    Raises NonPositiveDepth if any point has camera-frame z <= 0.
    """
    xc = pose.apply(points)
    z = xc[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("point at or behind the camera plane")
    u = cam.fx * xc[..., 0] / z + cam.cx
    v = cam.fy * xc[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def project_camera_frame(xc, cam: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixels (..., 2)."""
    xc = np.asarray(xc, dtype=float)
    z = xc[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("point at or behind the camera plane")
    return np.stack(
        [cam.fx * xc[..., 0] / z + cam.cx, cam.fy * xc[..., 1] / z + cam.cy], axis=-1
    )


def backproject(pixels, depth, cam: CameraIntrinsics) -> np.ndarray:
    """Lift pixels (..., 2) with depths (...) to camera-frame points (..., 3).

    ``depth`` is the camera-frame z coordinate, not the ray length.
    """
    pixels = np.asarray(pixels, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise NonPositiveDepth("depth must be positive")
    x = (pixels[..., 0] - cam.cx) * depth / cam.fx
    y = (pixels[..., 1] - cam.cy) * depth / cam.fy
    return np.stack([x, y, np.broadcast_to(depth, x.shape).astype(float)], axis=-1)


def pixel_rays(pixels, cam: CameraIntrinsics) -> np.ndarray:
    """Unnormalized ray directions (..., 3) with z = 1 through pixels."""
    pixels = np.asarray(pixels, dtype=float)
    x = (pixels[..., 0] - cam.cx) / cam.fx
    y = (pixels[..., 1] - cam.cy) / cam.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def make_crop_camera(box, source: CameraIntrinsics, crop_size: int = 280, pad: float = 1.2) -> CropCamera:
    """Build a virtual camera whose optical axis pierces the box center.

    The crop camera shares the source camera's center of projection and is
    rotated so the ray through the box center becomes its optical axis. The
    focal length is chosen isotropically so the box, enlarged by ``pad``,
    spans the crop; the principal point sits at exactly
    ``(crop_size / 2, crop_size / 2)``.

    Args:
        box: (x0, y0, x1, y1) in source pixels, x0 < x1 and y0 < y1.
        source: source camera intrinsics.
        crop_size: output crop is crop_size x crop_size pixels.
        pad: isotropic padding factor applied to the box half-extent.

    Returns:
        CropCamera with square-pixel intrinsics.
    """
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (x1 > x0 and y1 > y0):
        raise DegenerateBox(f"box has non-positive extent: {box}")
    if crop_size < 2 or pad <= 0:
        raise ValueError("crop_size must be >= 2 and pad positive")

    center = np.array([0.5 * (x0 + x1), 0.5 * (y0 + y1)])
    z_axis = pixel_rays(center, source)
    z_axis = z_axis / np.linalg.norm(z_axis)
    # z has a positive third component, so it is never parallel to +y.
    x_axis = np.cross([0.0, 1.0, 0.0], z_axis)
    x_axis = x_axis / np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    rot_crop_to_source = np.stack([x_axis, y_axis, z_axis], axis=1)

    corners = np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]])
    rays = pixel_rays(corners, source) @ rot_crop_to_source  # rotate into crop frame
    tangents = rays[:, :2] / rays[:, 2:3]
    half_extent = float(np.max(np.abs(tangents)))
    if half_extent <= 0:
        raise DegenerateBox("box collapses to the optical axis")
    f = (crop_size / 2.0) / (pad * half_extent)

    intr = CameraIntrinsics(f, f, crop_size / 2.0, crop_size / 2.0, crop_size, crop_size)
    return CropCamera(intr, rot_crop_to_source)


def pose_in_crop(pose: Pose, crop: CropCamera) -> Pose:
    """Re-express a source-camera-frame pose in the crop camera frame."""
    r = crop.rotation_to_source.T
    return Pose(r @ pose.rotation, r @ pose.translation)


def pose_from_crop(pose_crop: Pose, crop: CropCamera) -> Pose:
    """Inverse of :func:`pose_in_crop`."""
    r = crop.rotation_to_source
    return Pose(r @ pose_crop.rotation, r @ pose_crop.translation)


def warp_source_to_crop(pixels, source: CameraIntrinsics, crop: CropCamera) -> np.ndarray:
    """Map source-image pixels (..., 2) to crop pixels (..., 2)."""
    rays = pixel_rays(pixels, source) @ crop.rotation_to_source
    return project_camera_frame(rays, crop.intrinsics)


def transfer_pixels(pixels, src: CropCamera, dst: CropCamera) -> np.ndarray:
    """Map pixels between two crops of the same source camera."""
    rays = pixel_rays(pixels, src.intrinsics) @ src.rotation_to_source.T @ dst.rotation_to_source
    return project_camera_frame(rays, dst.intrinsics)


def skew(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def rotvec_to_matrix(w) -> np.ndarray:
    """Rodrigues: axis-angle vector (3,) to rotation matrix."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    k = skew(w)
    if theta < 1e-12:
        # Second-order expansion keeps orthonormality to machine precision.
        return np.eye(3) + k + 0.5 * (k @ k)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def matrix_to_rotvec(m) -> np.ndarray:
    """Inverse Rodrigues, stable over the full angle range including pi."""
    m = np.asarray(m, dtype=float)
    w = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    sin_theta = 0.5 * np.linalg.norm(w)
    cos_theta = 0.5 * (np.trace(m) - 1.0)
    theta = math.atan2(sin_theta, cos_theta)
    if theta < 1e-10:
        return 0.5 * w
    if theta < math.pi - 1e-6:
        return w * (theta / (2.0 * sin_theta))
    # Near pi the skew part vanishes; recover the axis from the symmetric part.
    diag = np.clip((np.diag(m) + 1.0) / 2.0, 0.0, None)
    axis = np.sqrt(diag)
    k = int(np.argmax(axis))
    for i in range(3):
        if i != k and m[k, i] + m[i, k] < 0:
            axis[i] = -axis[i]
    if w[k] < 0:
        axis = -axis
    axis = axis / np.linalg.norm(axis)
    return axis * theta


def orthonormalize(m) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (polar decomposition)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def slerp_rotation(r0: np.ndarray, r1: np.ndarray, t: float) -> np.ndarray:
    """Geodesic interpolation between two rotation matrices."""
    rel = np.asarray(r0, dtype=float).T @ np.asarray(r1, dtype=float)
    return np.asarray(r0, dtype=float) @ rotvec_to_matrix(t * matrix_to_rotvec(rel))


def interpolate_pose(a: Pose, b: Pose, t: float) -> Pose:
    """Slerp the rotation, lerp the translation. Exact at the endpoints."""
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    rot = orthonormalize(slerp_rotation(a.rotation, b.rotation, t))
    return Pose(rot, (1.0 - t) * a.translation + t * b.translation)


def quat_to_matrix(q) -> np.ndarray:
    """Unit quaternion (x, y, z, w) to rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation from a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))


def rot_x(deg: float) -> np.ndarray:
    return rotvec_to_matrix([math.radians(deg), 0.0, 0.0])


def rot_y(deg: float) -> np.ndarray:
    return rotvec_to_matrix([0.0, math.radians(deg), 0.0])


def rot_z(deg: float) -> np.ndarray:
    return rotvec_to_matrix([0.0, 0.0, math.radians(deg)])
