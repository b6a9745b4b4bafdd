"""Geometric primitives shared across the tracking pipeline.

Points are millimetres, pixels are subpixel image coordinates, angles are
degrees unless a name says otherwise. The device frame convention: +z along
the needle rest axis, +y up; azimuth rotates about y (positive toward +x),
elevation tilts toward +y.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

# Rays closer to parallel than this disparity are numerically fragile.
NEAR_PARALLEL_DISPARITY_PX = 0.5

ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class Point3:
    """A 3D point in millimetres."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError(f"non-finite point ({self.x}, {self.y}, {self.z})")

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @classmethod
    def from_array(cls, a) -> "Point3":
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class SphericalTarget:
    """Direction + range of a target expressed in the device frame."""

    azimuth_deg: float
    elevation_deg: float
    radius_mm: float

    def __post_init__(self):
        if self.radius_mm < 0:
            raise ValueError("radial distance must be >= 0")


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation, x' = R @ x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        """Apply to a (3,) point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors) -> np.ndarray:
        """Rotate direction vectors (no translation)."""
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self ∘ other)(x) = self(other(x))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def orthonormality_error(self) -> float:
        return float(np.abs(self.rotation.T @ self.rotation - np.eye(3)).max())

    def validate(self, tol: float = ORTHONORMAL_TOL) -> None:
        if self.orthonormality_error() > tol:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > tol:
            raise ValueError("rotation must be proper (det = +1)")


@dataclass(frozen=True)
class StereoRig:
    """Rectified pinhole stereo pair: identical intrinsics, horizontal baseline.

    ``pose`` maps world coordinates into the left camera frame. The right
    camera sits at +x ``baseline_mm`` in that frame, so disparity
    u_left - u_right is positive for points in front of the rig.
    """

    focal_px: float
    cx: float
    cy: float
    baseline_mm: float
    width: int = 1280
    height: int = 720
    pose: RigidTransform = RigidTransform(np.eye(3), np.zeros(3))

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ValueError("focal length must be > 0")
        if self.baseline_mm <= 0:
            raise ValueError("baseline must be > 0")

    def camera_center(self, camera: str) -> np.ndarray:
        """World-space optical centre of 'left' or 'right'."""
        offset = np.array([self._cam_offset(camera), 0.0, 0.0])
        inv = self.pose.inverse()
        return inv.apply(offset)

    def _cam_offset(self, camera: str) -> float:
        if camera == "left":
            return 0.0
        if camera == "right":
            return self.baseline_mm
        raise ValueError(f"camera must be 'left' or 'right', got {camera!r}")


def project(points, rig: StereoRig, camera: str) -> np.ndarray:
    """Pinhole-project world points into one camera; returns (u, v) pixels.

    Raises ValueError for points at or behind the camera plane.
    """
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    cam = rig.pose.apply(p)
    cam[:, 0] -= rig._cam_offset(camera)
    z = cam[:, 2]
    if np.any(z <= 0):
        raise ValueError("point at or behind the camera (non-positive depth)")
    uv = np.empty((len(cam), 2))
    uv[:, 0] = rig.focal_px * cam[:, 0] / z + rig.cx
    uv[:, 1] = rig.focal_px * cam[:, 1] / z + rig.cy
    return uv[0] if single else uv


def triangulate(left_px, right_px, rig: StereoRig) -> np.ndarray:
    """Reconstruct world points from matched pixel pairs.

    Midpoint of the common perpendicular between the two back-projected
    rays (the least-squares ray intersection). Accepts (2,) or (N, 2)
    pixel arrays. Requires positive disparity u_left - u_right; disparities
    under NEAR_PARALLEL_DISPARITY_PX trigger a conditioning warning.
    """
    lp = np.atleast_2d(np.asarray(left_px, dtype=float))
    rp = np.atleast_2d(np.asarray(right_px, dtype=float))
    single = np.asarray(left_px).ndim == 1
    if lp.shape != rp.shape:
        raise ValueError("left/right pixel arrays must have the same shape")

    disparity = lp[:, 0] - rp[:, 0]
    if np.any(disparity <= 0):
        raise ValueError("non-positive disparity: point not reconstructable on a rectified rig")
    if np.any(disparity < NEAR_PARALLEL_DISPARITY_PX):
        warnings.warn("near-parallel rays: disparity below "
                      f"{NEAR_PARALLEL_DISPARITY_PX} px, depth is ill-conditioned")

    inv = rig.pose.inverse()
    f, cx, cy, b = rig.focal_px, rig.cx, rig.cy, rig.baseline_mm

    def ray(px, offset):
        d_cam = np.column_stack([(px[:, 0] - cx) / f, (px[:, 1] - cy) / f, np.ones(len(px))])
        origin = inv.apply(np.array([offset, 0.0, 0.0]))
        return origin, inv.rotate(d_cam)

    o1, d1 = ray(lp, 0.0)
    o2, d2 = ray(rp, b)

    # closest points on the two rays: solve the 2x2 normal equations
    a = np.einsum("ij,ij->i", d1, d1)
    bb = np.einsum("ij,ij->i", d1, d2)
    c = np.einsum("ij,ij->i", d2, d2)
    w0 = o1 - o2
    d1w = d1 @ w0
    d2w = d2 @ w0
    denom = a * c - bb * bb
    s = (bb * d2w - c * d1w) / denom
    u = (a * d2w - bb * d1w) / denom
    mid = 0.5 * ((o1 + s[:, None] * d1) + (o2 + u[:, None] * d2))
    return mid[0] if single else mid


def to_spherical(v) -> SphericalTarget:
    """Map a device-frame vector to (azimuth, elevation, radius).

    Azimuth = atan2(x, z) rotates about +y; elevation = asin(y / |v|).
    """
    v = np.asarray(v, dtype=float).reshape(3)
    r = float(np.linalg.norm(v))
    if r == 0.0:
        raise ValueError("cannot map the zero vector to spherical coordinates")
    az = math.degrees(math.atan2(v[0], v[2]))
    # asin(y/r) evaluated as atan2 for stability near the poles
    el = math.degrees(math.atan2(v[1], math.hypot(v[0], v[2])))
    return SphericalTarget(az, el, r)


def from_spherical(azimuth_deg: float, elevation_deg: float, radius_mm: float = 1.0) -> np.ndarray:
    """Inverse of to_spherical: device-frame vector for the given angles."""
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    return radius_mm * np.array([math.cos(el) * math.sin(az),
                                 math.sin(el),
                                 math.cos(el) * math.cos(az)])


def look_at_rotation(direction, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Rotation whose +z axis points along ``direction`` (world frame).

    Used to pose the steering device so its needle rest axis aims at a
    point of interest.
    """
    z = np.asarray(direction, dtype=float)
    n = np.linalg.norm(z)
    if n == 0:
        raise ValueError("zero direction")
    z = z / n
    up = np.asarray(up, dtype=float)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-9:  # direction parallel to up
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])
