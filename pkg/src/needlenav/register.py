"""Rigid and thin-plate-spline registration of labelled marker pairs.

The rigid fit (orthogonal Procrustes) gives the pose of a marker
constellation under the assumption that it moved as one body. The TPS
fit additionally absorbs smooth non-rigid deformation, which is what
carries a surface-derived motion estimate to an interior lesion.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import Point3, RigidTransform

COND_WARN = 1e10
COND_SINGULAR = 1e14


def _as_array(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        return np.asarray(points, dtype=float).reshape(-1, 3)
    return np.array([p.to_array() if isinstance(p, Point3) else np.asarray(p, float)
                     for p in points], dtype=float).reshape(-1, 3)


@dataclass(frozen=True)
class MarkerModel:
    """Marker and lesion centroids segmented in the model (MRI) frame, mm."""

    markers: np.ndarray
    lesions: np.ndarray
    marker_ids: tuple = ()
    lesion_ids: tuple = ()

    def __post_init__(self):
        markers = _as_array(self.markers)
        lesions = _as_array(self.lesions)
        if len(markers) < 4:
            raise ValueError(f"need at least 4 markers, got {len(markers)}")
        if len(lesions) < 1:
            raise ValueError("need at least 1 lesion centroid")
        diff = markers[:, None, :] - markers[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, np.inf)
        if dist.min() <= 0:
            raise ValueError("duplicate marker centroids")
        object.__setattr__(self, "markers", markers)
        object.__setattr__(self, "lesions", lesions)
        if not self.marker_ids:
            object.__setattr__(self, "marker_ids", tuple(range(len(markers))))
        if not self.lesion_ids:
            object.__setattr__(self, "lesion_ids", tuple(range(len(lesions))))

    @classmethod
    def from_json(cls, text: str) -> "MarkerModel":
        doc = json.loads(text)
        markers = np.array([[m["x"], m["y"], m["z"]] for m in doc["markers"]], float)
        lesions = np.array([[m["x"], m["y"], m["z"]] for m in doc["lesions"]], float)
        return cls(markers=markers, lesions=lesions,
                   marker_ids=tuple(m["id"] for m in doc["markers"]),
                   lesion_ids=tuple(m["id"] for m in doc["lesions"]))

    def to_json(self) -> str:
        return json.dumps({
            "markers": [{"id": i, "x": p[0], "y": p[1], "z": p[2]}
                        for i, p in zip(self.marker_ids, self.markers.tolist())],
            "lesions": [{"id": i, "x": p[0], "y": p[1], "z": p[2]}
                        for i, p in zip(self.lesion_ids, self.lesions.tolist())],
        }, indent=2)


@dataclass(frozen=True)
class TpsModel:
    """Fitted 3D thin-plate spline u(p) = b + A p + sum_i w_i |p - c_i|."""

    control_points: np.ndarray
    warp: np.ndarray
    affine: np.ndarray
    offset: np.ndarray
    lam: float

    def __post_init__(self):
        c = _as_array(self.control_points)
        w = np.asarray(self.warp, float)
        if w.shape != c.shape:
            raise ValueError("warp coefficients must be one 3-vector per control point")
        p_block = np.hstack([np.ones((len(c), 1)), c])
        if np.max(np.abs(p_block.T @ w)) > 1e-8:
            raise ValueError("TPS side conditions violated")
        object.__setattr__(self, "control_points", c)
        object.__setattr__(self, "warp", w)
        object.__setattr__(self, "affine", np.asarray(self.affine, float).reshape(3, 3))
        object.__setattr__(self, "offset", np.asarray(self.offset, float).reshape(3))


@dataclass(frozen=True)
class LesionEstimate:
    position: np.ndarray
    kind: str
    residual: float

    def __post_init__(self):
        if self.kind not in ("rigid", "tps"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.residual < 0:
            raise ValueError("residual must be >= 0")
        object.__setattr__(self, "position", np.asarray(self.position, float).reshape(3))


def procrustes(src, dst) -> RigidTransform:
    """Least-squares rigid transform R, t with dst ~ R src + t.

    Kabsch solution via SVD of the cross-covariance; the sign of the
    smallest singular direction is flipped when needed so the result is
    always a proper rotation, never a reflection.
    """
    s = _as_array(src)
    d = _as_array(dst)
    if s.shape != d.shape:
        raise ValueError(f"point counts differ: {len(s)} vs {len(d)}")
    if len(s) < 3:
        raise ValueError("need at least 3 point pairs")
    cs, cd = s.mean(axis=0), d.mean(axis=0)
    s0, d0 = s - cs, d - cd
    sing = np.linalg.svd(s0, compute_uv=False)
    if sing[1] < 1e-9 * max(sing[0], 1.0):
        raise ValueError("source points are collinear; rotation not determined")
    u, _, vt = np.linalg.svd(s0.T @ d0)
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    return RigidTransform(rotation=rot, translation=cd - rot @ cs)


def _kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)


def fit_tps(src, dst, lam: float = 0.0) -> TpsModel:
    """Fit a 3D thin-plate spline mapping src control points to dst.

    Solves the standard augmented linear system with kernel phi(r) = r;
    lam = 0 interpolates exactly, lam > 0 trades marker fit for
    smoothness and regularizes duplicate control points.
    """
    s = _as_array(src)
    d = _as_array(dst)
    if s.shape != d.shape:
        raise ValueError(f"point counts differ: {len(s)} vs {len(d)}")
    n = len(s)
    if n < 4:
        raise ValueError("need at least 4 point pairs")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    sing = np.linalg.svd(s - s.mean(axis=0), compute_uv=False)
    if sing[2] < 1e-9 * max(sing[0], 1.0):
        raise ValueError("control points are coplanar; spline not determined")

    # the system is solved in centered unit-scale source coordinates: in mm
    # units the kernel block and the homogeneous column live three orders of
    # magnitude apart and the raw matrix reads as ill-conditioned long before
    # the marker geometry is actually degenerate. phi(r) = r is homogeneous
    # in scale, so the coefficients map back exactly
    mid = s.mean(axis=0)
    scale = float(np.mean(np.linalg.norm(s - mid, axis=1)))
    q = (s - mid) / scale

    # phi(r) = +r is conditionally negative definite on the side-condition
    # subspace, so the smoothing direction is -lam along the diagonal
    k = _kernel(q, q) - (lam / scale) * np.eye(n)
    p = np.hstack([np.ones((n, 1)), q])
    lhs = np.block([[k, p], [p.T, np.zeros((4, 4))]])
    rhs = np.vstack([d, np.zeros((4, 3))])

    cond = np.linalg.cond(lhs)
    if cond > COND_SINGULAR:
        raise ValueError(
            "singular TPS system (duplicate control points?); set lam > 0 to regularize")
    if cond > COND_WARN:
        warnings.warn(f"ill-conditioned TPS system, cond={cond:.2e}", RuntimeWarning)

    coef = np.linalg.solve(lhs, rhs)
    warp, poly = coef[:n] / scale, coef[n:]
    affine = poly[1:].T / scale
    return TpsModel(control_points=s, warp=warp,
                    affine=affine, offset=poly[0] - affine @ mid, lam=lam)


def tps_apply(model: TpsModel, p):
    """Evaluate the fitted spline at one point or an (n, 3) batch."""
    single = isinstance(p, Point3)
    q = _as_array([p] if single or np.asarray(p).ndim == 1 else p)
    radii = _kernel(q, model.control_points)
    out = model.offset + q @ model.affine.T + radii @ model.warp
    if single:
        return Point3.from_array(out[0])
    return out[0] if np.asarray(p).ndim == 1 else out


def tps_residual(model: TpsModel, src, dst) -> float:
    mapped = tps_apply(model, _as_array(src))
    return float(np.sqrt(np.mean(np.sum((mapped - _as_array(dst)) ** 2, axis=1))))


def estimate_lesion(model: MarkerModel, assignment: dict, scene_points,
                    kind: str = "tps", lam: float = 0.0,
                    lesion_index: int = 0) -> LesionEstimate:
    """Map a lesion centroid to the operating space via labelled pairs.

    assignment maps model marker index to scene point index (a Labeling's
    assignment). The transform is fitted on those pairs only; unlabelled
    markers do not participate.
    """
    pts = _as_array(scene_points)
    idx = sorted(assignment)
    if kind == "rigid" and len(idx) < 3:
        raise ValueError(f"rigid fit needs >= 3 pairs, got {len(idx)}")
    if kind == "tps" and len(idx) < 4:
        raise ValueError(f"tps fit needs >= 4 pairs, got {len(idx)}")
    src = model.markers[idx]
    dst = pts[[assignment[i] for i in idx]]
    lesion = model.lesions[lesion_index]

    if kind == "rigid":
        xf = procrustes(src, dst)
        mapped = xf.apply(src)
        residual = float(np.sqrt(np.mean(np.sum((mapped - dst) ** 2, axis=1))))
        return LesionEstimate(position=xf.apply(lesion), kind="rigid", residual=residual)
    if kind == "tps":
        spline = fit_tps(src, dst, lam=lam)
        return LesionEstimate(position=tps_apply(spline, lesion), kind="tps",
                              residual=tps_residual(spline, src, dst))
    raise ValueError(f"unknown transform kind {kind!r}")
