"""Virtual deformable breast phantom with synthetic stereo observation.

The phantom lives in its own frame: dome base centred at the origin,
+z toward the cameras. Ground truth (true lesion position, marker
identities) is carried alongside every scene so estimator error is
exactly computable. Deformation uses Gaussian radial kernels, which are
deliberately outside the thin-plate family any estimator fits from
surface markers, so model mismatch is genuine.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .blobs import BlobFilterParams, detect_blobs
from .geometry import RigidTransform, StereoRig, project
from .register import MarkerModel

# A lesion this far outside the marker hull is unsupported by the
# surface data and the phantom is considered misconstructed.
HULL_CLEARANCE_MM = 30.0

MIN_CAMERA_DEPTH_MM = 1.0


@dataclass(frozen=True)
class PhantomConfig:
    marker_count: int = 10
    dome_radius_mm: float = 60.0
    lesion_height_mm: float = 25.0
    lesion_jitter_mm: float = 12.0
    min_marker_separation_mm: float = 18.0

    def __post_init__(self):
        if self.marker_count < 4:
            raise ValueError("need at least 4 markers")
        if self.dome_radius_mm <= 0 or self.min_marker_separation_mm <= 0:
            raise ValueError("dome radius and marker separation must be positive")


@dataclass(frozen=True)
class DeformationField:
    """Sum of Gaussian radial kernels: p -> p + sum a_i exp(-|p-c_i|^2 / 2 s_i^2)."""

    centers: np.ndarray
    amplitudes: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "centers", np.asarray(self.centers, float).reshape(-1, 3))
        object.__setattr__(self, "amplitudes", np.asarray(self.amplitudes, float).reshape(-1, 3))
        object.__setattr__(self, "sigmas", np.asarray(self.sigmas, float).reshape(-1))
        k = len(self.centers)
        if self.amplitudes.shape != (k, 3) or self.sigmas.shape != (k,):
            raise ValueError("centers, amplitudes and sigmas must agree in kernel count")
        if np.any(self.sigmas <= 0):
            raise ValueError("kernel widths must be positive")
        if not (np.all(np.isfinite(self.centers)) and np.all(np.isfinite(self.amplitudes))):
            raise ValueError("kernel parameters must be finite")

    def displacement(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, float))
        out = np.zeros_like(p)
        for c, a, s in zip(self.centers, self.amplitudes, self.sigmas):
            w = np.exp(-np.sum((p - c) ** 2, axis=-1) / (2.0 * s * s))
            out = out + a * w[:, None]
        return out if np.asarray(points).ndim == 2 else out[0]

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, float) + self.displacement(points)

    def scaled(self, factor: float) -> "DeformationField":
        return DeformationField(self.centers, self.amplitudes * factor, self.sigmas)


@dataclass(frozen=True)
class Phantom:
    model: MarkerModel
    config: PhantomConfig
    material_field: DeformationField | None = None

    def __post_init__(self):
        clearance = _hull_clearance(self.model.markers, self.model.lesions[0])
        if clearance > HULL_CLEARANCE_MM:
            raise ValueError(
                f"lesion sits {clearance:.1f} mm outside the marker hull "
                f"(limit {HULL_CLEARANCE_MM} mm)")


def _hull_clearance(markers: np.ndarray, point: np.ndarray) -> float:
    """Signed distance bound of a point outside the marker convex hull.

    The largest facet-plane offset: <= 0 inside the hull, and a lower
    bound on the Euclidean distance outside.
    """
    try:
        hull = ConvexHull(markers)
    except QhullError as exc:
        raise ValueError("marker set is degenerate; convex hull undefined") from exc
    offsets = hull.equations[:, :3] @ np.asarray(point, float) + hull.equations[:, 3]
    return float(offsets.max())


@dataclass
class SceneState:
    breast_markers: np.ndarray
    lesion_true: np.ndarray
    device_markers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    tip: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 150.0]))
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    time_index: int = 0

    def __post_init__(self):
        self.breast_markers = np.asarray(self.breast_markers, float).reshape(-1, 3)
        self.lesion_true = np.asarray(self.lesion_true, float).reshape(3)
        self.device_markers = np.asarray(self.device_markers, float).reshape(-1, 3)
        self.tip = np.asarray(self.tip, float).reshape(3)
        axis = np.asarray(self.axis, float).reshape(3)
        n = np.linalg.norm(axis)
        if n == 0:
            raise ValueError("needle axis must be nonzero")
        self.axis = axis / n
        for arr in (self.breast_markers, self.lesion_true, self.device_markers, self.tip):
            if not np.all(np.isfinite(arr)):
                raise ValueError("scene positions must be finite")

    def all_markers(self) -> np.ndarray:
        return np.vstack([self.breast_markers, self.device_markers])


@dataclass(frozen=True)
class NoiseConfig:
    sigma_px: float = 0.3
    dropout: float = 0.05
    spurious_rate: float = 0.2

    def __post_init__(self):
        if self.sigma_px < 0:
            raise ValueError("pixel noise sigma must be >= 0")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must be a probability")
        if self.spurious_rate < 0:
            raise ValueError("spurious rate must be >= 0")


@dataclass(frozen=True)
class StereoObservation:
    left_px: np.ndarray
    right_px: np.ndarray
    excluded: tuple
    images: tuple | None = None


def make_phantom(cfg: PhantomConfig = PhantomConfig(), seed: int = 0) -> Phantom:
    """Hemispherical phantom: markers dotted on the dome, lesion inside.

    Deterministic per (cfg, seed); the attached material field is drawn
    from the same stream.
    """
    rng = np.random.default_rng(seed)
    r = cfg.dome_radius_mm
    markers = []
    while len(markers) < cfg.marker_count:
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        p = r * v
        if v[2] > 0.05 and all(np.linalg.norm(p - q) >= cfg.min_marker_separation_mm
                               for q in markers):
            markers.append(p)
    lesion = np.array([0.0, 0.0, cfg.lesion_height_mm])
    lesion += rng.uniform(-cfg.lesion_jitter_mm, cfg.lesion_jitter_mm, 3)
    lesion[2] = np.clip(lesion[2], 0.2 * r, 0.67 * r)
    model = MarkerModel(markers=np.array(markers), lesions=lesion.reshape(1, 3))
    return Phantom(model=model, config=cfg,
                   material_field=random_squeeze_field(rng, dome_radius_mm=r))


def random_squeeze_field(rng, dome_radius_mm: float = 60.0) -> DeformationField:
    """Opposing Gaussian kernel pair straddling the dome (bimanual squeeze).

    Opposing kernels keep the interior displacement predictable from the
    surface samples; a lone interior kernel decays between the markers
    and a surface-fitted interpolant has nothing to anchor to.  The grip
    is diagonal: one hand low near the chest wall, the other high over
    the apex, so the squeeze axis leaves the horizontal plane and most
    of the interior field gradient runs in depth, where the surface
    marker layer constrains the interpolant least.
    """
    scale = dome_radius_mm / 60.0
    phi = rng.uniform(0, 2 * np.pi)
    zc = rng.uniform(18, 32) * scale
    dz = rng.uniform(75, 95) * scale * rng.choice([-1.0, 1.0])
    radial = 35.0 * scale * np.array([np.cos(phi), np.sin(phi), 0.0])
    c1 = radial + np.array([0, 0, zc - dz / 2]) + rng.uniform(-4, 4, 3) * scale
    c2 = -radial + np.array([0, 0, zc + dz / 2]) + rng.uniform(-4, 4, 3) * scale
    axis = (c2 - c1) / np.linalg.norm(c2 - c1)
    amp = rng.uniform(19, 28) * scale
    a1 = amp * axis + rng.normal(0, 0.08 * amp, 3)
    a2 = -amp * axis + rng.normal(0, 0.08 * amp, 3)
    sigmas = rng.uniform(45, 65, 2) * scale
    return DeformationField(centers=np.stack([c1, c2]),
                            amplitudes=np.stack([a1, a2]),
                            sigmas=sigmas)


def deform(phantom: Phantom, defo: DeformationField, time_index: int = 0) -> SceneState:
    """Apply a material displacement field to markers and lesion.

    Device hardware is rigid and is not part of the material; device
    fields on the returned scene keep their rest defaults until the
    caller poses them.
    """
    return SceneState(
        breast_markers=defo.apply(phantom.model.markers),
        lesion_true=defo.apply(phantom.model.lesions[0].reshape(1, 3))[0],
        time_index=time_index,
    )


def insert_needle(state: SceneState, advance: float, stiffness: float = 0.1,
                  decay_mm: float = 20.0, marker_factor: float = 0.3) -> SceneState:
    """Advance the tip along the needle axis, pushing tissue ahead of it.

    The lesion moves along the axis by stiffness * advance * exp(-d/decay)
    with d the tip-lesion distance at the start of the motion; markers
    feel the same kernel of their own tip distance at reduced amplitude.
    """
    if advance < 0:
        raise ValueError("advance must be >= 0")
    if stiffness < 0 or decay_mm <= 0:
        raise ValueError("stiffness must be >= 0 and decay length positive")
    d = np.linalg.norm(state.lesion_true - state.tip)
    push = stiffness * advance * np.exp(-d / decay_mm)
    dm = np.linalg.norm(state.breast_markers - state.tip, axis=1)
    marker_push = marker_factor * stiffness * advance * np.exp(-dm / decay_mm)
    return replace(
        state,
        tip=state.tip + advance * state.axis,
        lesion_true=state.lesion_true + push * state.axis,
        breast_markers=state.breast_markers + marker_push[:, None] * state.axis,
        time_index=state.time_index + 1,
    )


def default_rig() -> StereoRig:
    """Stereo rig 600 mm above the dome, looking straight down at it."""
    rot_cw = np.diag([-1.0, 1.0, -1.0])
    pose = RigidTransform(rotation=rot_cw, translation=np.array([0.0, 0.0, 600.0]))
    return StereoRig(focal_px=700.0, cx=639.5, cy=359.5, baseline_mm=120.0,
                     width=1280, height=720, pose=pose)


def _visible_uv(points: np.ndarray, rig: StereoRig, camera: str):
    """Projections and index mask of points inside one camera's frustum."""
    if len(points) == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=int)
    depth = rig.pose.apply(points)[:, 2]
    idx = np.flatnonzero(depth > MIN_CAMERA_DEPTH_MM)
    if len(idx) == 0:
        return np.zeros((0, 2)), idx
    uv = project(points[idx], rig, camera)
    inside = ((uv[:, 0] >= 0) & (uv[:, 0] <= rig.width - 1)
              & (uv[:, 1] >= 0) & (uv[:, 1] <= rig.height - 1))
    return uv[inside], idx[inside]


def _spot(img: np.ndarray, u0: float, v0: float, peak: float = 240.0,
          radius_px: float = 8.0) -> None:
    """Flat disc with a 1 px linear edge ramp (centroid stays subpixel-true)."""
    h, w = img.shape
    rad = int(np.ceil(radius_px)) + 2
    us = np.arange(max(0, int(u0) - rad), min(w, int(u0) + rad + 1))
    vs = np.arange(max(0, int(v0) - rad), min(h, int(v0) + rad + 1))
    if len(us) == 0 or len(vs) == 0:
        return
    r = np.hypot(vs[:, None] - v0, us[None, :] - u0)
    g = peak * np.clip(radius_px + 0.5 - r, 0.0, 1.0)
    patch = img[vs[0]:vs[-1] + 1, us[0]:us[-1] + 1]
    np.maximum(patch, np.rint(g).astype(np.uint8), out=patch)


def render_views(state: SceneState, rig: StereoRig, noise: NoiseConfig,
                 rng: np.random.Generator) -> tuple:
    """Rasterize marker spots into a left/right grayscale pair."""
    points = state.all_markers()
    images = []
    for camera in ("left", "right"):
        img = np.zeros((rig.height, rig.width), dtype=np.uint8)
        uv, _ = _visible_uv(points, rig, camera)
        keep = rng.random(len(uv)) >= noise.dropout
        jitter = rng.normal(0.0, noise.sigma_px, size=(len(uv), 2))
        for (u, v), k, dj in zip(uv, keep, jitter):
            if k:
                _spot(img, u + dj[0], v + dj[1])
        for _ in range(rng.poisson(noise.spurious_rate)):
            su = rng.uniform(20, rig.width - 20)
            sv = rng.uniform(20, rig.height - 20)
            _spot(img, su, sv)
        images.append(img)
    return images[0], images[1]


def observe(state: SceneState, rig: StereoRig, noise: NoiseConfig = NoiseConfig(),
            mode: str = "centroid", seed: int = 0,
            blob_params: BlobFilterParams = BlobFilterParams()) -> StereoObservation:
    """Synthetic stereo detection of the scene's markers.

    centroid mode perturbs exact projections directly (fast Monte-Carlo
    path); pixel mode renders images and runs the blob detector (full
    pipeline fidelity). Markers outside either frustum are excluded and
    reported; detections are sorted in image scan order like the
    detector output, so correspondence is the consumer's problem.
    """
    rng = np.random.default_rng(seed)
    points = state.all_markers()

    vis_ids = []
    exact = {}
    for camera in ("left", "right"):
        uv, idx = _visible_uv(points, rig, camera)
        exact[camera] = uv
        vis_ids.append(set(idx.tolist()))
    both = vis_ids[0] & vis_ids[1]
    excluded = tuple(sorted(set(range(len(points))) - both))

    if mode == "pixel":
        img_l, img_r = render_views(state, rig, noise, rng)
        det_l = np.array([b.centroid for b in detect_blobs(img_l, blob_params)]).reshape(-1, 2)
        det_r = np.array([b.centroid for b in detect_blobs(img_r, blob_params)]).reshape(-1, 2)
        return StereoObservation(det_l, det_r, excluded, images=(img_l, img_r))
    if mode != "centroid":
        raise ValueError(f"unknown observation mode {mode!r}")

    views = []
    for camera in ("left", "right"):
        uv = exact[camera]
        keep = rng.random(len(uv)) >= noise.dropout
        uv = uv[keep] + rng.normal(0.0, noise.sigma_px, size=(int(keep.sum()), 2))
        n_spur = rng.poisson(noise.spurious_rate)
        spur = np.column_stack([rng.uniform(20, rig.width - 20, n_spur),
                                rng.uniform(20, rig.height - 20, n_spur)])
        uv = np.vstack([uv, spur])
        views.append(uv[np.lexsort((uv[:, 0], uv[:, 1]))])
    return StereoObservation(views[0], views[1], excluded)
