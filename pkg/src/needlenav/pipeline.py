"""Per-frame estimation: stereo centroids in, steering command out.

One Pipeline instance carries all cross-frame estimator state for a
trial or live session: marker tracks, the accumulated device pose, the
previous steering command and health counters. Ground truth never
enters here; everything is computed from pixel observations plus the
needle's own encoder state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blobs import match_rows
from .config import ExperimentConfig
from .correspond import (Edm, Labeling, TrackState, _pair_residual, build_edm,
                         match_anchored, split_claims)
from .geometry import RigidTransform, from_spherical, triangulate
from .guidance import (INSERTING, POSITIONING, DeviceState, FeedbackState,
                       SteeringCommand, alignment_angle_deg, compute_command,
                       feedback, gear_inverse)
from .register import (LesionEstimate, MarkerModel, fit_tps, procrustes,
                       tps_apply, tps_residual)

# Device marker constellation, device frame, mm. Constraints: pairwise
# distances distinct by > 2.5 mm so distance-matrix labelling is
# unambiguous under noise, and image rows distinct by > 8 px under the
# default device pose so rectified row matching cannot cross-pair them.
DEVICE_ASSET = np.array([
    [0.0, 0.0, 0.0],
    [-5.0, 6.0, 27.0],
    [21.0, 29.0, 20.0],
    [26.0, 45.0, -7.0],
])

MIN_BREAST_PAIRS = 4
MIN_DEVICE_PAIRS = 3
POSE_OUTLIER_MM = 10.0
POSE_OUTLIER_MIN_COUNT = 5
# a published lesion estimate may move at most this fast: a base jump
# for marker-subset churn plus tissue motion per elapsed frame. A kept
# set that clears every residual gate can still whip the interpolant at
# the lesion, and one such frame read as truth would stop the insertion
ESTIMATE_JUMP_MM = 6.0
TISSUE_RATE_MM_PER_FRAME = 2.0


@dataclass(frozen=True)
class NeedleKinematics:
    """Actuator state the estimator knows without seeing the scene."""

    azimuth_deg: float = 0.0
    elevation_deg: float = 0.0
    depth_mm: float = 0.0
    phase: str = POSITIONING

    def __post_init__(self):
        if self.depth_mm < 0:
            raise ValueError("depth_mm must be >= 0")
        if self.phase not in (POSITIONING, INSERTING):
            raise ValueError(f"unknown phase {self.phase!r}")


@dataclass(frozen=True)
class Health:
    """Estimator self-diagnostics exposed with every frame."""

    match_residual: float
    registration_residual: float
    frames_since_valid: int
    n_breast: int
    n_device: int


@dataclass(frozen=True)
class FrameResult:
    points: np.ndarray
    breast: Labeling
    device: Labeling
    lesion_tps: LesionEstimate | None
    lesion_rigid: LesionEstimate | None
    device_pose: RigidTransform | None
    tip_mm: np.ndarray | None
    command: SteeringCommand | None
    feedback: FeedbackState | None
    health: Health

    @property
    def valid(self) -> bool:
        return self.lesion_tps is not None


def _track_assign(points: np.ndarray, track: TrackState, gate_mm: float) -> dict[int, int]:
    """Greedy one-to-one nearest-neighbour match against tracked positions."""
    if not track.positions or len(points) == 0:
        return {}
    ids = sorted(track.positions)
    prev = np.array([track.positions[i] for i in ids])
    d = np.linalg.norm(prev[:, None, :] - points[None, :, :], axis=-1)
    order = np.dstack(np.unravel_index(np.argsort(d, axis=None), d.shape))[0]
    assignment: dict[int, int] = {}
    used: set[int] = set()
    for k, j in order:
        if d[k, j] > gate_mm:
            break
        i = ids[k]
        if i in assignment or j in used:
            continue
        assignment[i] = int(j)
        used.add(int(j))
    return assignment


def _loo_residuals(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Per-pair residual against the spline fitted through the other pairs.

    An interpolating fit hides mislabels (it passes through wrong pairs
    exactly), so each pair is scored by the spline it did not shape.
    """
    out = np.zeros(len(src))
    for i in range(len(src)):
        mask = np.arange(len(src)) != i
        spline = fit_tps(src[mask], dst[mask], lam=0.0)
        out[i] = float(np.linalg.norm(tps_apply(spline, src[i]) - dst[i]))
    return out


def _trim_pairs(src: np.ndarray, dst: np.ndarray, trim_mm: float) -> np.ndarray:
    """Indices of labelled pairs that survive leave-one-out trimming.

    A single wrong label otherwise poisons the spline fit and, through the
    track refresh, survives indefinitely.
    """
    keep = np.arange(len(src))
    for _ in range(2):
        if len(keep) <= MIN_BREAST_PAIRS:
            break
        res = _loo_residuals(src[keep], dst[keep])
        worst = int(np.argmax(res))
        if res[worst] > trim_mm:
            keep = np.delete(keep, worst)
        else:
            break
    return keep


class Pipeline:
    """Stateful frame processor for one tracked scene."""

    def __init__(self, model: MarkerModel, cfg: ExperimentConfig):
        if len(model.markers) < MIN_BREAST_PAIRS:
            raise ValueError(f"breast model needs >= {MIN_BREAST_PAIRS} markers")
        self.model = model
        self.cfg = cfg
        self.rig = cfg.rig.build()
        self.breast_edm = build_edm(model.markers)
        self.device_edm = build_edm(DEVICE_ASSET)
        self.reset()

    def reset(self) -> None:
        self.breast_track = TrackState()
        self.device_track = TrackState()
        self.prev_command: SteeringCommand | None = None
        self._pose_sum = np.zeros((len(DEVICE_ASSET), 3))
        self._pose_count = np.zeros(len(DEVICE_ASSET), dtype=int)
        self.frames_since_valid = 0
        self.frame = 0
        self._prev_depth = 0.0
        self._last_gap: float | None = None
        self._push_comp = 0.0
        self._target_avg: np.ndarray | None = None
        self._last_estimate: np.ndarray | None = None
        self._last_estimate_frame = 0

    def forget_estimate(self) -> None:
        """Drop the estimate-velocity history, e.g. after retargeting.

        The published-estimate gate compares against the previous target
        position; a deliberate switch to a different lesion would read as a
        teleport and block publication until the allowance catches up.
        """
        self._last_estimate = None
        self._last_estimate_frame = self.frame
        self._target_avg = None

    def triangulate_scene(self, left_px, right_px) -> np.ndarray:
        lp = np.asarray(left_px, float).reshape(-1, 2)
        rp = np.asarray(right_px, float).reshape(-1, 2)
        if len(lp) == 0 or len(rp) == 0:
            return np.zeros((0, 3))
        pairs = match_rows(lp, rp, self.cfg.match.row_tol_px)
        if not pairs:
            return np.zeros((0, 3))
        li = [i for i, _ in pairs]
        ri = [j for _, j in pairs]
        return triangulate(lp[li], rp[ri], self.rig)

    def _bootstrap(self, rm: Edm, model_edm: Edm, rigid: bool) -> Labeling:
        m = self.cfg.match
        if rigid:
            lab = match_anchored(rm, model_edm, tol=m.rigid_tol_mm, tol_rel=0.0)
            # the pose pins permanently on this match, and a partial
            # constellation is cheap to counterfeit: a soft-marker triangle
            # congruent to an asset triangle pins a ghost pose that the
            # tracker then maintains forever, so the pin demands every
            # asset point present in the same frame
            min_pairs, accept = model_edm.n, m.device_accept_residual
        else:
            lab = match_anchored(rm, model_edm, tol=m.anchor_tol_mm,
                                 tol_rel=m.anchor_tol_rel)
            min_pairs, accept = MIN_BREAST_PAIRS, m.breast_accept_residual
        if len(lab.assignment) < min_pairs or lab.residual > accept:
            return Labeling(assignment={}, residual=0.0)
        return lab

    def _label(self, points: np.ndarray, rm: Edm | None, model_edm: Edm,
               track: TrackState, rigid: bool) -> Labeling:
        min_pairs = MIN_DEVICE_PAIRS if rigid else MIN_BREAST_PAIRS
        tracked = _track_assign(points, track, self.cfg.match.track_gate_mm)
        pose_pinned = (rigid
                       and int(np.count_nonzero(self._pose_count)) >= MIN_DEVICE_PAIRS)
        if len(tracked) >= min_pairs or rm is None or pose_pinned:
            # once the static device pose is pinned, a sparse frame means
            # dropout, not a lost device; re-matching from scratch lets the
            # rigid model scavenge look-alike triples from the soft markers
            return Labeling(assignment=tracked,
                            residual=_pair_residual(model_edm, rm, tracked)
                            if rm is not None and len(tracked) >= 2 else 0.0)
        boot = self._bootstrap(rm, model_edm, rigid)
        if not rigid and boot.assignment:
            # a permuted congruence of the soft constellation passes the
            # distance gates, but no rigid motion comes close to
            # reproducing it, while an honest labelling of the mildly
            # deformed tissue always has one nearby
            bidx = sorted(boot.assignment)
            bsrc = self.model.markers[bidx]
            bdst = points[[boot.assignment[i] for i in bidx]]
            tf = procrustes(bsrc, bdst)
            rms = float(np.sqrt(np.mean(np.sum((tf.apply(bsrc) - bdst) ** 2,
                                               axis=1))))
            if rms > self.cfg.match.max_rigid_rms_mm:
                boot = Labeling(assignment={}, residual=0.0)
        if len(boot.assignment) > len(tracked):
            return boot
        return Labeling(assignment=tracked,
                        residual=_pair_residual(model_edm, rm, tracked)
                        if len(tracked) >= 2 else 0.0)

    def _update_pose(self, device: Labeling, points: np.ndarray) -> RigidTransform | None:
        for i, j in device.assignment.items():
            obs = points[j]
            if self._pose_count[i] >= POSE_OUTLIER_MIN_COUNT:
                mean = self._pose_sum[i] / self._pose_count[i]
                if np.linalg.norm(obs - mean) > POSE_OUTLIER_MM:
                    continue
            self._pose_sum[i] += obs
            self._pose_count[i] += 1
        seen = np.flatnonzero(self._pose_count)
        if len(seen) < MIN_DEVICE_PAIRS:
            return None
        means = self._pose_sum[seen] / self._pose_count[seen, None]
        return procrustes(DEVICE_ASSET[seen], means)

    def process(self, left_px, right_px, needle: NeedleKinematics = NeedleKinematics(),
                lesion_index: int = 0) -> FrameResult:
        cfg = self.cfg
        points = self.triangulate_scene(left_px, right_px)
        rm = build_edm(points) if len(points) >= 2 else None

        if (self.frames_since_valid >= cfg.match.relabel_frames
                and self.breast_track.positions):
            # a barren stretch this long means the soft tracks are stuck
            # on wrong labels that outvote every fresh observation; the
            # trim-and-reseed path cannot heal a wrong majority, only a
            # fresh bootstrap can
            self.breast_track.positions.clear()
        breast = self._label(points, rm, self.breast_edm, self.breast_track, rigid=False)
        device = self._label(points, rm, self.device_edm, self.device_track, rigid=True)
        split = split_claims(points, {"breast": breast, "device": device})
        breast, device = split["breast"], split["device"]

        for i, j in breast.assignment.items():
            self.breast_track.positions[i] = points[j].copy()
        for i, j in device.assignment.items():
            self.device_track.positions[i] = points[j].copy()
        self.breast_track.frame += 1
        self.device_track.frame += 1

        lesion_tps = lesion_rigid = None
        reg_residual = float("nan")
        idx = sorted(breast.assignment)
        if len(idx) >= MIN_BREAST_PAIRS:
            src_all = self.model.markers[idx]
            dst_all = points[[breast.assignment[i] for i in idx]]
            keep = _trim_pairs(src_all, dst_all, cfg.match.trim_residual_mm)
            src, dst = src_all[keep], dst_all[keep]
            enough = len(keep) >= min(cfg.match.min_estimate_pairs,
                                      len(self.model.markers))
            consistent = (len(keep) <= MIN_BREAST_PAIRS
                          or float(np.max(_loo_residuals(src, dst)))
                          <= cfg.match.invalid_residual_mm)
            # an inconsistent frame yields nothing; the tracks keep their
            # raw observations and recover on later frames
            if consistent and len(keep) > MIN_BREAST_PAIRS:
                rigid_tf = procrustes(src, dst)
                rigid_rms = float(np.sqrt(np.mean(np.sum((rigid_tf.apply(src)
                                                          - dst) ** 2, axis=1))))
                # a permuted labelling can still interpolate smoothly, so
                # LOO consistency alone is not proof of identity; a frame
                # no rigid motion can approximate must neither publish
                # nor reseed, or the reseed entrenches the permutation
                if rigid_rms <= cfg.match.max_rigid_rms_mm:
                    spline = fit_tps(src, dst, lam=cfg.trial.tps_lambda)
                    lesion = self.model.lesions[lesion_index]
                    tps_pos = tps_apply(spline, lesion)
                    swing_ok = True
                    if self._last_estimate is not None:
                        barren = max(1, self.frame - self._last_estimate_frame)
                        swing_ok = (float(np.linalg.norm(tps_pos - self._last_estimate))
                                    <= ESTIMATE_JUMP_MM
                                    + TISSUE_RATE_MM_PER_FRAME * barren)
                    if swing_ok:
                        # a thin frame is extrapolation-unstable at the
                        # lesion, so its estimate stays unpublished, but its
                        # spline is still clean enough to reseed every track
                        # it did not use: unseen markers drift with the
                        # tissue, and a trimmed marker is a stuck wrong
                        # label that would otherwise survive the gate
                        # forever, poisoning each later frame the same way
                        kept_models = {idx[k] for k in keep}
                        missing = [m for m in range(len(self.model.markers))
                                   if m not in kept_models]
                        if missing:
                            refreshed = tps_apply(spline, self.model.markers[missing])
                            for m, pos in zip(missing, np.atleast_2d(refreshed)):
                                self.breast_track.positions[m] = pos.copy()
                        if enough:
                            lesion_rigid = LesionEstimate(
                                position=rigid_tf.apply(lesion),
                                kind="rigid", residual=rigid_rms)
                            lesion_tps = LesionEstimate(
                                position=tps_pos, kind="tps",
                                residual=tps_residual(spline, src, dst))
                            reg_residual = rigid_rms
                            self._last_estimate = tps_pos.copy()
                            self._last_estimate_frame = self.frame

        pose = self._update_pose(device, points)
        tip = None
        if pose is not None:
            tip_dev = from_spherical(needle.azimuth_deg, needle.elevation_deg,
                                     cfg.device.free_length_mm + needle.depth_mm)
            tip = pose.apply(tip_dev)
            for m in range(len(DEVICE_ASSET)):
                if m not in device.assignment:
                    self.device_track.positions[m] = pose.apply(DEVICE_ASSET[m])

        command = None
        fb = None
        if pose is not None and lesion_tps is not None:
            theta1, theta2 = gear_inverse(needle.azimuth_deg, needle.elevation_deg,
                                          cfg.guidance.ratios, cfg.guidance.limits)
            state = DeviceState(pose=pose, theta1_deg=theta1, theta2_deg=theta2,
                                tip=tip, phase=needle.phase)
            axis = pose.rotation @ from_spherical(needle.azimuth_deg,
                                                  needle.elevation_deg, 1.0)
            advance = max(0.0, needle.depth_mm - self._prev_depth)
            cp = cfg.coupling
            if advance > 0.0 and self._last_gap is not None and cp.stiffness > 0.0:
                # the advancing tip pushes the lesion ahead along the axis
                # and the markers barely register it, so the aim point must
                # lead the estimate by the unobserved share of the coupling
                self._push_comp += ((1.0 - cfg.guidance.push_observed_frac)
                                    * cp.stiffness * advance
                                    * float(np.exp(-self._last_gap / cp.decay_mm)))
            aim = lesion_tps.position + self._push_comp * axis
            steer_point = aim
            if needle.phase == INSERTING:
                # the aim point is static once insertion starts, so a slow
                # average strips per-frame triangulation jitter that would
                # otherwise be frozen into the approach line; the stop
                # distance stays per-frame so the landing reflects the
                # live estimate, not a smoothed copy of it
                if self._target_avg is None:
                    self._target_avg = aim.copy()
                else:
                    self._target_avg += cfg.guidance.alpha * (aim - self._target_avg)
                steer_point = self._target_avg
            target = LesionEstimate(position=steer_point.copy(), kind=lesion_tps.kind,
                                    residual=lesion_tps.residual)
            distance = float(np.linalg.norm(aim - tip))
            self._last_gap = distance
            # steering an almost-placed needle makes the tip orbit the
            # target instead of meeting it; inside freeze_mm the angles
            # hold and only insertion depth changes
            steer = not (needle.phase == INSERTING and distance < cfg.trial.freeze_mm)
            if steer:
                command = compute_command(state, target, cfg.guidance.limits,
                                          prev=self.prev_command,
                                          alpha=cfg.guidance.alpha,
                                          t=self.frame / cfg.trial.tick_hz)
                if command is not None:
                    self.prev_command = command
            actual = SteeringCommand(azimuth_deg=needle.azimuth_deg,
                                     elevation_deg=needle.elevation_deg,
                                     clamped=False, timestamp=self.frame / cfg.trial.tick_hz)
            aligned = (alignment_angle_deg(actual, state, target.position)
                       < cfg.trial.align_deg)
            fb = feedback(distance, cfg.guidance.feedback, aligned=aligned)

        self._prev_depth = needle.depth_mm
        if lesion_tps is not None:
            self.frames_since_valid = 0
        else:
            self.frames_since_valid += 1
        self.frame += 1

        return FrameResult(
            points=points,
            breast=breast,
            device=device,
            lesion_tps=lesion_tps,
            lesion_rigid=lesion_rigid,
            device_pose=pose,
            tip_mm=tip,
            command=command,
            feedback=fb,
            health=Health(match_residual=breast.residual,
                          registration_residual=reg_residual,
                          frames_since_valid=self.frames_since_valid,
                          n_breast=len(breast.assignment),
                          n_device=len(device.assignment)),
        )
