"""Closed-loop needle steering and operator feedback.

Steering runs in two phases. While positioning, the needle angulates
freely toward the lesion estimate; once inserting, per-update changes
are capped so corrections stay slight while the needle is in tissue.
Angles are the spherical pair (azimuth, elevation) of the needle axis
in the device frame, realized by two differential side gears.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .geometry import Point3, RigidTransform, from_spherical, to_spherical
from .register import LesionEstimate

POSITIONING = "positioning"
INSERTING = "inserting"


@dataclass(frozen=True)
class AngleLimits:
    azimuth_deg: tuple = (-90.0, 90.0)
    elevation_deg: tuple = (-40.0, 45.0)
    delta_cap_deg: float = 2.0

    def __post_init__(self):
        for lo, hi in (self.azimuth_deg, self.elevation_deg):
            if not lo < hi:
                raise ValueError("angle range must be increasing")
        if self.delta_cap_deg <= 0:
            raise ValueError("delta cap must be positive")


@dataclass(frozen=True)
class GearRatios:
    k_az: float = 1.0
    k_el: float = 1.0

    def __post_init__(self):
        if self.k_az == 0 or self.k_el == 0:
            raise ValueError("gear ratios must be nonzero")


@dataclass(frozen=True)
class FeedbackConfig:
    f_min_hz: float = 400.0
    f_max_hz: float = 2000.0
    d_max_mm: float = 50.0
    # the estimated gap never reads zero at contact: triangulated depth
    # noise keeps its norm near 1.5-2 mm, so a tighter threshold makes
    # the needle fly past a target it has already met
    reach_mm: float = 3.5

    def __post_init__(self):
        if not 0 < self.f_min_hz <= self.f_max_hz:
            raise ValueError("need 0 < f_min <= f_max")
        if self.d_max_mm <= 0 or self.reach_mm < 0:
            raise ValueError("d_max must be positive and reach threshold >= 0")


@dataclass(frozen=True)
class SteeringCommand:
    azimuth_deg: float
    elevation_deg: float
    clamped: bool
    timestamp: float


@dataclass
class DeviceState:
    pose: RigidTransform
    theta1_deg: float
    theta2_deg: float
    tip: np.ndarray
    phase: str = POSITIONING

    def __post_init__(self):
        if self.phase not in (POSITIONING, INSERTING):
            raise ValueError(f"unknown phase {self.phase!r}")
        self.tip = np.asarray(self.tip, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.tip)):
            raise ValueError("tip position must be finite")


@dataclass(frozen=True)
class FeedbackState:
    distance_mm: float
    frequency_hz: float
    aligned: bool
    reached: bool


def gear_forward(theta1_deg: float, theta2_deg: float,
                 ratios: GearRatios = GearRatios()) -> tuple:
    """Differential gear model: common mode elevates, differential yaws."""
    elevation = ratios.k_el * (theta1_deg + theta2_deg) / 2.0
    azimuth = ratios.k_az * (theta1_deg - theta2_deg) / 2.0
    return azimuth, elevation


def gear_inverse(azimuth_deg: float, elevation_deg: float,
                 ratios: GearRatios = GearRatios(),
                 limits: AngleLimits = AngleLimits()) -> tuple:
    lo, hi = limits.azimuth_deg
    if not lo <= azimuth_deg <= hi:
        raise ValueError(f"azimuth {azimuth_deg:.2f} outside [{lo}, {hi}]")
    lo, hi = limits.elevation_deg
    if not lo <= elevation_deg <= hi:
        raise ValueError(f"elevation {elevation_deg:.2f} outside [{lo}, {hi}]")
    s = elevation_deg / ratios.k_el
    d = azimuth_deg / ratios.k_az
    return s + d, s - d


def compute_command(state: DeviceState, lesion: LesionEstimate,
                    limits: AngleLimits = AngleLimits(),
                    prev: SteeringCommand | None = None,
                    alpha: float = 0.3, t: float = 0.0) -> SteeringCommand | None:
    """Desired needle angles aiming the guide ray through the lesion estimate.

    The angles orient the whole needle about its mount, so the ray is
    anchored at the mount, not at the tip: aiming mount-to-lesion keeps
    the landing line fixed as depth grows, where tip-to-lesion pursuit
    would swing the inserted tip sideways on every correction.
    Returns None when the lesion estimate sits on the mount (degenerate).
    The raw spherical angles are exponentially smoothed against the
    previous command, clamped to the admissible range (setting the
    clamped flag), and delta-capped per axis while inserting.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    state.pose.validate()
    v_world = np.asarray(lesion.position, float) - state.pose.translation
    norm = np.linalg.norm(v_world)
    if norm < 1e-12:
        return None
    v_dev = state.pose.rotation.T @ v_world
    target = to_spherical(v_dev)
    az, el = target.azimuth_deg, target.elevation_deg

    if prev is not None:
        az = alpha * az + (1 - alpha) * prev.azimuth_deg
        el = alpha * el + (1 - alpha) * prev.elevation_deg

    az_c = float(np.clip(az, *limits.azimuth_deg))
    el_c = float(np.clip(el, *limits.elevation_deg))
    clamped = (az_c != az) or (el_c != el)

    if state.phase == INSERTING and prev is not None:
        cap = limits.delta_cap_deg
        az_c = prev.azimuth_deg + float(np.clip(az_c - prev.azimuth_deg, -cap, cap))
        el_c = prev.elevation_deg + float(np.clip(el_c - prev.elevation_deg, -cap, cap))

    return SteeringCommand(azimuth_deg=az_c, elevation_deg=el_c,
                           clamped=clamped, timestamp=t)


def command_axis(command: SteeringCommand, pose: RigidTransform) -> np.ndarray:
    """Unit needle-axis direction in the operating space for a command."""
    axis_dev = from_spherical(command.azimuth_deg, command.elevation_deg, 1.0)
    return pose.rotation @ axis_dev


def alignment_angle_deg(command: SteeringCommand, state: DeviceState,
                        lesion_position) -> float:
    """Angle between the commanded axis and the tip-to-lesion direction."""
    v = np.asarray(lesion_position, float) - state.tip
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return 0.0
    axis = command_axis(command, state.pose)
    cosine = np.clip(axis @ (v / norm), -1.0, 1.0)
    return float(np.degrees(np.arccos(cosine)))


def feedback(distance_mm: float, cfg: FeedbackConfig = FeedbackConfig(),
             aligned: bool = False) -> FeedbackState:
    """Proximity beep: frequency rises linearly as distance falls."""
    if distance_mm < 0:
        raise ValueError("distance must be >= 0")
    closeness = float(np.clip(1.0 - distance_mm / cfg.d_max_mm, 0.0, 1.0))
    freq = cfg.f_min_hz + (cfg.f_max_hz - cfg.f_min_hz) * closeness
    return FeedbackState(distance_mm=float(distance_mm), frequency_hz=freq,
                         aligned=aligned, reached=distance_mm <= cfg.reach_mm)


LOG_FIELDS = ("timestamp", "azimuth_deg", "elevation_deg", "clamped",
              "distance_mm", "freq_hz", "phase")


@dataclass
class CommandLog:
    """Append-only CSV log of issued commands and feedback."""

    rows: list = field(default_factory=list)

    def append(self, command: SteeringCommand, fb: FeedbackState, phase: str):
        self.rows.append({
            "timestamp": f"{command.timestamp:.3f}",
            "azimuth_deg": f"{command.azimuth_deg:.6f}",
            "elevation_deg": f"{command.elevation_deg:.6f}",
            "clamped": int(command.clamped),
            "distance_mm": f"{fb.distance_mm:.6f}",
            "freq_hz": f"{fb.frequency_hz:.3f}",
            "phase": phase,
        })

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows)
        return buf.getvalue()

    def write(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())
