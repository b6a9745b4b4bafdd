"""Experiment configuration assembled from per-module parameter groups.

A single JSON document configures phantom generation, observation noise,
camera geometry, the deformation schedule, device kinematics, matching
gates, guidance behaviour and trial-loop policy. Missing keys fall back
to module defaults, so partial override files stay short.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RigidTransform, StereoRig
from .guidance import AngleLimits, FeedbackConfig, GearRatios
from .phantom import NoiseConfig, PhantomConfig


@dataclass(frozen=True)
class RigConfig:
    """Stereo camera geometry, front-parallel to the phantom base plane."""

    focal_px: float = 700.0
    baseline_mm: float = 120.0
    width_px: int = 1280
    height_px: int = 720
    standoff_mm: float = 600.0

    def __post_init__(self):
        if self.focal_px <= 0 or self.baseline_mm <= 0:
            raise ValueError("focal length and baseline must be positive")
        if self.width_px < 2 or self.height_px < 2:
            raise ValueError("image dimensions too small")
        if self.standoff_mm <= 0:
            raise ValueError("standoff must be positive")

    def build(self) -> StereoRig:
        pose = RigidTransform(
            rotation=np.diag([-1.0, 1.0, -1.0]),
            translation=np.array([0.0, 0.0, self.standoff_mm]),
        )
        return StereoRig(
            focal_px=self.focal_px,
            cx=(self.width_px - 1) / 2.0,
            cy=(self.height_px - 1) / 2.0,
            baseline_mm=self.baseline_mm,
            width=self.width_px,
            height=self.height_px,
            pose=pose,
        )


@dataclass(frozen=True)
class ScheduleConfig:
    """Deformation amplitude over a trial: linear ramp, then hold."""

    ramp_start: float = 0.2
    full_scale: float = 1.0
    ramp_frames: int = 24

    def __post_init__(self):
        if not 0.0 <= self.ramp_start <= max(self.full_scale, self.ramp_start):
            raise ValueError("ramp_start must be >= 0")
        if self.full_scale < 0:
            raise ValueError("full_scale must be >= 0")
        if self.ramp_frames < 1:
            raise ValueError("ramp_frames must be >= 1")

    def scale(self, frame: int) -> float:
        if self.full_scale == 0.0:
            return 0.0
        f = min(max(frame, 0), self.ramp_frames) / self.ramp_frames
        return self.ramp_start + (self.full_scale - self.ramp_start) * f


@dataclass(frozen=True)
class DeviceConfig:
    """Needle-positioning device placement and kinematics."""

    base_mm: tuple[float, float, float] = (0.0, 50.0, 165.0)
    aim_mm: tuple[float, float, float] = (0.0, 0.0, 25.0)
    free_length_mm: float = 60.0
    advance_per_frame_mm: float = 1.5

    def __post_init__(self):
        if self.free_length_mm <= 0:
            raise ValueError("free_length_mm must be positive")
        if self.advance_per_frame_mm <= 0:
            raise ValueError("advance_per_frame_mm must be positive")
        if np.allclose(self.base_mm, self.aim_mm):
            raise ValueError("device base and aim point coincide")


@dataclass(frozen=True)
class CouplingConfig:
    """Needle-tissue interaction passed through to the insertion model."""

    stiffness: float = 0.1
    decay_mm: float = 20.0
    marker_factor: float = 0.3

    def __post_init__(self):
        if self.stiffness < 0:
            raise ValueError("stiffness must be >= 0")
        if self.decay_mm <= 0:
            raise ValueError("decay_mm must be positive")
        if not 0.0 <= self.marker_factor <= 1.0:
            raise ValueError("marker_factor must be in [0, 1]")


@dataclass(frozen=True)
class MatchConfig:
    """Labelling gates for bootstrap and frame-to-frame tracking."""

    row_tol_px: float = 2.0
    anchor_tol_mm: float = 5.0
    anchor_tol_rel: float = 0.12
    rigid_tol_mm: float = 6.0
    track_gate_mm: float = 8.0
    breast_accept_residual: float = 30.0
    # squared-mm gate on the one match that pins the device pose for the
    # rest of the run; honest full-constellation matches stay under ~3,
    # counterfeit constellations built from soft markers start near 6
    device_accept_residual: float = 4.0
    trim_residual_mm: float = 7.0
    invalid_residual_mm: float = 9.0
    min_estimate_pairs: int = 6
    # rms gate of the best rigid fit through a labelling; honest labels
    # stay under ~11 mm even at full deformation, while a permuted
    # congruence that slips through the distance gates lands far above
    max_rigid_rms_mm: float = 15.0
    # consecutive frames without a published estimate before the soft
    # tracks are presumed stuck on wrong labels and labelling restarts
    # from a fresh bootstrap
    relabel_frames: int = 25

    def __post_init__(self):
        for name in ("row_tol_px", "anchor_tol_mm", "rigid_tol_mm", "track_gate_mm",
                     "breast_accept_residual", "device_accept_residual",
                     "trim_residual_mm", "invalid_residual_mm", "max_rigid_rms_mm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.anchor_tol_rel < 0:
            raise ValueError("anchor_tol_rel must be >= 0")
        if self.min_estimate_pairs < 4:
            raise ValueError("min_estimate_pairs must be >= 4")
        if self.relabel_frames < 1:
            raise ValueError("relabel_frames must be >= 1")


@dataclass(frozen=True)
class GuidanceConfig:
    """Steering smoothness and feedback composition."""

    alpha: float = 0.3
    # share of the needle-push tissue motion the marker registration
    # already reflects; the aim point leads the estimate by the rest.
    # Markers near the tip feel part of the push, but the lesion
    # estimate inherits only a thin interpolated slice of it.
    push_observed_frac: float = 0.125
    limits: AngleLimits = field(default_factory=AngleLimits)
    ratios: GearRatios = field(default_factory=GearRatios)
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if not 0.0 <= self.push_observed_frac < 1.0:
            raise ValueError("push_observed_frac must be in [0, 1)")


@dataclass(frozen=True)
class TrialConfig:
    """Trial loop policy: phase switching, failure and termination."""

    tick_hz: float = 30.0
    max_frames: int = 400
    align_deg: float = 0.5
    align_frames: int = 3
    loss_frames: int = 15
    freeze_mm: float = 15.0
    # the landing push happens on the first frame whose noisy gap reading
    # crosses the reach threshold, and a reading selected for being low
    # reads short; the push leads the estimate by the calibrated bias
    stop_lead_mm: float = 1.5
    tps_lambda: float = 0.0

    def __post_init__(self):
        if self.tick_hz <= 0:
            raise ValueError("tick_hz must be positive")
        if self.max_frames < 1:
            raise ValueError("max_frames must be >= 1")
        if self.align_deg <= 0:
            raise ValueError("align_deg must be positive")
        if self.align_frames < 1:
            raise ValueError("align_frames must be >= 1")
        if self.loss_frames < 1:
            raise ValueError("loss_frames must be >= 1")
        if self.freeze_mm < 0:
            raise ValueError("freeze_mm must be >= 0")
        if self.stop_lead_mm < 0:
            raise ValueError("stop_lead_mm must be >= 0")
        if self.tps_lambda < 0:
            raise ValueError("tps_lambda must be >= 0")


@dataclass(frozen=True)
class ChecksConfig:
    """Optional pass/fail gates evaluated over an experiment's results.

    Disabled gates (False / None) are skipped; enabled ones end up in the
    report and drive the command-line exit code.
    """

    tps_beats_rigid: bool = False
    wilcoxon_p_max: float | None = None
    target_norm_max_mm: float | None = None
    displacement_band_mm: tuple[float, float] | None = None

    def __post_init__(self):
        if self.wilcoxon_p_max is not None and not 0 < self.wilcoxon_p_max <= 1:
            raise ValueError("wilcoxon_p_max must be in (0, 1]")
        if self.target_norm_max_mm is not None and self.target_norm_max_mm <= 0:
            raise ValueError("target_norm_max_mm must be positive")
        if self.displacement_band_mm is not None:
            lo, hi = self.displacement_band_mm
            if not 0 <= lo < hi:
                raise ValueError("displacement_band_mm must be an increasing pair")
            object.__setattr__(self, "displacement_band_mm", (float(lo), float(hi)))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a trial or a live session needs, in one document."""

    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    rig: RigConfig = field(default_factory=RigConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    device: DeviceConfig = field(default_factory=DeviceConfig)
    coupling: CouplingConfig = field(default_factory=CouplingConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    trial: TrialConfig = field(default_factory=TrialConfig)
    checks: ChecksConfig = field(default_factory=ChecksConfig)
    observation_mode: str = "centroid"
    workers: int = 1
    debug: bool = False

    def __post_init__(self):
        if self.observation_mode not in ("centroid", "pixel"):
            raise ValueError(f"unknown observation mode: {self.observation_mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise ValueError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise ValueError(f"unknown key {key!r} for {cls.__name__}")
        f = names[key]
        default = (f.default_factory() if f.default_factory is not dataclasses.MISSING
                   else f.default)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value)
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
