"""Scanning workflow vocabulary: the eight examination stages, the three
probe-motion APIs, and the translation of API commands into probe-frame
motion deltas."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation


class ScanStage(enum.IntEnum):
    """The eight sequential stages of a carotid examination, in order."""

    EXAMINE_CCA_PROXIMAL = 1
    EXAMINE_CCA_DISTAL = 2
    EXAMINE_BIFURCATION = 3
    TRANSVERSE_SCAN_COMPLETED = 4
    RETURN_TO_CAROTID_BULB = 5
    RETURN_COMPLETED = 6
    ROTATE_TO_LONGITUDINAL_VIEW = 7
    LONGITUDINAL_SCAN_COMPLETED = 8

    @property
    def wire_name(self) -> str:
        return STAGE_WIRE_NAMES[self]

    @classmethod
    def from_wire(cls, name: str) -> "ScanStage":
        key = " ".join(name.split()).lower()
        try:
            return _STAGE_BY_WIRE[key]
        except KeyError:
            from .errors import UnknownStage
            raise UnknownStage(f"unknown stage name: {name!r}") from None


class ApiCommand(enum.Enum):
    """Executable probe-motion commands."""

    TRACKING_FORWARD = "tracking forward"
    TRACKING_BACKWARD = "tracking backward"
    ROTATION_CLOCKWISE = "rotation clockwise"

    @property
    def wire_name(self) -> str:
        return self.value

    @classmethod
    def from_wire(cls, name: str) -> "ApiCommand":
        key = " ".join(name.split()).lower()
        for cmd in cls:
            if cmd.value == key:
                return cmd
        from .errors import UnknownApi
        raise UnknownApi(f"unknown API name: {name!r}")


#: Sentinel for "scan finished, halt motion" in next_api slots.
DONE = "Done"


STAGE_WIRE_NAMES = {
    ScanStage.EXAMINE_CCA_PROXIMAL: "Examine CCA proximal",
    ScanStage.EXAMINE_CCA_DISTAL: "Examine CCA distal",
    ScanStage.EXAMINE_BIFURCATION: "Examine bifurcation",
    ScanStage.TRANSVERSE_SCAN_COMPLETED: "Transverse scan completed",
    ScanStage.RETURN_TO_CAROTID_BULB: "Return to carotid bulb",
    ScanStage.RETURN_COMPLETED: "Return completed",
    ScanStage.ROTATE_TO_LONGITUDINAL_VIEW: "Rotate to longitudinal view",
    ScanStage.LONGITUDINAL_SCAN_COMPLETED: "Longitudinal scan completed",
}

_STAGE_BY_WIRE = {name.lower(): stage for stage, name in STAGE_WIRE_NAMES.items()}


_STAGE_EXPLANATIONS = {
    ScanStage.EXAMINE_CCA_PROXIMAL: "Thyroid is near the CCA",
    ScanStage.EXAMINE_CCA_DISTAL: "Thyroid is not visible",
    ScanStage.EXAMINE_BIFURCATION:
        "The carotid bulb is reached and the lumen starts diverging into ICA and ECA",
    ScanStage.TRANSVERSE_SCAN_COMPLETED:
        "The lumen is clearly divided into the ICA and ECA",
    ScanStage.RETURN_TO_CAROTID_BULB:
        "The ICA and ECA gradually converge into a single lumen",
    ScanStage.RETURN_COMPLETED:
        "The ICA and ECA converge into the common carotid artery at the carotid bulb",
    ScanStage.ROTATE_TO_LONGITUDINAL_VIEW:
        "The artery cross-section changes from an elliptical shape to an elongated profile",
    ScanStage.LONGITUDINAL_SCAN_COMPLETED:
        "The longitudinal cross-section of the carotid artery is clearly visualized",
}


def stage_explanation(stage: ScanStage) -> str:
    """Canonical clinical explanation string for a stage."""
    return _STAGE_EXPLANATIONS[ScanStage(stage)]


def next_stage_candidates(stage: ScanStage) -> set:
    """Stages reachable from `stage` in one step: itself and its successor.

    The terminal stage maps to itself only; progression is monotone and
    non-skipping.
    """
    stage = ScanStage(stage)
    if stage is ScanStage.LONGITUDINAL_SCAN_COMPLETED:
        return {stage}
    return {stage, ScanStage(stage + 1)}


@dataclass(frozen=True)
class MotionParams:
    """Step sizes and perturbation bounds for API-to-motion translation.

    All lengths in mm, angles in degrees.
    """

    forward_step: float = 1.0
    first_retract: float = 2.0
    retract_step: float = 1.5
    perturb_long_max: float = 0.3
    perturb_lat_max: float = 0.2
    rotation_step: float = 5.0
    rotation_total: float = 90.0

    def __post_init__(self):
        for name in ("forward_step", "first_retract", "retract_step",
                     "perturb_long_max", "perturb_lat_max",
                     "rotation_step", "rotation_total"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        ratio = self.rotation_total / self.rotation_step
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("rotation_total must be a multiple of rotation_step")

    @property
    def rotation_steps(self) -> int:
        return int(round(self.rotation_total / self.rotation_step))


@dataclass(frozen=True)
class MotionDelta:
    """A probe-frame pose increment: translation (u, v, w) in mm plus an
    optional rotation about a probe-frame axis."""

    translation: np.ndarray          # shape (3,), probe frame
    rotation: np.ndarray             # shape (3, 3), probe frame

    @classmethod
    def pure_translation(cls, t) -> "MotionDelta":
        return cls(np.asarray(t, dtype=float), np.eye(3))

    @classmethod
    def pure_rotation(cls, axis, degrees: float) -> "MotionDelta":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        rot = Rotation.from_rotvec(np.deg2rad(degrees) * axis).as_matrix()
        return cls(np.zeros(3), rot)


def api_to_motion(cmd: ApiCommand,
                  params: MotionParams = MotionParams(),
                  retract_index: int = 0,
                  rng: Optional[np.random.Generator] = None) -> MotionDelta:
    """Translate an API command into a probe-frame pose delta.

    Tracking steps advance/retract along w with optional uniform random
    perturbations: up to +/- perturb_long_max along w and +/- perturb_lat_max
    along u. The first backward step in a retraction phase uses
    `first_retract`, subsequent ones `retract_step`. Rotation steps rotate
    about v (image depth axis) with no translation and no perturbation.
    """
    if retract_index < 0:
        raise ValueError("retract_index must be >= 0")

    if cmd is ApiCommand.ROTATION_CLOCKWISE:
        return MotionDelta.pure_rotation((0.0, 1.0, 0.0), params.rotation_step)

    if rng is not None:
        lat = rng.uniform(-params.perturb_lat_max, params.perturb_lat_max)
        lon = rng.uniform(-params.perturb_long_max, params.perturb_long_max)
    else:
        lat = lon = 0.0

    if cmd is ApiCommand.TRACKING_FORWARD:
        w = params.forward_step + lon
    elif cmd is ApiCommand.TRACKING_BACKWARD:
        base = params.first_retract if retract_index == 0 else params.retract_step
        w = -(base + lon)
    else:
        raise ValueError(f"unknown command: {cmd}")

    return MotionDelta.pure_translation((lat, 0.0, w))
