"""Synthetic carotid phantom: a bifurcating vessel in a smooth tissue
background, with a lumen mask, stage waypoints, and a derived ground-truth
annotation. Everything downstream (demos, training, closed-loop runs) can
exercise on it without any recorded patient data."""

from __future__ import annotations

import json
from typing import Dict, List, Tuple

import numpy as np

from .demo import Waypoint, build_trajectory
from .volume import ProbePose, UsVolume
from .workflow import (DONE, ApiCommand, MotionDelta, MotionParams, ScanStage)

# geometry, all in mm
_SPACING = 0.5
_DIMS = (48, 48, 140)                 # nx, ny, nz
_VESSEL_X = 12.0
_VESSEL_Y = 12.0
_RADIUS = 3.0
_BIFURCATION_Z = 40.0
_BRANCH_SLOPE = 0.35
_START_Z = 6.0
_PROBE_Y = 2.0
_WAYPOINT_Z = {
    ScanStage.EXAMINE_CCA_PROXIMAL: 6.0,
    ScanStage.EXAMINE_CCA_DISTAL: 16.0,
    ScanStage.EXAMINE_BIFURCATION: 38.0,
    ScanStage.TRANSVERSE_SCAN_COMPLETED: 52.0,
    ScanStage.RETURN_COMPLETED: 40.0,
}


def _lumen_mask(x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Boolean lumen membership for mm-coordinate grids."""
    dy2 = (y - _VESSEL_Y) ** 2
    main = ((x - _VESSEL_X) ** 2 + dy2 <= _RADIUS ** 2) & (z <= _BIFURCATION_Z)
    off = _BRANCH_SLOPE * np.maximum(z - _BIFURCATION_Z, 0.0)
    left = ((x - (_VESSEL_X - off)) ** 2 + dy2 <= _RADIUS ** 2) & (z > _BIFURCATION_Z)
    right = ((x - (_VESSEL_X + off)) ** 2 + dy2 <= _RADIUS ** 2) & (z > _BIFURCATION_Z)
    return main | left | right


def carotid_phantom() -> UsVolume:
    """A 48 x 48 x 140 voxel phantom (0.5 mm spacing): dark bifurcating
    lumen, bright vessel wall, a thyroid-like blob near the proximal end,
    and a smooth intensity gradient elsewhere."""
    nx, ny, nz = _DIMS
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    x, y, z = ix * _SPACING, iy * _SPACING, iz * _SPACING

    tissue = 70.0 + 0.8 * y + 0.4 * x + 0.2 * z
    vox = np.clip(tissue, 0, 255)

    # bright wall ring around the lumen
    wall = _lumen_mask_dilated(x, y, z) & ~_lumen_mask(x, y, z)
    vox[wall] = 190.0

    # thyroid-like blob characterizing the proximal stage
    thyroid = (((x - 18.0) / 4.0) ** 2 + ((y - 10.0) / 3.0) ** 2
               + ((z - 8.0) / 6.0) ** 2) <= 1.0
    vox[thyroid] = 150.0

    lumen = _lumen_mask(x, y, z)
    vox[lumen] = 8.0

    # arrays are built (x, y, z)-indexed; storage is (z, y, x)
    voxels = np.ascontiguousarray(
        np.transpose(np.clip(np.floor(vox + 0.5), 0, 255).astype(np.uint8),
                     (2, 1, 0)))
    mask = np.ascontiguousarray(
        np.transpose(lumen.astype(np.uint8), (2, 1, 0)))
    return UsVolume(dims=_DIMS, spacing=np.full(3, _SPACING),
                    origin=np.zeros(3), voxels=voxels, mask=mask)


def _lumen_mask_dilated(x, y, z, extra: float = 1.2) -> np.ndarray:
    dy2 = (y - _VESSEL_Y) ** 2
    r = _RADIUS + extra
    main = ((x - _VESSEL_X) ** 2 + dy2 <= r ** 2) & (z <= _BIFURCATION_Z)
    off = _BRANCH_SLOPE * np.maximum(z - _BIFURCATION_Z, 0.0)
    left = ((x - (_VESSEL_X - off)) ** 2 + dy2 <= r ** 2) & (z > _BIFURCATION_Z)
    right = ((x - (_VESSEL_X + off)) ** 2 + dy2 <= r ** 2) & (z > _BIFURCATION_Z)
    return main | left | right


def _transverse_pose(z_mm: float) -> ProbePose:
    return ProbePose(np.array([_VESSEL_X, _PROBE_Y, z_mm]), np.eye(3))


def phantom_waypoints() -> List[Waypoint]:
    """Stage waypoints along the phantom vessel, in stage order."""
    wps = []
    for stage in (ScanStage.EXAMINE_CCA_PROXIMAL,
                  ScanStage.EXAMINE_CCA_DISTAL,
                  ScanStage.EXAMINE_BIFURCATION,
                  ScanStage.TRANSVERSE_SCAN_COMPLETED):
        wps.append(Waypoint(_transverse_pose(_WAYPOINT_Z[stage]), stage,
                            name=stage.wire_name))
    bulb = _transverse_pose(_WAYPOINT_Z[ScanStage.RETURN_COMPLETED])
    wps.append(Waypoint(bulb, ScanStage.RETURN_COMPLETED,
                        name=ScanStage.RETURN_COMPLETED.wire_name))
    params = MotionParams()
    rot = MotionDelta.pure_rotation((0.0, 1.0, 0.0), params.rotation_total)
    long_pose = ProbePose(bulb.position, bulb.orientation @ rot.rotation)
    wps.append(Waypoint(long_pose, ScanStage.LONGITUDINAL_SCAN_COMPLETED,
                        name=ScanStage.LONGITUDINAL_SCAN_COMPLETED.wire_name))
    return wps


def gradient_volume(n: int = 32, seed: int = None) -> UsVolume:
    """A small volume for interpolation oracles: a smooth ramp by default,
    or seeded random voxels."""
    if seed is not None:
        rng = np.random.default_rng(seed)
        vox = rng.integers(0, 256, size=(n, n, n), dtype=np.uint8)
    else:
        ix, iy, iz = np.meshgrid(np.arange(n), np.arange(n), np.arange(n),
                                 indexing="ij")
        ramp = (ix + 2 * iy + 3 * iz) / (6.0 * (n - 1)) * 255.0
        vox = np.transpose(np.floor(ramp + 0.5).astype(np.uint8), (2, 1, 0))
        vox = np.ascontiguousarray(vox)
    return UsVolume(dims=(n, n, n), spacing=np.ones(3), origin=np.zeros(3),
                    voxels=vox)


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

def scan_parameter(position: np.ndarray) -> float:
    """Progress along the phantom's scan axis (advance from the start), mm."""
    return float(position[2] - _START_Z)


def phantom_ground_truth(params: MotionParams = MotionParams()) -> dict:
    """Ground-truth annotation derived from the unperturbed expert
    trajectory: per-stage step intervals, the transverse-completion
    waypoint, the bulb region for return completion, the visibility
    threshold, and the per-step oracle script."""
    traj = build_trajectory(phantom_waypoints(), params, seed=None)
    intervals: Dict[str, List[int]] = {}
    script = []
    for i, (pose, stage, api) in enumerate(traj):
        name = stage.wire_name
        if name not in intervals:
            intervals[name] = [i, i + 1]
        else:
            intervals[name][1] = i + 1
        api_name = api.wire_name if isinstance(api, ApiCommand) else str(api)
        script.append({"stage": name, "next_api": api_name})

    trans_steps = intervals[ScanStage.TRANSVERSE_SCAN_COMPLETED.wire_name]
    trans_w = scan_parameter(traj[trans_steps[0]][0].position)
    ret_steps = intervals[ScanStage.RETURN_COMPLETED.wire_name]
    ret_w = scan_parameter(traj[ret_steps[0]][0].position)
    return {
        "volume_id": "phantom",
        "stage_intervals": intervals,
        "transverse_waypoint_w": trans_w,
        "return_region_w": [ret_w - 3.0, ret_w + 3.0],
        "longitudinal_min_col_fraction": 0.6,
        "script": script,
    }


def save_ground_truth(gt: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(gt, f, indent=1)


def load_ground_truth(path: str) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)
