"""Expert demonstration generation and dataset construction.

A demonstration walks a virtual probe through waypoint-annotated anatomy:
forward along the vessel, back to the carotid bulb, then a 90-degree turn
into the longitudinal view. Sliding windows over demonstrations produce
the retrieval dataset (A) and the VQA datasets (B, C); triplet sampling
pairs windows by stage for metric learning.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DemoTooShort, InsufficientStages, NoMask, UnorderedWaypoints
from .volume import (ProbePose, SliceImage, SliceSpec, UsVolume, apply_motion,
                     mask_centroid_in_plane, sample_slice, transform_pose)
from .workflow import (DONE, ApiCommand, MotionParams, ScanStage,
                       api_to_motion, stage_explanation)


@dataclass
class Waypoint:
    """A stage-anchoring probe pose along the scan path."""

    pose: ProbePose
    stage: ScanStage
    name: str = ""
    off_mask: bool = False      # set when refinement found no vessel in plane


@dataclass
class DemoRecord:
    step_index: int
    pose: ProbePose
    image: SliceImage
    stage: ScanStage
    explanation: str
    next_api: Union[ApiCommand, str]


@dataclass
class Demonstration:
    records: List[DemoRecord]
    volume_id: str
    seed: int

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class WindowEntry:
    """A sliding-window sample: first/last frames plus last-frame labels."""

    first_image: SliceImage
    last_image: SliceImage
    first_index: int
    last_index: int
    stage: ScanStage
    explanation: str
    next_api: Union[ApiCommand, str]
    prev_stage: ScanStage
    volume_id: str = ""
    demo_id: str = ""

    @property
    def entry_id(self) -> str:
        return f"{self.demo_id}:{self.last_index}"


@dataclass
class TripletSpec:
    anchor_id: str
    positive_id: str
    negative_id: str
    positive_same_volume: bool = False


# ---------------------------------------------------------------------------
# Waypoint refinement
# ---------------------------------------------------------------------------

def refine_waypoints(vol: UsVolume, waypoints: Sequence[Waypoint],
                     spec: SliceSpec = SliceSpec()) -> List[Waypoint]:
    """Shift each waypoint in-plane so the vessel centroid sits on the image
    centerline column. Waypoints whose plane misses the mask are returned
    unchanged with off_mask set."""
    if not vol.has_mask:
        raise NoMask("refinement needs a vessel mask")
    refined = []
    center_col = (spec.width_px - 1) / 2.0
    for wp in waypoints:
        centroid = mask_centroid_in_plane(vol, wp.pose, spec)
        if centroid is None:
            refined.append(Waypoint(wp.pose, wp.stage, wp.name, off_mask=True))
            continue
        _, col = centroid
        du = (col - center_col) * spec.pixel_spacing
        pose = transform_pose(wp.pose, (du, 0.0, 0.0))
        refined.append(Waypoint(pose, wp.stage, wp.name))
    return refined


# ---------------------------------------------------------------------------
# Trajectory construction
# ---------------------------------------------------------------------------

TrajStep = Tuple[ProbePose, ScanStage, Union[ApiCommand, str]]


def _w_distance(a: ProbePose, b: ProbePose) -> float:
    """Signed distance from a to b along a's advance axis."""
    return float(np.dot(b.position - a.position, a.w))


def build_trajectory(waypoints: Sequence[Waypoint],
                     params: MotionParams = MotionParams(),
                     seed: Optional[int] = None) -> List[TrajStep]:
    """Connect refined waypoints into a full expert scan.

    Forward phase: 1 mm tracking steps from the first waypoint through the
    transverse-completion waypoint, labeling each step with the stage of
    the segment it is in; the final step into a waypoint is clamped to land
    exactly on it. Return phase: 2 mm then 1.5 mm retraction steps back to
    the return-completion waypoint. Rotation phase: fixed-increment turns
    about the image depth axis up to rotation_total, ending in the
    longitudinal-completion stage.
    """
    if len(waypoints) < 2:
        raise UnorderedWaypoints("need at least 2 waypoints")
    ordinals = [int(wp.stage) for wp in waypoints]
    if any(b < a for a, b in zip(ordinals, ordinals[1:])):
        raise UnorderedWaypoints("waypoint stages must be weakly increasing")

    rng = np.random.default_rng(seed) if seed is not None else None
    by_stage = {wp.stage: wp for wp in waypoints}

    forward_wps = [wp for wp in waypoints
                   if wp.stage <= ScanStage.TRANSVERSE_SCAN_COMPLETED]
    return_wp = by_stage.get(ScanStage.RETURN_COMPLETED)

    steps: List[TrajStep] = []
    pose = forward_wps[0].pose

    # --- forward phase ---
    for seg_start, seg_end in zip(forward_wps, forward_wps[1:]):
        stage = seg_start.stage
        while True:
            remaining = _w_distance(pose, seg_end.pose)
            if remaining <= params.forward_step + 1e-9:
                steps.append((pose, stage, ApiCommand.TRACKING_FORWARD))
                pose = seg_end.pose      # clamped landing on the waypoint
                break
            steps.append((pose, stage, ApiCommand.TRACKING_FORWARD))
            delta = api_to_motion(ApiCommand.TRACKING_FORWARD, params, rng=rng)
            pose = apply_motion(pose, delta)

    # --- return phase ---
    # The arrival pose at the transverse-completion waypoint doubles as the
    # first retraction step, so stage 4 is labeled exactly once.
    if return_wp is not None:
        retract_index = 0
        while True:
            stage = ScanStage.TRANSVERSE_SCAN_COMPLETED if retract_index == 0 \
                else ScanStage.RETURN_TO_CAROTID_BULB
            remaining = -_w_distance(pose, return_wp.pose)   # positive to go
            nominal = params.first_retract if retract_index == 0 \
                else params.retract_step
            steps.append((pose, stage, ApiCommand.TRACKING_BACKWARD))
            if remaining <= nominal + 1e-9:
                pose = return_wp.pose                        # clamped landing
                break
            delta = api_to_motion(ApiCommand.TRACKING_BACKWARD, params,
                                  retract_index=retract_index, rng=rng)
            pose = apply_motion(pose, delta)
            retract_index += 1
        steps.append((pose, ScanStage.RETURN_COMPLETED,
                      ApiCommand.ROTATION_CLOCKWISE))

        # --- rotation phase ---
        for i in range(params.rotation_steps):
            delta = api_to_motion(ApiCommand.ROTATION_CLOCKWISE, params)
            pose = apply_motion(pose, delta)
            if i == params.rotation_steps - 1:
                steps.append((pose, ScanStage.LONGITUDINAL_SCAN_COMPLETED, DONE))
            else:
                steps.append((pose, ScanStage.ROTATE_TO_LONGITUDINAL_VIEW,
                              ApiCommand.ROTATION_CLOCKWISE))
    else:
        # forward-only scan: record the arrival on the final waypoint
        steps.append((pose, forward_wps[-1].stage, DONE))

    return steps


def execute_trajectory(vol: UsVolume, traj: Sequence[TrajStep],
                       spec: SliceSpec = SliceSpec(), volume_id: str = "",
                       seed: int = 0) -> Demonstration:
    """Sample one B-mode image per trajectory step."""
    if not traj:
        raise ValueError("trajectory is empty")
    records = []
    for i, (pose, stage, next_api) in enumerate(traj):
        records.append(DemoRecord(
            step_index=i, pose=pose,
            image=sample_slice(vol, pose, spec),
            stage=stage, explanation=stage_explanation(stage),
            next_api=next_api))
    return Demonstration(records=records, volume_id=volume_id, seed=seed)


def _approach_snippet(target: Waypoint, params: MotionParams,
                      rng: Optional[np.random.Generator],
                      snippet_mm: float) -> List[TrajStep]:
    """A short scan ending on a sparse-stage waypoint."""
    steps: List[TrajStep] = []
    stage = target.stage
    if stage is ScanStage.TRANSVERSE_SCAN_COMPLETED:
        pose = transform_pose(target.pose, (0.0, 0.0, -snippet_mm))
        while _w_distance(pose, target.pose) > params.forward_step + 1e-9:
            steps.append((pose, ScanStage.EXAMINE_BIFURCATION,
                          ApiCommand.TRACKING_FORWARD))
            pose = apply_motion(pose, api_to_motion(
                ApiCommand.TRACKING_FORWARD, params, rng=rng))
        steps.append((pose, ScanStage.EXAMINE_BIFURCATION,
                      ApiCommand.TRACKING_FORWARD))
        steps.append((target.pose, stage, DONE))
    elif stage is ScanStage.RETURN_COMPLETED:
        pose = transform_pose(target.pose, (0.0, 0.0, snippet_mm))
        retract_index = 0
        while True:
            nominal = params.first_retract if retract_index == 0 \
                else params.retract_step
            steps.append((pose, ScanStage.RETURN_TO_CAROTID_BULB,
                          ApiCommand.TRACKING_BACKWARD))
            if -_w_distance(pose, target.pose) <= nominal + 1e-9:
                break
            pose = apply_motion(pose, api_to_motion(
                ApiCommand.TRACKING_BACKWARD, params,
                retract_index=retract_index, rng=rng))
            retract_index += 1
        steps.append((target.pose, stage, DONE))
    else:   # LONGITUDINAL_SCAN_COMPLETED: rotate in place onto the view
        from .workflow import MotionDelta
        unrotate = MotionDelta.pure_rotation((0.0, 1.0, 0.0),
                                             -params.rotation_total)
        pose = apply_motion(target.pose, unrotate)
        for i in range(params.rotation_steps):
            steps.append((pose, ScanStage.ROTATE_TO_LONGITUDINAL_VIEW,
                          ApiCommand.ROTATION_CLOCKWISE))
            pose = apply_motion(pose, api_to_motion(
                ApiCommand.ROTATION_CLOCKWISE, params))
        steps.append((pose, stage, DONE))
    return steps


def balance_trajectories(waypoints: Sequence[Waypoint],
                         params: MotionParams, seed: int,
                         scans: int = 20,
                         snippet_mm: float = 5.0) -> List[List[TrajStep]]:
    """Short scans localized around the sparse stages (transverse
    completion, return completion, longitudinal completion) to balance the
    stage distribution."""
    by_stage = {wp.stage: wp for wp in waypoints}
    sparse = [ScanStage.TRANSVERSE_SCAN_COMPLETED,
              ScanStage.RETURN_COMPLETED,
              ScanStage.LONGITUDINAL_SCAN_COMPLETED]
    rng = np.random.default_rng(seed)
    out = []
    for i in range(scans):
        stage = sparse[i % len(sparse)]
        wp = by_stage.get(stage)
        if wp is None:
            continue
        sub_rng = np.random.default_rng(int(rng.integers(0, 2**31)))
        out.append(_approach_snippet(wp, params, sub_rng, snippet_mm))
    return out


# ---------------------------------------------------------------------------
# Sliding windows and triplets
# ---------------------------------------------------------------------------

def window_dataset(demo: Demonstration, N: int = 5, stride: int = 1,
                   demo_id: str = "") -> List[WindowEntry]:
    """Sliding windows of N steps; each entry pairs the first and last
    frames and carries the last frame's labels."""
    if N < 2:
        raise ValueError("N must be >= 2")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    L = len(demo)
    if L < N:
        raise DemoTooShort(f"demo length {L} < window {N}")
    entries = []
    for first in range(0, L - N + 1, stride):
        last = first + N - 1
        rec = demo.records[last]
        entries.append(WindowEntry(
            first_image=demo.records[first].image,
            last_image=rec.image,
            first_index=first, last_index=last,
            stage=rec.stage, explanation=rec.explanation,
            next_api=rec.next_api,
            prev_stage=demo.records[last - 1].stage,
            volume_id=demo.volume_id,
            demo_id=demo_id,
        ))
    return entries


def sample_triplets(entries: Sequence[WindowEntry], per_anchor: int = 20,
                    seed: int = 0) -> List[TripletSpec]:
    """Sample per_anchor (positive, negative) pairs per anchor window.

    Positives share the anchor's stage and come from a different volume
    when one exists (same-volume fallbacks are flagged); negatives come
    from any other stage, mixing volumes naturally.
    """
    if per_anchor < 1:
        raise ValueError("per_anchor must be >= 1")
    stages = {e.stage for e in entries}
    if len(stages) < 2:
        raise InsufficientStages("triplet sampling needs >= 2 stages")

    rng = np.random.default_rng(seed)
    by_stage: Dict[ScanStage, List[int]] = {}
    for i, e in enumerate(entries):
        by_stage.setdefault(e.stage, []).append(i)

    triplets = []
    for i, anchor in enumerate(entries):
        same_stage = [j for j in by_stage[anchor.stage] if j != i]
        cross_vol = [j for j in same_stage
                     if entries[j].volume_id != anchor.volume_id]
        neg_pool = [j for s, idxs in by_stage.items() if s != anchor.stage
                    for j in idxs]
        if not same_stage:
            continue
        pos_pool = cross_vol if cross_vol else same_stage
        flagged = not cross_vol
        for _ in range(per_anchor):
            p = int(rng.choice(pos_pool))
            n = int(rng.choice(neg_pool))
            triplets.append(TripletSpec(
                anchor_id=anchor.entry_id,
                positive_id=entries[p].entry_id,
                negative_id=entries[n].entry_id,
                positive_same_volume=flagged))
    return triplets


# ---------------------------------------------------------------------------
# On-disk formats
# ---------------------------------------------------------------------------

def save_demonstration(demo: Demonstration, out_dir: str,
                       demo_id: str = "demo") -> str:
    """Write a demo directory: demo.jsonl plus one PNG per frame."""
    os.makedirs(out_dir, exist_ok=True)
    jsonl_path = os.path.join(out_dir, "demo.jsonl")
    with open(jsonl_path, "w", encoding="utf-8") as f:
        for rec in demo.records:
            frame = f"frame_{rec.step_index:05d}.png"
            with open(os.path.join(out_dir, frame), "wb") as img_f:
                img_f.write(rec.image.to_png_bytes())
            api = rec.next_api.wire_name if isinstance(rec.next_api, ApiCommand) \
                else str(rec.next_api)
            row = {
                "step_index": rec.step_index,
                "pose": rec.pose.to_wire(),
                "stage": rec.stage.wire_name,
                "explanation": rec.explanation,
                "next_api": api,
                "image": frame,
            }
            f.write(json.dumps(row) + "\n")
    meta = {"volume_id": demo.volume_id, "seed": demo.seed, "demo_id": demo_id}
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f)
    return jsonl_path


def load_demonstration(demo_dir: str) -> Tuple[Demonstration, str]:
    """Load a demo directory written by save_demonstration."""
    with open(os.path.join(demo_dir, "meta.json"), encoding="utf-8") as f:
        meta = json.load(f)
    records = []
    with open(os.path.join(demo_dir, "demo.jsonl"), encoding="utf-8") as f:
        for line in f:
            row = json.loads(line)
            with open(os.path.join(demo_dir, row["image"]), "rb") as img_f:
                image = SliceImage.from_png_bytes(img_f.read())
            api = row["next_api"]
            if api != DONE:
                api = ApiCommand.from_wire(api)
            records.append(DemoRecord(
                step_index=row["step_index"],
                pose=ProbePose.from_wire(row["pose"]),
                image=image,
                stage=ScanStage.from_wire(row["stage"]),
                explanation=row["explanation"],
                next_api=api))
    demo = Demonstration(records=records, volume_id=meta["volume_id"],
                         seed=meta["seed"])
    return demo, meta.get("demo_id", os.path.basename(demo_dir))


_DATASET_B_QUESTION = "Which anatomical features characterize this ultrasound image?"

_DATASET_C_QUESTIONS = [
    "What is the current scanning stage?",
    "What is the explanation for this stage?",
    "What is the next API to execute?",
]


def dataset_a_rows(entries: Sequence[WindowEntry]) -> List[dict]:
    rows = []
    for e in entries:
        api = e.next_api.wire_name if isinstance(e.next_api, ApiCommand) \
            else str(e.next_api)
        rows.append({
            "first_img": f"{e.demo_id}/frame_{e.first_index:05d}.png",
            "last_img": f"{e.demo_id}/frame_{e.last_index:05d}.png",
            "prev_stage": e.prev_stage.wire_name,
            "stage": e.stage.wire_name,
            "explanation": e.explanation,
            "next_api": api,
            "volume_id": e.volume_id,
        })
    return rows


def dataset_b_rows(demo: Demonstration, demo_id: str) -> List[dict]:
    return [{
        "img": f"{demo_id}/frame_{rec.step_index:05d}.png",
        "question": _DATASET_B_QUESTION,
        "answer": rec.explanation,
    } for rec in demo.records]


def dataset_c_rows(entries: Sequence[WindowEntry]) -> List[dict]:
    rows = []
    for e in entries:
        api = e.next_api.wire_name if isinstance(e.next_api, ApiCommand) \
            else str(e.next_api)
        rows.append({
            "imgs": [f"{e.demo_id}/frame_{e.first_index:05d}.png",
                     f"{e.demo_id}/frame_{e.last_index:05d}.png"],
            "turns": [
                {"q": _DATASET_C_QUESTIONS[0], "a": e.stage.wire_name},
                {"q": _DATASET_C_QUESTIONS[1], "a": e.explanation},
                {"q": _DATASET_C_QUESTIONS[2], "a": api},
            ],
        })
    return rows


def write_jsonl(rows: Sequence[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
