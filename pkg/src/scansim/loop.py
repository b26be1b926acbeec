"""Autonomous scan loop and stage-level evaluation.

Each iteration samples the current frame, embeds it with the frame from
delta steps earlier and the previously predicted stage, retrieves similar
historical contexts, asks the policy backend for a decision, logs it, and
executes the decided API on the virtual probe.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .embedder import ResMlpParams, assemble_input, resmlp_forward, surrogate_encode
from .errors import UncoveredSpan
from .policy import (BackendConfig, OraclePolicy, PolicyDecision, PromptBundle,
                     assemble_prompt, remote_vlm_policy)
from .retrieval import ContextRecord, ContextStore
from .volume import (ProbePose, SliceImage, SliceSpec, UsVolume, apply_motion,
                     _plane_world_points, sample_slice)
from .workflow import DONE, ApiCommand, MotionParams, ScanStage, api_to_motion


@dataclass
class LoopParams:
    N: int = 5                     # frame buffer length
    delta: int = 4                 # frame gap for the earlier image
    k: int = 2                     # retrieved context examples
    max_steps: int = 500
    motion: MotionParams = field(default_factory=MotionParams)
    spec: SliceSpec = field(default_factory=SliceSpec)
    margin_mm: float = 10.0        # out-of-volume tolerance
    perturb: bool = False          # apply seeded motion perturbations
    record_latency: bool = False   # off by default: keeps logs bit-stable


@dataclass
class LoopQuery:
    """Everything a backend may look at for one decision."""

    step: int
    prev_stage: ScanStage
    frame_prev: SliceImage
    frame_curr: SliceImage
    retrieved: List[ContextRecord]
    query_embedding: Optional[np.ndarray]


class ContextEmbedder:
    """Image featurizer + trained ResMLP, bundled for the loop."""

    def __init__(self, resmlp: ResMlpParams, feature_seed: int = 0):
        self.resmlp = resmlp
        self.feature_seed = feature_seed

    def encode_image(self, image: SliceImage) -> np.ndarray:
        return surrogate_encode(image, self.feature_seed)

    def embed(self, f_prev, f_curr, prev_stage: ScanStage) -> np.ndarray:
        return resmlp_forward(self.resmlp,
                              assemble_input(f_prev, f_curr, prev_stage))


class RagOnlyBackend:
    """Stage of the nearest retrieved context; API from the default map."""

    def decide(self, query: LoopQuery) -> PolicyDecision:
        from .policy import STAGE_API_MAP
        from .workflow import stage_explanation
        if not query.retrieved:
            raise ValueError("rag-only backend needs retrieved contexts")
        stage = query.retrieved[0].stage
        return PolicyDecision(stage=stage,
                              explanation=stage_explanation(stage),
                              next_api=STAGE_API_MAP[stage])


class OracleBackend:
    """Replays a ground-truth script; validates loop and evaluator."""

    def __init__(self, script: Sequence[dict]):
        self._policy = OraclePolicy(script)

    def decide(self, query: LoopQuery) -> PolicyDecision:
        return self._policy.decide()


class RemoteBackend:
    """Assembles the prompt bundle and calls the HTTP backend."""

    def __init__(self, config: BackendConfig):
        self.config = config

    def decide(self, query: LoopQuery) -> PolicyDecision:
        bundle = assemble_prompt(query.prev_stage, query.retrieved,
                                 [query.frame_prev, query.frame_curr],
                                 k=len(query.retrieved))
        return remote_vlm_policy(self.config, bundle)


@dataclass
class RunLog:
    steps: List[dict]
    termination: str               # Completed | MaxSteps | BackendFailure | OutOfVolume
    volume_id: str = ""
    seed: int = 0

    def save(self, out_dir: str) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "run.jsonl")
        with open(path, "w", encoding="utf-8") as f:
            for step in self.steps:
                f.write(json.dumps(step) + "\n")
            f.write(json.dumps({"summary": True,
                                "termination": self.termination,
                                "volume_id": self.volume_id,
                                "seed": self.seed,
                                "steps": len(self.steps)}) + "\n")
        return path

    @classmethod
    def load(cls, path: str) -> "RunLog":
        if os.path.isdir(path):
            path = os.path.join(path, "run.jsonl")
        steps = []
        summary = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                row = json.loads(line)
                if row.get("summary"):
                    summary = row
                else:
                    steps.append(row)
        return cls(steps=steps, termination=summary.get("termination", ""),
                   volume_id=summary.get("volume_id", ""),
                   seed=summary.get("seed", 0))


def lumen_column_fraction(vol: UsVolume, pose: ProbePose,
                          spec: SliceSpec) -> float:
    """Fraction of slice columns containing at least one lumen-mask pixel
    (nearest-neighbor mask lookup)."""
    if not vol.has_mask:
        return 0.0
    pts = _plane_world_points(pose, spec)
    coords = (pts - vol.origin) / vol.spacing
    idx = np.rint(coords).astype(np.int64)
    nx, ny, nz = vol.dims
    inside = ((idx[..., 0] >= 0) & (idx[..., 0] < nx) &
              (idx[..., 1] >= 0) & (idx[..., 1] < ny) &
              (idx[..., 2] >= 0) & (idx[..., 2] < nz))
    hit = np.zeros(inside.shape, dtype=bool)
    hit[inside] = vol.mask[idx[inside][:, 2], idx[inside][:, 1],
                           idx[inside][:, 0]] > 0
    return float(hit.any(axis=0).mean())


def run_closed_loop(vol: UsVolume, backend, store: Optional[ContextStore],
                    start_pose: ProbePose,
                    embedder: Optional[ContextEmbedder] = None,
                    params: LoopParams = None, seed: int = 0,
                    volume_id: str = "",
                    override_hook=None, step_hook=None) -> RunLog:
    """Run the decide/execute feedback loop until termination.

    `override_hook(step) -> ApiCommand | DONE | None`, when given, lets a
    supervisor replace the decided API at an iteration boundary (it may
    also block, which pauses the loop). `step_hook(record)` is called after
    each step is logged.
    """
    params = params or LoopParams()
    if store is not None and params.k > 0 and len(store) == 0:
        raise ValueError("store must be non-empty when k > 0")
    rng = np.random.default_rng(seed) if params.perturb else None

    pose = start_pose
    prev_stage = ScanStage.EXAMINE_CCA_PROXIMAL
    buffer: List[SliceImage] = []
    retract_count = 0
    rotation_accum = 0.0
    lo, hi = vol.bounds()
    steps: List[dict] = []
    termination = "MaxSteps"

    for step in range(params.max_steps):
        t0 = time.monotonic()
        image = sample_slice(vol, pose, params.spec)
        buffer.append(image)
        if len(buffer) > params.N:
            buffer.pop(0)
        frame_prev = buffer[max(0, len(buffer) - 1 - params.delta)]

        q_emb = None
        retrieved: List[ContextRecord] = []
        if embedder is not None and store is not None and params.k > 0:
            f_prev = embedder.encode_image(frame_prev)
            f_curr = embedder.encode_image(image)
            q_emb = embedder.embed(f_prev, f_curr, prev_stage)
            result = store.query_topk(q_emb, params.k)
            retrieved = [store.records[rid] for rid, _ in result.ranked]

        query = LoopQuery(step=step, prev_stage=prev_stage,
                          frame_prev=frame_prev, frame_curr=image,
                          retrieved=retrieved, query_embedding=q_emb)
        decision = None
        for attempt in range(2):     # one retry, then give up
            try:
                decision = backend.decide(query)
                break
            except Exception:
                if attempt == 1:
                    decision = None
        if decision is None:
            termination = "BackendFailure"
            break

        api: Union[ApiCommand, str] = decision.next_api
        override = None
        if override_hook is not None:
            forced = override_hook(step)
            if forced is not None:
                override = forced.wire_name if isinstance(forced, ApiCommand) \
                    else str(forced)
                api = forced

        record = {
            "step": step,
            "pose": pose.to_wire(),
            "image_hash": hashlib.sha256(image.pixels.tobytes()).hexdigest(),
            "scan_w": float(np.dot(pose.position - start_pose.position,
                                   start_pose.w)),
            "lumen_cols_frac": lumen_column_fraction(vol, pose, params.spec),
            "retrieved_ids": [r.id for r in retrieved],
            "stage": decision.stage.wire_name,
            "explanation": decision.explanation,
            "next_api": api.wire_name if isinstance(api, ApiCommand) else str(api),
            "rotation_accum": rotation_accum,
        }
        if override is not None:
            record["override"] = override
        if params.record_latency:
            record["latency_s"] = time.monotonic() - t0
        steps.append(record)
        if step_hook is not None:
            step_hook(record)

        prev_stage = decision.stage

        if api == DONE or (
                decision.stage is ScanStage.LONGITUDINAL_SCAN_COMPLETED
                and rotation_accum >= params.motion.rotation_total - 1e-9):
            termination = "Completed"
            break

        if isinstance(api, ApiCommand):
            if api is ApiCommand.TRACKING_BACKWARD:
                delta = api_to_motion(api, params.motion,
                                      retract_index=retract_count, rng=rng)
                retract_count += 1
            else:
                retract_count = 0
                if api is ApiCommand.ROTATION_CLOCKWISE:
                    if rotation_accum >= params.motion.rotation_total - 1e-9:
                        continue     # rotation capped; hold position
                    rotation_accum = min(
                        rotation_accum + params.motion.rotation_step,
                        params.motion.rotation_total)
                delta = api_to_motion(api, params.motion, rng=rng)
            pose = apply_motion(pose, delta)

        if np.any(pose.position < lo - params.margin_mm) or \
                np.any(pose.position > hi + params.margin_mm):
            termination = "OutOfVolume"
            break

    return RunLog(steps=steps, termination=termination,
                  volume_id=volume_id, seed=seed)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

_DURATION_STAGES = [ScanStage.EXAMINE_CCA_PROXIMAL,
                    ScanStage.EXAMINE_CCA_DISTAL,
                    ScanStage.EXAMINE_BIFURCATION]


def eval_stage_accuracy(log: RunLog, gt: dict) -> dict:
    """Stage-level accuracy report over the six scored stages.

    Early stages score duration ratio (correct predictions inside the
    ground-truth step interval over the interval length); transverse
    completion scores waypoint reach, return completion scores region
    membership, longitudinal completion scores the visibility predicate.
    """
    if not log.steps:
        raise ValueError("empty run log")
    intervals = gt.get("stage_intervals", {})
    report = {}

    for stage in _DURATION_STAGES:
        name = stage.wire_name
        if name not in intervals:
            raise UncoveredSpan(f"ground truth lacks interval for {name}")
        a, b = intervals[name]
        total = b - a
        correct = sum(1 for s in log.steps
                      if a <= s["step"] < b and s["stage"] == name)
        report[name] = min(1.0, correct / total) if total > 0 else 0.0

    trans = ScanStage.TRANSVERSE_SCAN_COMPLETED.wire_name
    w_target = gt["transverse_waypoint_w"]
    reached = any(s["stage"] == trans and s["scan_w"] >= w_target - 1e-9
                  for s in log.steps)
    report[trans] = 1.0 if reached else 0.0

    ret = ScanStage.RETURN_COMPLETED.wire_name
    lo_w, hi_w = gt["return_region_w"]
    ret_steps = [s for s in log.steps if s["stage"] == ret]
    report[ret] = 1.0 if ret_steps and lo_w <= ret_steps[0]["scan_w"] <= hi_w \
        else 0.0

    lon = ScanStage.LONGITUDINAL_SCAN_COMPLETED.wire_name
    threshold = gt.get("longitudinal_min_col_fraction", 0.6)
    lon_steps = [s for s in log.steps if s["stage"] == lon]
    report[lon] = 1.0 if lon_steps and \
        lon_steps[0]["lumen_cols_frac"] >= threshold else 0.0

    scored = [report[s.wire_name] for s in _DURATION_STAGES] + \
             [report[trans], report[ret], report[lon]]
    report["average"] = float(np.mean(scored))
    return report
