"""HTTP service exposing volume slicing, annotation persistence, retrieval
queries, and closed-loop run control for the browser console and scripted
clients.

Pose wire encoding for the slice endpoint: 9 comma-separated floats —
position (mm) followed by an axis-angle rotation vector (radians * axis).
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid
from typing import Dict, List, Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.responses import JSONResponse, StreamingResponse
from scipy.spatial.transform import Rotation

from .embedder import load_resmlp
from .loop import (ContextEmbedder, LoopParams, OracleBackend, RagOnlyBackend,
                   RemoteBackend, RunLog, run_closed_loop)
from .phantom import load_ground_truth
from .policy import BackendConfig
from .retrieval import ContextStore
from .volume import (ProbePose, SliceImage, SliceSpec, UsVolume, load_volume,
                     sample_slice)
from .workflow import DONE, ApiCommand, ScanStage


def parse_pose_param(pose_str: str) -> ProbePose:
    """9 floats: position, axis-angle rotvec, 3 reserved zeros (6 floats
    also accepted)."""
    parts = [float(x) for x in pose_str.split(",")]
    if len(parts) not in (6, 9):
        raise ValueError("pose must be 6 or 9 comma-separated floats")
    position = np.array(parts[:3])
    rotvec = np.array(parts[3:6])
    R = Rotation.from_rotvec(rotvec).as_matrix()
    return ProbePose(position, R)


def pose_to_param(pose: ProbePose) -> str:
    rotvec = Rotation.from_matrix(pose.orientation).as_rotvec()
    vals = list(pose.position) + list(rotvec) + [0.0, 0.0, 0.0]
    return ",".join(f"{v:.9g}" for v in vals)


class RunState:
    def __init__(self, run_id: str):
        self.id = run_id
        self.status = "Pending"            # Pending|Running|Paused|Finished
        self.termination: Optional[str] = None
        self.current_step = 0
        self.events: List[dict] = []
        self.cond = threading.Condition()
        self.paused = False
        self.pending_override: Optional[str] = None
        self.thread: Optional[threading.Thread] = None

    def to_json(self) -> dict:
        status = self.status
        if self.status == "Finished":
            status = f"Finished({self.termination})"
        return {"id": self.id, "status": status,
                "current_step": self.current_step}


class ServiceState:
    def __init__(self, volumes_dir: str, store_path: Optional[str] = None,
                 model_path: Optional[str] = None,
                 data_dir: Optional[str] = None):
        self.volumes_dir = volumes_dir
        self.data_dir = data_dir or os.path.join(volumes_dir, "_data")
        os.makedirs(os.path.join(self.data_dir, "annotations"), exist_ok=True)
        os.makedirs(os.path.join(self.data_dir, "runs"), exist_ok=True)
        self.volumes: Dict[str, UsVolume] = {}
        for name in sorted(os.listdir(volumes_dir)):
            if name.endswith(".usvol"):
                vid = name[:-len(".usvol")]
                self.volumes[vid] = load_volume(os.path.join(volumes_dir, name))
        self.store = ContextStore.load(store_path) if store_path else None
        self.embedder = None
        if model_path:
            self.embedder = ContextEmbedder(load_resmlp(model_path))
        self.runs: Dict[str, RunState] = {}
        self.runs_lock = threading.Lock()

    def annotation_path(self, volume_id: str) -> str:
        return os.path.join(self.data_dir, "annotations", f"{volume_id}.json")


def create_app(volumes_dir: str, store_path: Optional[str] = None,
               model_path: Optional[str] = None,
               data_dir: Optional[str] = None) -> FastAPI:
    state = ServiceState(volumes_dir, store_path, model_path, data_dir)
    app = FastAPI(title="scansim service")
    app.state.scansim = state

    @app.get("/volumes")
    def list_volumes():
        return [{"id": vid, "dims": list(vol.dims),
                 "spacing_mm": [float(s) for s in vol.spacing],
                 "has_mask": vol.has_mask}
                for vid, vol in state.volumes.items()]

    def _volume(volume_id: str) -> UsVolume:
        vol = state.volumes.get(volume_id)
        if vol is None:
            raise HTTPException(404, f"unknown volume: {volume_id}")
        return vol

    @app.get("/volumes/{volume_id}/slice")
    def get_slice(volume_id: str, pose: str, w: int = 224, h: int = 224,
                  px: float = 0.2):
        vol = _volume(volume_id)
        try:
            probe_pose = parse_pose_param(pose)
            spec = SliceSpec(width_px=w, height_px=h, pixel_spacing=px)
        except ValueError as e:
            raise HTTPException(400, str(e))
        image = sample_slice(vol, probe_pose, spec)
        return Response(content=image.to_png_bytes(), media_type="image/png")

    @app.post("/volumes/{volume_id}/annotations")
    async def post_annotations(volume_id: str, request: Request):
        _volume(volume_id)
        try:
            body = await request.json()
        except json.JSONDecodeError:
            raise HTTPException(400, "invalid JSON body")
        if not isinstance(body, dict) or "waypoints" not in body:
            raise HTTPException(400, "annotation set must carry 'waypoints'")
        for wp in body["waypoints"]:
            try:
                ScanStage.from_wire(wp["stage"])
                ProbePose.from_wire(wp["pose"])
            except Exception as e:
                raise HTTPException(400, f"bad waypoint: {e}")
        body["volume_id"] = volume_id
        canonical = json.dumps(body, sort_keys=True, separators=(",", ":"))
        with open(state.annotation_path(volume_id), "w",
                  encoding="utf-8") as f:
            f.write(canonical)
        return JSONResponse({"ok": True})

    @app.get("/volumes/{volume_id}/annotations")
    def get_annotations(volume_id: str):
        _volume(volume_id)
        path = state.annotation_path(volume_id)
        if not os.path.exists(path):
            raise HTTPException(404, "no annotations for this volume")
        with open(path, encoding="utf-8") as f:
            return Response(content=f.read(), media_type="application/json")

    @app.post("/retrieval/query")
    async def retrieval_query(request: Request):
        if state.store is None:
            raise HTTPException(503, "no context store configured")
        body = await request.json()
        k = int(body.get("k", 2))
        if "embedding" in body:
            q = np.asarray(body["embedding"], dtype=float)
        elif "image_pair" in body and state.embedder is not None:
            import base64
            imgs = [SliceImage.from_png_bytes(base64.b64decode(b))
                    for b in body["image_pair"]]
            prev = ScanStage.from_wire(body["prev_stage"])
            f_prev = state.embedder.encode_image(imgs[0])
            f_curr = state.embedder.encode_image(imgs[1])
            q = state.embedder.embed(f_prev, f_curr, prev)
        else:
            raise HTTPException(400, "need 'embedding' or 'image_pair'")
        try:
            result = state.store.query_topk(q, k)
        except Exception as e:
            raise HTTPException(400, str(e))
        return {"ranked": [
            {"id": rid, "score": score,
             "context": state.store.records[rid].to_json()}
            for rid, score in result.ranked]}

    # ------------------------------------------------------------------
    # Runs
    # ------------------------------------------------------------------

    def _run_worker(run: RunState, vol: UsVolume, volume_id: str,
                    backend, start_pose: ProbePose, params: LoopParams,
                    seed: int):
        def override_hook(step: int):
            with run.cond:
                while run.paused:
                    run.cond.wait(timeout=0.1)
                forced = run.pending_override
                run.pending_override = None
            if forced is None:
                return None
            return DONE if forced == DONE else ApiCommand.from_wire(forced)

        def step_hook(record: dict):
            with run.cond:
                run.current_step = record["step"]
                run.events.append({"event": "step", **record})
                run.cond.notify_all()

        log = run_closed_loop(vol, backend, state.store, start_pose,
                              state.embedder, params, seed=seed,
                              volume_id=volume_id,
                              override_hook=override_hook,
                              step_hook=step_hook)
        log.save(os.path.join(state.data_dir, "runs", run.id))
        with run.cond:
            run.status = "Finished"
            run.termination = log.termination
            run.events.append({"event": "finished",
                               "termination": log.termination,
                               "steps": len(log.steps)})
            run.cond.notify_all()

    @app.post("/runs")
    async def create_run(request: Request):
        body = await request.json()
        volume_id = body.get("volume_id")
        vol = _volume(volume_id)
        backend_spec = body.get("backend", "rag-only")
        if backend_spec.startswith("oracle:"):
            gt = load_ground_truth(backend_spec.split(":", 1)[1])
            backend = OracleBackend(gt["script"])
        elif backend_spec == "rag-only":
            if state.store is None or state.embedder is None:
                raise HTTPException(503, "rag-only needs a store and model")
            backend = RagOnlyBackend()
        else:
            backend = RemoteBackend(BackendConfig(endpoint=backend_spec))

        ann_path = state.annotation_path(volume_id)
        if "start_pose" in body:
            start_pose = ProbePose.from_wire(body["start_pose"])
        elif os.path.exists(ann_path):
            with open(ann_path, encoding="utf-8") as f:
                ann = json.load(f)
            if not ann.get("waypoints"):
                raise HTTPException(400, "annotations carry no waypoints")
            start_pose = ProbePose.from_wire(ann["waypoints"][0]["pose"])
        else:
            raise HTTPException(400, "no start_pose and no annotations")

        k = int(body.get("k", 2)) if state.store is not None else 0
        params = LoopParams(k=k, max_steps=int(body.get("max_steps", 500)))
        run = RunState(uuid.uuid4().hex[:12])
        with state.runs_lock:
            state.runs[run.id] = run
        run.status = "Running"
        run.thread = threading.Thread(
            target=_run_worker,
            args=(run, vol, volume_id, backend, start_pose, params,
                  int(body.get("seed", 0))),
            daemon=True)
        run.thread.start()
        return run.to_json()

    def _run(run_id: str) -> RunState:
        run = state.runs.get(run_id)
        if run is None:
            raise HTTPException(404, f"unknown run: {run_id}")
        return run

    @app.get("/runs/{run_id}")
    def get_run(run_id: str):
        return _run(run_id).to_json()

    @app.post("/runs/{run_id}/pause")
    def pause_run(run_id: str):
        run = _run(run_id)
        with run.cond:
            if run.status != "Running":
                raise HTTPException(409, f"cannot pause from {run.status}")
            run.status = "Paused"
            run.paused = True
        return run.to_json()

    @app.post("/runs/{run_id}/resume")
    def resume_run(run_id: str):
        run = _run(run_id)
        with run.cond:
            if run.status != "Paused":
                raise HTTPException(409, f"cannot resume from {run.status}")
            run.status = "Running"
            run.paused = False
            run.cond.notify_all()
        return run.to_json()

    @app.post("/runs/{run_id}/override")
    async def override_run(run_id: str, request: Request):
        run = _run(run_id)
        body = await request.json()
        api = body.get("next_api")
        if api != DONE:
            try:
                ApiCommand.from_wire(api)
            except Exception:
                raise HTTPException(400, f"unknown API: {api}")
        with run.cond:
            if run.status not in ("Running", "Paused"):
                raise HTTPException(409, f"cannot override from {run.status}")
            run.pending_override = api
        return run.to_json()

    @app.get("/runs/{run_id}/events")
    def run_events(run_id: str):
        run = _run(run_id)

        def stream():
            cursor = 0
            while True:
                with run.cond:
                    while cursor >= len(run.events) and run.status != "Finished":
                        run.cond.wait(timeout=0.5)
                    chunk = run.events[cursor:]
                    cursor = len(run.events)
                    finished = run.status == "Finished" and \
                        cursor >= len(run.events)
                for event in chunk:
                    yield f"data: {json.dumps(event)}\n\n"
                if finished and chunk and chunk[-1].get("event") == "finished":
                    return
                if finished and not chunk:
                    return

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app
