"""Command-line entry point dispatching all subcommands."""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import demo as demo_mod
from .embedder import (ResMlpParams, TrainConfig, load_resmlp, save_resmlp,
                       surrogate_encode, train_resmlp)
from .errors import ScansimError
from .loop import (ContextEmbedder, LoopParams, OracleBackend, RagOnlyBackend,
                   RemoteBackend, RunLog, eval_stage_accuracy, run_closed_loop)
from .phantom import load_ground_truth
from .policy import BackendConfig
from .retrieval import ContextRecord, ContextStore, topk_accuracy
from .volume import ProbePose, SliceImage, SliceSpec, load_volume
from .workflow import DONE, ApiCommand, MotionParams, ScanStage


def _load_waypoints(path: str) -> List[demo_mod.Waypoint]:
    with open(path, encoding="utf-8") as f:
        rows = json.load(f)
    return [demo_mod.Waypoint(pose=ProbePose.from_wire(r["pose"]),
                              stage=ScanStage.from_wire(r["stage"]),
                              name=r.get("name", ""))
            for r in rows]


def save_waypoints(waypoints, path: str) -> None:
    rows = [{"pose": wp.pose.to_wire(), "stage": wp.stage.wire_name,
             "name": wp.name} for wp in waypoints]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(rows, f, indent=1)


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_gen_demos(args) -> int:
    vol = load_volume(args.volume)
    waypoints = _load_waypoints(args.waypoints)
    spec = SliceSpec(pixel_spacing=args.pixel_spacing)
    params = MotionParams()
    if vol.has_mask:
        waypoints = demo_mod.refine_waypoints(vol, waypoints, spec)
    volume_id = os.path.splitext(os.path.basename(args.volume))[0]
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    demo_index = 0
    for scan in range(args.scans):
        sub_seed = int(rng.integers(0, 2**31))
        traj = demo_mod.build_trajectory(waypoints, params,
                                         seed=sub_seed if scan > 0 else None)
        d = demo_mod.execute_trajectory(vol, traj, spec, volume_id=volume_id,
                                        seed=sub_seed)
        demo_id = f"{volume_id}_scan{demo_index:03d}"
        demo_mod.save_demonstration(d, os.path.join(args.out, demo_id), demo_id)
        demo_index += 1
    if args.balance_stages:
        for traj in demo_mod.balance_trajectories(
                waypoints, params, seed=args.seed,
                scans=args.balance_scans):
            d = demo_mod.execute_trajectory(vol, traj, spec,
                                            volume_id=volume_id, seed=args.seed)
            demo_id = f"{volume_id}_bal{demo_index:03d}"
            demo_mod.save_demonstration(d, os.path.join(args.out, demo_id),
                                        demo_id)
            demo_index += 1
    print(f"wrote {demo_index} demonstrations to {args.out}")
    return 0


def cmd_build_dataset(args) -> int:
    demo_dirs = sorted(
        d for d in os.listdir(args.demos)
        if os.path.isfile(os.path.join(args.demos, d, "demo.jsonl")))
    if not demo_dirs:
        raise ScansimError(f"no demonstrations found under {args.demos}")
    os.makedirs(args.out, exist_ok=True)
    all_entries = []
    a_rows, b_rows, c_rows = [], [], []
    for d in demo_dirs:
        dem, demo_id = demo_mod.load_demonstration(os.path.join(args.demos, d))
        if len(dem) < args.window:
            continue
        entries = demo_mod.window_dataset(dem, N=args.window,
                                          stride=args.stride, demo_id=demo_id)
        all_entries.extend(entries)
        a_rows.extend(demo_mod.dataset_a_rows(entries))
        b_rows.extend(demo_mod.dataset_b_rows(dem, demo_id))
        c_rows.extend(demo_mod.dataset_c_rows(entries))
    demo_mod.write_jsonl(a_rows, os.path.join(args.out, "dataset_a.jsonl"))
    demo_mod.write_jsonl(b_rows, os.path.join(args.out, "dataset_b.jsonl"))
    demo_mod.write_jsonl(c_rows, os.path.join(args.out, "dataset_c.jsonl"))
    triplets = demo_mod.sample_triplets(all_entries,
                                        per_anchor=args.per_anchor,
                                        seed=args.seed)
    demo_mod.write_jsonl(
        [{"anchor": t.anchor_id, "positive": t.positive_id,
          "negative": t.negative_id,
          "positive_same_volume": t.positive_same_volume} for t in triplets],
        os.path.join(args.out, "triplets.jsonl"))
    manifest = {"demos_dir": os.path.abspath(args.demos),
                "window": args.window, "stride": args.stride,
                "entries": len(all_entries), "triplets": len(triplets)}
    with open(os.path.join(args.out, "manifest.json"), "w",
              encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    print(f"dataset A/B/C rows: {len(a_rows)}/{len(b_rows)}/{len(c_rows)}; "
          f"triplets: {len(triplets)}")
    return 0


def _read_jsonl(path: str) -> List[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _entry_id_from_ref(ref: str) -> str:
    # "demo_id/frame_00007.png" -> "demo_id:7"
    demo_id, frame = ref.split("/")
    return f"{demo_id}:{int(frame[6:11])}"


class _FeatureSource:
    """Resolves 768-dim image features from a .feat file or the surrogate
    encoder over the demo frames."""

    def __init__(self, spec: str, demos_dir: str):
        self.cache: Dict[str, np.ndarray] = {}
        self.demos_dir = demos_dir
        if spec.startswith("surrogate:"):
            self.seed = int(spec.split(":", 1)[1])
            self.table = None
        else:
            self.table = {row["image_ref"]: np.asarray(row["values"])
                          for row in _read_jsonl(spec)}
            self.seed = 0

    def get(self, image_ref: str) -> np.ndarray:
        if image_ref in self.cache:
            return self.cache[image_ref]
        if self.table is not None:
            feat = self.table[image_ref]
        else:
            with open(os.path.join(self.demos_dir, image_ref), "rb") as f:
                image = SliceImage.from_png_bytes(f.read())
            feat = surrogate_encode(image, self.seed)
        self.cache[image_ref] = feat
        return feat


def _assemble_entry_inputs(a_rows: List[dict], feats: _FeatureSource):
    from .embedder import assemble_input
    inputs = {}
    meta = {}
    for row in a_rows:
        eid = _entry_id_from_ref(row["last_img"])
        inputs[eid] = assemble_input(feats.get(row["first_img"]),
                                     feats.get(row["last_img"]),
                                     ScanStage.from_wire(row["prev_stage"]))
        meta[eid] = row
    return inputs, meta


def cmd_train_retriever(args) -> int:
    dataset_dir = args.triplets if os.path.isdir(args.triplets) \
        else os.path.dirname(args.triplets)
    triplets_path = args.triplets if os.path.isfile(args.triplets) \
        else os.path.join(args.triplets, "triplets.jsonl")
    with open(os.path.join(dataset_dir, "manifest.json"),
              encoding="utf-8") as f:
        manifest = json.load(f)
    demos_dir = args.images or manifest["demos_dir"]
    a_rows = _read_jsonl(os.path.join(dataset_dir, "dataset_a.jsonl"))
    feats = _FeatureSource(args.features, demos_dir)
    inputs, meta = _assemble_entry_inputs(a_rows, feats)

    triplet_rows = _read_jsonl(triplets_path)
    A = np.stack([inputs[t["anchor"]] for t in triplet_rows])
    P = np.stack([inputs[t["positive"]] for t in triplet_rows])
    N = np.stack([inputs[t["negative"]] for t in triplet_rows])

    config = TrainConfig(epochs=args.epochs, batch_size=args.batch,
                         lr=args.lr, weight_decay=args.weight_decay)
    params, history = train_resmlp(A, P, N, config, seed=args.seed)
    save_resmlp(params, args.out)
    print(f"trained {args.epochs} epochs; final loss "
          f"{history['train_loss'][-1]:.6f}; model -> {args.out}")

    if args.store_out:
        from .embedder import resmlp_forward
        from .policy import render_context_text
        store = ContextStore()
        for eid, row in meta.items():
            api = row["next_api"]
            rec = ContextRecord(
                id=eid, volume_id=row["volume_id"],
                first_image_ref=row["first_img"],
                last_image_ref=row["last_img"],
                prev_stage=ScanStage.from_wire(row["prev_stage"]),
                stage=ScanStage.from_wire(row["stage"]),
                explanation=row["explanation"],
                next_api=api if api == DONE else ApiCommand.from_wire(api))
            rec.vqa_text = render_context_text(rec)
            store.add_context(rec, resmlp_forward(params, inputs[eid]))
        store.save(args.store_out)
        print(f"context store ({len(store)} records) -> {args.store_out}")
    return 0


def cmd_eval_retrieval(args) -> int:
    store = ContextStore.load(args.store)
    rows = _read_jsonl(args.queries)
    queries = [(np.asarray(r["embedding"]), ScanStage.from_wire(r["stage"]))
               for r in rows]
    exclude = [r.get("volume_id") for r in rows] if args.exclude_same_demo \
        else None
    report = topk_accuracy(store, queries, k=args.k, exclude_volumes=exclude)
    with open(args.report, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=1)
    print(f"Top@{args.k} average accuracy: {report['average']:.3f}")
    return 0


def cmd_run_loop(args) -> int:
    vol = load_volume(args.volume)
    volume_id = os.path.splitext(os.path.basename(args.volume))[0]
    store = ContextStore.load(args.store) if args.store else None

    if args.backend.startswith("oracle:"):
        gt = load_ground_truth(args.backend.split(":", 1)[1])
        backend = OracleBackend(gt["script"])
    elif args.backend == "rag-only":
        backend = RagOnlyBackend()
    else:
        backend = RemoteBackend(BackendConfig(endpoint=args.backend))

    embedder = None
    if args.model:
        embedder = ContextEmbedder(load_resmlp(args.model),
                                   feature_seed=args.feature_seed)
    if args.backend == "rag-only" and (store is None or embedder is None):
        raise ScansimError("rag-only backend needs --store and --model")

    if args.waypoints:
        start_pose = _load_waypoints(args.waypoints)[0].pose
    else:
        raise ScansimError("--waypoints is required to place the start pose")

    params = LoopParams(k=args.k, max_steps=args.max_steps,
                        spec=SliceSpec(pixel_spacing=args.pixel_spacing))
    log = run_closed_loop(vol, backend, store, start_pose, embedder,
                          params, seed=args.seed, volume_id=volume_id)
    path = log.save(args.out)
    print(f"run terminated {log.termination} after {len(log.steps)} steps; "
          f"log -> {path}")
    return 0


def cmd_eval_run(args) -> int:
    log = RunLog.load(args.log)
    gt = load_ground_truth(args.gt)
    report = eval_stage_accuracy(log, gt)
    with open(args.report, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=1)
    print(f"average stage accuracy: {report['average']:.3f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from .service import create_app
    app = create_app(volumes_dir=args.volumes, store_path=args.store,
                     data_dir=args.data_dir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scansim",
        description="Carotid ultrasound scanning simulator with "
                    "retrieval-augmented decision making")
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("--config", default=None,
                        help="key=value config file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="generate expert demonstrations")
    p.add_argument("--volume", required=True)
    p.add_argument("--waypoints", required=True)
    p.add_argument("--scans", type=int, default=3)
    p.add_argument("--balance-stages", action="store_true")
    p.add_argument("--balance-scans", type=int, default=20)
    p.add_argument("--pixel-spacing", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("build-dataset", help="build datasets A/B/C and triplets")
    p.add_argument("--demos", required=True)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--per-anchor", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train-retriever", help="train the retrieval embedder")
    p.add_argument("--triplets", required=True,
                   help="triplets.jsonl or the dataset directory")
    p.add_argument("--features", default="surrogate:0",
                   help=".feat file or surrogate:<seed>")
    p.add_argument("--images", default=None,
                   help="demo frames root (defaults to dataset manifest)")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-6)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--store-out", default=None,
                   help="also build a .ctxdb context store")
    p.set_defaults(func=cmd_train_retriever)

    p = sub.add_parser("eval-retrieval", help="Top@k retrieval accuracy")
    p.add_argument("--store", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--exclude-same-demo", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("run-loop", help="run the autonomous scan loop")
    p.add_argument("--volume", required=True)
    p.add_argument("--store", default=None)
    p.add_argument("--backend", required=True,
                   help="<url> | rag-only | oracle:<gt.json>")
    p.add_argument("--model", default=None, help=".resmlp model file")
    p.add_argument("--feature-seed", type=int, default=0)
    p.add_argument("--waypoints", default=None)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--max-steps", type=int, default=500)
    p.add_argument("--pixel-spacing", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run_loop)

    p = sub.add_parser("eval-run", help="stage-level accuracy of a run log")
    p.add_argument("--log", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval_run)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--volumes", required=True)
    p.add_argument("--store", default=None)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(func=cmd_serve)

    return parser


def _apply_config_file(argv: List[str]) -> List[str]:
    """Prepend key=value pairs from --config as defaults (flags given on
    the command line win because argparse takes the last occurrence)."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    path = argv[i + 1]
    extra = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, _, value = line.partition("=")
            extra.extend([f"--{key.strip()}", value.strip()])
    # insert after the subcommand token
    for j, tok in enumerate(argv):
        if not tok.startswith("-") and j != i + 1:
            return argv[:j + 1] + extra + argv[j + 1:]
    return argv + extra


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(argv)
        args = parser.parse_args(argv)
    except FileNotFoundError as e:
        print(f"error: config file not found: {e}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ScansimError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
