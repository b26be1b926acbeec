"""Closed-loop scan walkthrough.

Runs the decide/execute loop on the phantom twice: once with the scripted
oracle backend (sanity baseline) and once with the retrieval-only backend
fed by a freshly built context store. Both runs are scored against the
phantom's derived ground truth.
"""

from scansim import (ContextEmbedder, ContextRecord, ContextStore,
                     LoopParams, OracleBackend, RagOnlyBackend, ResMlpParams,
                     SliceSpec, build_trajectory, carotid_phantom,
                     eval_stage_accuracy, execute_trajectory,
                     phantom_ground_truth, phantom_waypoints,
                     run_closed_loop, window_dataset)

SPEC = SliceSpec()


def build_store(vol, embedder):
    """Context store over sliding windows of one expert demonstration."""
    traj = build_trajectory(phantom_waypoints(), seed=None)
    demo = execute_trajectory(vol, traj, SPEC, volume_id="expert")
    store = ContextStore()
    for e in window_dataset(demo, N=5, demo_id="expert"):
        f_prev = embedder.encode_image(e.first_image)
        f_curr = embedder.encode_image(e.last_image)
        store.add_context(
            ContextRecord(id=e.entry_id, volume_id=e.volume_id,
                          first_image_ref="", last_image_ref="",
                          prev_stage=e.prev_stage, stage=e.stage,
                          explanation=e.explanation, next_api=e.next_api),
            embedder.embed(f_prev, f_curr, e.prev_stage))
    return store


def describe(tag, log, gt):
    stages = []
    for s in log.steps:
        if not stages or stages[-1] != s["stage"]:
            stages.append(s["stage"])
    report = eval_stage_accuracy(log, gt)
    print(f"\n{tag}: {log.termination} after {len(log.steps)} steps")
    print("  stage sequence:", " -> ".join(stages))
    for name, score in report.items():
        if name != "average":
            print(f"  {name:<30s} {score:.2f}")
    print(f"  average stage accuracy: {report['average']:.3f}")


def main():
    vol = carotid_phantom()
    gt = phantom_ground_truth()
    start = phantom_waypoints()[0].pose

    oracle_log = run_closed_loop(
        vol, OracleBackend(gt["script"]), None, start,
        params=LoopParams(spec=SPEC), volume_id="phantom")
    describe("oracle backend", oracle_log, gt)

    embedder = ContextEmbedder(ResMlpParams.init(seed=0))
    store = build_store(vol, embedder)
    print(f"\ncontext store: {len(store)} records")
    rag_log = run_closed_loop(
        vol, RagOnlyBackend(), store, start, embedder=embedder,
        params=LoopParams(spec=SPEC), volume_id="phantom")
    describe("retrieval-only backend", rag_log, gt)


if __name__ == "__main__":
    main()
