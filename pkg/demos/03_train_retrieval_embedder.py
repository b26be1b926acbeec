"""Metric-learning walkthrough for the retrieval embedder.

Featurizes demonstration frames with the deterministic surrogate encoder,
assembles (previous frame, current frame, previous stage) inputs, trains
the residual MLP with the triplet loss, and reports Top@1 / Top@2 stage
retrieval accuracy on a held-out scan.
"""

import numpy as np

from scansim import (ContextRecord, ContextStore, SliceSpec, TrainConfig,
                     assemble_input, build_trajectory, carotid_phantom,
                     execute_trajectory, phantom_waypoints, resmlp_forward,
                     sample_triplets, surrogate_encode, topk_accuracy,
                     train_resmlp, window_dataset)


def window_inputs(entries):
    """768+768+16 dim inputs, one per sliding window."""
    out = {}
    for e in entries:
        f_prev = surrogate_encode(e.first_image)
        f_curr = surrogate_encode(e.last_image)
        out[e.entry_id] = assemble_input(f_prev, f_curr, e.prev_stage)
    return out


def main():
    vol = carotid_phantom()
    spec = SliceSpec(width_px=96, height_px=96, pixel_spacing=0.5)

    train_entries, held_entries = [], []
    for demo_id, seed in (("scan_a", 1), ("scan_b", 2), ("held", 3)):
        traj = build_trajectory(phantom_waypoints(), seed=seed)
        demo = execute_trajectory(vol, traj, spec, volume_id=demo_id)
        entries = window_dataset(demo, N=5, stride=2, demo_id=demo_id)
        (held_entries if demo_id == "held" else train_entries).extend(entries)
    print(f"{len(train_entries)} training windows, "
          f"{len(held_entries)} held-out windows")

    inputs = window_inputs(train_entries + held_entries)
    triplets = sample_triplets(train_entries, per_anchor=4, seed=0)
    A = np.stack([inputs[t.anchor_id] for t in triplets])
    P = np.stack([inputs[t.positive_id] for t in triplets])
    N = np.stack([inputs[t.negative_id] for t in triplets])

    config = TrainConfig(epochs=5, batch_size=32, lr=1e-4)
    params, history = train_resmlp(A, P, N, config, seed=0)
    print("training loss per epoch:",
          [round(l, 4) for l in history["train_loss"]])

    store = ContextStore()
    for e in train_entries:
        store.add_context(
            ContextRecord(id=e.entry_id, volume_id=e.volume_id,
                          first_image_ref="", last_image_ref="",
                          prev_stage=e.prev_stage, stage=e.stage,
                          explanation=e.explanation, next_api=e.next_api),
            resmlp_forward(params, inputs[e.entry_id]))

    queries = [(resmlp_forward(params, inputs[e.entry_id]), e.stage)
               for e in held_entries]
    for k in (1, 2):
        report = topk_accuracy(store, queries, k=k)
        print(f"held-out Top@{k} stage accuracy: {report['average']:.3f}")


if __name__ == "__main__":
    main()
