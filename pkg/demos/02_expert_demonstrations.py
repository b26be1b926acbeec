"""Expert demonstration walkthrough.

Connects the phantom's stage waypoints into a full scan trajectory
(forward, return, rotate), renders one frame per step, then slices the
demonstration into 5-frame windows and samples triplets for metric
learning. Files land in demos/output/demonstrations/.
"""

import os
from collections import Counter

from scansim import (SliceSpec, build_trajectory, carotid_phantom,
                     execute_trajectory, phantom_waypoints, sample_triplets,
                     window_dataset)
from scansim.demo import dataset_a_rows, save_demonstration, write_jsonl

OUT = os.path.join(os.path.dirname(__file__), "output", "demonstrations")


def main():
    os.makedirs(OUT, exist_ok=True)
    vol = carotid_phantom()
    spec = SliceSpec(width_px=128, height_px=128, pixel_spacing=0.4)

    # two scans of the same anatomy: one nominal, one hand-jittered
    demos = []
    for demo_id, seed in (("phantom_clean", None), ("phantom_jitter", 42)):
        traj = build_trajectory(phantom_waypoints(), seed=seed)
        demo = execute_trajectory(vol, traj, spec, volume_id=demo_id,
                                  seed=seed or 0)
        save_demonstration(demo, os.path.join(OUT, demo_id), demo_id)
        counts = Counter(r.stage.wire_name for r in demo.records)
        print(f"{demo_id}: {len(demo)} steps")
        for stage, n in counts.items():
            print(f"  {stage:<30s} {n:3d} steps")
        demos.append((demo, demo_id))

    entries = []
    for demo, demo_id in demos:
        entries.extend(window_dataset(demo, N=5, stride=1, demo_id=demo_id))
    print(f"\n{len(entries)} sliding windows (N=5, stride 1)")

    write_jsonl(dataset_a_rows(entries), os.path.join(OUT, "dataset_a.jsonl"))
    triplets = sample_triplets(entries, per_anchor=4, seed=0)
    cross = sum(1 for t in triplets if not t.positive_same_volume)
    print(f"{len(triplets)} triplets sampled, {cross} with a cross-volume "
          "positive")
    print(f"outputs in {OUT}")


if __name__ == "__main__":
    main()
