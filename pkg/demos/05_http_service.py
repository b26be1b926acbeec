"""HTTP service walkthrough.

Stands the FastAPI app up in-process, then exercises the main endpoints
the way the browser console does: list volumes, fetch an oblique slice,
store waypoint annotations, launch a supervised oracle run, and tail its
server-sent event stream to completion.
"""

import json
import os
import tempfile

from fastapi.testclient import TestClient

from scansim import carotid_phantom, phantom_ground_truth, phantom_waypoints, \
    write_volume
from scansim.phantom import save_ground_truth
from scansim.service import create_app, pose_to_param


def main():
    with tempfile.TemporaryDirectory() as root:
        volumes = os.path.join(root, "volumes")
        os.makedirs(volumes)
        write_volume(carotid_phantom(), os.path.join(volumes, "phantom.usvol"))
        gt_path = os.path.join(root, "gt.json")
        save_ground_truth(phantom_ground_truth(), gt_path)

        app = create_app(volumes, data_dir=os.path.join(root, "data"))
        with TestClient(app) as client:
            vols = client.get("/volumes").json()
            print("volumes:", vols)

            wps = phantom_waypoints()
            r = client.get(f"/volumes/phantom/slice",
                           params={"pose": pose_to_param(wps[0].pose)})
            print(f"slice at the first waypoint: {len(r.content)} PNG bytes")

            annotations = {"waypoints": [
                {"stage": wp.stage.wire_name, "pose": wp.pose.to_wire(),
                 "name": wp.name} for wp in wps]}
            client.post("/volumes/phantom/annotations", json=annotations)
            stored = client.get("/volumes/phantom/annotations").json()
            print(f"stored {len(stored['waypoints'])} waypoint annotations")

            run = client.post("/runs", json={
                "volume_id": "phantom",
                "backend": f"oracle:{gt_path}",
                "k": 0}).json()
            print(f"run {run['id']} started ({run['status']})")

            stages = []
            with client.stream("GET", f"/runs/{run['id']}/events") as resp:
                for line in resp.iter_lines():
                    if not line.startswith("data: "):
                        continue
                    event = json.loads(line[len("data: "):])
                    if event["event"] == "step":
                        if not stages or stages[-1] != event["stage"]:
                            stages.append(event["stage"])
                    elif event["event"] == "finished":
                        print("event stream finished:",
                              event["termination"],
                              f"after {event['steps']} steps")
                        break
            print("stages seen over the stream:")
            for s in stages:
                print("  " + s)


if __name__ == "__main__":
    main()
