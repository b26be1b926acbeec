/**
 * Browser entry point: wires the steering viewer, annotation panel, and
 * run monitor to the DOM shell in index.html.
 */

import { ApiClient, Annotations } from "./api.js";
import { IDENTITY, Mat3, Pose, matrixToQuaternion } from "./pose.js";
import { ViewerState } from "./viewer.js";

const STAGES = [
  "Examine CCA proximal",
  "Examine CCA distal",
  "Examine bifurcation",
  "Transverse scan completed",
  "Return to carotid bulb",
  "Return completed",
  "Rotate to longitudinal view",
  "Longitudinal scan completed",
];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function formatPose(pose: Pose): string {
  const p = pose.position.map((v) => v.toFixed(2)).join(", ");
  const q = matrixToQuaternion(pose.orientation)
    .map((v) => v.toFixed(4))
    .join(", ");
  return `pos [${p}] mm  quat [${q}]`;
}

async function boot(): Promise<void> {
  const client = new ApiClient("");
  const state = new ViewerState({
    position: [0, 0, 0],
    orientation: [...IDENTITY] as Mat3,
  });
  const waypoints: Annotations = { waypoints: [] };

  const volumeSelect = el<HTMLSelectElement>("volume");
  const stageSelect = el<HTMLSelectElement>("stage");
  const sliceImg = el<HTMLImageElement>("slice");
  const poseOut = el<HTMLElement>("pose");
  const logOut = el<HTMLElement>("log");

  for (const stage of STAGES) {
    const opt = document.createElement("option");
    opt.value = stage;
    opt.textContent = stage;
    stageSelect.appendChild(opt);
  }

  const volumes = await client.listVolumes();
  for (const vol of volumes) {
    const opt = document.createElement("option");
    opt.value = vol.id;
    opt.textContent = `${vol.id} (${vol.shape.join("x")})`;
    volumeSelect.appendChild(opt);
  }

  const log = (msg: string) => {
    logOut.textContent = `${msg}\n${logOut.textContent ?? ""}`;
  };

  const refresh = () => {
    poseOut.textContent = formatPose(state.pose);
    if (volumeSelect.value) {
      sliceImg.src = client.sliceUrl(volumeSelect.value, state.pose);
    }
  };

  document.addEventListener("keydown", (ev) => {
    if (ev.target instanceof HTMLInputElement) return;
    if (state.handleKey(ev.key, ev.shiftKey)) {
      ev.preventDefault();
      refresh();
    }
  });
  volumeSelect.addEventListener("change", refresh);

  el<HTMLButtonElement>("mark").addEventListener("click", () => {
    waypoints.waypoints.push({
      stage: stageSelect.value,
      pose: {
        position: [...state.pose.position],
        quaternion: matrixToQuaternion(state.pose.orientation),
      },
    });
    log(`marked waypoint ${waypoints.waypoints.length}: ${stageSelect.value}`);
  });

  el<HTMLButtonElement>("save").addEventListener("click", async () => {
    await client.saveAnnotations(volumeSelect.value, waypoints);
    log(`saved ${waypoints.waypoints.length} waypoints`);
  });

  el<HTMLButtonElement>("load").addEventListener("click", async () => {
    const loaded = await client.loadAnnotations(volumeSelect.value);
    waypoints.waypoints = loaded.waypoints;
    log(`loaded ${waypoints.waypoints.length} waypoints`);
  });

  el<HTMLButtonElement>("run").addEventListener("click", async () => {
    const backend = el<HTMLInputElement>("backend").value || "rag-only";
    const run = await client.startRun({
      volumeId: volumeSelect.value,
      backend,
      startPose: state.pose,
    });
    log(`run ${run.id} started`);
    const monitor = await client.monitorRun(run.id, (event) => {
      if (event.event === "step") {
        log(`step ${event.step}: ${event.stage} -> ${event.next_api}`);
      }
    });
    log(
      `run finished: ${monitor.summary.termination} after ` +
        `${monitor.summary.steps} steps through ` +
        `${monitor.summary.stages.length} stages`,
    );
  });

  refresh();
  log("ready — arrows steer, shift = fine steps, R rotates");
}

boot().catch((err) => {
  console.error(err);
  const banner = document.getElementById("log");
  if (banner) banner.textContent = String(err);
});
