/**
 * Thin fetch client for the scan service HTTP API.
 */

import { Pose, poseToParam, poseToWire } from "./pose.js";
import { RunEvent, RunMonitor } from "./events.js";

export interface VolumeInfo {
  id: string;
  shape: number[];
  spacing: number[];
}

export interface Annotations {
  waypoints: {
    stage: string;
    pose: { position: number[]; quaternion: number[] };
    name?: string;
  }[];
}

export interface RunInfo {
  id: string;
  status: string;
  [key: string]: unknown;
}

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: typeof fetch = fetch,
  ) {}

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(this.baseUrl + path, init);
    if (!resp.ok) {
      throw new Error(`${init?.method ?? "GET"} ${path}: HTTP ${resp.status}`);
    }
    return (await resp.json()) as T;
  }

  listVolumes(): Promise<VolumeInfo[]> {
    return this.json("/volumes");
  }

  sliceUrl(volumeId: string, pose: Pose): string {
    const q = new URLSearchParams({ pose: poseToParam(pose) });
    return `${this.baseUrl}/volumes/${volumeId}/slice?${q.toString()}`;
  }

  async fetchSlice(volumeId: string, pose: Pose): Promise<Blob> {
    const resp = await this.fetchFn(this.sliceUrl(volumeId, pose));
    if (!resp.ok) throw new Error(`slice fetch failed: HTTP ${resp.status}`);
    return await resp.blob();
  }

  saveAnnotations(volumeId: string, annotations: Annotations): Promise<unknown> {
    return this.json(`/volumes/${volumeId}/annotations`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(annotations),
    });
  }

  loadAnnotations(volumeId: string): Promise<Annotations> {
    return this.json(`/volumes/${volumeId}/annotations`);
  }

  startRun(options: {
    volumeId: string;
    backend: string;
    startPose?: Pose;
    k?: number;
    maxSteps?: number;
  }): Promise<RunInfo> {
    const body: Record<string, unknown> = {
      volume_id: options.volumeId,
      backend: options.backend,
    };
    if (options.startPose) body.start_pose = poseToWire(options.startPose);
    if (options.k !== undefined) body.k = options.k;
    if (options.maxSteps !== undefined) body.max_steps = options.maxSteps;
    return this.json("/runs", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  pauseRun(runId: string): Promise<RunInfo> {
    return this.json(`/runs/${runId}/pause`, { method: "POST" });
  }

  resumeRun(runId: string): Promise<RunInfo> {
    return this.json(`/runs/${runId}/resume`, { method: "POST" });
  }

  overrideRun(runId: string, api: string): Promise<RunInfo> {
    return this.json(`/runs/${runId}/override`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ api }),
    });
  }

  /**
   * Stream a run's server-sent events. Resolves with the monitor once the
   * finished event arrives or the stream ends.
   */
  async monitorRun(
    runId: string,
    onEvent?: (e: RunEvent) => void,
  ): Promise<RunMonitor> {
    const resp = await this.fetchFn(`${this.baseUrl}/runs/${runId}/events`);
    if (!resp.ok || !resp.body) {
      throw new Error(`event stream failed: HTTP ${resp.status}`);
    }
    const monitor = new RunMonitor(onEvent);
    const reader = resp.body.getReader();
    const decoder = new TextDecoder();
    for (;;) {
      const { done, value } = await reader.read();
      if (value) monitor.push(decoder.decode(value, { stream: true }));
      if (done || monitor.finished) break;
    }
    return monitor;
  }
}
