/**
 * Server-sent event parsing for run monitoring.
 *
 * The service emits `data: {json}\n\n` frames: one `step` event per loop
 * iteration followed by a single `finished` event.
 */

export interface StepEvent {
  event: "step";
  step: number;
  stage: string;
  next_api: string;
  pose: { position: number[]; quaternion: number[] };
  [key: string]: unknown;
}

export interface FinishedEvent {
  event: "finished";
  termination: string;
  steps: number;
  [key: string]: unknown;
}

export type RunEvent = StepEvent | FinishedEvent;

/**
 * Incremental SSE decoder. Feed it raw text chunks in any split; it
 * yields complete events as they become available.
 */
export class SseParser {
  private buffer = "";

  push(chunk: string): RunEvent[] {
    this.buffer += chunk;
    const events: RunEvent[] = [];
    let idx: number;
    while ((idx = this.buffer.indexOf("\n\n")) >= 0) {
      const frame = this.buffer.slice(0, idx);
      this.buffer = this.buffer.slice(idx + 2);
      const data = frame
        .split("\n")
        .filter((l) => l.startsWith("data: "))
        .map((l) => l.slice("data: ".length))
        .join("\n");
      if (data) events.push(JSON.parse(data) as RunEvent);
    }
    return events;
  }
}

/** Summary of a monitored run, updated as events arrive. */
export interface RunSummary {
  /** Distinct stage labels in first-seen order. */
  stages: string[];
  steps: number;
  termination: string | null;
}

export class RunMonitor {
  readonly summary: RunSummary = { stages: [], steps: 0, termination: null };
  private parser = new SseParser();

  constructor(private onEvent?: (e: RunEvent) => void) {}

  push(chunk: string): void {
    for (const event of this.parser.push(chunk)) {
      if (event.event === "step") {
        this.summary.steps += 1;
        const stage = (event as StepEvent).stage;
        const seen = this.summary.stages;
        if (seen.length === 0 || seen[seen.length - 1] !== stage) {
          seen.push(stage);
        }
      } else if (event.event === "finished") {
        this.summary.termination = (event as FinishedEvent).termination;
      }
      this.onEvent?.(event);
    }
  }

  get finished(): boolean {
    return this.summary.termination !== null;
  }
}

/** Parse a complete SSE document (e.g. a saved capture) in one call. */
export function parseSseDocument(text: string): RunEvent[] {
  const parser = new SseParser();
  const events = parser.push(text.endsWith("\n\n") ? text : text + "\n\n");
  return events;
}
