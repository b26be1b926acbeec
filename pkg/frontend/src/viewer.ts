/**
 * Interactive probe steering state.
 *
 * The viewer keeps the current probe pose and maps keyboard input to
 * probe-frame motions: arrow keys translate along the advance (w) and
 * lateral (u) axes, holding a modifier switches to fine 0.1 mm steps,
 * and "r" rotates 5 degrees about the image depth (v) axis.
 */

import {
  IDENTITY,
  Mat3,
  Pose,
  Vec3,
  axisAngleMatrix,
  transformPose,
} from "./pose.js";

export interface SteerAction {
  /** Probe-frame translation in millimeters. */
  translation: Vec3;
  /** Probe-frame rotation applied after the translation. */
  rotation: Mat3;
  label: string;
}

const COARSE_MM = 1.0;
const FINE_MM = 0.1;
const ROTATE_DEG = 5.0;

/** Map a keyboard event to a steering action, or null if unbound. */
export function keyToAction(
  key: string,
  fine: boolean = false,
): SteerAction | null {
  const step = fine ? FINE_MM : COARSE_MM;
  switch (key) {
    case "ArrowUp":
      return { translation: [0, 0, step], rotation: IDENTITY, label: "advance" };
    case "ArrowDown":
      return { translation: [0, 0, -step], rotation: IDENTITY, label: "retreat" };
    case "ArrowRight":
      return { translation: [step, 0, 0], rotation: IDENTITY, label: "lateral+" };
    case "ArrowLeft":
      return { translation: [-step, 0, 0], rotation: IDENTITY, label: "lateral-" };
    case "r":
    case "R":
      return {
        translation: [0, 0, 0],
        rotation: axisAngleMatrix([0, 1, 0], ROTATE_DEG),
        label: "rotate",
      };
    default:
      return null;
  }
}

export class ViewerState {
  pose: Pose;
  readonly history: string[] = [];

  constructor(initial: Pose) {
    this.pose = {
      position: [...initial.position],
      orientation: [...initial.orientation] as Mat3,
    };
  }

  apply(action: SteerAction): void {
    this.pose = transformPose(this.pose, action.translation, action.rotation);
    this.history.push(action.label);
  }

  /** Handle one key press; returns true if it changed the pose. */
  handleKey(key: string, fine: boolean = false): boolean {
    const action = keyToAction(key, fine);
    if (!action) return false;
    this.apply(action);
    return true;
  }
}
