/**
 * Probe pose math mirroring the service's conventions.
 *
 * A pose is a position in millimeters plus a right-handed orthonormal
 * orientation matrix whose columns are u (image lateral), v (image depth)
 * and w (advance direction). Motion deltas are expressed in the probe
 * frame, matching the backend: position' = position + R * t and
 * R' = R * dR.
 */

export type Vec3 = [number, number, number];

/** Row-major 3x3 matrix. */
export type Mat3 = [number, number, number,
                    number, number, number,
                    number, number, number];

export interface Pose {
  position: Vec3;
  orientation: Mat3;
}

export const IDENTITY: Mat3 = [1, 0, 0, 0, 1, 0, 0, 0, 1];

export function matMul(a: Mat3, b: Mat3): Mat3 {
  const out = new Array(9).fill(0) as Mat3;
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      let s = 0;
      for (let k = 0; k < 3; k++) s += a[3 * i + k] * b[3 * k + j];
      out[3 * i + j] = s;
    }
  }
  return out;
}

export function matVec(m: Mat3, v: Vec3): Vec3 {
  return [
    m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
    m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
    m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
  ];
}

/** Rotation about a probe-frame axis by an angle in degrees. */
export function axisAngleMatrix(axis: Vec3, degrees: number): Mat3 {
  const n = Math.hypot(axis[0], axis[1], axis[2]);
  if (n === 0) throw new Error("rotation axis must be non-zero");
  const [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
  const t = (degrees * Math.PI) / 180;
  const c = Math.cos(t);
  const s = Math.sin(t);
  const C = 1 - c;
  return [
    c + x * x * C, x * y * C - z * s, x * z * C + y * s,
    y * x * C + z * s, c + y * y * C, y * z * C - x * s,
    z * x * C - y * s, z * y * C + x * s, c + z * z * C,
  ];
}

/** Apply a probe-frame translation and rotation, like the backend does. */
export function transformPose(pose: Pose, translation: Vec3,
                              rotation: Mat3 = IDENTITY): Pose {
  const dp = matVec(pose.orientation, translation);
  return {
    position: [pose.position[0] + dp[0],
               pose.position[1] + dp[1],
               pose.position[2] + dp[2]],
    orientation: matMul(pose.orientation, rotation),
  };
}

/** Rotation matrix -> axis-angle vector (radians * unit axis). */
export function matrixToRotvec(m: Mat3): Vec3 {
  const trace = m[0] + m[4] + m[8];
  const cosT = Math.min(1, Math.max(-1, (trace - 1) / 2));
  const theta = Math.acos(cosT);
  if (theta < 1e-12) return [0, 0, 0];
  if (Math.PI - theta < 1e-6) {
    // near 180 degrees: extract the axis from the symmetric part
    const xx = Math.sqrt(Math.max(0, (m[0] + 1) / 2));
    const yy = Math.sqrt(Math.max(0, (m[4] + 1) / 2));
    const zz = Math.sqrt(Math.max(0, (m[8] + 1) / 2));
    let axis: Vec3 = [xx, yy, zz];
    if (m[1] + m[3] < 0) axis[1] = -axis[1];
    if (m[2] + m[6] < 0) axis[2] = -axis[2];
    return [axis[0] * theta, axis[1] * theta, axis[2] * theta];
  }
  const k = theta / (2 * Math.sin(theta));
  return [(m[7] - m[5]) * k, (m[2] - m[6]) * k, (m[3] - m[1]) * k];
}

export function rotvecToMatrix(r: Vec3): Mat3 {
  const theta = Math.hypot(r[0], r[1], r[2]);
  if (theta < 1e-12) return [...IDENTITY] as Mat3;
  return axisAngleMatrix(r, (theta * 180) / Math.PI);
}

/** Rotation matrix -> quaternion [x, y, z, w], for JSON pose bodies. */
export function matrixToQuaternion(m: Mat3): [number, number, number, number] {
  const trace = m[0] + m[4] + m[8];
  let x: number, y: number, z: number, w: number;
  if (trace > 0) {
    const s = Math.sqrt(trace + 1) * 2;
    w = s / 4;
    x = (m[7] - m[5]) / s;
    y = (m[2] - m[6]) / s;
    z = (m[3] - m[1]) / s;
  } else if (m[0] > m[4] && m[0] > m[8]) {
    const s = Math.sqrt(1 + m[0] - m[4] - m[8]) * 2;
    x = s / 4;
    y = (m[1] + m[3]) / s;
    z = (m[2] + m[6]) / s;
    w = (m[7] - m[5]) / s;
  } else if (m[4] > m[8]) {
    const s = Math.sqrt(1 + m[4] - m[0] - m[8]) * 2;
    x = (m[1] + m[3]) / s;
    y = s / 4;
    z = (m[5] + m[7]) / s;
    w = (m[2] - m[6]) / s;
  } else {
    const s = Math.sqrt(1 + m[8] - m[0] - m[4]) * 2;
    x = (m[2] + m[6]) / s;
    y = (m[5] + m[7]) / s;
    z = s / 4;
    w = (m[3] - m[1]) / s;
  }
  return [x, y, z, w];
}

export function quaternionToMatrix(q: [number, number, number, number]): Mat3 {
  const n = Math.hypot(q[0], q[1], q[2], q[3]);
  const [x, y, z, w] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
  return [
    1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
    2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
    2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
  ];
}

/** URL query encoding: 9 floats (position, rotvec, reserved zeros). */
export function poseToParam(pose: Pose): string {
  const r = matrixToRotvec(pose.orientation);
  const vals = [...pose.position, ...r, 0, 0, 0];
  return vals.map((v) => Number(v.toPrecision(9)).toString()).join(",");
}

/** JSON body encoding, as POST /runs start_pose expects. */
export function poseToWire(pose: Pose): object {
  return {
    position: [...pose.position],
    quaternion: matrixToQuaternion(pose.orientation),
  };
}

export function poseFromWire(wire: {
  position: number[];
  quaternion: number[];
}): Pose {
  return {
    position: [wire.position[0], wire.position[1], wire.position[2]],
    orientation: quaternionToMatrix(
      wire.quaternion as [number, number, number, number]),
  };
}
