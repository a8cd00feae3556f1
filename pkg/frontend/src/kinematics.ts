// Forward kinematics of the planar robot, mirroring the simulator's link
// constants. Joint order: [torso_pitch, L_hip, L_knee, R_hip, R_knee,
// shoulder, elbow]; every segment angle is measured clockwise from world +z.

export const LINKS = {
  pelvis: 0.2,
  thigh: 0.3,
  shank: 0.3,
  torso: 0.4,
  upperArm: 0.2,
  forearm: 0.2,
};

export interface Point {
  x: number;
  z: number;
}

export interface Skeleton {
  base: Point;
  hip: Point;
  kneeL: Point;
  footL: Point;
  kneeR: Point;
  footR: Point;
  shoulder: Point;
  elbow: Point;
  hand: Point;
}

function dir(a: number): Point {
  return { x: Math.sin(a), z: Math.cos(a) };
}

function step(from: Point, angle: number, length: number): Point {
  const d = dir(angle);
  return { x: from.x + length * d.x, z: from.z + length * d.z };
}

export function forwardKinematics(
  base: { x: number; z: number; theta: number },
  q: number[],
): Skeleton {
  const origin = { x: base.x, z: base.z };
  const th = base.theta;
  const hip = step(origin, th, -LINKS.pelvis);
  const kneeL = step(hip, th - q[1], -LINKS.thigh);
  const footL = step(kneeL, th - q[1] + q[2], -LINKS.shank);
  const kneeR = step(hip, th - q[3], -LINKS.thigh);
  const footR = step(kneeR, th - q[3] + q[4], -LINKS.shank);
  const torsoAngle = th + q[0];
  const shoulder = step(origin, torsoAngle, LINKS.torso);
  const elbow = step(shoulder, torsoAngle - q[5], -LINKS.upperArm);
  const hand = step(elbow, torsoAngle - q[5] - q[6], -LINKS.forearm);
  return { base: origin, hip, kneeL, footL, kneeR, footR, shoulder, elbow, hand };
}

// World positions of the 11 scan samples: 0.1 m spacing centered on the base,
// each at terrain height = base_z - scan[i] (the scan stores base-relative
// clearance, clipped server-side to +-1 m).
export function scanPoints(
  base: { x: number; z: number },
  scan: number[],
): Point[] {
  return scan.map((v, i) => ({
    x: base.x + (i - 5) * 0.1,
    z: base.z - v,
  }));
}
