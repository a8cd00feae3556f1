// Side-view scene painter: terrain polyline under the scan, robot linkage,
// scan dots, foot contact markers, and a stumble flash.

import { forwardKinematics, scanPoints, Point } from "./kinematics.js";
import { StateMessage } from "./protocol.js";

const VIEW_HALF_WIDTH_M = 1.6;

export class SceneRenderer {
  private ctx: CanvasRenderingContext2D;
  private canvas: HTMLCanvasElement;

  constructor(canvas: HTMLCanvasElement) {
    this.canvas = canvas;
    const ctx = canvas.getContext("2d");
    if (!ctx) throw new Error("2d canvas context unavailable");
    this.ctx = ctx;
  }

  draw(state: StateMessage, stumbleFlash: boolean): void {
    const { ctx, canvas } = this;
    const w = canvas.width;
    const h = canvas.height;
    ctx.clearRect(0, 0, w, h);

    const scale = w / (2 * VIEW_HALF_WIDTH_M);
    const cx = state.base.x;
    const toX = (x: number) => (x - cx) * scale + w / 2;
    const toY = (z: number) => h * 0.9 - z * scale;

    // terrain under the scan, extended flat to the view edges
    const pts = scanPoints(state.base, state.scan);
    ctx.strokeStyle = "#79553d";
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.moveTo(0, toY(pts[0].z));
    for (const p of pts) ctx.lineTo(toX(p.x), toY(p.z));
    ctx.lineTo(w, toY(pts[pts.length - 1].z));
    ctx.stroke();

    // scan samples as dots on the terrain
    ctx.fillStyle = "#d98e32";
    for (const p of pts) {
      ctx.beginPath();
      ctx.arc(toX(p.x), toY(p.z), 3, 0, 2 * Math.PI);
      ctx.fill();
    }

    // robot linkage
    const sk = forwardKinematics(state.base, state.q);
    const seg = (a: Point, b: Point, color: string, width = 4) => {
      ctx.strokeStyle = color;
      ctx.lineWidth = width;
      ctx.lineCap = "round";
      ctx.beginPath();
      ctx.moveTo(toX(a.x), toY(a.z));
      ctx.lineTo(toX(b.x), toY(b.z));
      ctx.stroke();
    };
    seg(sk.base, sk.hip, "#4a4a55", 6);
    seg(sk.base, sk.shoulder, "#33415c", 7);
    seg(sk.hip, sk.kneeL, "#2a6f97", 5);
    seg(sk.kneeL, sk.footL, "#2a6f97", 4);
    seg(sk.hip, sk.kneeR, "#61a5c2", 5);
    seg(sk.kneeR, sk.footR, "#61a5c2", 4);
    seg(sk.shoulder, sk.elbow, "#9d4edd", 4);
    seg(sk.elbow, sk.hand, "#9d4edd", 3);

    // foot contact markers
    const feet: Array<[Point, boolean]> = [
      [sk.footL, state.foot_contacts[0]],
      [sk.footR, state.foot_contacts[1]],
    ];
    for (const [p, contact] of feet) {
      ctx.fillStyle = contact ? "#2d936c" : "#bbbbbb";
      ctx.beginPath();
      ctx.arc(toX(p.x), toY(p.z), 5, 0, 2 * Math.PI);
      ctx.fill();
    }

    if (stumbleFlash) {
      ctx.fillStyle = "rgba(214, 40, 40, 0.25)";
      ctx.fillRect(0, 0, w, h);
    }

    // commanded height marker
    const cmdZ = pts[5].z + state.command.h_base;
    ctx.strokeStyle = "#2d936c";
    ctx.setLineDash([6, 4]);
    ctx.lineWidth = 1;
    ctx.beginPath();
    ctx.moveTo(0, toY(cmdZ));
    ctx.lineTo(w, toY(cmdZ));
    ctx.stroke();
    ctx.setLineDash([]);
  }
}
