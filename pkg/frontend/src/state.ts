// View-side state: the latest server message, connection status, the command
// draft, and rolling chart buffers. The console never simulates anything.

import { CommandFields, StateMessage, clampCommand } from "./protocol.js";

export const CHART_WINDOW_S = 30;
export const BROADCAST_HZ = 20;
const CAPACITY = CHART_WINDOW_S * BROADCAST_HZ;

export class RingBuffer {
  private values: Float32Array;
  private times: Float32Array;
  private head = 0;
  private count = 0;

  constructor(capacity: number = CAPACITY) {
    this.values = new Float32Array(capacity);
    this.times = new Float32Array(capacity);
  }

  push(t: number, value: number): void {
    this.values[this.head] = value;
    this.times[this.head] = t;
    this.head = (this.head + 1) % this.values.length;
    this.count = Math.min(this.count + 1, this.values.length);
  }

  get length(): number {
    return this.count;
  }

  // oldest-first samples
  samples(): Array<{ t: number; v: number }> {
    const out: Array<{ t: number; v: number }> = [];
    const start = (this.head - this.count + this.values.length) % this.values.length;
    for (let i = 0; i < this.count; i++) {
      const j = (start + i) % this.values.length;
      out.push({ t: this.times[j], v: this.values[j] });
    }
    return out;
  }

  latest(): number | null {
    if (this.count === 0) return null;
    const j = (this.head - 1 + this.values.length) % this.values.length;
    return this.values[j];
  }
}

export type ConnectionStatus = "connecting" | "open" | "closed";

export class ViewState {
  latest: StateMessage | null = null;
  status: ConnectionStatus = "connecting";
  role: "authority" | "observer" = "authority";
  lastError = "";
  stumbleFlash = 0;
  draft: CommandFields = {
    v_x: 0,
    h_base: 0.76,
    torso_pitch: 0,
    q_arm: [0.3, 0.6],
    mode: 0,
  };
  errors = {
    v: new RingBuffer(),
    h: new RingBuffer(),
    pitch: new RingBuffer(),
    arm: new RingBuffer(),
    stumble: new RingBuffer(),
  };
  gates: RingBuffer[] = [];

  setDraft(partial: Partial<CommandFields>): void {
    this.draft = clampCommand({ ...this.draft, ...partial });
  }

  ingest(msg: StateMessage): void {
    this.latest = msg;
    const e = msg.E_running;
    this.errors.v.push(msg.t, e.v);
    this.errors.h.push(msg.t, e.h);
    this.errors.pitch.push(msg.t, e.pitch);
    this.errors.arm.push(msg.t, e.arm);
    this.errors.stumble.push(msg.t, e.stumble);
    while (this.gates.length < msg.gate_probs.length) {
      this.gates.push(new RingBuffer());
    }
    msg.gate_probs.forEach((g, i) => this.gates[i].push(msg.t, g));
    if ((msg.reward_terms["feet_stumble"] ?? 0) > 0) {
      this.stumbleFlash = 10; // frames
    } else if (this.stumbleFlash > 0) {
      this.stumbleFlash -= 1;
    }
  }
}
