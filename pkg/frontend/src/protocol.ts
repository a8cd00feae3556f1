// Wire protocol types and client-side clamping. Field names match the
// teleop daemon exactly; every displayed number originates from a state
// message.

export interface BasePose {
  x: number;
  z: number;
  theta: number;
}

export interface CommandFields {
  v_x: number;
  h_base: number;
  torso_pitch: number;
  q_arm: [number, number];
  mode: number;
}

export interface StateMessage {
  type: "state";
  t: number;
  base: BasePose;
  q: number[];
  command: CommandFields;
  scan: number[];
  foot_contacts: boolean[];
  reward_terms: Record<string, number>;
  E_running: { v: number; h: number; pitch: number; arm: number; stumble: number };
  gate_probs: number[];
}

export interface ErrorMessage {
  type: "error";
  reason: string;
}

export type ServerMessage = StateMessage | ErrorMessage;

// Command ranges enforced at the widget level; the server clamps again.
export const RANGES = {
  v_x: [-1.0, 1.0] as const,
  h_base: [0.3, 0.76] as const,
  torso_pitch: [-0.3, 1.5] as const,
  q_arm: [-2.0, 2.0] as const,
};

export function clamp(value: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, value));
}

export function clampCommand(draft: CommandFields): CommandFields {
  return {
    v_x: clamp(draft.v_x, ...RANGES.v_x),
    h_base: clamp(draft.h_base, ...RANGES.h_base),
    torso_pitch: clamp(draft.torso_pitch, ...RANGES.torso_pitch),
    q_arm: [
      clamp(draft.q_arm[0], ...RANGES.q_arm),
      clamp(draft.q_arm[1], ...RANGES.q_arm),
    ],
    mode: draft.mode ? 1 : 0,
  };
}

export function commandMessage(draft: CommandFields): string {
  const c = clampCommand(draft);
  return JSON.stringify({ type: "command", ...c });
}

export function parseServerMessage(raw: string): ServerMessage | null {
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof data !== "object" || data === null) return null;
  const msg = data as Record<string, unknown>;
  if (msg.type === "error" && typeof msg.reason === "string") {
    return { type: "error", reason: msg.reason };
  }
  if (msg.type !== "state") return null;
  const st = msg as unknown as StateMessage;
  if (
    typeof st.t !== "number" ||
    !st.base ||
    !Array.isArray(st.q) ||
    st.q.length !== 7 ||
    !Array.isArray(st.scan) ||
    st.scan.length !== 11 ||
    !Array.isArray(st.gate_probs)
  ) {
    return null;
  }
  if (!st.q.every(Number.isFinite) || !st.scan.every(Number.isFinite)) {
    return null;
  }
  return st;
}
