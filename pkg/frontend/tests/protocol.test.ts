import { describe, expect, it } from "vitest";

import {
  clampCommand,
  commandMessage,
  parseServerMessage,
  RANGES,
} from "../src/protocol.js";

describe("command clamping", () => {
  it("clamps every field to its range", () => {
    const out = clampCommand({
      v_x: 99,
      h_base: -1,
      torso_pitch: 42,
      q_arm: [-30, 30],
      mode: 2,
    });
    expect(out.v_x).toBe(RANGES.v_x[1]);
    expect(out.h_base).toBe(RANGES.h_base[0]);
    expect(out.torso_pitch).toBe(RANGES.torso_pitch[1]);
    expect(out.q_arm).toEqual([RANGES.q_arm[0], RANGES.q_arm[1]]);
    expect(out.mode).toBe(1);
  });

  it("passes in-range values through unchanged", () => {
    const draft = {
      v_x: 0.5,
      h_base: 0.6,
      torso_pitch: 0.1,
      q_arm: [0.3, 0.6] as [number, number],
      mode: 0,
    };
    expect(clampCommand(draft)).toEqual(draft);
  });

  it("serializes to the wire field names", () => {
    const msg = JSON.parse(
      commandMessage({
        v_x: 0.5,
        h_base: 0.6,
        torso_pitch: 0,
        q_arm: [0, 0],
        mode: 0,
      }),
    );
    expect(Object.keys(msg).sort()).toEqual(
      ["h_base", "mode", "q_arm", "torso_pitch", "type", "v_x"].sort(),
    );
    expect(msg.type).toBe("command");
  });
});

describe("server message parsing", () => {
  const state = {
    type: "state",
    t: 1.0,
    base: { x: 0, z: 0.76, theta: 0 },
    q: [0, 0.5, 0.6, 0.1, 0.6, 0.3, 0.6],
    command: { v_x: 0, h_base: 0.76, torso_pitch: 0, q_arm: [0.3, 0.6], mode: 0 },
    scan: Array(11).fill(0.76),
    foot_contacts: [true, true],
    reward_terms: {},
    E_running: { v: 0, h: 0, pitch: 0, arm: 0, stumble: 0 },
    gate_probs: [0.25, 0.25, 0.25, 0.25],
  };

  it("accepts a valid state message", () => {
    const parsed = parseServerMessage(JSON.stringify(state));
    expect(parsed?.type).toBe("state");
  });

  it("accepts error messages", () => {
    const parsed = parseServerMessage(
      JSON.stringify({ type: "error", reason: "observer" }),
    );
    expect(parsed).toEqual({ type: "error", reason: "observer" });
  });

  it("rejects malformed JSON and wrong shapes", () => {
    expect(parseServerMessage("{nope")).toBeNull();
    expect(parseServerMessage(JSON.stringify({ type: "state" }))).toBeNull();
    const shortScan = { ...state, scan: [1, 2, 3] };
    expect(parseServerMessage(JSON.stringify(shortScan))).toBeNull();
    const nanQ = { ...state, q: [null, 0, 0, 0, 0, 0, 0] };
    expect(parseServerMessage(JSON.stringify(nanQ))).toBeNull();
  });
});
