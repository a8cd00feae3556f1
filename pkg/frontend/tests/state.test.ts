import { describe, expect, it } from "vitest";
import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { dirname, join } from "node:path";

import { RingBuffer, ViewState, BROADCAST_HZ } from "../src/state.js";
import { StateMessage } from "../src/protocol.js";

const here = dirname(fileURLToPath(import.meta.url));
const fixture = JSON.parse(
  readFileSync(join(here, "..", "fixtures", "wire_fixture.json"), "utf-8"),
) as { frames: Array<{ message: StateMessage }> };

describe("ring buffer", () => {
  it("advances one sample per push and stays bounded", () => {
    const buf = new RingBuffer(5);
    for (let i = 0; i < 12; i++) buf.push(i, i * 10);
    expect(buf.length).toBe(5);
    const out = buf.samples();
    expect(out.map((s) => s.t)).toEqual([7, 8, 9, 10, 11]);
    expect(buf.latest()).toBe(110);
  });
});

describe("view state ingest", () => {
  it("advances chart buffers once per state message", () => {
    const view = new ViewState();
    for (const { message } of fixture.frames) view.ingest(message);
    expect(view.errors.v.length).toBe(fixture.frames.length);
    expect(view.gates.length).toBe(fixture.frames[0].message.gate_probs.length);
    expect(view.latest?.t).toBe(
      fixture.frames[fixture.frames.length - 1].message.t,
    );
  });

  it("clamps slider drafts", () => {
    const view = new ViewState();
    view.setDraft({ v_x: 50, q_arm: [-9, 9] });
    expect(view.draft.v_x).toBe(1);
    expect(view.draft.q_arm).toEqual([-2, 2]);
  });

  it("processes a full 20 Hz stream far faster than real time", () => {
    // the render path must keep up with the broadcast rate; ingesting the
    // whole recorded stream should take a tiny fraction of its duration
    const view = new ViewState();
    const start = performance.now();
    for (let rep = 0; rep < 20; rep++) {
      for (const { message } of fixture.frames) view.ingest(message);
    }
    const elapsedMs = performance.now() - start;
    const messages = 20 * fixture.frames.length;
    const budgetMs = (messages / BROADCAST_HZ) * 1000;
    expect(elapsedMs).toBeLessThan(budgetMs / 50);
  });
});
