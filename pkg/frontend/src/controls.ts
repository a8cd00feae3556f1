// Sliders and key bindings that edit the command draft. Widgets are clamped
// to the command ranges, so an out-of-range draft is impossible to produce.
//
// Keys: ArrowUp/Down = forward velocity, ArrowLeft/Right = base height,
// '[' / ']' = torso pitch, 'm' toggles the arm-tracking mode, space pauses.

import { CommandFields, RANGES, commandMessage } from "./protocol.js";
import { ViewState } from "./state.js";
import { TeleopClient } from "./net.js";

const KEY_STEPS = {
  v_x: 0.1,
  h_base: 0.02,
  torso_pitch: 0.05,
};

export class Controls {
  private view: ViewState;
  private client: TeleopClient;
  private sliders = new Map<string, HTMLInputElement>();

  constructor(view: ViewState, client: TeleopClient, root: Document) {
    this.view = view;
    this.client = client;
    for (const id of ["v_x", "h_base", "torso_pitch", "q_arm0", "q_arm1"]) {
      const el = root.getElementById(`slider-${id}`) as HTMLInputElement | null;
      if (el) this.sliders.set(id, el);
    }
    this.bindSliders(root);
    root.addEventListener("keydown", (ev) => this.onKey(ev as KeyboardEvent));
  }

  private bindSliders(root: Document): void {
    const bind = (id: string, apply: (v: number) => Partial<CommandFields>) => {
      const el = this.sliders.get(id);
      if (!el) return;
      el.addEventListener("input", () => {
        this.update(apply(parseFloat(el.value)));
      });
    };
    bind("v_x", (v) => ({ v_x: v }));
    bind("h_base", (v) => ({ h_base: v }));
    bind("torso_pitch", (v) => ({ torso_pitch: v }));
    bind("q_arm0", (v) => ({ q_arm: [v, this.view.draft.q_arm[1]] }));
    bind("q_arm1", (v) => ({ q_arm: [this.view.draft.q_arm[0], v] }));
    const mode = root.getElementById("mode-toggle") as HTMLInputElement | null;
    mode?.addEventListener("change", () => {
      this.update({ mode: mode.checked ? 1 : 0 });
      root.getElementById("arm-controls")?.classList.toggle(
        "hidden", !mode.checked);
    });
  }

  onKey(ev: KeyboardEvent): void {
    const d = this.view.draft;
    switch (ev.key) {
      case "ArrowUp":
        this.update({ v_x: d.v_x + KEY_STEPS.v_x });
        break;
      case "ArrowDown":
        this.update({ v_x: d.v_x - KEY_STEPS.v_x });
        break;
      case "ArrowLeft":
        this.update({ h_base: d.h_base - KEY_STEPS.h_base });
        break;
      case "ArrowRight":
        this.update({ h_base: d.h_base + KEY_STEPS.h_base });
        break;
      case "[":
        this.update({ torso_pitch: d.torso_pitch - KEY_STEPS.torso_pitch });
        break;
      case "]":
        this.update({ torso_pitch: d.torso_pitch + KEY_STEPS.torso_pitch });
        break;
      case "m":
        this.update({ mode: d.mode ? 0 : 1 });
        break;
      case " ":
        this.client.send(JSON.stringify({ type: "pause" }));
        ev.preventDefault();
        return;
      case "0":
        this.update({ v_x: 0 });
        break;
      default:
        return;
    }
    ev.preventDefault();
  }

  update(partial: Partial<CommandFields>): void {
    this.view.setDraft(partial);
    this.client.send(commandMessage(this.view.draft));
    this.refreshWidgets();
  }

  refreshWidgets(): void {
    const d = this.view.draft;
    const set = (id: string, v: number) => {
      const el = this.sliders.get(id);
      if (el) el.value = String(v);
    };
    set("v_x", d.v_x);
    set("h_base", d.h_base);
    set("torso_pitch", d.torso_pitch);
    set("q_arm0", d.q_arm[0]);
    set("q_arm1", d.q_arm[1]);
  }
}

export function sliderRanges(): Record<string, readonly [number, number]> {
  return {
    v_x: RANGES.v_x,
    h_base: RANGES.h_base,
    torso_pitch: RANGES.torso_pitch,
    q_arm0: RANGES.q_arm,
    q_arm1: RANGES.q_arm,
  };
}
