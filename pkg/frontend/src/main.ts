// Console entry point: connect to the teleop daemon (?server=ws://...) and
// run the render loop. Network messages buffer between animation frames.

import { TeleopClient } from "./net.js";
import { ViewState } from "./state.js";
import { SceneRenderer } from "./render.js";
import { drawErrorChart, drawGateBar, drawGateHistory } from "./charts.js";
import { Controls } from "./controls.js";

function serverUrl(): string {
  const param = new URLSearchParams(window.location.search).get("server");
  return param ?? "ws://127.0.0.1:8765";
}

function main(): void {
  const view = new ViewState();
  const client = new TeleopClient(serverUrl());
  const scene = new SceneRenderer(
    document.getElementById("scene") as HTMLCanvasElement,
  );
  const errorCanvas = document.getElementById("chart-errors") as HTMLCanvasElement;
  const gateBarCanvas = document.getElementById("gate-bar") as HTMLCanvasElement;
  const gateHistCanvas = document.getElementById("chart-gates") as HTMLCanvasElement;
  const banner = document.getElementById("banner") as HTMLDivElement;
  const readout = document.getElementById("readout") as HTMLDivElement;
  new Controls(view, client, document);

  client.onStatus = (status) => {
    view.status = status;
    banner.textContent =
      status === "open"
        ? `connected to ${client.url} (${view.role})`
        : status === "connecting"
          ? `connecting to ${client.url}...`
          : `disconnected; retrying in ${(client.backoffMs() / 1000).toFixed(1)} s`;
    banner.className = `banner ${status}`;
  };
  client.connect();

  document.getElementById("reset-btn")?.addEventListener("click", () => {
    client.send(JSON.stringify({ type: "reset" }));
  });

  function frame(): void {
    for (const msg of client.drain()) {
      if (msg.type === "state") {
        view.ingest(msg);
      } else if (msg.type === "error") {
        view.lastError = msg.reason;
        if (msg.reason === "observer") {
          view.role = "observer";
          document.body.classList.add("observer");
          banner.textContent = `connected to ${client.url} (observer: ` +
            "another client holds command authority)";
        }
      }
    }
    const st = view.latest;
    if (st) {
      scene.draw(st, view.stumbleFlash > 0);
      drawErrorChart(errorCanvas, view.errors, st.t);
      drawGateBar(gateBarCanvas, st.gate_probs);
      drawGateHistory(gateHistCanvas, view.gates, st.t);
      const e = st.E_running;
      const cmd = st.command;
      const achievedH = st.scan[5] ?? 0;
      readout.innerHTML =
        `t=${st.t.toFixed(1)}s | ` +
        `v cmd ${cmd.v_x.toFixed(2)} | ` +
        `h cmd ${cmd.h_base.toFixed(2)} / got ${achievedH.toFixed(2)} | ` +
        `pitch cmd ${cmd.torso_pitch.toFixed(2)} | mode ${cmd.mode} | ` +
        `E_v ${e.v.toFixed(3)} E_h ${e.h.toFixed(3)} ` +
        `E_pitch ${e.pitch.toFixed(3)} E_arm ${e.arm.toFixed(3)} ` +
        `E_stumble ${e.stumble.toFixed(3)}`;
    }
    requestAnimationFrame(frame);
  }
  requestAnimationFrame(frame);
}

main();
