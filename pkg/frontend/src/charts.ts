// Minimal canvas chart painters: rolling error lines with fixed axes and a
// stacked gate-probability bar.

import { RingBuffer, CHART_WINDOW_S } from "./state.js";

const SERIES_COLORS: Record<string, string> = {
  v: "#d62828",
  h: "#2a6f97",
  pitch: "#f77f00",
  arm: "#9d4edd",
  stumble: "#555555",
};

const AXIS_MAX: Record<string, number> = {
  v: 0.8,
  h: 0.25,
  pitch: 0.8,
  arm: 1.0,
  stumble: 0.5,
};

export function drawErrorChart(
  canvas: HTMLCanvasElement,
  series: Record<string, RingBuffer>,
  now: number,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const w = canvas.width;
  const h = canvas.height;
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#dddddd";
  ctx.strokeRect(0.5, 0.5, w - 1, h - 1);
  const t0 = now - CHART_WINDOW_S;
  for (const [name, buf] of Object.entries(series)) {
    const pts = buf.samples().filter((s) => s.t >= t0);
    if (pts.length < 2) continue;
    const max = AXIS_MAX[name] ?? 1.0;
    ctx.strokeStyle = SERIES_COLORS[name] ?? "#000";
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    pts.forEach((s, i) => {
      const x = ((s.t - t0) / CHART_WINDOW_S) * w;
      const y = h - Math.min(s.v / max, 1) * (h - 4) - 2;
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
  }
}

export function drawGateBar(canvas: HTMLCanvasElement, probs: number[]): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const w = canvas.width;
  const h = canvas.height;
  ctx.clearRect(0, 0, w, h);
  const palette = ["#2a6f97", "#d62828", "#2d936c", "#f77f00", "#9d4edd"];
  let x = 0;
  probs.forEach((p, i) => {
    const width = p * w;
    ctx.fillStyle = palette[i % palette.length];
    ctx.fillRect(x, 0, width, h);
    if (width > 24) {
      ctx.fillStyle = "#ffffff";
      ctx.font = "11px sans-serif";
      ctx.fillText(`E${i + 1} ${(p * 100).toFixed(0)}%`, x + 4, h / 2 + 4);
    }
    x += width;
  });
  ctx.strokeStyle = "#dddddd";
  ctx.strokeRect(0.5, 0.5, w - 1, h - 1);
}

export function drawGateHistory(
  canvas: HTMLCanvasElement,
  gates: RingBuffer[],
  now: number,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const w = canvas.width;
  const h = canvas.height;
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#dddddd";
  ctx.strokeRect(0.5, 0.5, w - 1, h - 1);
  const palette = ["#2a6f97", "#d62828", "#2d936c", "#f77f00", "#9d4edd"];
  const t0 = now - CHART_WINDOW_S;
  gates.forEach((buf, i) => {
    const pts = buf.samples().filter((s) => s.t >= t0);
    if (pts.length < 2) return;
    ctx.strokeStyle = palette[i % palette.length];
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    pts.forEach((s, j) => {
      const x = ((s.t - t0) / CHART_WINDOW_S) * w;
      const y = h - s.v * (h - 4) - 2;
      if (j === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
  });
}
