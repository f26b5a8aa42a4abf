import { DrawCmd, escapeHtml } from "./draw.js";
import type { Region } from "./types.js";

export const CANVAS_SIZE = 480;

export interface ClickMark {
  x: number;
  y: number;
  score: number;
  insideSuggestion: boolean;
}

/** Latent coordinates live in [-1, 1]^2; map to canvas pixels. */
export function latentToCanvas(xy: [number, number],
                               size = CANVAS_SIZE): [number, number] {
  return [((xy[0] + 1) / 2) * size, ((1 - xy[1]) / 2) * size];
}

export function canvasToLatent(px: [number, number],
                               size = CANVAS_SIZE): [number, number] {
  return [(px[0] / size) * 2 - 1, 1 - (px[1] / size) * 2];
}

export function inBounds(xy: [number, number]): boolean {
  return Math.abs(xy[0]) <= 1 && Math.abs(xy[1]) <= 1;
}

export function insideSuggestion(xy: [number, number],
                                 regions: Region[]): boolean {
  return regions.some((r) =>
    Math.hypot(xy[0] - r.center[0], xy[1] - r.center[1]) <= r.radius);
}

/** Color ramp for click history: low scores cold, high scores warm. */
export function scoreColor(score: number): string {
  const t = Math.max(0, Math.min(1, score));
  const hue = 220 - 220 * t; // blue → red
  return `hsl(${Math.round(hue)}, 80%, 50%)`;
}

export function navDrawCommands(anchors: [number, number][],
                                suggestions: Region[],
                                clicks: ClickMark[],
                                size = CANVAS_SIZE): DrawCmd[] {
  const cmds: DrawCmd[] = [
    { op: "rect", x: 0, y: 0, w: size, h: size, fill: "#fbfaf7" },
  ];
  for (const a of anchors) {
    const [x, y] = latentToCanvas(a, size);
    cmds.push({ op: "circle", x, y, r: 2, fill: "#b8b2a7" });
  }
  for (const r of suggestions) {
    const [x, y] = latentToCanvas(r.center, size);
    cmds.push({
      op: "circle", x, y, r: (r.radius / 2) * size,
      stroke: "#7a5fbf", dash: [6, 4],
    });
  }
  for (const c of clicks) {
    const [x, y] = latentToCanvas([c.x, c.y], size);
    cmds.push({ op: "circle", x, y, r: 5, fill: scoreColor(c.score),
                stroke: c.insideSuggestion ? "#333" : undefined });
  }
  return cmds;
}

export function renderClickInfo(imagePng: string, score: number,
                                preference: number, clicksUsed: number,
                                budget: number): string {
  return `<div class="click-info">` +
    `<img alt="decoded sample" width="96" height="96" ` +
    `src="data:image/png;base64,${escapeHtml(imagePng)}"/>` +
    `<p>score <b>${score.toFixed(3)}</b> · ` +
    `preference <b>${preference.toFixed(3)}</b></p>` +
    `<p class="counter">interactions ${clicksUsed} / ${budget}</p>` +
    (clicksUsed >= budget
      ? `<p class="exhausted">budget exhausted — session complete</p>`
      : "") +
    `</div>`;
}

export function renderNavSummary(metrics: Record<string, number>): string {
  const rows = Object.entries(metrics).map(([k, v]) =>
    `<tr><td>${escapeHtml(k)}</td><td>${String(v)}</td></tr>`).join("");
  return `<div class="summary-card"><h3>session summary</h3>` +
    `<table>${rows}</table></div>`;
}
