import { DrawCmd, escapeHtml } from "./draw.js";
import type { RunReport } from "./types.js";

/** Numbers are rendered exactly as the service sent them — String() of the
 * parsed JSON value — so the dashboard never introduces rounding of its own.
 */
export function fmtCell(v: number | string | null | undefined): string {
  if (v === null || v === undefined) return "";
  return String(v);
}

export function renderEmptyState(): string {
  return `<div class="empty-state">no completed runs yet — start one with ` +
    `<code>bica train</code></div>`;
}

export function renderRunList(runs: string[]): string {
  if (runs.length === 0) return renderEmptyState();
  const items = runs.map((r) =>
    `<li><a href="#dashboard/${escapeHtml(r)}">${escapeHtml(r)}</a></li>`)
    .join("");
  return `<ul class="run-list">${items}</ul>`;
}

/** Per-seed metric table mirroring metrics.csv exactly. */
export function renderSeedTable(report: RunReport): string {
  if (report.per_seed.length === 0) return renderEmptyState();
  const cols = Object.keys(report.per_seed[0]);
  const head = cols.map((c) => `<th>${escapeHtml(c)}</th>`).join("");
  const body = report.per_seed.map((row) => {
    const cells = cols.map((c) =>
      `<td data-col="${escapeHtml(c)}">` +
      `${escapeHtml(fmtCell(row[c]))}</td>`).join("");
    return `<tr>${cells}</tr>`;
  }).join("");
  return `<table class="metrics"><thead><tr>${head}</tr></thead>` +
    `<tbody>${body}</tbody></table>`;
}

/** Aggregate (mean ± sd) table straight from the report payload. */
export function renderAggregate(report: RunReport): string {
  const rows = Object.entries(report.aggregate).map(([k, v]) =>
    `<tr><td>${escapeHtml(k)}</td>` +
    `<td data-col="${escapeHtml(k)}-mean">${fmtCell(v.mean)}</td>` +
    `<td data-col="${escapeHtml(k)}-sd">${fmtCell(v.sd)}</td></tr>`)
    .join("");
  return `<table class="metrics aggregate"><thead>` +
    `<tr><th>metric</th><th>mean</th><th>sd</th></tr></thead>` +
    `<tbody>${rows}</tbody></table>`;
}

/** Side-by-side comparison of two runs' aggregates. Only server values are
 * shown — no derived statistics are computed in the client. */
export function renderComparison(a: RunReport, b: RunReport): string {
  const keys = Object.keys(a.aggregate)
    .filter((k) => k in b.aggregate);
  const rows = keys.map((k) =>
    `<tr><td>${escapeHtml(k)}</td>` +
    `<td>${fmtCell(a.aggregate[k].mean)}</td>` +
    `<td>${fmtCell(b.aggregate[k].mean)}</td></tr>`).join("");
  return `<table class="metrics compare"><thead><tr>` +
    `<th>metric</th><th>${escapeHtml(a.name)}</th>` +
    `<th>${escapeHtml(b.name)}</th></tr></thead>` +
    `<tbody>${rows}</tbody></table>`;
}

export const BAS_COMPONENTS = ["mp", "bs", "rc", "ss", "ce"] as const;

/** Radar chart of the five BAS components from the aggregate means. */
export function basRadarCommands(report: RunReport, size = 240): DrawCmd[] {
  const cx = size / 2;
  const cy = size / 2;
  const rMax = size / 2 - 24;
  const cmds: DrawCmd[] = [];
  const n = BAS_COMPONENTS.length;
  const angle = (i: number) => -Math.PI / 2 + (2 * Math.PI * i) / n;
  for (const frac of [0.5, 1.0]) {
    for (let i = 0; i < n; i++) {
      const [x1, y1] = [cx + rMax * frac * Math.cos(angle(i)),
                        cy + rMax * frac * Math.sin(angle(i))];
      const [x2, y2] = [cx + rMax * frac * Math.cos(angle(i + 1)),
                        cy + rMax * frac * Math.sin(angle(i + 1))];
      cmds.push({ op: "line", x1, y1, x2, y2, stroke: "#ddd" });
    }
  }
  const points: [number, number][] = BAS_COMPONENTS.map((k, i) => {
    const v = report.aggregate[k]?.mean ?? 0;
    const r = rMax * Math.max(0, Math.min(1, v));
    return [cx + r * Math.cos(angle(i)), cy + r * Math.sin(angle(i))];
  });
  cmds.push({ op: "poly", points, fill: "rgba(31, 95, 191, 0.35)" });
  BAS_COMPONENTS.forEach((k, i) => {
    cmds.push({
      op: "text", x: cx + (rMax + 12) * Math.cos(angle(i)) - 8,
      y: cy + (rMax + 12) * Math.sin(angle(i)) + 4, text: k, fill: "#333",
    });
  });
  return cmds;
}

export interface AblationRow {
  [col: string]: number | string;
}

/** Per-metric-column min/max normalization used only for heatmap colors;
 * the displayed numbers stay exactly as served. */
export function normalizeColumns(rows: AblationRow[],
                                 cols: string[]): Map<string, [number, number]> {
  const ranges = new Map<string, [number, number]>();
  for (const c of cols) {
    const vals = rows.map((r) => r[c]).filter(
      (v): v is number => typeof v === "number" && isFinite(v));
    if (vals.length > 0) {
      ranges.set(c, [Math.min(...vals), Math.max(...vals)]);
    }
  }
  return ranges;
}

export function heatColor(v: number, lo: number, hi: number): string {
  const t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
  const light = 95 - 45 * t;
  return `hsl(210, 70%, ${light.toFixed(0)}%)`;
}

export function renderAblationHeatmap(rows: AblationRow[],
                                      cols: string[]): string {
  if (rows.length === 0) return renderEmptyState();
  const numeric = cols.filter((c) =>
    rows.some((r) => typeof r[c] === "number"));
  const ranges = normalizeColumns(rows, numeric);
  const head = cols.map((c) => `<th>${escapeHtml(c)}</th>`).join("");
  const body = rows.map((row) => {
    const cells = cols.map((c) => {
      const v = row[c];
      const range = typeof v === "number" ? ranges.get(c) : undefined;
      const style = range !== undefined && typeof v === "number"
        ? ` style="background:${heatColor(v, range[0], range[1])}"` : "";
      return `<td${style}>${escapeHtml(fmtCell(v))}</td>`;
    }).join("");
    return `<tr>${cells}</tr>`;
  }).join("");
  return `<table class="metrics heatmap"><thead><tr>${head}</tr></thead>` +
    `<tbody>${body}</tbody></table>`;
}
