import { describe, expect, it } from "vitest";

import {
  basRadarCommands, fmtCell, heatColor, normalizeColumns, renderAblationHeatmap,
  renderAggregate, renderComparison, renderEmptyState, renderRunList,
  renderSeedTable,
} from "../src/dashboard.js";
import type { RunReport } from "../src/types.js";

const REPORT: RunReport = {
  name: "main-abc123",
  config: {},
  per_seed: [
    { seed: 13, sr: 0.79, avg_steps: 21.5, bas: 0.6125, mp: 0.71,
      bs: 0.52, rc: 0.8, ss: 0.55, ce: null, kl_a: 1e-5 },
    { seed: 42, sr: 0.83, avg_steps: 19.25, bas: 0.58, mp: 0.69,
      bs: 0.5, rc: 0.77, ss: 0.5, ce: 0.93, kl_a: 0.052 },
  ],
  aggregate: {
    sr: { mean: 0.81, sd: 0.028284271247461905 },
    bas: { mean: 0.59625, sd: 0.02298097038856279 },
    mp: { mean: 0.7, sd: 0.01414213562373095 },
    bs: { mean: 0.51, sd: 0.01414213562373095 },
    rc: { mean: 0.785, sd: 0.021213203435596423 },
    ss: { mean: 0.525, sd: 0.03535533905932738 },
  },
};

/** Pull every table cell's text out of rendered HTML. */
function cells(html: string): string[] {
  return [...html.matchAll(/<td[^>]*>([^<]*)<\/td>/g)].map((m) => m[1]);
}

describe("dashboard fidelity", () => {
  it("renders every per-seed number exactly as served (zero tolerance)", () => {
    const html = renderSeedTable(REPORT);
    for (const row of REPORT.per_seed) {
      for (const [col, v] of Object.entries(row)) {
        const m = html.match(new RegExp(
          `data-col="${col}">([^<]*)</td>`, "g"));
        expect(m).not.toBeNull();
        if (v === null) {
          expect(cells(html)).toContain("");
        } else {
          // the rendered text must parse back to the identical float64
          const rendered = cells(html).find((c) => Number(c) === v);
          expect(rendered, `${col}=${v}`).toBeDefined();
        }
      }
    }
    // no number appears that the payload did not contain
    const served = new Set(REPORT.per_seed.flatMap((r) =>
      Object.values(r).filter((v): v is number => v !== null)
        .map((v) => String(v))));
    for (const c of cells(html)) {
      if (c !== "") expect(served.has(c), c).toBe(true);
    }
  });

  it("renders aggregate means and sds verbatim", () => {
    const html = renderAggregate(REPORT);
    for (const [k, v] of Object.entries(REPORT.aggregate)) {
      expect(html).toContain(`data-col="${k}-mean">${String(v.mean)}</td>`);
      expect(html).toContain(`data-col="${k}-sd">${String(v.sd)}</td>`);
    }
  });

  it("comparison shows only server values, no derived stats", () => {
    const other: RunReport = {
      ...REPORT, name: "baseline-def456",
      aggregate: { sr: { mean: 0.68, sd: 0.03 },
                   bas: { mean: 0.41, sd: 0.02 } },
    };
    const html = renderComparison(REPORT, other);
    expect(html).toContain("0.81");
    expect(html).toContain("0.68");
    // metrics missing on either side are dropped, not invented
    expect(html).not.toContain("<td>mp</td>");
  });

  it("fmtCell never reformats numbers", () => {
    expect(fmtCell(0.1)).toBe("0.1");
    expect(fmtCell(1e-7)).toBe("1e-7");
    expect(fmtCell(null)).toBe("");
    expect(fmtCell(21)).toBe("21");
  });

  it("empty runs directory gets an explicit empty state", () => {
    expect(renderRunList([])).toBe(renderEmptyState());
    expect(renderRunList([])).toContain("no completed runs");
    expect(renderRunList(["a", "b"])).toContain("#dashboard/a");
  });
});

describe("BAS radar", () => {
  it("scales each axis by the aggregate mean in [0, 1]", () => {
    const cmds = basRadarCommands(REPORT, 240);
    const poly = cmds.find((c) => c.op === "poly");
    expect(poly).toBeDefined();
    if (poly?.op === "poly") {
      expect(poly.points).toHaveLength(5);
      for (const [x, y] of poly.points) {
        expect(Math.hypot(x - 120, y - 120)).toBeLessThanOrEqual(96 + 1e-9);
      }
    }
    const labels = cmds.filter((c) => c.op === "text")
      .map((c) => (c.op === "text" ? c.text : ""));
    expect(labels).toEqual(["mp", "bs", "rc", "ss", "ce"]);
  });
});

describe("ablation heatmap", () => {
  const rows = [
    { Variant: "default", SR: 0.8, "delta_SR [%]": 0.0 },
    { Variant: "no_ib", SR: 0.72, "delta_SR [%]": -10.0 },
    { Variant: "tau_half", SR: 0.76, "delta_SR [%]": -5.0 },
  ];
  const cols = ["Variant", "SR", "delta_SR [%]"];

  it("normalizes colors per metric column, values stay verbatim", () => {
    const ranges = normalizeColumns(rows, ["SR", "delta_SR [%]"]);
    expect(ranges.get("SR")).toEqual([0.72, 0.8]);
    expect(ranges.get("delta_SR [%]")).toEqual([-10.0, 0.0]);
    const html = renderAblationHeatmap(rows, cols);
    expect(html).toContain(">0.8<");
    expect(html).toContain(">-10<");
    // extreme cells of one column get the ramp endpoints
    expect(html).toContain(heatColor(0.8, 0.72, 0.8));
    expect(html).toContain(heatColor(0.72, 0.72, 0.8));
    expect(heatColor(0.8, 0.72, 0.8))
      .not.toEqual(heatColor(0.72, 0.72, 0.8));
  });

  it("degenerate column gets a neutral midpoint color", () => {
    expect(heatColor(1.0, 1.0, 1.0)).toEqual(heatColor(0.5, 0.5, 0.5));
  });
});
