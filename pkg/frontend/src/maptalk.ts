import { DrawCmd, escapeHtml } from "./draw.js";
import type { HumanView, SessionEvent } from "./types.js";
import type { TraceSummary } from "./schema.js";

export const CELL = 40;

/** Group the server-provided vocabulary into palette sections. The token
 * list itself is never hardcoded; only the grouping heuristic lives here. */
export function groupPalette(vocab: string[]): Record<string, string[]> {
  const groups: Record<string, string[]> = {
    directions: [], counts: [], landmarks: [], macros: [],
  };
  for (const tok of vocab) {
    if (["N", "E", "S", "W"].includes(tok)) groups.directions.push(tok);
    else if (/^\d+$/.test(tok)) groups.counts.push(tok);
    else if (tok.includes("-") || tok.length > 2) groups.macros.push(tok);
    else groups.landmarks.push(tok);
  }
  return groups;
}

export function renderPalette(vocab: string[], selected: string[],
                              maxTokens: number): string {
  const groups = groupPalette(vocab);
  const sections = Object.entries(groups)
    .filter(([, toks]) => toks.length > 0)
    .map(([name, toks]) => {
      const buttons = toks.map((t) => {
        const on = selected.includes(t) ? " selected" : "";
        return `<button class="token${on}" data-token="${escapeHtml(t)}">` +
          `${escapeHtml(t)}</button>`;
      }).join("");
      return `<div class="palette-group"><span class="group-name">` +
        `${name}</span>${buttons}</div>`;
    }).join("");
  const composed = selected.map(escapeHtml).join(" ") || "&nbsp;";
  return `<div class="palette">${sections}` +
    `<div class="composed">message: <b>${composed}</b> ` +
    `(max ${maxTokens} tokens)</div>` +
    `<button id="send" ${selected.length === 0 ? "disabled" : ""}>send` +
    `</button> <button id="clear">clear</button></div>`;
}

/** Full-map view: obstacles, goal, AI pose as a heading triangle. */
export function gridDrawCommands(view: HumanView,
                                 cell = CELL): DrawCmd[] {
  const cmds: DrawCmd[] = [];
  const rows = view.grid.length;
  const cols = view.grid[0]?.length ?? 0;
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      cmds.push({
        op: "rect", x: c * cell, y: r * cell, w: cell - 1, h: cell - 1,
        fill: view.grid[r][c] ? "#444" : "#f4f1ea",
      });
    }
  }
  const [gr, gc] = view.goal;
  cmds.push({
    op: "rect", x: gc * cell + 4, y: gr * cell + 4,
    w: cell - 9, h: cell - 9, fill: "#2d8a3e",
  });
  const [pr, pc] = view.pose;
  const cx = pc * cell + cell / 2;
  const cy = pr * cell + cell / 2;
  const s = cell * 0.32;
  const tips: Record<string, [number, number][]> = {
    N: [[cx, cy - s], [cx - s, cy + s], [cx + s, cy + s]],
    S: [[cx, cy + s], [cx - s, cy - s], [cx + s, cy - s]],
    E: [[cx + s, cy], [cx - s, cy - s], [cx - s, cy + s]],
    W: [[cx - s, cy], [cx + s, cy - s], [cx + s, cy + s]],
  };
  cmds.push({ op: "poly", points: tips[view.heading] ?? tips.N,
              fill: "#1f5fbf" });
  return cmds;
}

export function renderStatus(view: HumanView): string {
  const banner = view.intervention
    ? `<div class="banner">instructor: ${escapeHtml(view.intervention)}</div>`
    : "";
  const aiMsg = view.last_ai_msg.map(escapeHtml).join(" ") || "—";
  return `${banner}<div class="status">` +
    `step <b>${view.step}</b> · heading <b>${escapeHtml(view.heading)}</b>` +
    ` · total reward <b>${view.total_reward.toFixed(2)}</b>` +
    ` · AI says <b>${aiMsg}</b></div>`;
}

export function renderFeed(events: SessionEvent[]): string {
  const items = events.map((ev) => {
    let body: string;
    switch (ev.kind) {
      case "ai_message":
        body = `AI → ${(ev.tokens as string[]).join(" ") || "(silent)"}`;
        break;
      case "intervention":
        body = `instructor: ${ev.payload}`;
        break;
      case "action":
        body = `action ${ev.action}`;
        break;
      case "reward":
        body = `reward ${(ev.reward as number).toFixed(2)} ` +
          `(total ${(ev.total as number).toFixed(2)})`;
        break;
      case "done":
        body = `episode done: ${ev.reason} after ${ev.steps} steps`;
        break;
      default:
        body = ev.kind;
    }
    return `<li class="ev-${escapeHtml(ev.kind)}" data-seq="${ev.seq}">` +
      `${escapeHtml(body)}</li>`;
  }).join("");
  return `<ul class="feed">${items}</ul>`;
}

/** End-of-episode card; every number comes from the server trace. */
export function renderSummaryCard(view: HumanView,
                                  summary: TraceSummary): string {
  const outcome = summary.reachedGoal ? "goal reached" : "timed out";
  return `<div class="summary-card"><h3>episode finished — ${outcome}</h3>` +
    `<p>return <b>${summary.totalReward.toFixed(2)}</b> · ` +
    `steps <b>${summary.steps}</b> · ` +
    `tokens <b>${summary.tokens}</b> · ` +
    `collisions <b>${summary.collisions}</b></p>` +
    `<p>server total ${view.total_reward.toFixed(2)}</p></div>`;
}
