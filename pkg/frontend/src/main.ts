import { ApiClient, ApiError, EventFeed } from "./api.js";
import { applyCommands } from "./draw.js";
import {
  CELL, gridDrawCommands, renderFeed, renderPalette, renderStatus,
  renderSummaryCard,
} from "./maptalk.js";
import {
  CANVAS_SIZE, ClickMark, canvasToLatent, inBounds, insideSuggestion,
  navDrawCommands, renderClickInfo, renderNavSummary,
} from "./navigator.js";
import {
  basRadarCommands, renderAggregate, renderRunList, renderSeedTable,
} from "./dashboard.js";
import { summarizeTrace, validateTrace } from "./schema.js";
import type { MapTalkSession, NavigatorSession, Region } from "./types.js";

const client = new ApiClient("");
const app = document.getElementById("app")!;

function el<T extends HTMLElement>(id: string): T {
  return document.getElementById(id) as T;
}

// -- MapTalk play view --------------------------------------------------------

async function mountMapTalk(): Promise<void> {
  const seed = Math.floor(Math.random() * 1e6);
  const session: MapTalkSession = await client.createMapTalk(seed);
  const feed = new EventFeed(client, session.session_id);
  let selected: string[] = [];
  let view = session.view;

  const rows = view.grid.length;
  const cols = view.grid[0].length;
  app.innerHTML = `
    <div class="maptalk">
      <div><canvas id="grid" width="${cols * CELL}"
                   height="${rows * CELL}"></canvas></div>
      <div class="side">
        <div id="status"></div>
        <div id="palette"></div>
        <div id="feed-box"><h3>session feed</h3><div id="feed"></div></div>
        <div id="summary"></div>
      </div>
    </div>`;
  const ctx = el<HTMLCanvasElement>("grid").getContext("2d")!;

  const redraw = async () => {
    applyCommands(ctx, gridDrawCommands(view));
    el("status").innerHTML = renderStatus(view);
    el("palette").innerHTML = renderPalette(
      session.human_vocab, selected, session.max_tokens_per_message);
    el("feed").innerHTML = renderFeed(feed.events);
    bindPalette();
    if (view.done) {
      const trace = validateTrace(await client.getTrace(session.session_id));
      el("summary").innerHTML = renderSummaryCard(view, summarizeTrace(trace));
    }
  };

  const send = async () => {
    if (selected.length === 0 || view.done) return;
    try {
      const res = await client.sendMessage(session.session_id, selected);
      view = res.view;
      selected = [];
      await feed.poll();
      await redraw();
    } catch (err) {
      if (err instanceof ApiError) {
        el("status").innerHTML =
          `<div class="banner error">${JSON.stringify(err.detail)}</div>`;
      } else {
        // transient disconnect: resync state from the server
        view = await client.getView(session.session_id);
        await feed.poll();
        await redraw();
      }
    }
  };

  const bindPalette = () => {
    app.querySelectorAll<HTMLButtonElement>("button.token").forEach((b) => {
      b.onclick = () => {
        const tok = b.dataset.token!;
        if (selected.includes(tok)) {
          selected = selected.filter((t) => t !== tok);
        } else if (selected.length < session.max_tokens_per_message) {
          selected = [...selected, tok];
        }
        void redraw();
      };
    });
    const sendBtn = document.getElementById("send");
    if (sendBtn) sendBtn.onclick = () => void send();
    const clearBtn = document.getElementById("clear");
    if (clearBtn) {
      clearBtn.onclick = () => {
        selected = [];
        void redraw();
      };
    }
  };

  await feed.poll();
  await redraw();
}

// -- Latent Navigator ---------------------------------------------------------

async function mountNavigator(): Promise<void> {
  const session: NavigatorSession = await client.createNavigator(
    Math.floor(Math.random() * 1e6));
  let suggestions: Region[] = session.suggestions;
  const clicks: ClickMark[] = [];
  const log: { x: number; y: number; insideSuggestion: boolean }[] = [];

  app.innerHTML = `
    <div class="navigator">
      <canvas id="nav" width="${CANVAS_SIZE}"
              height="${CANVAS_SIZE}"></canvas>
      <div class="side">
        <div id="click-info"><p>click the canvas to sample; dashed circles
          are suggested regions</p></div>
        <div id="nav-summary"></div>
      </div>
    </div>`;
  const canvas = el<HTMLCanvasElement>("nav");
  const ctx = canvas.getContext("2d")!;
  const redraw = () =>
    applyCommands(ctx, navDrawCommands(session.anchors, suggestions, clicks));

  canvas.onclick = async (ev) => {
    const rect = canvas.getBoundingClientRect();
    const xy = canvasToLatent([ev.clientX - rect.left, ev.clientY - rect.top]);
    if (!inBounds(xy) || clicks.length >= session.budget) return;
    const inside = insideSuggestion(xy, suggestions);
    try {
      const res = await client.click(session.session_id, xy[0], xy[1]);
      clicks.push({ x: xy[0], y: xy[1], score: res.score,
                    insideSuggestion: inside });
      log.push({ x: xy[0], y: xy[1], insideSuggestion: inside });
      suggestions = res.suggestions;
      el("click-info").innerHTML = renderClickInfo(
        res.image_png, res.score, res.preference, res.clicks_used,
        session.budget);
      if (res.clicks_used >= session.budget) {
        canvas.onclick = null;
        el("nav-summary").innerHTML = renderNavSummary(
          await client.navigatorMetrics(session.session_id));
      }
      redraw();
    } catch (err) {
      if (!(err instanceof ApiError)) throw err;
    }
  };
  redraw();
}

// -- dashboard ----------------------------------------------------------------

async function mountDashboard(runName?: string): Promise<void> {
  const runs = await client.listRuns();
  if (!runName) {
    app.innerHTML = `<h2>runs</h2>${renderRunList(runs)}`;
    return;
  }
  const report = await client.getRun(runName);
  app.innerHTML = `
    <h2>${runName}</h2>
    <h3>aggregate</h3>${renderAggregate(report)}
    <h3>BAS components</h3><canvas id="radar" width="240"
                                    height="240"></canvas>
    <h3>per seed</h3>${renderSeedTable(report)}`;
  applyCommands(el<HTMLCanvasElement>("radar").getContext("2d")!,
                basRadarCommands(report));
}

// -- hash router --------------------------------------------------------------

async function route(): Promise<void> {
  const hash = location.hash.slice(1) || "maptalk";
  document.querySelectorAll("nav a").forEach((a) =>
    a.classList.toggle("active",
                       (a as HTMLAnchorElement).hash.slice(1) === hash));
  try {
    if (hash === "maptalk") await mountMapTalk();
    else if (hash === "navigator") await mountNavigator();
    else if (hash.startsWith("dashboard")) {
      await mountDashboard(hash.split("/")[1]);
    }
  } catch (err) {
    app.innerHTML = `<div class="banner error">` +
      `${err instanceof Error ? err.message : String(err)}</div>`;
  }
}

window.addEventListener("hashchange", () => void route());
void route();
