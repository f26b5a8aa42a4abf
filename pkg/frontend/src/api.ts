import type {
  ClickResult, MapTalkSession, NavigatorMetrics, NavigatorSession, Region,
  RunReport, SessionEvent, StepResult, TraceRecord, HumanView,
} from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, public detail: unknown) {
    super(`service error ${status}: ${JSON.stringify(detail)}`);
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client for the session service. All UI data flows through
 * here; the transport is injectable so tests can intercept payloads. */
export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(method: string, path: string,
                           body?: unknown): Promise<T> {
    const res = await this.fetchFn(this.baseUrl + path, {
      method,
      headers: body !== undefined
        ? { "Content-Type": "application/json" } : undefined,
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const data = await res.json();
    if (!res.ok) {
      throw new ApiError(res.status, (data as { detail?: unknown }).detail ?? data);
    }
    return data as T;
  }

  createMapTalk(seed = 0, mode = "bica"): Promise<MapTalkSession> {
    return this.request("POST", "/sessions/maptalk", { seed, mode });
  }

  getView(sid: string): Promise<HumanView> {
    return this.request("GET", `/sessions/maptalk/${sid}/view`);
  }

  sendMessage(sid: string, tokens: string[]): Promise<StepResult> {
    return this.request("POST", `/sessions/maptalk/${sid}/message`, { tokens });
  }

  /** Events with sequence numbers strictly greater than `since`. */
  async getEvents(sid: string, since = -1): Promise<SessionEvent[]> {
    const data = await this.request<{ events: SessionEvent[] }>(
      "GET", `/sessions/maptalk/${sid}/events?since=${since}`);
    return data.events;
  }

  async getTrace(sid: string): Promise<TraceRecord[]> {
    const data = await this.request<{ records: TraceRecord[] }>(
      "GET", `/sessions/maptalk/${sid}/trace`);
    return data.records;
  }

  createNavigator(seed = 0): Promise<NavigatorSession> {
    return this.request("POST", "/sessions/navigator", { seed });
  }

  click(sid: string, x: number, y: number): Promise<ClickResult> {
    return this.request("POST", `/sessions/navigator/${sid}/click`, { x, y });
  }

  async getSuggestions(sid: string): Promise<Region[]> {
    const data = await this.request<{ suggestions: Region[] }>(
      "GET", `/sessions/navigator/${sid}/suggestions`);
    return data.suggestions;
  }

  navigatorMetrics(sid: string): Promise<NavigatorMetrics> {
    return this.request("GET", `/sessions/navigator/${sid}/metrics`);
  }

  async listRuns(): Promise<string[]> {
    const data = await this.request<{ runs: string[] }>("GET", "/runs");
    return data.runs;
  }

  getRun(name: string): Promise<RunReport> {
    return this.request("GET", `/runs/${name}`);
  }
}

/** Ordered event feed that resumes from the last applied sequence number;
 * out-of-order or replayed events are rejected. */
export class EventFeed {
  private lastSeq = -1;
  readonly events: SessionEvent[] = [];

  constructor(private client: ApiClient, private sid: string) {}

  get cursor(): number {
    return this.lastSeq;
  }

  apply(ev: SessionEvent): boolean {
    if (ev.seq !== this.lastSeq + 1) return false;
    this.lastSeq = ev.seq;
    this.events.push(ev);
    return true;
  }

  /** Poll once, applying only in-order events; returns the new events. */
  async poll(): Promise<SessionEvent[]> {
    const incoming = await this.client.getEvents(this.sid, this.lastSeq);
    const applied: SessionEvent[] = [];
    for (const ev of incoming) {
      if (this.apply(ev)) applied.push(ev);
    }
    return applied;
  }
}
