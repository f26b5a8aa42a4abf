/** Payload shapes of the bica session service. The UI renders only what the
 * server sends; nothing here is simulated or recomputed client-side. */

export interface HumanView {
  grid: number[][];
  pose: [number, number];
  heading: string;
  goal: [number, number];
  step: number;
  done: boolean;
  last_ai_msg: string[];
  intervention: string | null;
  total_reward: number;
}

export interface MapTalkSession {
  session_id: string;
  mode: string;
  map: string;
  view: HumanView;
  human_vocab: string[];
  ai_vocab: string[];
  max_tokens_per_message: number;
}

export interface StepResult {
  ai_msg: string[];
  action: string;
  reward: number;
  collided: boolean;
  done: boolean;
  done_reason: string | null;
  view: HumanView;
  intervention: string | null;
}

export interface SessionEvent {
  seq: number;
  kind: string;
  [key: string]: unknown;
}

export interface TraceRecord {
  step: number;
  pose: number[];
  action: number;
  human_msg: string[];
  ai_msg: string[];
  reward: number;
  collided: boolean;
  reached_goal: boolean;
  intervention: boolean;
}

export interface Region {
  center: [number, number];
  radius: number;
  expected: number;
  value: number;
  count: number;
}

export interface NavigatorSession {
  session_id: string;
  anchors: [number, number][];
  suggestions: Region[];
  budget: number;
}

export interface ClickResult {
  image_id: number;
  image_png: string; // base64 PNG
  score: number;
  preference: number;
  clicks_used: number;
  suggestions: Region[];
}

export interface NavigatorMetrics extends Record<string, number> {
  exploration_efficiency: number;
  representation_alignment: number;
  preference_correlation: number;
  discovery_rate: number;
  cognitive_compatibility: number;
  best_score: number;
}

export interface RunAggregate {
  [metric: string]: { mean: number; sd: number };
}

export interface RunReport {
  name: string;
  config: Record<string, unknown>;
  per_seed: Record<string, number | null>[];
  aggregate: RunAggregate;
  failures?: number[];
}
