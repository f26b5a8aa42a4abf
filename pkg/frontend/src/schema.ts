import { z } from "zod";
import type { TraceRecord } from "./types.js";

/** Schema of one line of an episode trace as served by the session API
 * (the same shape the training harness writes to traces/*.jsonl). */
export const traceRecordSchema = z.object({
  step: z.number().int().nonnegative(),
  pose: z.array(z.number().int()).length(2),
  action: z.number().int().min(0).max(3),
  human_msg: z.array(z.string()).max(2),
  ai_msg: z.array(z.string()).max(2),
  reward: z.number().finite(),
  collided: z.boolean(),
  reached_goal: z.boolean(),
  intervention: z.boolean(),
});

export const traceSchema = z.array(traceRecordSchema);

export function validateTrace(records: unknown): TraceRecord[] {
  const trace = traceSchema.parse(records);
  trace.forEach((rec, i) => {
    if (rec.step !== i) {
      throw new Error(`trace step ${rec.step} at position ${i}`);
    }
  });
  return trace;
}

export interface TraceSummary {
  steps: number;
  totalReward: number;
  tokens: number;
  collisions: number;
  reachedGoal: boolean;
}

/** Aggregate a validated trace; used to check the server's episode summary
 * against its own per-step records (no reward recomputation). */
export function summarizeTrace(trace: TraceRecord[]): TraceSummary {
  let totalReward = 0;
  let tokens = 0;
  let collisions = 0;
  let reachedGoal = false;
  for (const rec of trace) {
    totalReward += rec.reward;
    tokens += rec.human_msg.length + rec.ai_msg.length;
    if (rec.collided) collisions += 1;
    if (rec.reached_goal) reachedGoal = true;
  }
  return { steps: trace.length, totalReward, tokens, collisions, reachedGoal };
}
