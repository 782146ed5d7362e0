// Wire types shared with the control service (v1 JSON schema).

export const PROTOCOL_VERSION = 1;
export const MAX_TARGETS = 3;

export interface ClassInfo {
  id: string;
  provenance: "builtin" | "custom";
}

export interface ProfileInfo {
  id: string;
  description: string;
}

export interface StateData {
  targets: string[];
  alpha: number;
  session_active: boolean;
  classes: ClassInfo[];
  profiles: ProfileInfo[];
  drafts: string[];
  suggestion_expiry_s: number;
}

export interface SuggestionData {
  suggestion_id: string;
  kind: "known-class" | "save-unknown";
  class_id: string | null;
  snapshot_ref: string | null;
  description: string | null;
  profile_id: string | null;
  created: number;
  expiry: number;
}

export interface DetectionData {
  labels: { label: string; confidence: number }[];
  timestamp: number;
}

export interface MetricsData {
  hop_ms_mean: number;
  hop_ms_p95: number;
  latency_ms: number;
  buffer_occupancy_samples: number;
  real_time_factor: number;
  drops: number;
  underruns: number;
}

export type EventMessage =
  | { v: number; seq: number; event: "state"; data: StateData }
  | { v: number; seq: number; event: "suggestion"; data: SuggestionData }
  | { v: number; seq: number; event: "detection"; data: DetectionData }
  | { v: number; seq: number; event: "metrics"; data: MetricsData }
  | { v: number; seq: number; event: "error"; data: { message: string } };

export interface Reply {
  v: number;
  id: string;
  ok: boolean;
  state?: StateData;
  error?: string;
}

export interface Command {
  v: number;
  id: string;
  cmd: string;
  args: Record<string, unknown>;
}

export function isReply(msg: unknown): msg is Reply {
  return typeof msg === "object" && msg !== null && "id" in msg && "ok" in msg;
}

export function isEvent(msg: unknown): msg is EventMessage {
  return typeof msg === "object" && msg !== null && "seq" in msg && "event" in msg;
}

let commandCounter = 0;

export function makeCommand(cmd: string, args: Record<string, unknown>): Command {
  commandCounter += 1;
  return { v: PROTOCOL_VERSION, id: `ui-${Date.now()}-${commandCounter}`, cmd, args };
}
