/** Wire types for the run service. These mirror the HTTP API exactly;
 * nothing here is invented client-side. */

export type RunStatus = "running" | "paused" | "finished" | "failed" | "cancelled";

export const EVENT_KINDS = [
  "step_started",
  "attempt",
  "execution",
  "node_expanded",
  "reward",
  "surgery",
  "intervention_requested",
  "intervention_resolved",
  "step_committed",
  "run_finished",
] as const;

export type EventKind = (typeof EVENT_KINDS)[number];

export interface RunEvent {
  run_id: string;
  seq: number;
  ts: number;
  kind: EventKind;
  payload: Record<string, unknown>;
}

export interface CellRecord {
  step_index: number;
  code: string;
  source: string; // "agent" | "human"
}

export interface InterventionReport {
  instruction: string;
  failed_code: string;
  error: string;
  attempts_used: number;
}

export interface PendingIntervention {
  step_index: number;
  report: InterventionReport;
}

/** Canonical run view returned by GET /runs/{id} and embedded in GET /runs. */
export interface RunView {
  run_id: string;
  status: RunStatus;
  completed_steps: number;
  total_steps: number | null;
  cells: CellRecord[];
  pending_intervention: PendingIntervention | null;
  last_seq: number;
}

export interface RunListing {
  runs: RunView[];
}

export type NodeStatus = "unexpanded" | "expanded" | "terminal_pass" | "terminal_fail";

export interface TreeNode {
  node_id: number;
  parent: number | null;
  step_index: number;
  code: string;
  prior_p: number;
  visits_v: number;
  value_Q: number;
  children: number[];
  status: NodeStatus;
  error: string | null;
}

export interface TreeDump {
  root: number;
  nodes: TreeNode[];
}

export interface TreeResponse {
  run_id: string;
  tree: TreeDump;
}

export interface EditResult {
  run_id: string;
  accepted: boolean;
  status: RunStatus;
}

export interface CancelResult {
  run_id: string;
  status: RunStatus | "cancelling";
}

export interface CreateResult {
  run_id: string;
  status: RunStatus;
}

/** Error envelope: {"error": {"code", "message", "path"?}}. */
export interface ErrorBody {
  error: { code: string; message: string; path?: string };
}

export interface TaskStep {
  index: number;
  instruction: string;
  library_hints?: string[];
  gold_code?: string;
  gold_labels?: string[];
}

export interface TaskBody {
  id: string;
  kind: "single_turn" | "multi_turn";
  libraries?: string[];
  steps: TaskStep[];
}
