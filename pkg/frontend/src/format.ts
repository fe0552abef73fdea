/** Small presentation helpers shared by the views. */

import type { NodeStatus, RunStatus } from "./types.js";

/** CSS class for a run status badge (also used as the badge text). */
export function statusBadgeClass(status: RunStatus | "cancelling"): string {
  return `badge badge-${status}`;
}

export function nodeClass(status: NodeStatus): string {
  return `node node-${status}`;
}

/** Q, p and similar unit-interval stats, fixed width. */
export function stat(value: number): string {
  return value.toFixed(3);
}

export function summarizeCode(code: string, max = 60): string {
  const firstLine = code.split("\n", 1)[0] ?? "";
  const suffix = code.includes("\n") || firstLine.length > max ? "…" : "";
  return firstLine.slice(0, max) + suffix;
}
