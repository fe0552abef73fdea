/** Pure fold from the run event stream to rendered state.
 *
 * The console never invents state: everything shown for a run is a
 * projection of the events received so far, and the projection is never
 * ahead of the last applied seq.  The fold applies the same transitions
 * the service applies when it replays a log, so a view built here from
 * `/runs/{id}/events` deep-equals the body of `GET /runs/{id}`.
 */

import type {
  CellRecord,
  PendingIntervention,
  RunEvent,
  RunStatus,
  RunView,
  TaskBody,
} from "./types.js";

export class ProjectionError extends Error {}

export interface FoldOptions {
  runId?: string;
  /** The task the run was created with; lets the fold track per-step
   * instructions as surgery inserts definition steps. */
  task?: TaskBody;
}

export class RunProjection {
  runId: string;
  status: RunStatus = "running";
  completedSteps = 0;
  totalSteps: number | null;
  cells: CellRecord[] = [];
  pending: PendingIntervention | null = null;
  lastSeq = 0;
  surgeries = 0;
  /** Instruction per step, kept in step order; null when the task is unknown. */
  instructions: string[] | null;

  constructor(opts: FoldOptions = {}) {
    this.runId = opts.runId ?? "";
    this.totalSteps = opts.task ? opts.task.steps.length : null;
    this.instructions = opts.task
      ? opts.task.steps.map((s) => s.instruction)
      : null;
  }

  apply(event: RunEvent): void {
    if (event.seq <= this.lastSeq) {
      throw new ProjectionError(
        `event seq ${event.seq} not after ${this.lastSeq}; ` +
          `events must be applied in order`,
      );
    }
    this.lastSeq = event.seq;
    if (!this.runId) {
      this.runId = event.run_id;
    }
    const payload = event.payload as Record<string, any>;
    switch (event.kind) {
      case "surgery": {
        this.surgeries += 1;
        if (this.totalSteps !== null) {
          this.totalSteps += 1;
        }
        if (this.instructions !== null) {
          const step = payload.new_step as { index: number; instruction: string };
          this.instructions.splice(step.index, 0, step.instruction);
        }
        break;
      }
      case "step_committed": {
        this.cells.push({
          step_index: payload.step_index,
          code: payload.code,
          source: payload.source,
        });
        this.completedSteps += 1;
        break;
      }
      case "intervention_requested": {
        this.pending = {
          step_index: payload.step_index,
          report: payload.report,
        };
        this.status = "paused";
        break;
      }
      case "intervention_resolved": {
        this.pending = null;
        this.status = "running";
        break;
      }
      case "run_finished": {
        this.status = payload.status;
        this.completedSteps = payload.completed_steps;
        this.totalSteps = payload.total_steps;
        this.pending = null;
        break;
      }
      // step_started, attempt, execution, node_expanded and reward move
      // the search tree, not the run view.
      default:
        break;
    }
  }

  /** The canonical run view, shaped exactly like GET /runs/{id}. */
  view(): RunView {
    return {
      run_id: this.runId,
      status: this.status,
      completed_steps: this.completedSteps,
      total_steps: this.totalSteps,
      cells: this.cells.map((c) => ({ ...c })),
      pending_intervention: this.pending
        ? { step_index: this.pending.step_index, report: { ...this.pending.report } }
        : null,
      last_seq: this.lastSeq,
    };
  }
}

export function foldEvents(
  events: Iterable<RunEvent>,
  opts: FoldOptions = {},
): RunProjection {
  const projection = new RunProjection(opts);
  for (const event of events) {
    projection.apply(event);
  }
  return projection;
}

export type StepState =
  | "passed" // committed by the agent
  | "passed-human" // committed via a human edit
  | "needs-edit" // paused here, waiting for an intervention
  | "active" // the step the run is currently working on
  | "queued" // not reached yet on a live run
  | "not-run"; // never reached; the run ended first

export interface TimelineEntry {
  step_index: number;
  state: StepState;
  instruction: string | null;
  cell: CellRecord | null;
}

const FINAL_STATUSES: ReadonlySet<string> = new Set([
  "finished",
  "failed",
  "cancelled",
]);

/** Per-step progression derived from a run view: which steps passed (and
 * whether a human supplied the cell), where the run is paused, what is
 * still queued. */
export function stepTimeline(
  view: RunView,
  instructions: readonly string[] | null = null,
): TimelineEntry[] {
  // without a known step count, show every step the run has touched
  const total =
    view.total_steps ??
    Math.max(
      view.cells.length,
      view.completed_steps + (FINAL_STATUSES.has(view.status) ? 0 : 1),
      (view.pending_intervention?.step_index ?? -1) + 1,
    );
  const byStep = new Map<number, CellRecord>();
  for (const cell of view.cells) {
    byStep.set(cell.step_index, cell);
  }
  const entries: TimelineEntry[] = [];
  for (let i = 0; i < total; i++) {
    const cell = byStep.get(i) ?? null;
    let state: StepState;
    if (cell) {
      state = cell.source === "human" ? "passed-human" : "passed";
    } else if (view.pending_intervention?.step_index === i) {
      state = "needs-edit";
    } else if (FINAL_STATUSES.has(view.status)) {
      state = "not-run";
    } else if (i === view.completed_steps) {
      state = "active";
    } else {
      state = "queued";
    }
    entries.push({
      step_index: i,
      state,
      instruction: instructions?.[i] ?? null,
      cell,
    });
  }
  return entries;
}
