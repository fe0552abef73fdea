/** One run's view: step timeline, committed cells, and — when the run is
 * paused — the intervention editor.
 *
 * The view holds a single event-stream consumer and renders purely from
 * the fold in `projection.ts`; the root element carries the seq of the
 * last applied event (`data-seq`) so what is on screen is never ahead of
 * what the service has emitted.  Submitting an edit does not mutate the
 * view directly: the resulting events (intervention_resolved, a fresh
 * intervention_requested on a failing edit, step_committed on a passing
 * one) drive the next render.
 */

import { ApiError, ConsoleClient } from "./client.js";
import { clear, h } from "./dom.js";
import { statusBadgeClass } from "./format.js";
import { RunProjection, stepTimeline } from "./projection.js";
import type { RunEvent } from "./types.js";

export interface RunViewOptions {
  backoffMs?: number;
  /** Notified after every render; handy for tests and the app shell. */
  onRender?: (controller: RunViewController) => void;
}

export class RunViewController {
  readonly projection: RunProjection;
  readonly root: HTMLElement;
  private readonly abort = new AbortController();
  private editorDraft = "";
  private editorError: string | null = null;
  private submitting = false;
  // The event stream carries no step count until run_finished, so the
  // timeline length comes from one view snapshot; surgery events newer
  // than that snapshot grow it.  Step *statuses* stay fold-pure.
  private totalHint: number | null = null;
  private hintSeq = 0;

  constructor(
    private readonly container: HTMLElement,
    private readonly client: ConsoleClient,
    readonly runId: string,
    private readonly opts: RunViewOptions = {},
  ) {
    this.projection = new RunProjection({ runId });
    this.root = h("section", { class: "run-view", "data-seq": "0" });
    container.append(this.root);
    this.render();
  }

  /** Start consuming the event stream (from seq 1: history, then live). */
  async open(): Promise<void> {
    try {
      const snapshot = await this.client.getRun(this.runId);
      this.totalHint = snapshot.total_steps;
      this.hintSeq = snapshot.last_seq;
      this.render();
    } catch {
      // unreachable service: the stream below retries on its own, and
      // the timeline can grow from observed events alone
    }
    return this.client.streamEvents(this.runId, {
      from: 1,
      signal: this.abort.signal,
      backoffMs: this.opts.backoffMs,
      onEvent: (event) => this.onEvent(event),
    });
  }

  dispose(): void {
    this.abort.abort();
  }

  private onEvent(event: RunEvent): void {
    this.projection.apply(event);
    if (event.kind === "intervention_requested") {
      // a fresh report (first pause, or a failing edit's new traceback)
      // replaces whatever was in flight; keep the human's draft text
      this.editorError = null;
      this.submitting = false;
    }
    if (
      event.kind === "surgery" &&
      this.totalHint !== null &&
      event.seq > this.hintSeq
    ) {
      this.totalHint += 1;
    }
    this.render();
  }

  // -- edit submission --------------------------------------------------------

  async submitEdit(code: string, note?: string): Promise<void> {
    const pending = this.projection.pending;
    if (!pending || this.submitting) return;
    this.editorDraft = code;
    this.submitting = true;
    this.editorError = null;
    this.render();
    try {
      const result = await this.client.submitEdit(
        this.runId,
        pending.step_index,
        code,
        note,
      );
      if (result.accepted) {
        this.editorDraft = "";
      }
      // !accepted: the stream delivers a new intervention_requested with
      // the fresh traceback; the draft stays for another try.
    } catch (error) {
      // conflict (or validation) from the service: inline error, editor
      // untouched so nothing typed is lost
      this.editorError =
        error instanceof ApiError ? error.message : String(error);
    } finally {
      this.submitting = false;
      this.render();
    }
  }

  // -- rendering ---------------------------------------------------------------

  private render(): void {
    const view = this.projection.view();
    if (view.total_steps === null && this.totalHint !== null) {
      view.total_steps = this.totalHint;
    }
    this.root.setAttribute("data-seq", String(view.last_seq));
    clear(this.root);

    this.root.append(
      h(
        "header",
        { class: "run-header" },
        h("code", { class: "run-id", text: view.run_id || this.runId }),
        h("span", {
          class: statusBadgeClass(view.status),
          text: view.status,
        }),
        h("span", {
          class: "cursor",
          text: `seq ${view.last_seq}`,
        }),
      ),
    );

    const timeline = h("ol", { class: "timeline" });
    for (const entry of stepTimeline(view, this.projection.instructions)) {
      timeline.append(
        h(
          "li",
          {
            class: `step step-${entry.state}`,
            "data-step": String(entry.step_index),
          },
          h("span", { class: "step-state", text: entry.state }),
          entry.instruction
            ? h("span", { class: "step-instruction", text: entry.instruction })
            : null,
          entry.cell
            ? h("pre", { class: "step-code", text: entry.cell.code })
            : null,
        ),
      );
    }
    this.root.append(timeline);

    if (view.pending_intervention) {
      this.root.append(this.renderEditor(view.pending_intervention));
    }
    this.opts.onRender?.(this);
  }

  private renderEditor(pending: {
    step_index: number;
    report: {
      instruction: string;
      failed_code: string;
      error: string;
      attempts_used: number;
    };
  }): HTMLElement {
    const textarea = h("textarea", {
      class: "editor-code",
      rows: "8",
    }) as HTMLTextAreaElement;
    textarea.value = this.editorDraft || pending.report.failed_code;

    const submit = h("button", {
      class: "editor-submit",
      text: this.submitting ? "submitting…" : "submit edit",
      onclick: () => void this.submitEdit(textarea.value),
    }) as HTMLButtonElement;
    if (this.submitting) submit.setAttribute("disabled", "");

    return h(
      "div",
      { class: "intervention", "data-step": String(pending.step_index) },
      h("h3", {
        text: `Step ${pending.step_index} needs an edit`,
      }),
      h("p", { class: "report-instruction", text: pending.report.instruction }),
      h("pre", { class: "report-failed-code", text: pending.report.failed_code }),
      h("pre", { class: "report-error", text: pending.report.error }),
      h("p", {
        class: "report-attempts",
        text: `${pending.report.attempts_used} attempts used`,
      }),
      textarea,
      submit,
      this.editorError
        ? h("p", { class: "editor-error", text: this.editorError })
        : null,
    );
  }
}
