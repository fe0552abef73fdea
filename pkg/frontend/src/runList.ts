/** Run list: one row per run with a live status badge.
 *
 * Rows come from GET /runs; after that, every non-final run gets its own
 * event stream so badges and progress flip in place (no reload) the
 * moment the run finishes, pauses, or commits a step.  When the service
 * is unreachable the list shows a banner and retries with backoff.
 */

import { ApiError, ConsoleClient } from "./client.js";
import { clear, h } from "./dom.js";
import { statusBadgeClass } from "./format.js";
import type { RunEvent, RunView } from "./types.js";

const FINAL = new Set(["finished", "failed", "cancelled"]);

export interface RunListOptions {
  onOpen?: (runId: string) => void;
  /** Base backoff for both the banner retry and stream reconnects (ms). */
  backoffMs?: number;
}

interface RowHandle {
  row: HTMLElement;
  badge: HTMLElement;
  progress: HTMLElement;
  abort: AbortController | null;
}

export class RunListController {
  private rows = new Map<string, RowHandle>();
  private banner: HTMLElement;
  private listEl: HTMLElement;
  private retryTimer: ReturnType<typeof setTimeout> | null = null;
  private retryDelay: number;
  private disposed = false;

  constructor(
    private readonly container: HTMLElement,
    private readonly client: ConsoleClient,
    private readonly opts: RunListOptions = {},
  ) {
    this.retryDelay = opts.backoffMs ?? 1000;
    this.banner = h("div", { class: "banner", hidden: "" });
    this.listEl = h("div", { class: "run-list" });
    container.append(this.banner, this.listEl);
  }

  async refresh(): Promise<void> {
    if (this.disposed) return;
    let listing;
    try {
      listing = await this.client.listRuns();
    } catch (error) {
      this.showBanner(error);
      return;
    }
    this.hideBanner();
    this.render(listing.runs);
  }

  dispose(): void {
    this.disposed = true;
    if (this.retryTimer !== null) clearTimeout(this.retryTimer);
    for (const handle of this.rows.values()) {
      handle.abort?.abort();
    }
    this.rows.clear();
  }

  // -- rendering -------------------------------------------------------------

  private render(runs: RunView[]): void {
    for (const handle of this.rows.values()) {
      handle.abort?.abort();
    }
    this.rows.clear();
    clear(this.listEl);
    if (runs.length === 0) {
      this.listEl.append(
        h("p", { class: "empty-state", text: "No runs yet." }),
      );
      return;
    }
    for (const run of runs) {
      const badge = h("span", {
        class: statusBadgeClass(run.status),
        text: run.status,
      });
      const progress = h("span", {
        class: "progress",
        text: progressText(run),
      });
      const row = h(
        "div",
        {
          class: "run-row",
          "data-run-id": run.run_id,
          onclick: () => this.opts.onOpen?.(run.run_id),
        },
        h("code", { class: "run-id", text: run.run_id }),
        badge,
        progress,
      );
      this.listEl.append(row);
      const handle: RowHandle = { row, badge, progress, abort: null };
      this.rows.set(run.run_id, handle);
      if (!FINAL.has(run.status)) {
        this.follow(run, handle);
      }
    }
  }

  private follow(run: RunView, handle: RowHandle): void {
    const abort = new AbortController();
    handle.abort = abort;
    const counts = { completed: run.completed_steps, total: run.total_steps };
    void this.client.streamEvents(run.run_id, {
      from: run.last_seq + 1,
      signal: abort.signal,
      backoffMs: this.opts.backoffMs,
      onEvent: (event) => this.onRunEvent(handle, counts, event),
    });
  }

  private onRunEvent(
    handle: RowHandle,
    counts: { completed: number; total: number | null },
    event: RunEvent,
  ): void {
    const payload = event.payload as Record<string, any>;
    switch (event.kind) {
      case "step_committed":
        counts.completed += 1;
        break;
      case "surgery":
        if (counts.total !== null) counts.total += 1;
        break;
      case "intervention_requested":
        this.setBadge(handle, "paused");
        break;
      case "intervention_resolved":
        this.setBadge(handle, "running");
        break;
      case "run_finished":
        counts.completed = payload.completed_steps;
        counts.total = payload.total_steps;
        this.setBadge(handle, payload.status);
        handle.abort?.abort();
        handle.abort = null;
        break;
      default:
        return;
    }
    handle.progress.textContent =
      counts.total === null
        ? `${counts.completed} steps`
        : `${counts.completed}/${counts.total} steps`;
  }

  private setBadge(handle: RowHandle, status: string): void {
    handle.badge.textContent = status;
    handle.badge.className = statusBadgeClass(status as any);
  }

  // -- unreachable service -----------------------------------------------------

  private showBanner(error: unknown): void {
    const reason =
      error instanceof ApiError ? error.message : "service unreachable";
    this.banner.textContent = `Cannot reach the run service (${reason}); retrying…`;
    this.banner.removeAttribute("hidden");
    if (this.retryTimer !== null) clearTimeout(this.retryTimer);
    const delay = this.retryDelay;
    this.retryDelay = Math.min(this.retryDelay * 2, 30_000);
    this.retryTimer = setTimeout(() => void this.refresh(), delay);
  }

  private hideBanner(): void {
    this.banner.setAttribute("hidden", "");
    this.retryDelay = this.opts.backoffMs ?? 1000;
    if (this.retryTimer !== null) {
      clearTimeout(this.retryTimer);
      this.retryTimer = null;
    }
  }
}

function progressText(run: RunView): string {
  return run.total_steps === null
    ? `${run.completed_steps} steps`
    : `${run.completed_steps}/${run.total_steps} steps`;
}
