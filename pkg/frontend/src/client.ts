/** HTTP client for the run service.
 *
 * Talks only to the documented endpoints:
 *
 *   POST /runs
 *   GET  /runs
 *   GET  /runs/{id}
 *   GET  /runs/{id}/events?from=SEQ&follow=0|1   (JSON lines)
 *   GET  /runs/{id}/tree
 *   POST /runs/{id}/interventions/{step}/edit
 *   POST /runs/{id}/cancel
 *
 * The event stream is plain NDJSON over a kept-open response; the server
 * closes the connection after run_finished.  `streamEvents` hides drops:
 * it reconnects with `from=<last seen seq>+1`, which the service
 * guarantees to be gapless and duplicate-free.
 */

import type {
  CancelResult,
  CreateResult,
  EditResult,
  ErrorBody,
  RunEvent,
  RunListing,
  RunView,
  TaskBody,
  TreeResponse,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
    readonly path?: string,
  ) {
    super(message);
  }
}

export type FetchLike = (
  input: string,
  init?: RequestInit,
) => Promise<Response>;

export interface ClientOptions {
  /** Injected for tests; defaults to the global fetch. */
  fetchImpl?: FetchLike;
}

export interface StreamOptions {
  /** First seq to request (default 1). */
  from?: number;
  onEvent: (event: RunEvent) => void;
  /** Called whenever a (re)connect attempt fails; the stream keeps retrying. */
  onError?: (error: unknown) => void;
  signal?: AbortSignal;
  /** Base reconnect delay in ms, doubled per consecutive failure (cap 10x). */
  backoffMs?: number;
}

async function decodeError(response: Response): Promise<ApiError> {
  let body: ErrorBody | null = null;
  try {
    body = (await response.json()) as ErrorBody;
  } catch {
    // non-JSON error body; fall through to a generic error
  }
  if (body && typeof body === "object" && body.error) {
    return new ApiError(
      response.status,
      body.error.code,
      body.error.message,
      body.error.path,
    );
  }
  return new ApiError(response.status, "http_error", `HTTP ${response.status}`);
}

/** Split NDJSON text into parsed events. Blank lines are skipped. */
export function parseEventLines(text: string): RunEvent[] {
  const events: RunEvent[] = [];
  for (const line of text.split("\n")) {
    if (line.trim() === "") continue;
    events.push(JSON.parse(line) as RunEvent);
  }
  return events;
}

const sleep = (ms: number) => new Promise((r) => setTimeout(r, ms));

export class ConsoleClient {
  private readonly fetchImpl: FetchLike;

  constructor(
    readonly baseUrl: string,
    opts: ClientOptions = {},
  ) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.fetchImpl = opts.fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private async request<T>(
    method: "GET" | "POST",
    path: string,
    body?: unknown,
  ): Promise<T> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { "Content-Type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const response = await this.fetchImpl(this.baseUrl + path, init);
    if (!response.ok) {
      throw await decodeError(response);
    }
    return (await response.json()) as T;
  }

  createRun(body: {
    task: TaskBody;
    cfg?: Record<string, unknown>;
    mode?: "auto" | "human";
    rag_mode?: "at0" | "at3";
  }): Promise<CreateResult> {
    return this.request<CreateResult>("POST", "/runs", body);
  }

  listRuns(): Promise<RunListing> {
    return this.request<RunListing>("GET", "/runs");
  }

  getRun(runId: string): Promise<RunView> {
    return this.request<RunView>("GET", `/runs/${runId}`);
  }

  getTree(runId: string): Promise<TreeResponse> {
    return this.request<TreeResponse>("GET", `/runs/${runId}/tree`);
  }

  submitEdit(
    runId: string,
    stepIndex: number,
    code: string,
    note?: string,
  ): Promise<EditResult> {
    return this.request<EditResult>(
      "POST",
      `/runs/${runId}/interventions/${stepIndex}/edit`,
      note === undefined ? { code } : { code, note },
    );
  }

  cancelRun(runId: string): Promise<CancelResult> {
    return this.request<CancelResult>("POST", `/runs/${runId}/cancel`);
  }

  /** One-shot (non-follow) event fetch: everything from `from` onward. */
  async fetchEvents(runId: string, from = 1): Promise<RunEvent[]> {
    const response = await this.fetchImpl(
      `${this.baseUrl}/runs/${runId}/events?from=${from}&follow=0`,
      { method: "GET" },
    );
    if (!response.ok) {
      throw await decodeError(response);
    }
    return parseEventLines(await response.text());
  }

  /**
   * Follow a run's event stream until run_finished.
   *
   * Keeps a cursor of the last seq seen and reconnects from cursor+1 on
   * any drop, so the caller observes each event exactly once and in
   * order.  Resolves once run_finished has been delivered (or the signal
   * aborts); rejects only on abort-free programming errors.
   */
  async streamEvents(runId: string, opts: StreamOptions): Promise<void> {
    let cursor = (opts.from ?? 1) - 1;
    const base = opts.backoffMs ?? 500;
    let failures = 0;
    for (;;) {
      if (opts.signal?.aborted) return;
      let sawFinish = false;
      try {
        const response = await this.fetchImpl(
          `${this.baseUrl}/runs/${runId}/events?from=${cursor + 1}&follow=1`,
          { method: "GET", signal: opts.signal },
        );
        if (!response.ok) {
          throw await decodeError(response);
        }
        sawFinish = await this.consume(response, (event) => {
          if (event.seq <= cursor) return; // duplicate after a racy reconnect
          cursor = event.seq;
          opts.onEvent(event);
        });
        failures = 0;
      } catch (error) {
        if (opts.signal?.aborted) return;
        failures += 1;
        opts.onError?.(error);
      }
      if (sawFinish || opts.signal?.aborted) return;
      await sleep(base * Math.min(failures + 1, 10));
    }
  }

  /** Read one streaming response; true if run_finished was seen. */
  private async consume(
    response: Response,
    deliver: (event: RunEvent) => void,
  ): Promise<boolean> {
    const reader = response.body?.getReader();
    if (!reader) {
      // environments without streaming bodies: fall back to full text
      for (const event of parseEventLines(await response.text())) {
        deliver(event);
        if (event.kind === "run_finished") return true;
      }
      return false;
    }
    const decoder = new TextDecoder();
    let buffer = "";
    let finished = false;
    for (;;) {
      const { done, value } = await reader.read();
      buffer += decoder.decode(value ?? new Uint8Array(), { stream: !done });
      let newline;
      while ((newline = buffer.indexOf("\n")) >= 0) {
        const line = buffer.slice(0, newline).trim();
        buffer = buffer.slice(newline + 1);
        if (!line) continue;
        const event = JSON.parse(line) as RunEvent;
        deliver(event);
        if (event.kind === "run_finished") finished = true;
      }
      if (done) return finished;
      if (finished) {
        // the server closes right after run_finished; don't wait for it
        await reader.cancel().catch(() => undefined);
        return true;
      }
    }
  }
}
