"""HTTP service for launching, watching, and steering runs.

Runs execute on one worker thread each; every read endpoint is served by
folding the run's event log, so responses are always a consistent
snapshot and, by construction, identical to a replay of the log.  Logs
persist as JSON-lines files next to a small meta file (task, config,
mode); on restart, finished runs are served from disk and paused runs
are reconstructed by replay so interventions can still resume them.

Endpoints (bodies UTF-8 JSON; errors are ``{code, message, path?}``):

    POST /runs                                  {task, cfg?, mode?, rag_mode?}
    GET  /runs                                  registry index
    GET  /runs/{id}                             canonical run view
    GET  /runs/{id}/events?from=SEQ[&follow=0]  JSON-lines event stream
    GET  /runs/{id}/tree                        search tree dump
    POST /runs/{id}/interventions/{step}/edit   {code, note?}
    POST /runs/{id}/cancel
"""
from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Optional
from urllib.parse import parse_qs, urlsplit

from . import events, jsonio, mcts, refine
from .model import AgentConfig, SuiteError, SuiteSchemaError, TaskSpec, parse_suite

__all__ = ["AgentService", "ServiceError"]

logger = logging.getLogger(__name__)

_FINAL = ("finished", "failed", "cancelled")
_MAX_BODY_BYTES = 10 << 20


class ServiceError(Exception):
    """An error with an HTTP status and a wire payload."""

    def __init__(self, status: int, code: str, message: str,
                 path: Optional[str] = None) -> None:
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.path = path

    def payload(self) -> dict:
        body = {"code": self.code, "message": self.message}
        if self.path is not None:
            body["path"] = self.path
        return body


class _RunHandle:
    """Everything the service keeps per run."""

    def __init__(self, run_id: str, task: TaskSpec, log: events.EventLog,
                 state: Optional[refine.RunState]) -> None:
        self.run_id = run_id
        self.task = task  # the task as submitted, before any surgery
        self.log = log
        self.state = state  # None for runs recovered in a final state
        self.lock = threading.RLock()
        self.cancel_requested = False
        self.worker: Optional[threading.Thread] = None

    def replayed(self) -> events.ReplayedRun:
        return events.replay_events(self.log.snapshot(), run_id=self.run_id,
                                    task=self.task)


class AgentService:
    """Run registry plus the HTTP server in front of it.

    ``deps_factory`` must return a fresh ``mcts.EngineDeps`` per call; the
    service installs its own event sink on it.  With a ``data_dir``, logs
    and metadata persist there and previous runs are recovered on start.
    """

    def __init__(self, deps_factory: Callable[[], mcts.EngineDeps],
                 cfg: Optional[AgentConfig] = None,
                 data_dir: Optional[str] = None,
                 host: str = "127.0.0.1", port: int = 0) -> None:
        self.deps_factory = deps_factory
        self.default_cfg = cfg or AgentConfig()
        self.data_dir = data_dir
        self.host = host
        self.port = port
        self._runs: dict[str, _RunHandle] = {}
        self._lock = threading.Lock()
        self._server: Optional[ThreadingHTTPServer] = None
        self._server_thread: Optional[threading.Thread] = None
        if data_dir:
            os.makedirs(data_dir, exist_ok=True)
            self._recover()

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> tuple[str, int]:
        """Bind and serve in a background thread; returns (host, port)."""
        server = ThreadingHTTPServer((self.host, self.port), _Handler)
        server.daemon_threads = True
        server.service = self  # type: ignore[attr-defined]
        self._server = server
        self.port = server.server_address[1]
        self._server_thread = threading.Thread(
            target=server.serve_forever, name="cellsmith-http", daemon=True)
        self._server_thread.start()
        return self.host, self.port

    def stop(self) -> None:
        """Stop serving and release every run's resources."""
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        with self._lock:
            handles = list(self._runs.values())
        for handle in handles:
            handle.cancel_requested = True
        for handle in handles:
            worker = handle.worker
            if worker is not None and worker.is_alive():
                worker.join(timeout=30)
            with handle.lock:
                if handle.state is not None:
                    refine.release(handle.state)
            handle.log.close()

    # -- persistence --------------------------------------------------------

    def _paths(self, run_id: str) -> tuple[Optional[str], Optional[str]]:
        if not self.data_dir:
            return None, None
        return (os.path.join(self.data_dir, f"{run_id}.events.jsonl"),
                os.path.join(self.data_dir, f"{run_id}.meta.json"))

    def _write_meta(self, run_id: str, task: TaskSpec, cfg: AgentConfig,
                    mode: str, rag_mode: str) -> None:
        _, meta_path = self._paths(run_id)
        if meta_path is None:
            return
        from .model import task_to_dict

        meta = {
            "run_id": run_id,
            "task": task_to_dict(task),
            "cfg": cfg.to_dict(),
            "mode": mode,
            "rag_mode": rag_mode,
            "created_ts": time.time(),
        }
        with open(meta_path, "w", encoding="utf-8") as handle:
            handle.write(jsonio.dumps_pretty(meta) + "\n")

    def _recover(self) -> None:
        for name in sorted(os.listdir(self.data_dir)):
            if not name.endswith(".meta.json"):
                continue
            meta_path = os.path.join(self.data_dir, name)
            try:
                with open(meta_path, encoding="utf-8") as fh:
                    meta = jsonio.loads(fh.read())
                self._recover_one(meta)
            except (OSError, ValueError, SuiteError,
                    events.EventLogError) as exc:
                logger.warning("skipping unrecoverable run %s: %s",
                               meta_path, exc)

    def _recover_one(self, meta: dict) -> None:
        run_id = meta["run_id"]
        task = parse_suite(json.dumps([meta["task"]]))[0]
        cfg = AgentConfig.from_dict(meta["cfg"])
        log_path, _ = self._paths(run_id)
        if not os.path.exists(log_path):
            return
        log = events.EventLog.load(log_path, run_id=run_id)
        replayed = events.replay_events(log.snapshot(), run_id=run_id,
                                        task=task)
        handle = _RunHandle(run_id, task, log, state=None)
        if replayed.status == "running":
            # The service died mid-step; the sandbox state is gone, so the
            # run cannot be resumed faithfully.
            log.append("run_finished", {
                "status": "failed",
                "completed_steps": replayed.completed_steps,
                "total_steps": replayed.total_steps,
                "note": "interrupted by service restart",
            })
            log.close()
        elif replayed.status == "paused":
            state = refine.RunState(
                run_id=run_id,
                task=replayed.task or task,
                cfg=cfg,
                mode=meta.get("mode", "human"),
                deps=self._make_deps(log, meta.get("rag_mode", "at0")),
                tree=replayed.tree,
                session=None,  # rebuilt on demand by replaying the cells
                committed_node=replayed.committed_node,
                cells=list(replayed.cells),
                current_step=replayed.completed_steps,
                status="paused",
                surgeries=replayed.surgeries,
            )
            if replayed.pending:
                state.pending = refine.InterventionRequest(
                    run_id=run_id,
                    step_index=replayed.pending["step_index"],
                    report=dict(replayed.pending["report"]))
            handle.state = state
        else:
            log.close()
        with self._lock:
            self._runs[run_id] = handle

    # -- run control ---------------------------------------------------------

    def _make_deps(self, log: events.EventLog, rag_mode: str) -> mcts.EngineDeps:
        deps = self.deps_factory()
        deps.emit = log.emitter()
        deps.rag_mode = rag_mode
        return deps

    def create_run(self, body: dict) -> dict:
        if not isinstance(body, dict) or "task" not in body:
            raise ServiceError(400, "invalid_request",
                               "body must be an object with a task field",
                               path="task")
        mode = body.get("mode", "auto")
        if mode not in ("auto", "human"):
            raise ServiceError(400, "invalid_request",
                               f"unknown mode {mode!r}", path="mode")
        rag_mode = body.get("rag_mode", "at0")
        if rag_mode not in ("at0", "at3"):
            raise ServiceError(400, "invalid_request",
                               f"unknown rag_mode {rag_mode!r}", path="rag_mode")
        try:
            task = parse_suite(json.dumps([body["task"]]))[0]
        except SuiteSchemaError as exc:
            raise ServiceError(400, "invalid_request", str(exc),
                               path=exc.path.replace("tasks[0]", "task"))
        except SuiteError as exc:
            raise ServiceError(400, "invalid_request", str(exc), path="task")
        try:
            cfg = AgentConfig.from_dict(body.get("cfg") or {})
        except (TypeError, ValueError) as exc:
            raise ServiceError(400, "invalid_request", str(exc), path="cfg")

        run_id = uuid.uuid4().hex[:12]
        log_path, _ = self._paths(run_id)
        log = events.EventLog(run_id, path=log_path)
        self._write_meta(run_id, task, cfg, mode, rag_mode)
        deps = self._make_deps(log, rag_mode)
        try:
            state = refine.start_run(task, deps, cfg, mode=mode, run_id=run_id)
        except Exception as exc:
            log.close()
            raise ServiceError(503, "sandbox_unavailable",
                               f"could not open a sandbox session: {exc}")
        handle = _RunHandle(run_id, task, log, state)
        with self._lock:
            self._runs[run_id] = handle
        self._spawn_worker(handle)
        return {"run_id": run_id, "status": "running"}

    def _spawn_worker(self, handle: _RunHandle) -> None:
        worker = threading.Thread(target=self._drive, args=(handle,),
                                  name=f"run-{handle.run_id}", daemon=True)
        handle.worker = worker
        worker.start()

    def _drive(self, handle: _RunHandle) -> None:
        state = handle.state
        try:
            refine.advance(state,
                           should_stop=lambda: handle.cancel_requested)
        except Exception:
            logger.exception("run %s crashed", handle.run_id)
            if state.status not in _FINAL:
                refine.abandon(state)
        finally:
            if state.status in _FINAL:
                refine.release(state)
                handle.log.close()

    def _handle_for(self, run_id: str) -> _RunHandle:
        with self._lock:
            handle = self._runs.get(run_id)
        if handle is None:
            raise ServiceError(404, "not_found", f"no run {run_id!r}")
        return handle

    def run_view(self, run_id: str) -> dict:
        return self._handle_for(run_id).replayed().view()

    def list_runs(self) -> dict:
        with self._lock:
            handles = sorted(self._runs.values(), key=lambda h: h.run_id)
        return {"runs": [h.replayed().view() for h in handles]}

    def tree_view(self, run_id: str) -> dict:
        handle = self._handle_for(run_id)
        return {"run_id": run_id, "tree": handle.replayed().tree.dump()}

    def submit_edit(self, run_id: str, step_index: int, body: dict) -> dict:
        handle = self._handle_for(run_id)
        code = body.get("code") if isinstance(body, dict) else None
        if not isinstance(code, str) or not code.strip():
            raise ServiceError(400, "invalid_request",
                               "edit needs a non-empty code field",
                               path="code")
        with handle.lock:
            state = handle.state
            if state is None or state.status != "paused" or state.pending is None:
                raise ServiceError(409, "conflict",
                                   f"run {run_id} has no pending intervention")
            if state.pending.step_index != step_index:
                raise ServiceError(
                    409, "conflict",
                    f"pending intervention is for step "
                    f"{state.pending.step_index}, not {step_index}")
            edit = refine.HumanEdit(step_index=step_index, edited_code=code,
                                    note=body.get("note"))
            try:
                refine.apply_edit(state, edit)
            except refine.StateError as exc:
                raise ServiceError(409, "conflict", str(exc))
            accepted = state.status == "running"
            if accepted:
                self._spawn_worker(handle)
            return {
                "run_id": run_id,
                "accepted": accepted,
                "status": state.status,
            }

    def cancel_run(self, run_id: str) -> dict:
        handle = self._handle_for(run_id)
        with handle.lock:
            state = handle.state
            if state is None or state.status in _FINAL:
                status = state.status if state is not None else \
                    handle.replayed().status
                return {"run_id": run_id, "status": status}
            if state.status == "paused":
                refine.cancel(state)
                refine.release(state)
                handle.log.close()
                return {"run_id": run_id, "status": state.status}
            handle.cancel_requested = True
            return {"run_id": run_id, "status": "cancelling"}


# ---------------------------------------------------------------------------
# HTTP plumbing
# ---------------------------------------------------------------------------

_ROUTES = [
    ("POST", re.compile(r"^/runs$"), "create"),
    ("GET", re.compile(r"^/runs$"), "index"),
    ("GET", re.compile(r"^/runs/([0-9a-f]+)$"), "view"),
    ("GET", re.compile(r"^/runs/([0-9a-f]+)/events$"), "events"),
    ("GET", re.compile(r"^/runs/([0-9a-f]+)/tree$"), "tree"),
    ("POST", re.compile(r"^/runs/([0-9a-f]+)/interventions/(\d+)/edit$"),
     "edit"),
    ("POST", re.compile(r"^/runs/([0-9a-f]+)/cancel$"), "cancel"),
]


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "cellsmith"

    @property
    def service(self) -> AgentService:
        return self.server.service  # type: ignore[attr-defined]

    def log_message(self, format: str, *args: Any) -> None:
        logger.debug("%s " + format, self.address_string(), *args)

    # -- helpers -------------------------------------------------------------

    def _cors(self) -> None:
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")

    def _send_json(self, status: int, payload: dict) -> None:
        body = (jsonio.dumps_pretty(payload) + "\n").encode("utf-8")
        self.send_response(status)
        self._cors()
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error(self, error: ServiceError) -> None:
        self._send_json(error.status, error.payload())

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length > _MAX_BODY_BYTES:
            raise ServiceError(413, "invalid_request", "body too large")
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        try:
            return jsonio.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise ServiceError(400, "invalid_request",
                               f"body is not valid JSON: {exc}")

    # -- verb dispatch ---------------------------------------------------------

    def do_OPTIONS(self) -> None:  # noqa: N802 (http.server naming)
        self.send_response(204)
        self._cors()
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self) -> None:  # noqa: N802
        self._dispatch("GET")

    def do_POST(self) -> None:  # noqa: N802
        self._dispatch("POST")

    def _dispatch(self, verb: str) -> None:
        url = urlsplit(self.path)
        try:
            for method, pattern, name in _ROUTES:
                if method != verb:
                    continue
                match = pattern.match(url.path)
                if match:
                    getattr(self, f"_route_{name}")(match, url.query)
                    return
            raise ServiceError(404, "not_found", f"no route {verb} {url.path}")
        except ServiceError as error:
            self._send_error(error)
        except BrokenPipeError:
            pass  # client went away mid-stream
        except Exception as exc:
            logger.exception("unhandled error serving %s %s", verb, self.path)
            self._send_error(ServiceError(500, "internal", str(exc)))

    # -- routes ----------------------------------------------------------------

    def _route_create(self, match: re.Match, query: str) -> None:
        self._send_json(201, self.service.create_run(self._read_body()))

    def _route_index(self, match: re.Match, query: str) -> None:
        self._send_json(200, self.service.list_runs())

    def _route_view(self, match: re.Match, query: str) -> None:
        self._send_json(200, self.service.run_view(match.group(1)))

    def _route_tree(self, match: re.Match, query: str) -> None:
        self._send_json(200, self.service.tree_view(match.group(1)))

    def _route_edit(self, match: re.Match, query: str) -> None:
        body = self._read_body()
        self._send_json(200, self.service.submit_edit(
            match.group(1), int(match.group(2)), body))

    def _route_cancel(self, match: re.Match, query: str) -> None:
        self._send_json(200, self.service.cancel_run(match.group(1)))

    def _route_events(self, match: re.Match, query: str) -> None:
        run_id = match.group(1)
        handle = self.service._handle_for(run_id)
        params = parse_qs(query)
        try:
            from_seq = int(params.get("from", ["1"])[0])
        except ValueError:
            raise ServiceError(400, "invalid_request",
                               "from must be an integer", path="from")
        follow = params.get("follow", ["1"])[0] not in ("0", "false")
        self.send_response(200)
        self._cors()
        self.send_header("Content-Type", "application/x-ndjson; charset=utf-8")
        self.send_header("Cache-Control", "no-store")
        # Streaming: length unknown up front, so the connection closes to
        # mark the end of the body.
        self.send_header("Connection", "close")
        self.end_headers()
        if follow:
            stream = handle.log.tail(from_seq)
        else:
            stream = iter(handle.log.events_from(from_seq))
        try:
            for event in stream:
                line = jsonio.dumps_line(event.to_dict()) + "\n"
                self.wfile.write(line.encode("utf-8"))
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError):
            pass
        self.close_connection = True
