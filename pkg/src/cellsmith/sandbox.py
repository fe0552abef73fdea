"""Client side of the execution sandbox.

Each session owns one child interpreter process (the shim) and talks to
it over newline-delimited JSON on stdin/stdout.  Requests are strictly
serialized per session; timeouts are enforced twice — a cooperative
deadline inside the shim, and a client-side wall clock that kills the
process on a hard hang.
"""
from __future__ import annotations

import json
import queue
import subprocess
import sys
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import analysis

__all__ = [
    "PROTOCOL_VERSION",
    "RunnerConfig",
    "Frame",
    "Traceback",
    "ExecutionOutcome",
    "Session",
    "SandboxError",
    "SessionSpawnError",
    "SessionDeadError",
    "ProtocolError",
    "IntrospectionError",
    "open_session",
    "execute",
    "introspect_attrs",
    "introspect_names",
    "reset",
    "close",
    "replay_cells",
]

PROTOCOL_VERSION = "1"

_EOF = object()


class SandboxError(RuntimeError):
    pass


class SessionSpawnError(SandboxError):
    pass


class SessionDeadError(SandboxError):
    pass


class ProtocolError(SandboxError):
    pass


class IntrospectionError(SandboxError):
    def __init__(self, traceback: "Traceback") -> None:
        self.traceback = traceback
        super().__init__(f"{traceback.exception_type}: {traceback.message}")


@dataclass(frozen=True)
class RunnerConfig:
    """How to launch and talk to the guest runtime."""

    command: tuple[str, ...] = (sys.executable, "-m", "cellsmith.shim")
    handshake_timeout_ms: int = 15000
    default_timeout_ms: int = 30000


@dataclass(frozen=True)
class Frame:
    file: str
    line: int
    name: str
    text: str


@dataclass(frozen=True)
class Traceback:
    exception_type: str
    message: str
    frames: tuple[Frame, ...] = ()


@dataclass(frozen=True)
class ExecutionOutcome:
    status: str  # "pass" | "fail"
    stdout: str = ""
    stderr: str = ""
    traceback: Optional[Traceback] = None
    duration_ms: int = 0
    error_class: Optional[analysis.ErrorClass] = None

    def __post_init__(self) -> None:
        if self.status not in ("pass", "fail"):
            raise ValueError(f"bad status {self.status!r}")
        if (self.status == "fail") != (self.traceback is not None):
            raise ValueError("status=fail exactly when a traceback is present")
        if self.error_class is not None and self.status == "pass":
            raise ValueError("error_class only accompanies failures")


@dataclass
class Session:
    session_id: str
    process: subprocess.Popen
    protocol_version: str
    cell_counter: int = 0
    state: str = "live"  # "live" | "dead"
    _lines: "queue.Queue" = field(default_factory=queue.Queue, repr=False)
    _reader: Optional[threading.Thread] = field(default=None, repr=False)
    _request_counter: int = 0
    config: RunnerConfig = field(default_factory=RunnerConfig)


def _reader_loop(proc: subprocess.Popen, out: "queue.Queue") -> None:
    try:
        for line in proc.stdout:
            out.put(line)
    finally:
        out.put(_EOF)


def _next_id(session: Session) -> str:
    session._request_counter += 1
    return f"{session.session_id}-{session._request_counter}"


def _kill(session: Session) -> None:
    session.state = "dead"
    proc = session.process
    if proc.poll() is None:
        proc.kill()
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass


def _request(session: Session, payload: dict, timeout_s: float) -> dict:
    if session.state != "live":
        raise SessionDeadError(f"session {session.session_id} is dead")
    rid = _next_id(session)
    payload = {"id": rid, **payload}
    line = json.dumps(payload, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False) + "\n"
    try:
        session.process.stdin.write(line)
        session.process.stdin.flush()
    except (BrokenPipeError, OSError) as exc:
        _kill(session)
        raise SessionDeadError(f"session {session.session_id}: {exc}") from exc
    deadline = time.monotonic() + timeout_s
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            _kill(session)
            raise TimeoutError(f"no response to {payload['op']} within {timeout_s}s")
        try:
            raw = session._lines.get(timeout=remaining)
        except queue.Empty:
            continue
        if raw is _EOF:
            _kill(session)
            raise SessionDeadError(
                f"session {session.session_id} process exited mid-request")
        try:
            response = json.loads(raw)
        except json.JSONDecodeError as exc:
            _kill(session)
            raise ProtocolError(f"undecodable response line: {exc}") from exc
        if response.get("id") != rid:
            # A stale response (e.g. from an earlier timed-out request)
            # would violate strict serialization; treat as fatal.
            _kill(session)
            raise ProtocolError(
                f"response id {response.get('id')!r} does not match request {rid!r}")
        return response


def _parse_traceback(raw: Optional[dict]) -> Optional[Traceback]:
    if not raw:
        return None
    frames = tuple(
        Frame(file=f.get("file", ""), line=int(f.get("line", 0)),
              name=f.get("name", ""), text=f.get("text", ""))
        for f in raw.get("frames", ())
    )
    return Traceback(exception_type=raw.get("etype", ""),
                     message=raw.get("evalue", ""), frames=frames)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def open_session(config: Optional[RunnerConfig] = None) -> Session:
    """Spawn a guest runtime and complete the version handshake."""
    config = config or RunnerConfig()
    try:
        proc = subprocess.Popen(
            list(config.command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            encoding="utf-8",
        )
    except OSError as exc:
        raise SessionSpawnError(f"cannot launch runner {config.command}: {exc}") from exc
    session = Session(
        session_id=uuid.uuid4().hex[:12],
        process=proc,
        protocol_version="",
        config=config,
    )
    reader = threading.Thread(target=_reader_loop, args=(proc, session._lines),
                              daemon=True)
    reader.start()
    session._reader = reader
    try:
        response = _request(session, {"op": "hello"},
                            config.handshake_timeout_ms / 1000.0)
    except SandboxError:
        _kill(session)
        raise
    except TimeoutError as exc:
        _kill(session)
        raise SessionSpawnError(f"handshake timeout: {exc}") from exc
    version = response.get("version")
    if version != PROTOCOL_VERSION:
        _kill(session)
        raise ProtocolError(
            f"protocol version mismatch: client speaks {PROTOCOL_VERSION!r}, "
            f"runner speaks {version!r}")
    session.protocol_version = version
    return session


def execute(session: Session, code: str,
            timeout_ms: Optional[int] = None) -> ExecutionOutcome:
    """Run one cell in the session's persistent namespace."""
    timeout_ms = timeout_ms or session.config.default_timeout_ms
    session.cell_counter += 1
    wall_s = timeout_ms / 1000.0 * 1.5 + 0.5
    try:
        response = _request(
            session, {"op": "exec", "code": code, "deadline_ms": timeout_ms}, wall_s)
    except TimeoutError:
        # Hard hang: the shim's cooperative deadline never fired.
        tb = Traceback(
            exception_type="TimeoutError",
            message=f"execution exceeded {timeout_ms} ms (process killed)")
        return ExecutionOutcome(
            status="fail", traceback=tb, duration_ms=timeout_ms,
            error_class=analysis.classify_error(tb.exception_type, tb.message))
    tb = _parse_traceback(response.get("traceback"))
    status = "fail" if tb is not None else "pass"
    error_class = None
    if tb is not None:
        error_class = analysis.classify_error(tb.exception_type, tb.message)
    return ExecutionOutcome(
        status=status,
        stdout=response.get("stdout", ""),
        stderr=response.get("stderr", ""),
        traceback=tb,
        duration_ms=int(response.get("duration_ms", 0)),
        error_class=error_class,
    )


def introspect_attrs(session: Session, expr: str) -> list[str]:
    """Evaluate *expr* in the session and list the object's attributes."""
    response = _request(session, {"op": "introspect_attrs", "expr": expr},
                        session.config.default_timeout_ms / 1000.0)
    if response.get("status") != "ok":
        tb = _parse_traceback(response.get("traceback"))
        raise IntrospectionError(tb or Traceback("ProtocolError", "no traceback"))
    return list(response.get("names", []))


def introspect_names(session: Session) -> list[str]:
    """List user-defined top-level names in the session."""
    response = _request(session, {"op": "introspect_names"},
                        session.config.default_timeout_ms / 1000.0)
    if response.get("status") != "ok":
        tb = _parse_traceback(response.get("traceback"))
        raise IntrospectionError(tb or Traceback("ProtocolError", "no traceback"))
    return list(response.get("names", []))


def reset(session: Session) -> None:
    """Clear user-defined names; the process and its session id survive."""
    response = _request(session, {"op": "reset"},
                        session.config.default_timeout_ms / 1000.0)
    if response.get("status") != "ok":
        raise ProtocolError(f"reset failed: {response}")


def close(session: Session) -> None:
    """Shut the runner down; safe to call repeatedly."""
    if session.state != "live":
        return
    try:
        _request(session, {"op": "shutdown"}, 2.0)
    except (SandboxError, TimeoutError):
        pass
    session.state = "dead"
    proc = session.process
    try:
        proc.wait(timeout=2)
    except subprocess.TimeoutExpired:
        proc.kill()
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass


def replay_cells(config: RunnerConfig, cells: Sequence[str],
                 timeout_ms: Optional[int] = None) -> tuple[Session, list[ExecutionOutcome]]:
    """Open a fresh session and replay *cells* in order.

    Used to fork evaluation sessions from a node's committed program.
    Stops at the first failure (later cells would run in a corrupt state).
    """
    session = open_session(config)
    outcomes: list[ExecutionOutcome] = []
    for cell in cells:
        outcome = execute(session, cell, timeout_ms)
        outcomes.append(outcome)
        if outcome.status != "pass":
            break
    return session, outcomes
