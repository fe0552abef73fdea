"""Guest-runtime shim: executes code cells for the sandbox client.

Runs as a child process speaking newline-delimited JSON over stdin/stdout
(protocol version "1").  Each request line gets exactly one response line
with a matching id.  Guest prints are captured into the response — the
shim itself never writes non-protocol bytes to stdout.

Run with ``python -m cellsmith.shim``.
"""
from __future__ import annotations

import io
import json
import signal
import sys
import threading
import time
import traceback as tb_module
from typing import Any, Optional, TextIO

PROTOCOL_VERSION = "1"
MAX_FRAMES = 20
STREAM_CAP_BYTES = 1 << 20
TRUNCATION_MARKER = "\n...[output truncated]"

_SYNTAX_ERRORS = (SyntaxError, IndentationError, TabError)


class _DeadlineExceeded(BaseException):
    """Raised by the alarm handler; BaseException so guest `except Exception`
    blocks cannot swallow the deadline."""


class _CappedBuffer(io.TextIOBase):
    """Write sink that stops accumulating past a byte budget."""

    def __init__(self, cap: int = STREAM_CAP_BYTES) -> None:
        self._parts: list[str] = []
        self._size = 0
        self._cap = cap
        self.truncated = False

    def write(self, text: str) -> int:
        if self._size < self._cap:
            room = self._cap - self._size
            piece = text[:room]
            self._parts.append(piece)
            self._size += len(piece)
            if len(piece) < len(text):
                self.truncated = True
        else:
            self.truncated = self.truncated or bool(text)
        return len(text)

    def writable(self) -> bool:
        return True

    def value(self) -> str:
        text = "".join(self._parts)
        return text + TRUNCATION_MARKER if self.truncated else text


class _Discard(io.TextIOBase):
    def write(self, text: str) -> int:
        return len(text)

    def writable(self) -> bool:
        return True


def _frames_from(tb: Any, skip_file: str) -> list[dict]:
    frames = []
    for frame in tb_module.extract_tb(tb):
        if frame.filename == skip_file:
            continue
        frames.append({
            "file": frame.filename,
            "line": frame.lineno,
            "name": frame.name,
            "text": frame.line or "",
        })
    return frames[-MAX_FRAMES:]


def _traceback_payload(exc: BaseException) -> dict:
    if isinstance(exc, _SYNTAX_ERRORS):
        frame = {
            "file": exc.filename or "<cell>",
            "line": exc.lineno or 0,
            "name": "<module>",
            "text": (exc.text or "").rstrip("\n"),
        }
        return {
            "etype": type(exc).__name__,
            "evalue": str(exc),
            "frames": [frame],
        }
    return {
        "etype": type(exc).__name__,
        "evalue": str(exc),
        "frames": _frames_from(exc.__traceback__, __file__),
    }


class Shim:
    def __init__(self) -> None:
        self.namespace: dict[str, Any] = {
            "__name__": "__main__",
            "__builtins__": __builtins__,
        }
        self._baseline = frozenset(self.namespace)
        self._alarm_supported = hasattr(signal, "setitimer")

    # -- request handlers ---------------------------------------------------

    def handle(self, request: dict) -> dict:
        op = request.get("op")
        rid = request.get("id")
        t0 = time.monotonic()
        try:
            if op == "hello":
                body = {"status": "ok", "version": PROTOCOL_VERSION}
            elif op == "exec":
                body = self._exec(request.get("code", ""),
                                  request.get("deadline_ms"))
            elif op == "introspect_attrs":
                body = self._introspect_attrs(request.get("expr", ""))
            elif op == "introspect_names":
                body = {"status": "ok", "names": self._user_names()}
            elif op == "reset":
                self._reset()
                body = {"status": "ok"}
            elif op == "shutdown":
                body = {"status": "ok", "_shutdown": True}
            else:
                body = {
                    "status": "error",
                    "traceback": {
                        "etype": "ProtocolError",
                        "evalue": f"unknown op {op!r}",
                        "frames": [],
                    },
                }
        except Exception as exc:  # defensive: a handler bug must not kill the loop
            body = {"status": "error", "traceback": _traceback_payload(exc)}
        body["id"] = rid
        body["duration_ms"] = int((time.monotonic() - t0) * 1000)
        return body

    def _exec(self, code: str, deadline_ms: Optional[int]) -> dict:
        stdout = _CappedBuffer()
        stderr = _CappedBuffer()
        old_out, old_err = sys.stdout, sys.stderr
        sys.stdout, sys.stderr = stdout, stderr
        failure: Optional[dict] = None
        timer_set = False

        def on_alarm(signum: int, frame: Any) -> None:
            raise _DeadlineExceeded()

        try:
            compiled = compile(code, "<cell>", "exec")
        except _SYNTAX_ERRORS as exc:
            sys.stdout, sys.stderr = old_out, old_err
            return {
                "status": "error",
                "stdout": stdout.value(),
                "stderr": stderr.value(),
                "traceback": _traceback_payload(exc),
            }
        use_alarm = (deadline_ms and self._alarm_supported
                     and threading.current_thread() is threading.main_thread())
        try:
            if use_alarm:
                old_handler = signal.signal(signal.SIGALRM, on_alarm)
                signal.setitimer(signal.ITIMER_REAL, deadline_ms / 1000.0)
                timer_set = True
            try:
                exec(compiled, self.namespace)
            except _DeadlineExceeded:
                failure = {
                    "etype": "TimeoutError",
                    "evalue": f"cell exceeded deadline of {deadline_ms} ms",
                    "frames": [],
                }
            except BaseException as exc:  # totality: nothing escapes exec
                failure = _traceback_payload(exc)
        finally:
            if timer_set:
                signal.setitimer(signal.ITIMER_REAL, 0.0)
                signal.signal(signal.SIGALRM, old_handler)
            sys.stdout, sys.stderr = old_out, old_err
        body: dict = {
            "status": "error" if failure else "ok",
            "stdout": stdout.value(),
            "stderr": stderr.value(),
        }
        if failure:
            body["traceback"] = failure
        return body

    def _introspect_attrs(self, expr: str) -> dict:
        try:
            obj = eval(compile(expr, "<introspect>", "eval"), self.namespace)
            names = sorted(dir(obj))
        except BaseException as exc:
            return {"status": "error", "traceback": _traceback_payload(exc)}
        return {"status": "ok", "names": names}

    def _user_names(self) -> list[str]:
        return sorted(
            name for name in self.namespace
            if name not in self._baseline and not name.startswith("__")
        )

    def _reset(self) -> None:
        for name in list(self.namespace):
            if name not in self._baseline:
                del self.namespace[name]


def serve_protocol(stdin: Optional[TextIO] = None,
                   stdout: Optional[TextIO] = None) -> None:
    """Serve protocol requests line by line until shutdown or EOF."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    # Guest code must not be able to write to the protocol stream, even
    # outside exec: hand the real stream to the loop and leave sys.stdout
    # pointing at a discard buffer between requests.
    if stdout is sys.stdout:
        sys.stdout = _Discard()
    shim = Shim()
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request must be an object")
        except Exception as exc:
            response = {
                "id": None,
                "status": "error",
                "traceback": {
                    "etype": "ProtocolError",
                    "evalue": f"malformed request line: {exc}",
                    "frames": [],
                },
                "duration_ms": 0,
            }
            _write(stdout, response)
            continue
        response = shim.handle(request)
        shutdown = response.pop("_shutdown", False)
        _write(stdout, response)
        if shutdown:
            return


def _write(stream: TextIO, obj: dict) -> None:
    stream.write(json.dumps(obj, sort_keys=True, separators=(",", ":"),
                            ensure_ascii=False) + "\n")
    stream.flush()


def main() -> None:
    serve_protocol()


if __name__ == "__main__":
    main()
