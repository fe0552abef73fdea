"""Sandbox client: sessions, timeouts, introspection, replay."""
from __future__ import annotations

import contextlib
import sys
import time

import pytest

from cellsmith import sandbox
from cellsmith.sandbox import (
    ExecutionOutcome,
    IntrospectionError,
    ProtocolError,
    RunnerConfig,
    SessionDeadError,
    SessionSpawnError,
    Traceback,
    close,
    execute,
    introspect_attrs,
    introspect_names,
    open_session,
    replay_cells,
    reset,
)


@contextlib.contextmanager
def session_scope(config=None):
    session = open_session(config)
    try:
        yield session
    finally:
        close(session)


def test_open_session_handshake_and_close():
    with session_scope() as session:
        assert session.protocol_version == sandbox.PROTOCOL_VERSION
        assert session.state == "live"
        assert session.process.poll() is None
    assert session.state == "dead"
    assert session.process.poll() is not None
    close(session)  # idempotent
    with pytest.raises(SessionDeadError):
        execute(session, "x = 1")


def test_namespace_persists_across_cells():
    with session_scope() as session:
        assert execute(session, "x = 20").status == "pass"
        outcome = execute(session, "print(x * 2 + 2)")
        assert outcome.status == "pass"
        assert outcome.stdout == "42\n"
        assert session.cell_counter == 2


def test_failure_is_classified_and_session_survives():
    with session_scope() as session:
        outcome = execute(session, "print(startDate)")
        assert outcome.status == "fail"
        assert outcome.traceback.exception_type == "NameError"
        assert "startDate" in outcome.traceback.message
        assert outcome.error_class.label == "undefined_variable"
        # the failure does not corrupt the session
        assert execute(session, "y = 5").status == "pass"
        assert execute(session, "print(y)").stdout == "5\n"


def test_syntax_error_classified():
    with session_scope() as session:
        outcome = execute(session, "def broken(:")
        assert outcome.status == "fail"
        assert outcome.error_class.label == "syntax"
        assert outcome.traceback.frames[0].file == "<cell>"


def test_attribute_error_classified_api_hallucination():
    with session_scope() as session:
        execute(session, "value = 3")
        outcome = execute(session, "value.frobnicate()")
        assert outcome.status == "fail"
        assert outcome.traceback.exception_type == "AttributeError"
        assert outcome.error_class.label == "api_hallucination"


def test_cooperative_timeout_keeps_session_alive():
    with session_scope() as session:
        t0 = time.monotonic()
        outcome = execute(session, "while True:\n    pass", timeout_ms=500)
        elapsed = time.monotonic() - t0
        assert outcome.status == "fail"
        assert outcome.traceback.exception_type == "TimeoutError"
        assert "500" in outcome.traceback.message
        assert elapsed < 1.0  # cooperative deadline, well under the wall clock
        assert session.state == "live"
        assert execute(session, "print('ok')").stdout == "ok\n"


def test_hard_hang_kills_process():
    # A call-free try/except loop never reaches an eval-breaker check on
    # this interpreter, so the in-guest deadline cannot fire; the client
    # wall clock must kill the process instead.
    hang = "while True:\n    try:\n        pass\n    except Exception:\n        pass"
    with session_scope() as session:
        t0 = time.monotonic()
        outcome = execute(session, hang, timeout_ms=500)
        elapsed = time.monotonic() - t0
        assert outcome.status == "fail"
        assert outcome.traceback.exception_type == "TimeoutError"
        assert "process killed" in outcome.traceback.message
        assert elapsed < 2.0  # 0.5s * 1.5 + 0.5s wall budget, plus slack
        assert session.state == "dead"
    with pytest.raises(SessionDeadError):
        execute(session, "x = 1")


def test_introspection():
    with session_scope() as session:
        execute(session, "import math\nradius = 2")
        names = introspect_names(session)
        assert names == ["math", "radius"]
        attrs = introspect_attrs(session, "math")
        assert "sqrt" in attrs and "pi" in attrs
        with pytest.raises(IntrospectionError) as err:
            introspect_attrs(session, "no_such_object")
        assert err.value.traceback.exception_type == "NameError"


def test_reset_clears_names_but_keeps_process():
    with session_scope() as session:
        execute(session, "a = 1\nb = 2")
        pid = session.process.pid
        reset(session)
        assert introspect_names(session) == []
        assert session.process.pid == pid
        assert session.state == "live"
        outcome = execute(session, "print(a)")
        assert outcome.status == "fail"
        assert outcome.traceback.exception_type == "NameError"


def test_protocol_version_mismatch(tmp_path):
    fake = tmp_path / "fake_shim.py"
    fake.write_text(
        "import json, sys\n"
        "for line in sys.stdin:\n"
        "    req = json.loads(line)\n"
        "    print(json.dumps({'id': req['id'], 'status': 'ok',\n"
        "                      'version': '99', 'duration_ms': 0}))\n"
        "    sys.stdout.flush()\n"
    )
    config = RunnerConfig(command=(sys.executable, str(fake)))
    with pytest.raises(ProtocolError, match="'1'.*'99'"):
        open_session(config)


def test_spawn_failure():
    config = RunnerConfig(command=("/nonexistent-binary-q7x",))
    with pytest.raises(SessionSpawnError):
        open_session(config)


def test_garbage_output_is_protocol_error(tmp_path):
    fake = tmp_path / "garbage_shim.py"
    fake.write_text(
        "import sys\n"
        "sys.stdin.readline()\n"
        "print('this is not json')\n"
        "sys.stdout.flush()\n"
        "sys.stdin.read()\n"
    )
    config = RunnerConfig(command=(sys.executable, str(fake)))
    with pytest.raises(ProtocolError):
        open_session(config)


def test_replay_cells_determinism():
    cells = [
        "import random\nrandom.seed(7)\nx = random.random()",
        "print(f'{x:.12f}')",
    ]
    session_a, outcomes_a = replay_cells(RunnerConfig(), cells)
    session_b, outcomes_b = replay_cells(RunnerConfig(), cells)
    try:
        assert [o.status for o in outcomes_a] == ["pass", "pass"]
        assert outcomes_a[1].stdout == outcomes_b[1].stdout
    finally:
        close(session_a)
        close(session_b)


def test_replay_cells_stops_at_first_failure():
    cells = ["a = 1", "b = undefined_name", "c = 3"]
    session, outcomes = replay_cells(RunnerConfig(), cells)
    try:
        assert len(outcomes) == 2
        assert outcomes[0].status == "pass"
        assert outcomes[1].status == "fail"
        # the session is still usable; the failed cell simply ends replay
        assert introspect_names(session) == ["a"]
    finally:
        close(session)


def test_outcome_validation():
    tb = Traceback(exception_type="ValueError", message="x")
    with pytest.raises(ValueError):
        ExecutionOutcome(status="odd")
    with pytest.raises(ValueError):
        ExecutionOutcome(status="fail")  # fail requires a traceback
    with pytest.raises(ValueError):
        ExecutionOutcome(status="pass", traceback=tb)


def test_stdout_stderr_capture():
    with session_scope() as session:
        outcome = execute(
            session,
            "import sys\nprint('to out')\nsys.stderr.write('to err\\n')")
        assert outcome.status == "pass"
        assert outcome.stdout == "to out\n"
        assert outcome.stderr == "to err\n"
        assert outcome.duration_ms >= 0
