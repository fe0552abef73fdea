"""Append-only run event log and the replay fold over it.

Every observable thing a run does is recorded as one event with a
per-run strictly increasing sequence number.  The log is the source of
truth: ``replay_events`` folds a log back into the final run state and
search tree, and the live engine mutates its tree only through the same
functions the fold applies, so a replayed run matches the live one
byte-for-byte.  Persistence is one JSON record per line, identical to
the wire encoding, so a log file can be streamed to clients verbatim.
"""
from __future__ import annotations

import dataclasses
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

from . import jsonio, mcts
from .model import CellRecord, StepSpec, TaskSpec

__all__ = [
    "EVENT_KINDS",
    "RunEvent",
    "EventLog",
    "EventLogError",
    "ReplayedRun",
    "replay_events",
    "run_view",
    "view_of_run_state",
]

EVENT_KINDS = frozenset({
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
})

# Statuses a run can end in; anything else means the log is still open.
_FINAL_STATUSES = frozenset({"finished", "failed", "cancelled"})


class EventLogError(RuntimeError):
    """Corrupt or inconsistent event log."""


@dataclass(frozen=True)
class RunEvent:
    run_id: str
    seq: int
    ts: float
    kind: str
    payload: dict

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "seq": self.seq,
            "ts": self.ts,
            "kind": self.kind,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunEvent":
        try:
            event = cls(
                run_id=data["run_id"],
                seq=data["seq"],
                ts=data["ts"],
                kind=data["kind"],
                payload=data["payload"],
            )
        except (KeyError, TypeError) as exc:
            raise EventLogError(f"malformed event record: {exc}") from exc
        if event.kind not in EVENT_KINDS:
            raise EventLogError(f"unknown event kind {event.kind!r}")
        return event


class EventLog:
    """Thread-safe append-only log for one run, tailable by readers.

    Appends are serialized; ``seq`` starts at 1 and increments by one.
    When ``path`` is set, every event is flushed to disk as one JSON
    line before ``append`` returns.
    """

    def __init__(self, run_id: str, path: Optional[str] = None) -> None:
        self.run_id = run_id
        self.path = path
        self._events: list[RunEvent] = []
        self._cond = threading.Condition()
        self._closed = False
        self._file = open(path, "a", encoding="utf-8") if path else None

    # -- writing -----------------------------------------------------------

    def append(self, kind: str, payload: dict) -> RunEvent:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        with self._cond:
            if self._closed:
                raise EventLogError(f"event log for {self.run_id} is closed")
            event = RunEvent(run_id=self.run_id, seq=len(self._events) + 1,
                             ts=time.time(), kind=kind, payload=payload)
            self._events.append(event)
            if self._file is not None:
                self._file.write(jsonio.dumps_line(event.to_dict()) + "\n")
                self._file.flush()
            self._cond.notify_all()
        return event

    def emitter(self):
        """An ``emit(kind, payload)`` callable bound to this log."""
        return lambda kind, payload: self.append(kind, payload)

    def close(self) -> None:
        """Stop accepting events and wake any tailing readers."""
        with self._cond:
            self._closed = True
            if self._file is not None:
                self._file.close()
                self._file = None
            self._cond.notify_all()

    # -- reading -----------------------------------------------------------

    @property
    def last_seq(self) -> int:
        with self._cond:
            return len(self._events)

    def snapshot(self) -> list[RunEvent]:
        with self._cond:
            return list(self._events)

    def events_from(self, from_seq: int) -> list[RunEvent]:
        """All events with seq >= from_seq currently in the log."""
        with self._cond:
            start = max(0, from_seq - 1)
            return self._events[start:]

    def is_finished(self) -> bool:
        """True once a run_finished event is in the log or the log closed."""
        with self._cond:
            return self._closed or bool(
                self._events and self._events[-1].kind == "run_finished")

    def tail(self, from_seq: int = 1,
             poll_seconds: float = 0.5) -> Iterator[RunEvent]:
        """Yield events from ``from_seq`` onward, then follow the live log.

        Terminates after yielding a run_finished event or once the log is
        closed and drained.  Reconnecting with the last seen seq + 1 is
        gapless and duplicate-free because seq numbers are dense.
        """
        next_seq = max(1, from_seq)
        while True:
            with self._cond:
                while len(self._events) < next_seq and not self._closed:
                    self._cond.wait(timeout=poll_seconds)
                batch = self._events[next_seq - 1:]
                closed = self._closed
            for event in batch:
                yield event
                next_seq = event.seq + 1
                if event.kind == "run_finished":
                    return
            if closed and not batch:
                return

    # -- persistence -------------------------------------------------------

    @classmethod
    def load(cls, path: str, run_id: Optional[str] = None) -> "EventLog":
        """Rebuild a log from disk, reopened for further appends."""
        events: list[RunEvent] = []
        with open(path, encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = jsonio.loads(line)
                except ValueError as exc:
                    raise EventLogError(
                        f"{path}:{line_no}: not valid JSON: {exc}") from exc
                events.append(RunEvent.from_dict(record))
        for position, event in enumerate(events, start=1):
            if event.seq != position:
                raise EventLogError(
                    f"{path}: seq {event.seq} at position {position}; "
                    f"event sequence must be dense from 1")
        if run_id is not None and events and events[0].run_id != run_id:
            raise EventLogError(
                f"{path}: log belongs to run {events[0].run_id}, "
                f"expected {run_id}")
        log = cls(run_id or (events[0].run_id if events else ""), path=path)
        log._events = events
        return log


# ---------------------------------------------------------------------------
# Replay: fold a log back into run state
# ---------------------------------------------------------------------------


@dataclass
class ReplayedRun:
    """Run state reconstructed purely from an event log."""

    run_id: str
    status: str = "running"
    completed_steps: int = 0
    total_steps: Optional[int] = None
    cells: list[CellRecord] = field(default_factory=list)
    tree: mcts.SearchTree = field(default_factory=mcts.SearchTree)
    committed_node: int = 0
    pending: Optional[dict] = None
    last_seq: int = 0
    task: Optional[TaskSpec] = None
    surgeries: int = 0

    def view(self) -> dict:
        return run_view(
            run_id=self.run_id, status=self.status,
            completed_steps=self.completed_steps,
            total_steps=self.total_steps, cells=self.cells,
            pending=self.pending, last_seq=self.last_seq)


def _insert_definition_step(task: TaskSpec, raw: dict) -> TaskSpec:
    """Rebuild the task as surgery left it: the definition step goes in at
    its index and every later step shifts one place down."""
    new_step = StepSpec(index=raw["index"], instruction=raw["instruction"],
                        library_hints=tuple(raw["library_hints"]))
    index = new_step.index
    shifted = [dataclasses.replace(s, index=s.index + 1)
               for s in task.steps[index:]]
    steps = tuple(list(task.steps[:index]) + [new_step] + shifted)
    kind = "multi_turn" if len(steps) > 1 else task.kind
    return TaskSpec(id=task.id, kind=kind, libraries=task.libraries,
                    steps=steps)


def _apply_node_expanded(run: ReplayedRun, payload: dict) -> None:
    parent_id = payload["parent_id"]
    for child in payload["children"]:
        run.tree.add_child(
            parent_id,
            step_index=child["step_index"],
            code=child["code"],
            prior_p=child["prior_p"],
            status=child["status"],
            value_q=child["value_Q"],
            error=child["error"],
            node_id=child["node_id"],
        )
    run.tree.nodes[parent_id].status = "expanded"


def _apply_step_committed(run: ReplayedRun, payload: dict) -> None:
    if payload.get("parent_id") is not None:
        # Human edits become tree nodes at commit time; agent commits
        # reference nodes that already exist from node_expanded.
        run.tree.add_child(
            payload["parent_id"],
            step_index=payload["step_index"],
            code=payload["code"],
            prior_p=1.0,
            node_id=payload["node_id"],
        )
    run.cells.append(CellRecord(
        step_index=payload["step_index"], code=payload["code"],
        source=payload["source"]))
    if payload["node_id"] is not None:
        run.committed_node = payload["node_id"]
    run.completed_steps += 1


def apply_event(run: ReplayedRun, event: RunEvent) -> None:
    """Apply one event to the reconstruction; the fold step."""
    if event.seq <= run.last_seq:
        raise EventLogError(
            f"event seq {event.seq} not after {run.last_seq}; "
            f"events must be applied in order")
    run.last_seq = event.seq
    kind, payload = event.kind, event.payload
    if kind == "attempt":
        # The engine re-opens the committed node at the start of every
        # attempt so expansion targets it again.
        node = run.tree.nodes.get(run.committed_node)
        if node is not None and node.status == "expanded":
            node.status = "unexpanded"
    elif kind == "node_expanded":
        _apply_node_expanded(run, payload)
    elif kind == "reward":
        mcts.backpropagate(run.tree, payload["node_id"], payload["reward"])
    elif kind == "surgery":
        mcts.apply_surgery_to_tree(run.tree, payload["removed_node_id"])
        run.surgeries += 1
        if run.total_steps is not None:
            run.total_steps += 1
        if run.task is not None:
            run.task = _insert_definition_step(run.task, payload["new_step"])
    elif kind == "step_committed":
        _apply_step_committed(run, payload)
    elif kind == "intervention_requested":
        run.pending = {"step_index": payload["step_index"],
                       "report": payload["report"]}
        run.status = "paused"
    elif kind == "intervention_resolved":
        run.pending = None
        run.status = "running"
    elif kind == "run_finished":
        run.status = payload["status"]
        run.completed_steps = payload["completed_steps"]
        run.total_steps = payload["total_steps"]
        run.pending = None
    # step_started and execution carry no state transitions.


def replay_events(events: Iterable[RunEvent], *,
                  run_id: Optional[str] = None,
                  task: Optional[TaskSpec] = None) -> ReplayedRun:
    """Fold an ordered event stream into the final run state.

    Passing the run's original ``task`` lets the fold track the evolving
    step list (surgery inserts definition steps) and seed total_steps for
    runs that have not finished; the run_finished event carries the final
    counts authoritatively either way.
    """
    run: Optional[ReplayedRun] = None
    total = len(task.steps) if task is not None else None
    for event in events:
        if run is None:
            run = ReplayedRun(run_id=run_id or event.run_id,
                              total_steps=total, task=task)
        apply_event(run, event)
    if run is None:
        run = ReplayedRun(run_id=run_id or "", total_steps=total, task=task)
    return run


# ---------------------------------------------------------------------------
# Canonical state view (shared by the live service and replay)
# ---------------------------------------------------------------------------


def run_view(*, run_id: str, status: str, completed_steps: int,
             total_steps: Optional[int], cells: Iterable[CellRecord],
             pending: Optional[dict], last_seq: int) -> dict:
    return {
        "run_id": run_id,
        "status": status,
        "completed_steps": completed_steps,
        "total_steps": total_steps,
        "cells": [
            {"step_index": c.step_index, "code": c.code, "source": c.source}
            for c in cells
        ],
        "pending_intervention": pending,
        "last_seq": last_seq,
    }


def view_of_run_state(state, last_seq: int) -> dict:
    """The canonical view of a live ``refine.RunState``."""
    pending = None
    if state.pending is not None and state.pending.state == "pending":
        pending = {"step_index": state.pending.step_index,
                   "report": dict(state.pending.report)}
    return run_view(
        run_id=state.run_id, status=state.status,
        completed_steps=state.current_step,
        total_steps=len(state.task.steps), cells=state.cells,
        pending=pending, last_seq=last_seq)
