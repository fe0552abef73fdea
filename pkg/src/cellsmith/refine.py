"""Per-step attempt loop: retry with targeted hints, pause for humans.

Each step gets up to ``max_attempts`` generate→execute→classify→hint
cycles.  Undefined-variable failures are structural, not sampling noise,
so they route to tree surgery *before* consuming an attempt.  When the
budget runs out: auto mode marks the run failed; human mode pauses the
run behind an intervention request, and an edit that executes cleanly is
committed verbatim (human code bypasses search scoring).
"""
from __future__ import annotations

import re
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from . import analysis, llm, mcts, sandbox
from .model import AgentConfig, CellRecord, SolutionProgram, StepSpec, TaskSpec

__all__ = [
    "InterventionRequest",
    "HumanEdit",
    "AttemptRecord",
    "StepResult",
    "RunState",
    "StateError",
    "start_run",
    "advance",
    "attempt_step",
    "apply_edit",
    "chat_history_context",
    "cancel",
    "abandon",
    "release",
]

MAX_SURGERIES_PER_RUN = 5

_MISSING_ATTR_RE = re.compile(r"no attribute '([^']+)'")


class StateError(RuntimeError):
    """Operation applied to a run in the wrong state."""


@dataclass
class HumanEdit:
    step_index: int
    edited_code: str
    note: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.edited_code or not self.edited_code.strip():
            raise ValueError("edited_code must be non-empty")


@dataclass
class InterventionRequest:
    run_id: str
    step_index: int
    report: dict
    state: str = "pending"  # pending | resolved | abandoned


@dataclass
class AttemptRecord:
    attempt_number: int
    code: str
    error_summary: str
    hint: Optional[analysis.FixHint] = None


@dataclass(frozen=True)
class StepResult:
    status: str  # passed | failed | paused | surgered
    node_id: Optional[int]
    attempts_used: int


@dataclass
class RunState:
    run_id: str
    task: TaskSpec
    cfg: AgentConfig
    mode: str  # auto | human
    deps: mcts.EngineDeps
    tree: mcts.SearchTree
    session: Optional[sandbox.Session]
    committed_node: int = 0
    cells: list[CellRecord] = field(default_factory=list)
    current_step: int = 0
    status: str = "running"  # running | paused | finished | failed | cancelled
    pending: Optional[InterventionRequest] = None
    history: dict[int, list[AttemptRecord]] = field(default_factory=dict)
    edits: list[HumanEdit] = field(default_factory=list)
    surgeries: int = 0

    @property
    def emit(self) -> Callable[[str, dict], None]:
        return self.deps.emit

    def solution(self) -> SolutionProgram:
        return SolutionProgram(
            task_id=self.task.id,
            cells=tuple(self.cells),
            completed_steps=self.current_step,
            total_steps=len(self.task.steps),
        )


def start_run(task: TaskSpec, deps: mcts.EngineDeps, cfg: AgentConfig,
              mode: str = "auto", run_id: Optional[str] = None) -> RunState:
    if mode not in ("auto", "human"):
        raise ValueError(f"unknown mode {mode!r}")
    session = sandbox.open_session(deps.runner)
    return RunState(
        run_id=run_id or uuid.uuid4().hex[:12],
        task=task, cfg=cfg, mode=mode, deps=deps,
        tree=mcts.SearchTree(), session=session,
    )


def _ensure_session(state: RunState) -> sandbox.Session:
    """Main session, rebuilt (committed cells replayed) if it died."""
    if state.session is not None and state.session.state == "live":
        return state.session
    if state.session is not None:
        sandbox.close(state.session)
    session, outcomes = sandbox.replay_cells(
        state.deps.runner, [c.code for c in state.cells],
        state.deps.exec_timeout_ms)
    if len(outcomes) < len(state.cells) or any(
            o.status != "pass" for o in outcomes):
        sandbox.close(session)
        raise sandbox.SessionDeadError(
            "committed cells no longer replay cleanly")
    state.session = session
    return session


def _commit(state: RunState, step_index: int, code: str, source: str,
            node_id: Optional[int],
            parent_id: Optional[int] = None) -> None:
    state.cells.append(CellRecord(step_index=step_index, code=code, source=source))
    if node_id is not None:
        state.committed_node = node_id
    state.current_step += 1
    payload = {
        "step_index": step_index, "node_id": node_id, "code": code,
        "source": source,
    }
    if parent_id is not None:
        payload["parent_id"] = parent_id
    state.emit("step_committed", payload)


def _finish(state: RunState, status: str) -> None:
    state.status = status
    state.emit("run_finished", {
        "status": status,
        "completed_steps": state.current_step,
        "total_steps": len(state.task.steps),
    })


def advance(state: RunState,
            should_stop: Optional[Callable[[], bool]] = None) -> RunState:
    """Drive the run until it finishes, fails, or pauses for a human.

    ``should_stop`` is polled between steps; when it returns True the run
    is cancelled at the next step boundary (a step in flight completes).
    """
    while state.status == "running":
        if should_stop is not None and should_stop():
            cancel(state)
            break
        if state.current_step >= len(state.task.steps):
            _finish(state, "finished")
            break
        step = state.task.steps[state.current_step]
        result = attempt_step(state, step, state.deps, state.cfg, state.mode)
        if result.status == "surgered":
            continue  # same index, new definition step, fresh budget
        if result.status == "passed":
            continue
        if result.status == "paused":
            break
        _finish(state, "failed")
        break
    return state


# ---------------------------------------------------------------------------
# The attempt loop
# ---------------------------------------------------------------------------


def _hint_dict(hint: Optional[analysis.FixHint]) -> Optional[dict]:
    return {"kind": hint.kind, "payload": hint.payload} if hint else None


def _introspect_for(state: RunState, code: str, message: str) -> Optional[list[str]]:
    """After an AttributeError, list the receiver's real attributes."""
    match = _MISSING_ATTR_RE.search(message)
    if not match:
        return None
    receiver = analysis.find_receiver_expr(code, match.group(1))
    if not receiver:
        return None
    try:
        return sandbox.introspect_attrs(_ensure_session(state), receiver)
    except (sandbox.SandboxError, TimeoutError):
        return None


def _failure_hint(state: RunState, code: str,
                  outcome: sandbox.ExecutionOutcome) -> analysis.FixHint:
    introspection = None
    if outcome.error_class and outcome.error_class.label == "api_hallucination":
        introspection = _introspect_for(
            state, code, outcome.traceback.message if outcome.traceback else "")
    return analysis.suggest_fix(outcome, introspection)


def _exemplar_failure(state: RunState, new_ids: list[int]
                      ) -> Optional[tuple[int, str, sandbox.ExecutionOutcome]]:
    for nid in new_ids:
        node = state.tree.nodes[nid]
        if node.status == "terminal_fail":
            etype, _, message = (node.error or "").partition(": ")
            tb = sandbox.Traceback(exception_type=etype, message=message)
            outcome = sandbox.ExecutionOutcome(
                status="fail", traceback=tb,
                error_class=analysis.classify_error(etype, message))
            return nid, node.code, outcome
    return None


def _try_surgery(state: RunState, exemplar_id: int, code: str,
                 outcome: sandbox.ExecutionOutcome) -> bool:
    """Route an undefined-variable failure to tree surgery. True if applied."""
    if state.surgeries >= MAX_SURGERIES_PER_RUN:
        return False
    known = analysis.bound_names(state.tree.program(state.committed_node))
    try:
        names = analysis.find_undefined_names(code, known=known)
    except SyntaxError:
        names = set()
    if not names:
        names = set(analysis.undefined_names_from_message(
            outcome.traceback.message if outcome.traceback else ""))
        names -= known
    if not names:
        return False
    step_index = state.tree.nodes[exemplar_id].step_index
    new_task, new_step = mcts.surgery_undefined(
        state.tree, exemplar_id, names, state.task)
    if new_step is None:
        return False
    state.task = new_task
    state.surgeries += 1
    state.emit("surgery", {
        "removed_node_id": exemplar_id,
        "step_index": step_index,
        "undefined_names": sorted(names),
        "new_step": {
            "index": new_step.index,
            "instruction": new_step.instruction,
            "library_hints": list(new_step.library_hints),
        },
    })
    return True


def attempt_step(state: RunState, step: StepSpec, deps: mcts.EngineDeps,
                 cfg: AgentConfig, mode: str = "auto") -> StepResult:
    """Run the generate→execute→classify→hint→regenerate loop for one step."""
    state.emit("step_started", {
        "step_index": step.index, "instruction": step.instruction,
    })
    history = state.history.setdefault(step.index, [])
    attempts = 0
    session_replayed = False
    attempt_emitted = False
    while attempts < cfg.max_attempts:
        if not attempt_emitted:
            last_hint = history[-1].hint if history else None
            state.emit("attempt", {
                "step_index": step.index,
                "attempt_number": attempts + 1,
                "hint": _hint_dict(last_hint),
            })
            attempt_emitted = True
        context = chat_history_context(state, step.index)
        committed = state.tree.nodes[state.committed_node]
        if committed.status == "expanded":
            # Re-open the node for another attempt at this step.  The next
            # node_expanded event restores "expanded", so replayed trees
            # only ever see the post-expansion state.
            committed.status = "unexpanded"
        leaf = mcts.select(state.tree, cfg, from_node=state.committed_node)
        try:
            new_ids = mcts.expand(state.tree, leaf, state.task, deps, cfg,
                                  extra_context=context)
        except sandbox.SandboxError as exc:
            if not session_replayed:
                session_replayed = True
                continue  # one free retry per step on sandbox death
            raise mcts.ExpansionError(f"sandbox failed twice: {exc}") from exc
        survivors = [nid for nid in new_ids
                     if state.tree.nodes[nid].status == "unexpanded"]
        if survivors:
            for nid in sorted(survivors):
                reward = mcts.evaluate(state.tree, nid, state.task, deps, cfg)
                mcts.backpropagate(state.tree, nid, reward)
            best = min(
                survivors,
                key=lambda nid: (-state.tree.nodes[nid].value_Q,
                                 -state.tree.nodes[nid].prior_p, nid))
            code = state.tree.nodes[best].code
            try:
                outcome = sandbox.execute(_ensure_session(state), code,
                                          deps.exec_timeout_ms)
            except sandbox.SessionDeadError:
                if session_replayed:
                    raise
                session_replayed = True
                continue
            state.emit("execution", {
                "step_index": step.index, "phase": "commit",
                "status": outcome.status,
                "exception_type": (outcome.traceback.exception_type
                                   if outcome.traceback else None),
                "error_class": (outcome.error_class.label
                                if outcome.error_class else None),
            })
            if outcome.status == "pass":
                _commit(state, step.index, code, "agent", best)
                return StepResult("passed", best, attempts + 1)
            # Filter said pass but the main session disagreed
            # (nondeterministic guest code); treat as a failed attempt.
            hint = _failure_hint(state, code, outcome)
            history.append(AttemptRecord(attempts + 1, code,
                                         _summary(outcome), hint))
            attempts += 1
            attempt_emitted = False
            continue
        exemplar = _exemplar_failure(state, new_ids)
        if exemplar is not None:
            exemplar_id, code, outcome = exemplar
            if (outcome.error_class
                    and outcome.error_class.label == "undefined_variable"
                    and _try_surgery(state, exemplar_id, code, outcome)):
                return StepResult("surgered", None, attempts)
            hint = _failure_hint(state, code, outcome)
            history.append(AttemptRecord(attempts + 1, code,
                                         _summary(outcome), hint))
        else:
            history.append(AttemptRecord(attempts + 1, "",
                                         "no candidates produced code", None))
        attempts += 1
        attempt_emitted = False
    # Budget exhausted.
    if mode == "human":
        last = history[-1] if history else None
        state.pending = InterventionRequest(
            run_id=state.run_id,
            step_index=step.index,
            report={
                "instruction": step.instruction,
                "failed_code": last.code if last else "",
                "error": last.error_summary if last else "",
                "attempts_used": attempts,
            },
        )
        state.status = "paused"
        state.emit("intervention_requested", {
            "step_index": step.index, "report": dict(state.pending.report),
        })
        return StepResult("paused", None, attempts)
    return StepResult("failed", None, attempts)


def _summary(outcome: sandbox.ExecutionOutcome) -> str:
    if outcome.traceback is None:
        return "pass"
    return f"{outcome.traceback.exception_type}: {outcome.traceback.message}"


# ---------------------------------------------------------------------------
# Human intervention
# ---------------------------------------------------------------------------


def apply_edit(state: RunState, edit: HumanEdit) -> RunState:
    """Execute a human edit for the paused step; commit it if it passes."""
    if state.status != "paused" or state.pending is None:
        raise StateError(f"run {state.run_id} is not paused")
    if edit.step_index != state.pending.step_index:
        raise StateError(
            f"run is paused on step {state.pending.step_index}, "
            f"edit targets step {edit.step_index}")
    outcome = sandbox.execute(_ensure_session(state), edit.edited_code,
                              state.deps.exec_timeout_ms)
    state.emit("execution", {
        "step_index": edit.step_index, "phase": "edit",
        "status": outcome.status,
        "exception_type": (outcome.traceback.exception_type
                           if outcome.traceback else None),
        "error_class": (outcome.error_class.label
                        if outcome.error_class else None),
    })
    if outcome.status != "pass":
        state.pending.report["error"] = _summary(outcome)
        state.pending.report["failed_code"] = edit.edited_code
        # Re-issue the request with the new evidence so replayed state
        # carries the updated report.
        state.emit("intervention_requested", {
            "step_index": state.pending.step_index,
            "report": dict(state.pending.report),
        })
        return state
    state.edits.append(edit)
    state.pending.state = "resolved"
    state.emit("intervention_resolved", {
        "step_index": edit.step_index, "code": edit.edited_code,
        "note": edit.note,
    })
    # The edit becomes a real tree node so later expansions replay the
    # full committed program; it just never went through search scoring.
    parent_id = state.committed_node
    node_id = state.tree.add_child(
        parent_id, step_index=edit.step_index, code=edit.edited_code,
        prior_p=1.0)
    _commit(state, edit.step_index, edit.edited_code, "human", node_id,
            parent_id=parent_id)
    state.pending = None
    state.status = "running"
    return state


def chat_history_context(state: RunState, step_index: int,
                         budget_tokens: Optional[int] = None) -> str:
    """Repair context for a step: failed attempts with their hints, then
    human edits, newest last, trimmed from the oldest end to the budget."""
    from .model import estimate_tokens

    budget = budget_tokens if budget_tokens is not None else \
        state.cfg.context_window_tokens
    entries: list[str] = []
    for record in state.history.get(step_index, ()):
        body = llm.render_prompt("update_node", {
            "code": record.code,
            "error": record.error_summary,
        })
        if record.hint is not None:
            body = f"{body}\nHint ({record.hint.kind}): {record.hint.payload}"
        entries.append(body)
    for edit in state.edits:
        if edit.step_index == step_index:
            entries.append(f"Human edit for this step:\n{edit.edited_code}")
    while entries and sum(estimate_tokens(e) + 1 for e in entries) > budget:
        entries.pop(0)
    return "\n\n".join(entries)


def cancel(state: RunState) -> RunState:
    if state.status in ("finished", "failed", "cancelled"):
        return state
    if state.pending is not None:
        state.pending.state = "abandoned"
        state.pending = None
    _finish(state, "cancelled")
    return state


def abandon(state: RunState) -> RunState:
    """Give up on a paused run (no edit will come)."""
    if state.pending is not None:
        state.pending.state = "abandoned"
        state.pending = None
    _finish(state, "failed")
    return state


def release(state: RunState) -> None:
    """Close the run's sandbox session."""
    if state.session is not None:
        sandbox.close(state.session)
        state.session = None
