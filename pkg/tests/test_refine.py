"""Attempt loop: hints, retries, surgery routing, pausing, human edits."""
from __future__ import annotations

import pytest

from cellsmith import mcts, refine, sandbox
from cellsmith.analysis import FixHint
from cellsmith.llm import ScriptedProvider
from cellsmith.mcts import EngineDeps, SearchTree
from cellsmith.model import AgentConfig, CellRecord
from cellsmith.refine import (
    AttemptRecord,
    HumanEdit,
    RunState,
    StateError,
    advance,
    apply_edit,
    chat_history_context,
    start_run,
)

from conftest import fenced, make_task


def run_with(rules, task, cfg=None, mode="auto"):
    events = []
    deps = EngineDeps(provider=ScriptedProvider(rules),
                      emit=lambda kind, payload: events.append((kind, payload)))
    cfg = cfg or AgentConfig(n_samples=1, k_top=1, max_attempts=3)
    state = start_run(task, deps, cfg, mode=mode, run_id="test-run")
    return state, events


def kinds(events):
    return [k for k, _ in events]


def of_kind(events, kind):
    return [p for k, p in events if k == kind]


# ---------------------------------------------------------------------------
# Retry with hints
# ---------------------------------------------------------------------------


def test_fail_then_pass_uses_hint_and_two_attempts():
    task = make_task("produce x", libraries=())
    rules = [
        {"match": "Hint (traceback_advice)", "replies": [fenced("x = 1")]},
        {"match": "", "replies": [fenced("raise ValueError('boom')")]},
    ]
    state, events = run_with(rules, task)
    try:
        advance(state)
    finally:
        refine.release(state)
    assert state.status == "finished"
    assert [c.code for c in state.cells] == ["x = 1"]
    assert state.cells[0].source == "agent"
    attempts = of_kind(events, "attempt")
    assert [a["attempt_number"] for a in attempts] == [1, 2]
    assert attempts[0]["hint"] is None
    assert attempts[1]["hint"]["kind"] == "traceback_advice"
    assert "ValueError" in attempts[1]["hint"]["payload"]
    assert len(state.history[0]) == 1
    assert state.history[0][0].attempt_number == 1
    assert "ValueError: boom" in state.history[0][0].error_summary
    finished = of_kind(events, "run_finished")[0]
    assert finished == {"status": "finished", "completed_steps": 1,
                        "total_steps": 1}


def test_budget_exhaustion_fails_in_auto_mode():
    task = make_task("impossible", libraries=())
    rules = [{"match": "", "replies": [fenced("raise RuntimeError('no')")]}]
    state, events = run_with(rules, task)
    try:
        advance(state)
    finally:
        refine.release(state)
    assert state.status == "failed"
    assert state.cells == []
    assert [a["attempt_number"] for a in of_kind(events, "attempt")] == [1, 2, 3]
    assert len(state.history[0]) == 3
    # auto mode never asks a human for help
    assert "intervention_requested" not in kinds(events)
    assert of_kind(events, "run_finished")[0]["status"] == "failed"


def test_commit_prefers_value_then_prior():
    # both candidates pass; equal look-ahead reward (single step task) so
    # the higher prior must win the commit
    task = make_task("produce x", libraries=())
    rules = [{"match": "", "replies": [
        {"text": fenced("x = 'low'"), "token_logprobs": [-0.9]},
        {"text": fenced("x = 'high'"), "token_logprobs": [-0.1]},
    ]}]
    state, _ = run_with(rules, task, cfg=AgentConfig(n_samples=2, k_top=2,
                                                     max_attempts=1))
    try:
        advance(state)
    finally:
        refine.release(state)
    assert state.status == "finished"
    assert state.cells[0].code == "x = 'high'"


def test_multi_step_prefix_rides_into_later_prompts():
    task = make_task("set a", "use a", libraries=())
    rules = [
        {"match": "Provide the code for each", "replies": [fenced("b = a + 1")]},
        {"match": "a = 41", "replies": [fenced("print(a + 1)")]},
        {"match": "", "replies": [fenced("a = 41")]},
    ]
    state, events = run_with(rules, task)
    try:
        advance(state)
    finally:
        refine.release(state)
    assert state.status == "finished"
    assert [c.code for c in state.cells] == ["a = 41", "print(a + 1)"]
    assert [c.step_index for c in state.cells] == [0, 1]
    committed = of_kind(events, "step_committed")
    assert [c["step_index"] for c in committed] == [0, 1]
    assert all(c["source"] == "agent" for c in committed)


# ---------------------------------------------------------------------------
# Surgery routing
# ---------------------------------------------------------------------------

SURGERY_RULES = [
    {"match": "The undefined variables are: startDate.",
     "replies": [fenced("startDate = 5")]},
    {"match": "Provide the code for each",
     "replies": [fenced("out = startDate + 1")]},
    {"match": "", "replies": [fenced("out = startDate + 1")]},
]


def test_surgery_inserts_definition_step_without_spending_attempts():
    task = make_task("combine the dates", libraries=())
    # max_attempts=1 proves the surgery route does not consume the budget
    state, events = run_with(SURGERY_RULES, task,
                             cfg=AgentConfig(n_samples=1, k_top=1,
                                             max_attempts=1))
    try:
        advance(state)
    finally:
        refine.release(state)
    assert state.status == "finished"
    assert state.surgeries == 1
    assert [c.code for c in state.cells] == ["startDate = 5",
                                             "out = startDate + 1"]
    assert len(state.task.steps) == 2
    assert state.task.kind == "multi_turn"
    surgery = of_kind(events, "surgery")[0]
    assert surgery["step_index"] == 0
    assert surgery["undefined_names"] == ["startDate"]
    assert surgery["new_step"]["index"] == 0
    assert "The undefined variables are: startDate." in \
        surgery["new_step"]["instruction"]
    finished = of_kind(events, "run_finished")[0]
    assert finished["completed_steps"] == 2
    assert finished["total_steps"] == 2
    # each step announces itself; the definition step repeats index 0
    started = of_kind(events, "step_started")
    assert [s["step_index"] for s in started] == [0, 0, 1]


def test_surgery_cap_blocks_further_surgeries():
    task = make_task("combine the dates", libraries=())
    rules = [{"match": "", "replies": [fenced("out = startDate + 1")]}]
    state, events = run_with(rules, task,
                             cfg=AgentConfig(n_samples=1, k_top=1,
                                             max_attempts=1))
    state.surgeries = refine.MAX_SURGERIES_PER_RUN
    try:
        advance(state)
    finally:
        refine.release(state)
    assert state.status == "failed"
    assert "surgery" not in kinds(events)
    assert state.surgeries == refine.MAX_SURGERIES_PER_RUN
    # the failure consumed the attempt budget instead
    assert len(state.history[0]) == 1
    assert state.history[0][0].hint.kind == "define_variables"


# ---------------------------------------------------------------------------
# Human intervention
# ---------------------------------------------------------------------------


def paused_state(max_attempts=2):
    task = make_task("produce x", libraries=())
    rules = [{"match": "", "replies": [fenced("raise RuntimeError('no')")]}]
    state, events = run_with(
        rules, task, cfg=AgentConfig(n_samples=1, k_top=1,
                                     max_attempts=max_attempts),
        mode="human")
    advance(state)
    return state, events


def test_exhaustion_pauses_in_human_mode():
    state, events = paused_state()
    try:
        assert state.status == "paused"
        assert state.pending is not None
        assert state.pending.state == "pending"
        assert state.pending.step_index == 0
        report = state.pending.report
        assert report["instruction"] == "produce x"
        assert report["failed_code"] == "raise RuntimeError('no')"
        assert "RuntimeError: no" in report["error"]
        assert report["attempts_used"] == 2
        requested = of_kind(events, "intervention_requested")
        assert len(requested) == 1
        assert requested[0]["report"] == report
        assert "run_finished" not in kinds(events)
    finally:
        refine.release(state)


def test_edit_guards():
    state, _ = paused_state()
    try:
        with pytest.raises(StateError, match="paused on step 0"):
            apply_edit(state, HumanEdit(step_index=3, edited_code="x = 1"))
        with pytest.raises(ValueError):
            HumanEdit(step_index=0, edited_code="   ")
    finally:
        refine.release(state)


def test_edit_not_paused_rejected():
    task = make_task("produce x", libraries=())
    rules = [{"match": "", "replies": [fenced("x = 1")]}]
    state, _ = run_with(rules, task)
    try:
        advance(state)
        assert state.status == "finished"
        with pytest.raises(StateError, match="not paused"):
            apply_edit(state, HumanEdit(step_index=0, edited_code="x = 2"))
    finally:
        refine.release(state)


def test_failed_edit_updates_report_and_stays_paused():
    state, events = paused_state()
    try:
        apply_edit(state, HumanEdit(step_index=0,
                                    edited_code="x = int('broken')"))
        assert state.status == "paused"
        assert state.pending.state == "pending"
        assert state.pending.report["failed_code"] == "x = int('broken')"
        assert "ValueError" in state.pending.report["error"]
        edit_execs = [p for p in of_kind(events, "execution")
                      if p["phase"] == "edit"]
        assert len(edit_execs) == 1 and edit_execs[0]["status"] == "fail"
        # the request is re-issued so replays carry the updated evidence
        requested = of_kind(events, "intervention_requested")
        assert len(requested) == 2
        assert requested[1]["report"]["failed_code"] == "x = int('broken')"
    finally:
        refine.release(state)


def test_good_edit_commits_as_human_node_and_resumes():
    state, events = paused_state()
    try:
        parent_before = state.committed_node
        apply_edit(state, HumanEdit(step_index=0, edited_code="x = 6 * 7",
                                    note="hand fix"))
        assert state.status == "running"  # caller resumes via advance
        advance(state)
        assert state.status == "finished"
    finally:
        refine.release(state)
    # commit happened
    assert state.cells[-1].code == "x = 6 * 7"
    assert state.cells[-1].source == "human"
    assert state.pending is None
    assert state.edits[0].note == "hand fix"
    resolved = of_kind(events, "intervention_resolved")[0]
    assert resolved == {"step_index": 0, "code": "x = 6 * 7",
                        "note": "hand fix"}
    committed = of_kind(events, "step_committed")[-1]
    assert committed["source"] == "human"
    assert committed["parent_id"] == parent_before
    node = state.tree.nodes[committed["node_id"]]
    assert node.prior_p == 1.0
    assert node.parent == parent_before
    assert node.code == "x = 6 * 7"


def test_scripted_edits_via_run_search():
    task = make_task("produce x", libraries=())
    deps = EngineDeps(provider=ScriptedProvider(
        [{"match": "", "replies": [fenced("raise RuntimeError('no')")]}]))
    solution, tree = mcts.run_search(
        task, deps, AgentConfig(n_samples=1, k_top=1, max_attempts=1),
        mode="human", scripted_edits={0: "x = 99"})
    assert solution.completed_steps == 1
    assert solution.cells[0].source == "human"
    assert solution.cells[0].code == "x = 99"


def test_run_search_abandons_without_matching_edit():
    task = make_task("produce x", libraries=())
    deps = EngineDeps(provider=ScriptedProvider(
        [{"match": "", "replies": [fenced("raise RuntimeError('no')")]}]))
    solution, tree = mcts.run_search(
        task, deps, AgentConfig(n_samples=1, k_top=1, max_attempts=1),
        mode="human", scripted_edits={})
    assert solution.completed_steps == 0


# ---------------------------------------------------------------------------
# Repair context assembly
# ---------------------------------------------------------------------------


def bare_state(**overrides):
    task = make_task("a", libraries=())
    state = RunState(
        run_id="ctx", task=task, cfg=AgentConfig(), mode="auto",
        deps=EngineDeps(provider=ScriptedProvider.sequential([])),
        tree=SearchTree(), session=None)
    for key, value in overrides.items():
        setattr(state, key, value)
    return state


def test_chat_history_orders_attempts_then_edits():
    state = bare_state()
    state.history[0] = [
        AttemptRecord(1, "bad_one()", "NameError: x",
                      FixHint("define_variables", "x")),
        AttemptRecord(2, "bad_two()", "ValueError: y", None),
    ]
    state.edits.append(HumanEdit(step_index=0, edited_code="fixed = 1"))
    state.edits.append(HumanEdit(step_index=3, edited_code="other_step = 1"))
    context = chat_history_context(state, 0)
    assert context.index("bad_one()") < context.index("bad_two()")
    assert context.index("bad_two()") < context.index("fixed = 1")
    assert "Hint (define_variables): x" in context
    assert "Human edit for this step:\nfixed = 1" in context
    assert "other_step" not in context  # edits for other steps excluded
    assert "NameError: x" in context


def test_chat_history_budget_drops_oldest_first():
    state = bare_state()
    state.history[0] = [
        AttemptRecord(1, "oldest_attempt()", "E1", None),
        AttemptRecord(2, "newest_attempt()", "E2", None),
    ]
    full = chat_history_context(state, 0)
    assert "oldest_attempt" in full and "newest_attempt" in full
    tight = chat_history_context(state, 0, budget_tokens=60)
    assert "oldest_attempt" not in tight
    assert "newest_attempt" in tight
    nothing = chat_history_context(state, 0, budget_tokens=1)
    assert nothing == ""


def test_chat_history_empty_for_fresh_step():
    assert chat_history_context(bare_state(), 0) == ""


# ---------------------------------------------------------------------------
# Session lifecycle
# ---------------------------------------------------------------------------


def test_ensure_session_rebuilds_from_committed_cells():
    state = bare_state()
    state.cells = [CellRecord(step_index=0, code="x = 41", source="agent")]
    session = refine._ensure_session(state)
    try:
        outcome = sandbox.execute(session, "print(x + 1)")
        assert outcome.stdout == "42\n"
        # a live session is reused, not rebuilt
        assert refine._ensure_session(state) is session
        sandbox.close(session)
        rebuilt = refine._ensure_session(state)
        assert rebuilt is not session
        assert sandbox.execute(rebuilt, "print(x + 1)").stdout == "42\n"
    finally:
        refine.release(state)


def test_ensure_session_rejects_corrupt_committed_cells():
    state = bare_state()
    state.cells = [CellRecord(step_index=0, code="raise ValueError('old')",
                              source="agent")]
    with pytest.raises(sandbox.SessionDeadError):
        refine._ensure_session(state)


def test_sandbox_death_gets_one_free_retry(monkeypatch):
    task = make_task("produce x", libraries=())
    rules = [{"match": "", "replies": [fenced("x = 1")]}]
    state, events = run_with(rules, task,
                             cfg=AgentConfig(n_samples=1, k_top=1,
                                             max_attempts=1))
    calls = {"n": 0}
    real_expand = mcts.expand

    def flaky_expand(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 1:
            raise sandbox.SessionSpawnError("simulated runner crash")
        return real_expand(*args, **kwargs)

    monkeypatch.setattr(mcts, "expand", flaky_expand)
    try:
        advance(state)
    finally:
        refine.release(state)
    assert state.status == "finished"
    assert calls["n"] == 2
    # the retry is free: it does not consume an attempt or re-emit one
    assert len(of_kind(events, "attempt")) == 1


def test_second_sandbox_death_is_fatal(monkeypatch):
    task = make_task("produce x", libraries=())
    rules = [{"match": "", "replies": [fenced("x = 1")]}]
    state, _ = run_with(rules, task)

    def always_dead(*args, **kwargs):
        raise sandbox.SessionSpawnError("runner gone")

    monkeypatch.setattr(mcts, "expand", always_dead)
    try:
        with pytest.raises(mcts.ExpansionError, match="sandbox failed twice"):
            advance(state)
    finally:
        refine.release(state)


# ---------------------------------------------------------------------------
# Cancel / abandon / should_stop
# ---------------------------------------------------------------------------


def test_advance_polls_should_stop():
    task = make_task("produce x", libraries=())
    rules = [{"match": "", "replies": [fenced("x = 1")]}]
    state, events = run_with(rules, task)
    try:
        advance(state, should_stop=lambda: True)
    finally:
        refine.release(state)
    assert state.status == "cancelled"
    assert state.cells == []
    assert of_kind(events, "run_finished")[0]["status"] == "cancelled"


def test_cancel_is_idempotent_on_final_states():
    task = make_task("produce x", libraries=())
    rules = [{"match": "", "replies": [fenced("x = 1")]}]
    state, events = run_with(rules, task)
    try:
        advance(state)
    finally:
        refine.release(state)
    assert state.status == "finished"
    refine.cancel(state)
    assert state.status == "finished"  # no demotion of a finished run
    assert len(of_kind(events, "run_finished")) == 1


def test_abandon_paused_run_fails_it():
    state, events = paused_state()
    try:
        refine.abandon(state)
    finally:
        refine.release(state)
    assert state.status == "failed"
    assert state.pending is None
    assert of_kind(events, "run_finished")[0]["status"] == "failed"


def test_start_run_rejects_unknown_mode():
    task = make_task("a", libraries=())
    deps = EngineDeps(provider=ScriptedProvider.sequential([]))
    with pytest.raises(ValueError):
        start_run(task, deps, AgentConfig(), mode="assisted")
