"""Label metrics, pass@1 / complete@1 scoring, and report round-trips."""
from __future__ import annotations

import random

import pytest
from hypothesis import given, strategies as st

from cellsmith import harness, llm
from cellsmith.harness import (
    EMPTY_SET_RULE,
    REPORT_SCHEMA,
    ConversionError,
    MetricError,
    MetricsReport,
    convert_multi_to_single,
    emit_report,
    evaluate_multi_turn,
    evaluate_single_turn,
    metric_accuracy,
    metric_f1,
    metric_hamming,
    metric_precision,
    metric_recall,
    parse_report,
)
from cellsmith.llm import ScriptedProvider
from cellsmith.mcts import EngineDeps
from cellsmith.model import AgentConfig, StepSpec, TaskSpec

from conftest import fenced, make_task

F = frozenset


# ---------------------------------------------------------------------------
# Metric fixtures
# ---------------------------------------------------------------------------


def test_worked_example_pair():
    pairs = [(F({"a", "b"}), F({"b", "c"}))]
    assert metric_accuracy(pairs) == pytest.approx(1 / 3, abs=1e-12)
    assert metric_recall(pairs) == pytest.approx(1 / 2, abs=1e-12)
    assert metric_precision(pairs) == pytest.approx(1 / 2, abs=1e-12)
    assert metric_f1(pairs) == pytest.approx(0.5, abs=1e-12)
    assert metric_hamming(pairs, F({"a", "b", "c"})) == \
        pytest.approx(2 / 3, abs=1e-12)


def test_asymmetric_pair_distinguishes_recall_from_precision():
    pairs = [(F({"a", "b", "c"}), F({"b"}))]
    # recall divides by the predicted set, precision by the gold set
    assert metric_recall(pairs) == pytest.approx(1.0)
    assert metric_precision(pairs) == pytest.approx(1 / 3)
    # conventional=True restores the textbook denominators
    assert metric_recall(pairs, conventional=True) == pytest.approx(1 / 3)
    assert metric_precision(pairs, conventional=True) == pytest.approx(1.0)


def test_empty_set_rule():
    both_empty = [(F(), F())]
    for metric in (metric_accuracy, metric_recall, metric_precision,
                   metric_f1):
        assert metric(both_empty) == 1.0
    one_empty = [(F(), F({"a"})), (F({"a"}), F())]
    for metric in (metric_accuracy, metric_recall, metric_precision,
                   metric_f1):
        assert metric(one_empty) == 0.0


def test_hamming_all_wrong_is_one():
    universe = F({"a", "b", "c", "d"})
    assert metric_hamming([(F(), universe)], universe) == 1.0
    assert metric_hamming([(universe, F())], universe) == 1.0
    assert metric_hamming([(universe, universe)], universe) == 0.0


def test_mean_over_pairs():
    pairs = [(F({"a"}), F({"a"})), (F({"a"}), F({"b"}))]
    assert metric_accuracy(pairs) == 0.5
    assert metric_f1(pairs) == 0.5
    assert metric_recall(pairs) == 0.5
    assert metric_hamming(pairs, F({"a", "b"})) == 0.5


def test_zero_pairs_rejected():
    for metric in (metric_accuracy, metric_recall, metric_precision,
                   metric_f1):
        with pytest.raises(MetricError, match="zero pairs"):
            metric([])
    with pytest.raises(MetricError):
        metric_hamming([], F({"a"}))


def test_hamming_guards():
    with pytest.raises(MetricError, match="non-empty label universe"):
        metric_hamming([(F(), F())], F())
    with pytest.raises(MetricError, match="outside the universe"):
        metric_hamming([(F({"a"}), F({"zz"}))], F({"a", "b"}))


# ---------------------------------------------------------------------------
# Independent oracle
# ---------------------------------------------------------------------------


def oracle_metrics(pairs):
    """Recompute every metric from indicator vectors, not set algebra."""
    n = len(pairs)
    universe = sorted(set().union(*[y | z for y, z in pairs]))
    acc = rec = prec = f1 = 0.0
    sym_total = 0
    for y, z in pairs:
        yv = [label in y for label in universe]
        zv = [label in z for label in universe]
        inter = sum(1 for a, b in zip(yv, zv) if a and b)
        union = sum(1 for a, b in zip(yv, zv) if a or b)
        sym_total += sum(1 for a, b in zip(yv, zv) if a != b)
        acc += inter / union if union else 1.0
        rec += inter / len(z) if z else (1.0 if not y else 0.0)
        prec += inter / len(y) if y else (1.0 if not z else 0.0)
        f1 += 2 * inter / (len(y) + len(z)) if (y or z) else 1.0
    hamming = sym_total / (max(1, len(universe)) * n)
    return acc / n, rec / n, prec / n, f1 / n, hamming


def test_metrics_match_indicator_vector_oracle():
    rng = random.Random(20260826)
    alphabet = list("abcdefgh")
    for _ in range(300):
        n = rng.randint(1, 12)
        pairs = []
        for _ in range(n):
            gold = F(rng.sample(alphabet, rng.randint(0, len(alphabet))))
            pred = F(rng.sample(alphabet, rng.randint(0, len(alphabet))))
            pairs.append((gold, pred))
        acc, rec, prec, f1, ham = oracle_metrics(pairs)
        assert metric_accuracy(pairs) == pytest.approx(acc, abs=1e-12)
        assert metric_recall(pairs) == pytest.approx(rec, abs=1e-12)
        assert metric_precision(pairs) == pytest.approx(prec, abs=1e-12)
        assert metric_f1(pairs) == pytest.approx(f1, abs=1e-12)
        universe = F().union(*[y | z for y, z in pairs])
        if universe:
            assert metric_hamming(pairs, universe) == \
                pytest.approx(ham, abs=1e-12)


label_sets = st.frozensets(st.sampled_from("abcdefgh"), max_size=8)
pair_lists = st.lists(st.tuples(label_sets, label_sets), min_size=1,
                      max_size=20)


@given(pair_lists)
def test_f1_is_one_exactly_when_all_pairs_match(pairs):
    assert (metric_f1(pairs) == 1.0) == all(y == z for y, z in pairs)


@given(pair_lists)
def test_accuracy_never_exceeds_f1(pairs):
    # per pair: Jaccard <= Dice, and the empty-set rule scores both the same
    assert metric_accuracy(pairs) <= metric_f1(pairs) + 1e-12


@given(pair_lists)
def test_conventional_flag_swaps_recall_and_precision(pairs):
    assert metric_recall(pairs, conventional=True) == metric_precision(pairs)
    assert metric_precision(pairs, conventional=True) == metric_recall(pairs)


@given(pair_lists)
def test_hamming_is_invariant_under_relabeling(pairs):
    universe = F().union(*[y | z for y, z in pairs])
    if not universe:
        return
    mapping = {label: f"renamed_{label}" for label in universe}
    renamed = [(F(mapping[l] for l in y), F(mapping[l] for l in z))
               for y, z in pairs]
    assert metric_hamming(pairs, universe) == \
        metric_hamming(renamed, F(mapping.values()))


@given(pair_lists)
def test_all_metrics_stay_in_unit_interval(pairs):
    universe = F().union(*[y | z for y, z in pairs]) or F({"pad"})
    padded = [(y, z) for y, z in pairs]
    for value in (metric_accuracy(padded), metric_recall(padded),
                  metric_precision(padded), metric_f1(padded),
                  metric_hamming(padded, universe)):
        assert 0.0 <= value <= 1.0


# ---------------------------------------------------------------------------
# Report object + serialization
# ---------------------------------------------------------------------------


def sample_report(**overrides):
    base = dict(
        per_task={"t1": {"accuracy": 1.0, "recall": 1.0, "precision": 1.0,
                         "f1": 1.0, "pass1": 1.0},
                  "t2": {"accuracy": 0.0, "recall": 0.0, "precision": 0.0,
                         "f1": 0.0, "pass1": 0.0}},
        aggregate={"accuracy": 0.5, "recall": 0.5, "precision": 0.5,
                   "f1": 0.5, "pass1": 0.5},
        hamming=1 / 3,
        universe_size_K=3,
        mode="at0",
        run_mode="auto",
        errors={"t2": "GatewayError: provider exhausted"},
    )
    base.update(overrides)
    return MetricsReport(**base)


def test_report_validation():
    with pytest.raises(ValueError, match="rag mode"):
        sample_report(mode="at1")
    with pytest.raises(ValueError, match="run mode"):
        sample_report(run_mode="manual")
    with pytest.raises(ValueError, match="hamming"):
        sample_report(hamming=1.5)
    with pytest.raises(ValueError, match="universe_size_K"):
        sample_report(universe_size_K=0)
    with pytest.raises(ValueError, match="t1.pass1"):
        sample_report(per_task={"t1": {"pass1": 2.0}})
    with pytest.raises(ValueError, match="aggregate.f1"):
        sample_report(aggregate={"f1": -0.1})


def test_structured_report_round_trips_byte_identically():
    report = sample_report()
    blob = emit_report(report)
    assert parse_report(blob) == report
    assert emit_report(parse_report(blob)) == blob
    doc_text = blob.decode("utf-8")
    assert f'"schema": "{REPORT_SCHEMA}"' in doc_text
    assert "empty_set_rule" in doc_text


def test_parse_report_rejects_unknown_schema():
    blob = emit_report(sample_report()).decode("utf-8")
    tampered = blob.replace(REPORT_SCHEMA, "metrics-report/999")
    with pytest.raises(ValueError, match="schema"):
        parse_report(tampered)


def test_unknown_report_format_rejected():
    with pytest.raises(ValueError, match="format"):
        emit_report(sample_report(), format="csv")


def test_table_format():
    text = emit_report(sample_report(), format="table").decode("utf-8")
    lines = text.splitlines()
    assert lines[0] == "# metrics report (rag=at0, run_mode=auto)"
    assert lines[1] == f"# {EMPTY_SET_RULE}"
    assert text.index("t1") < text.index("t2") < text.index("aggregate")
    assert "1.0000" in text and "0.5000" in text
    assert "hamming           0.333333" in text
    assert "universe_size_K   3" in text
    assert "error t2: GatewayError: provider exhausted" in text


def test_table_renders_dash_for_missing_columns():
    report = MetricsReport(
        per_task={"x": {"accuracy": 0.5}},
        aggregate={"accuracy": 0.5, "f1": 0.25},
        hamming=0.0, universe_size_K=1, mode="at3", run_mode="human")
    text = emit_report(report, format="table").decode("utf-8")
    row = next(line for line in text.splitlines() if line.startswith("x"))
    assert row.split() == ["x", "0.5000", "-"]


# ---------------------------------------------------------------------------
# Single-turn evaluation
# ---------------------------------------------------------------------------


def single_task(task_id, instruction, gold_labels):
    return TaskSpec(id=task_id, kind="single_turn", libraries=("demo",),
                    steps=(StepSpec(index=0, instruction=instruction,
                                    gold_code="pass",
                                    gold_labels=F(gold_labels)),))


def test_single_turn_pass_and_labels():
    tasks = [single_task("s-pass", "greet the user", {"print"}),
             single_task("s-fail", "process the data", {"process"})]
    provider = ScriptedProvider([
        {"match": "greet the user", "replies": [fenced('print("hi")')]},
        {"match": "process the data",
         "replies": [fenced("undefined_thing()")]},
    ])
    report = evaluate_single_turn(tasks, EngineDeps(provider=provider),
                                  AgentConfig())
    assert report.per_task["s-pass"] == {
        "accuracy": 1.0, "recall": 1.0, "precision": 1.0, "f1": 1.0,
        "pass1": 1.0}
    assert report.per_task["s-fail"]["pass1"] == 0.0
    assert report.per_task["s-fail"]["accuracy"] == 0.0
    assert report.aggregate["pass1"] == 0.5
    # universe {print, process, undefined_thing}; s-fail differs on two
    assert report.universe_size_K == 3
    assert report.hamming == pytest.approx(2 / 6, abs=1e-12)
    assert report.errors == {}
    assert report.mode == "at0" and report.run_mode == "auto"


def test_single_turn_unparseable_output_counts_as_empty_prediction():
    tasks = [single_task("s1", "do the thing", {"run"})]
    provider = ScriptedProvider(
        [{"match": "", "replies": [fenced("def broken(")]}])
    report = evaluate_single_turn(tasks, EngineDeps(provider=provider),
                                  AgentConfig())
    row = report.per_task["s1"]
    assert row["pass1"] == 0.0
    assert row["accuracy"] == 0.0  # gold non-empty, predicted empty
    assert report.errors == {}


def test_single_turn_empty_generation_skips_sandbox():
    tasks = [single_task("s1", "do the thing", {"run"})]
    provider = ScriptedProvider([{"match": "", "replies": ["```python\n```"]}])
    report = evaluate_single_turn(tasks, EngineDeps(provider=provider),
                                  AgentConfig())
    assert report.per_task["s1"]["pass1"] == 0.0


def test_single_turn_provider_failure_recorded_as_error():
    tasks = [single_task("s1", "do the thing", {"run"})]
    provider = ScriptedProvider([])  # nothing scripted: provider exhausted
    report = evaluate_single_turn(tasks, EngineDeps(provider=provider),
                                  AgentConfig())
    assert report.per_task["s1"]["pass1"] == 0.0
    assert "s1" in report.errors
    table = emit_report(report, format="table").decode("utf-8")
    assert "error s1:" in table


def test_single_turn_bare_label_form():
    tasks = [single_task("s1", "trim it", {"str.strip"})]
    provider = ScriptedProvider(
        [{"match": "", "replies": [fenced("value = ' x '\nvalue.strip()")]}])
    report = evaluate_single_turn(tasks, EngineDeps(provider=provider),
                                  AgentConfig(), label_form="bare")
    # value.strip -> strip, str.strip -> strip: a full match
    assert report.per_task["s1"]["accuracy"] == 1.0


def test_single_turn_kind_guard_and_empty_suite():
    deps = EngineDeps(provider=ScriptedProvider([]))
    with pytest.raises(MetricError, match="empty suite"):
        evaluate_single_turn([], deps, AgentConfig())
    multi = make_task("a", "b", task_id="m1")
    with pytest.raises(ValueError, match="not single_turn.*m1"):
        evaluate_single_turn([multi], deps, AgentConfig())
    with pytest.raises(ValueError, match="rag mode"):
        evaluate_single_turn([single_task("s1", "x", set())], deps,
                             AgentConfig(), rag_mode="at5")


def test_single_turn_rag_mode_override_is_reported():
    tasks = [single_task("s1", "greet", set())]
    provider = ScriptedProvider([{"match": "", "replies": [fenced("x = 1")]}])
    report = evaluate_single_turn(tasks, EngineDeps(provider=provider),
                                  AgentConfig(), rag_mode="at3")
    assert report.mode == "at3"


def test_single_turn_parallel_matches_serial():
    tasks = [single_task(f"s{i}", f"task number {i}", {"print"})
             for i in range(4)]
    rules = [{"match": f"task number {i}",
              "replies": [fenced(f'print({i})')]} for i in range(4)]
    serial = evaluate_single_turn(tasks, EngineDeps(
        provider=ScriptedProvider(rules)), AgentConfig())
    parallel = evaluate_single_turn(tasks, EngineDeps(
        provider=ScriptedProvider(rules)), AgentConfig(), jobs=3)
    assert emit_report(serial) == emit_report(parallel)


# ---------------------------------------------------------------------------
# Multi-turn evaluation
# ---------------------------------------------------------------------------


def multi_task(task_id, *steps):
    """steps: (instruction, gold_labels) pairs."""
    return TaskSpec(
        id=task_id, kind="multi_turn", libraries=(),
        steps=tuple(StepSpec(index=i, instruction=ins, gold_code="pass",
                             gold_labels=F(labels))
                    for i, (ins, labels) in enumerate(steps)))


def test_multi_turn_partial_completion_scores_half():
    task = multi_task("m1", ("assign the start value", {"print"}),
                      ("finish the job", {"finalize"}))
    provider = ScriptedProvider([
        {"match": "assign the start value", "replies": [fenced("print(1)")]},
        {"match": "", "replies": [fenced("raise RuntimeError('stuck')")]},
    ])
    report = evaluate_multi_turn(
        [task], EngineDeps(provider=provider),
        AgentConfig(n_samples=1, k_top=1, max_attempts=1))
    row = report.per_task["m1"]
    assert row["complete1"] == 0.5  # one of two steps committed
    assert row["pass1"] == 0.0  # pass@1 needs the whole task
    assert row["recall"] == 1.0  # predicted {print} is all gold-relevant
    assert row["precision"] == 0.5
    assert report.aggregate["complete1"] == 0.5


def test_multi_turn_full_completion():
    task = multi_task("m1", ("set a", {"print"}), ("reuse a", {"len"}))
    provider = ScriptedProvider([
        {"match": "Provide the code for each",
         "replies": [fenced("n = len('xx')")]},
        {"match": "set a", "replies": [fenced("a = print or print(0)")]},
        {"match": "", "replies": [fenced("n = len('xx')")]},
    ])
    report = evaluate_multi_turn(
        [task], EngineDeps(provider=provider),
        AgentConfig(n_samples=1, k_top=1, max_attempts=1))
    row = report.per_task["m1"]
    assert row["complete1"] == 1.0
    assert row["pass1"] == 1.0
    assert report.run_mode == "auto"


def test_multi_turn_oracle_agent_is_perfect():
    gold0 = "start = print(0) or 10"
    gold1 = "print(start + 1)"
    task = TaskSpec(
        id="gold-task", kind="multi_turn", libraries=(),
        steps=(StepSpec(index=0, instruction="seed the counter",
                        gold_code=gold0, gold_labels=F({"print"})),
               StepSpec(index=1, instruction="advance the counter",
                        gold_code=gold1, gold_labels=F({"print"}))))
    provider = ScriptedProvider([
        {"match": "Provide the code for each", "replies": [fenced(gold1)]},
        {"match": "seed the counter", "replies": [fenced(gold0)]},
        {"match": "", "replies": [fenced(gold1)]},
    ])
    report = evaluate_multi_turn(
        [task], EngineDeps(provider=provider),
        AgentConfig(n_samples=1, k_top=1, max_attempts=1))
    assert report.aggregate["complete1"] == 1.0
    assert report.aggregate["pass1"] == 1.0
    assert report.aggregate["f1"] == 1.0
    assert report.hamming == 0.0


def test_multi_turn_human_mode_with_scripted_edits():
    task = multi_task("m1", ("produce x", {"fix"}), ("use x", {"more"}))
    provider = ScriptedProvider(
        [{"match": "", "replies": [fenced("raise RuntimeError('no')")]}])
    report = evaluate_multi_turn(
        [task], EngineDeps(provider=provider),
        AgentConfig(n_samples=1, k_top=1, max_attempts=1),
        run_mode="human",
        scripted_edits={"m1": {0: "fix = 1", 1: "more = fix + 1"}})
    assert report.per_task["m1"]["complete1"] == 1.0
    assert report.run_mode == "human"


def test_multi_turn_engine_error_recorded():
    task = multi_task("m1", ("produce x", {"x"}), ("more", {"y"}))
    provider = ScriptedProvider([])  # exhausted on first request
    report = evaluate_multi_turn(
        [task], EngineDeps(provider=provider),
        AgentConfig(n_samples=1, k_top=1, max_attempts=1))
    assert "m1" in report.errors
    assert report.per_task["m1"]["complete1"] == 0.0


def test_multi_turn_kind_guard():
    deps = EngineDeps(provider=ScriptedProvider([]))
    with pytest.raises(ValueError, match="not multi_turn"):
        evaluate_multi_turn([single_task("s1", "x", set())], deps,
                            AgentConfig())
    with pytest.raises(ValueError, match="run mode"):
        evaluate_multi_turn([multi_task("m1", ("a", set()), ("b", set()))],
                            deps, AgentConfig(), run_mode="paired")
    with pytest.raises(MetricError, match="empty suite"):
        evaluate_multi_turn([], deps, AgentConfig())


# ---------------------------------------------------------------------------
# Multi -> single conversion
# ---------------------------------------------------------------------------


def test_conversion_carries_gold_prefix():
    task = TaskSpec(
        id="conv", kind="multi_turn", libraries=("lib",),
        steps=(StepSpec(index=0, instruction="first", gold_code="a = 1",
                        gold_labels=F({"one"})),
               StepSpec(index=1, instruction="second", gold_code="b = a + 1",
                        library_hints=("lib",)),
               StepSpec(index=2, instruction="third", gold_code="c = b * 2")))
    derived = convert_multi_to_single(task)
    assert [t.id for t in derived] == ["conv#0", "conv#1", "conv#2"]
    assert all(t.kind == "single_turn" for t in derived)
    assert all(len(t.steps) == 1 and t.steps[0].index == 0 for t in derived)
    assert all(t.libraries == ("lib",) for t in derived)
    assert derived[0].steps[0].instruction == "first"
    assert derived[1].steps[0].instruction == \
        "second Here is the previous code:\na = 1"
    assert derived[2].steps[0].instruction == \
        "third Here is the previous code:\na = 1\nb = a + 1"
    assert derived[0].steps[0].gold_labels == F({"one"})
    assert derived[1].steps[0].library_hints == ("lib",)
    assert derived[2].steps[0].gold_code == "c = b * 2"


def test_conversion_requires_gold_code():
    task = TaskSpec(
        id="conv", kind="multi_turn", libraries=(),
        steps=(StepSpec(index=0, instruction="first", gold_code="a = 1"),
               StepSpec(index=1, instruction="second"),
               StepSpec(index=2, instruction="third")))
    with pytest.raises(ConversionError, match=r"steps \[1, 2\]"):
        convert_multi_to_single(task)


def test_converted_tasks_evaluate_single_turn():
    task = TaskSpec(
        id="conv", kind="multi_turn", libraries=(),
        steps=(StepSpec(index=0, instruction="seed it", gold_code="a = 1",
                        gold_labels=F({"print"})),
               StepSpec(index=1, instruction="show it",
                        gold_code="print(a)", gold_labels=F({"print"}))))
    derived = convert_multi_to_single(task)
    provider = ScriptedProvider([
        {"match": "previous code", "replies": [fenced("a = 1\nprint(a)")]},
        {"match": "", "replies": [fenced("print(1)")]},
    ])
    report = evaluate_single_turn(derived, EngineDeps(provider=provider),
                                  AgentConfig())
    assert report.aggregate["pass1"] == 1.0
    assert report.per_task["conv#1"]["recall"] == 1.0
