"""Benchmark evaluation: label metrics, pass@1 / complete@1, and reports.

Single-turn tasks are scored by one-shot generation: execution success
gives pass@1, and the function-call labels of the generated code are
compared against the gold labels with multilabel set metrics.
Multi-turn tasks run the full search loop and are scored by complete@1,
the maximal prefix of consecutively passing steps over the step count.

Metric conventions
------------------
The per-pair recall denominator is |Z| (predicted) and the precision
denominator is |Y| (gold); ``conventional_pr=True`` swaps them to the
textbook convention.  A pair whose denominator is empty contributes 1.0
when both sets are empty and 0.0 when exactly one is; this rule is
stated in every report header.  Hamming loss is normalized by K·n where
K is the size of the label universe: the union of all gold and
predicted labels across the evaluated suite (widened to 1 when that
union is empty so the loss stays defined — it is exactly 0.0 then).
"""
from __future__ import annotations

import concurrent.futures
import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from . import analysis, jsonio, llm, mcts, sandbox
from .model import AgentConfig, StepSpec, TaskSpec

__all__ = [
    "MetricError",
    "ConversionError",
    "MetricsReport",
    "metric_accuracy",
    "metric_recall",
    "metric_precision",
    "metric_f1",
    "metric_hamming",
    "evaluate_single_turn",
    "evaluate_multi_turn",
    "convert_multi_to_single",
    "emit_report",
    "parse_report",
]

REPORT_SCHEMA = "metrics-report/1"

EMPTY_SET_RULE = ("empty-set rule: a term with an empty denominator set "
                  "counts 1.0 when both sets are empty, 0.0 when exactly "
                  "one is")

_METRIC_COLUMNS = ("accuracy", "recall", "precision", "f1", "pass1", "complete1")


class MetricError(ValueError):
    """A metric is undefined for the given input (e.g. no pairs)."""


class ConversionError(ValueError):
    """A task cannot be converted (missing gold code)."""


LabelPair = tuple[frozenset, frozenset]


def _require_pairs(pairs: Sequence[LabelPair]) -> None:
    if len(pairs) == 0:
        raise MetricError("metric undefined over zero pairs")


def _ratio(numerator: int, gold: frozenset, predicted: frozenset,
           denominator: frozenset) -> float:
    if denominator:
        return numerator / len(denominator)
    return 1.0 if not gold and not predicted else 0.0


def metric_accuracy(pairs: Sequence[LabelPair]) -> float:
    """Mean Jaccard overlap: (1/n) Σ |Y∩Z| / |Y∪Z|."""
    _require_pairs(pairs)
    total = 0.0
    for gold, predicted in pairs:
        union = gold | predicted
        total += _ratio(len(gold & predicted), gold, predicted, union)
    return total / len(pairs)


def metric_recall(pairs: Sequence[LabelPair], conventional: bool = False) -> float:
    """(1/n) Σ |Y∩Z| / |Z| — or / |Y| with ``conventional=True``."""
    _require_pairs(pairs)
    total = 0.0
    for gold, predicted in pairs:
        denominator = gold if conventional else predicted
        total += _ratio(len(gold & predicted), gold, predicted, denominator)
    return total / len(pairs)


def metric_precision(pairs: Sequence[LabelPair], conventional: bool = False) -> float:
    """(1/n) Σ |Y∩Z| / |Y| — or / |Z| with ``conventional=True``."""
    _require_pairs(pairs)
    total = 0.0
    for gold, predicted in pairs:
        denominator = predicted if conventional else gold
        total += _ratio(len(gold & predicted), gold, predicted, denominator)
    return total / len(pairs)


def metric_f1(pairs: Sequence[LabelPair]) -> float:
    """(1/n) Σ 2|Y∩Z| / (|Y|+|Z|): per-pair Dice coefficient."""
    _require_pairs(pairs)
    total = 0.0
    for gold, predicted in pairs:
        size = len(gold) + len(predicted)
        if size == 0:
            total += 1.0
        else:
            total += 2 * len(gold & predicted) / size
    return total / len(pairs)


def metric_hamming(pairs: Sequence[LabelPair], universe: frozenset) -> float:
    """Symmetric-difference loss normalized by K·n, K = |universe|."""
    _require_pairs(pairs)
    if not universe:
        raise MetricError("hamming loss needs a non-empty label universe")
    total = 0
    for gold, predicted in pairs:
        stray = (gold | predicted) - set(universe)
        if stray:
            raise MetricError(
                f"labels outside the universe: {sorted(stray)[:3]}")
        total += len(gold ^ predicted)
    return total / (len(universe) * len(pairs))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    """Per-task and aggregate scores for one evaluated suite."""

    per_task: dict[str, dict[str, float]]
    aggregate: dict[str, float]
    hamming: float
    universe_size_K: int
    mode: str  # rag mode: at0 | at3
    run_mode: str  # auto | human
    errors: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in ("at0", "at3"):
            raise ValueError(f"unknown rag mode {self.mode!r}")
        if self.run_mode not in ("auto", "human"):
            raise ValueError(f"unknown run mode {self.run_mode!r}")
        if not (0.0 <= self.hamming <= 1.0):
            raise ValueError(f"hamming must be in [0, 1], got {self.hamming}")
        if self.universe_size_K < 1:
            raise ValueError("universe_size_K must be positive")
        for task_id, row in self.per_task.items():
            for name, value in row.items():
                if not (0.0 <= value <= 1.0):
                    raise ValueError(
                        f"{task_id}.{name} out of [0, 1]: {value}")
        for name, value in self.aggregate.items():
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"aggregate.{name} out of [0, 1]: {value}")


def _report_dict(report: MetricsReport) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "mode": report.mode,
        "run_mode": report.run_mode,
        "empty_set_rule": EMPTY_SET_RULE,
        "universe_size_K": report.universe_size_K,
        "hamming": report.hamming,
        "aggregate": report.aggregate,
        "per_task": report.per_task,
        "errors": report.errors,
    }


def _format_value(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


def _render_table(report: MetricsReport) -> str:
    columns = [name for name in _METRIC_COLUMNS
               if any(name in row for row in report.per_task.values())
               or name in report.aggregate]
    if not columns:
        columns = list(_METRIC_COLUMNS[:5])
    header = [
        f"# metrics report (rag={report.mode}, run_mode={report.run_mode})",
        f"# {EMPTY_SET_RULE}",
    ]
    width = max([len("aggregate")] + [len(tid) for tid in report.per_task]) + 2
    lines = ["".join(["task".ljust(width)] + [c.rjust(11) for c in columns])]
    for task_id in sorted(report.per_task):
        row = report.per_task[task_id]
        cells = [_format_value(row.get(c)).rjust(11) for c in columns]
        lines.append("".join([task_id.ljust(width)] + cells))
    aggregate = [_format_value(report.aggregate.get(c)).rjust(11)
                 for c in columns]
    lines.append("".join(["aggregate".ljust(width)] + aggregate))
    footer = [
        f"hamming           {report.hamming:.6f}",
        f"universe_size_K   {report.universe_size_K}",
    ]
    for task_id in sorted(report.errors):
        footer.append(f"error {task_id}: {report.errors[task_id]}")
    return "\n".join(header + lines + footer) + "\n"


def emit_report(report: MetricsReport, format: str = "structured") -> bytes:
    """Serialize a report: ``structured`` is loss-free, ``table`` is text."""
    if format == "structured":
        return (jsonio.dumps_pretty(_report_dict(report)) + "\n").encode("utf-8")
    if format == "table":
        return _render_table(report).encode("utf-8")
    raise ValueError(f"unknown report format {format!r}")


def parse_report(data: bytes | str) -> MetricsReport:
    """Inverse of the structured form of ``emit_report``."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    doc = jsonio.loads(data)
    if doc.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"unknown report schema {doc.get('schema')!r}")
    return MetricsReport(
        per_task=doc["per_task"],
        aggregate=doc["aggregate"],
        hamming=doc["hamming"],
        universe_size_K=doc["universe_size_K"],
        mode=doc["mode"],
        run_mode=doc["run_mode"],
        errors=doc.get("errors", {}),
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class _TaskOutcome:
    task_id: str
    gold: frozenset
    predicted: frozenset
    pass1: float
    complete1: Optional[float] = None
    error: Optional[str] = None


def _label_set(labels: Iterable[str], label_form: str) -> frozenset:
    if label_form == "bare":
        return frozenset(analysis.to_bare_label(l) for l in labels)
    return frozenset(labels)


def _labels_of_code(code: str, label_form: str) -> frozenset:
    try:
        return _label_set(analysis.extract_call_labels(code), label_form)
    except SyntaxError:
        return frozenset()


def _gold_labels(task: TaskSpec, label_form: str) -> frozenset:
    labels: set[str] = set()
    for step in task.steps:
        if step.gold_labels:
            labels |= step.gold_labels
    return _label_set(labels, label_form)


def _effective_deps(deps: mcts.EngineDeps,
                    rag_mode: Optional[str]) -> mcts.EngineDeps:
    if rag_mode is None or rag_mode == deps.rag_mode:
        return deps
    if rag_mode not in ("at0", "at3"):
        raise ValueError(f"unknown rag mode {rag_mode!r}")
    return dataclasses.replace(deps, rag_mode=rag_mode)


def _evaluate_one_single(task: TaskSpec, deps: mcts.EngineDeps,
                         cfg: AgentConfig, label_form: str) -> _TaskOutcome:
    step = task.steps[0]
    gold = _label_set(step.gold_labels or (), label_form)
    try:
        prompt = mcts.build_step_prompt(task, step, "", deps, cfg)
        candidates = llm.complete(deps.provider, prompt, cfg, n=1)
        code = "\n".join(analysis.split_blocks(candidates[0].text)) \
            if candidates else ""
        if not code:
            return _TaskOutcome(task.id, gold, frozenset(), pass1=0.0)
        session = sandbox.open_session(deps.runner)
        try:
            outcome = sandbox.execute(session, code, deps.exec_timeout_ms)
        finally:
            sandbox.close(session)
        return _TaskOutcome(
            task.id, gold, _labels_of_code(code, label_form),
            pass1=1.0 if outcome.status == "pass" else 0.0)
    except (llm.GatewayError, llm.ProviderError, sandbox.SandboxError) as exc:
        return _TaskOutcome(task.id, gold, frozenset(), pass1=0.0,
                            error=str(exc))


def _evaluate_one_multi(task: TaskSpec, deps: mcts.EngineDeps,
                        cfg: AgentConfig, run_mode: str, label_form: str,
                        scripted_edits: Optional[dict[int, str]]) -> _TaskOutcome:
    gold = _gold_labels(task, label_form)
    try:
        solution, _tree = mcts.run_search(
            task, deps, cfg,
            mode="human" if run_mode == "human" else "auto",
            scripted_edits=scripted_edits)
        predicted: frozenset = frozenset()
        for cell in solution.cells:
            predicted |= _labels_of_code(cell.code, label_form)
        complete1 = (solution.completed_steps / solution.total_steps
                     if solution.total_steps else 0.0)
        return _TaskOutcome(
            task.id, gold, predicted,
            pass1=1.0 if solution.completed_steps == solution.total_steps
            else 0.0,
            complete1=complete1)
    except (llm.GatewayError, llm.ProviderError, sandbox.SandboxError,
            mcts.SearchExhausted, mcts.ExpansionError,
            mcts.EvaluationError) as exc:
        return _TaskOutcome(task.id, gold, frozenset(), pass1=0.0,
                            complete1=0.0, error=str(exc))


def _run_all(tasks: Sequence[TaskSpec], jobs: int, work) -> list[_TaskOutcome]:
    if jobs <= 1 or len(tasks) <= 1:
        return [work(task) for task in tasks]
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(work, tasks))


def _build_report(outcomes: Sequence[_TaskOutcome], mode: str, run_mode: str,
                  conventional_pr: bool,
                  with_complete1: bool) -> MetricsReport:
    # Aggregation is a deterministic fold in task-id order regardless of
    # evaluation concurrency.
    outcomes = sorted(outcomes, key=lambda o: o.task_id)
    pairs = [(o.gold, o.predicted) for o in outcomes]
    universe = frozenset().union(*[g | p for g, p in pairs]) if pairs \
        else frozenset()
    per_task: dict[str, dict[str, float]] = {}
    for outcome in outcomes:
        pair = [(outcome.gold, outcome.predicted)]
        row = {
            "accuracy": metric_accuracy(pair),
            "recall": metric_recall(pair, conventional_pr),
            "precision": metric_precision(pair, conventional_pr),
            "f1": metric_f1(pair),
            "pass1": outcome.pass1,
        }
        if with_complete1:
            row["complete1"] = outcome.complete1 or 0.0
        per_task[outcome.task_id] = row
    aggregate = {
        "accuracy": metric_accuracy(pairs),
        "recall": metric_recall(pairs, conventional_pr),
        "precision": metric_precision(pairs, conventional_pr),
        "f1": metric_f1(pairs),
        "pass1": sum(o.pass1 for o in outcomes) / len(outcomes),
    }
    if with_complete1:
        aggregate["complete1"] = sum(o.complete1 or 0.0 for o in outcomes) \
            / len(outcomes)
    hamming = metric_hamming(pairs, universe) if universe else 0.0
    return MetricsReport(
        per_task=per_task,
        aggregate=aggregate,
        hamming=hamming,
        universe_size_K=max(1, len(universe)),
        mode=mode,
        run_mode=run_mode,
        errors={o.task_id: o.error for o in outcomes if o.error},
    )


def evaluate_single_turn(tasks: Sequence[TaskSpec], deps: mcts.EngineDeps,
                         cfg: AgentConfig, rag_mode: Optional[str] = None,
                         *, label_form: str = "dotted",
                         conventional_pr: bool = False,
                         jobs: int = 1) -> MetricsReport:
    """One-shot generation per task: pass@1 plus function-call metrics."""
    if not tasks:
        raise MetricError("cannot evaluate an empty suite")
    bad = [t.id for t in tasks if t.kind != "single_turn"]
    if bad:
        raise ValueError(f"not single_turn tasks: {bad}")
    deps = _effective_deps(deps, rag_mode)
    outcomes = _run_all(
        tasks, jobs,
        lambda task: _evaluate_one_single(task, deps, cfg, label_form))
    return _build_report(outcomes, deps.rag_mode, "auto", conventional_pr,
                         with_complete1=False)


def evaluate_multi_turn(tasks: Sequence[TaskSpec], deps: mcts.EngineDeps,
                        cfg: AgentConfig, run_mode: str = "auto",
                        rag_mode: Optional[str] = None,
                        *, label_form: str = "dotted",
                        conventional_pr: bool = False,
                        scripted_edits: Optional[dict[str, dict[int, str]]] = None,
                        jobs: int = 1) -> MetricsReport:
    """Full search per task: complete@1 plus function-call metrics.

    ``run_mode`` is ``auto`` or ``human`` (scripted interventions, keyed
    ``{task_id: {step_index: replacement_code}}``).
    """
    if not tasks:
        raise MetricError("cannot evaluate an empty suite")
    if run_mode not in ("auto", "human"):
        raise ValueError(f"unknown run mode {run_mode!r}")
    bad = [t.id for t in tasks if t.kind != "multi_turn"]
    if bad:
        raise ValueError(f"not multi_turn tasks: {bad}")
    deps = _effective_deps(deps, rag_mode)
    edits = scripted_edits or {}
    outcomes = _run_all(
        tasks, jobs,
        lambda task: _evaluate_one_multi(
            task, deps, cfg, run_mode, label_form,
            edits.get(task.id, {} if run_mode == "human" else None)))
    return _build_report(outcomes, deps.rag_mode, run_mode, conventional_pr,
                         with_complete1=True)


# ---------------------------------------------------------------------------
# Multi → single conversion
# ---------------------------------------------------------------------------


def convert_multi_to_single(task: TaskSpec) -> list[TaskSpec]:
    """Split a multi-step task into independent single-turn tasks.

    Step i's instruction gains the verbatim gold code of steps 0..i-1 as
    previous-code context (step 0 gets none), so each derived task can be
    evaluated in isolation.
    """
    missing = [s.index for s in task.steps if s.gold_code is None]
    if missing:
        raise ConversionError(
            f"task {task.id}: steps {missing} lack gold_code; "
            f"conversion needs the full gold program")
    derived: list[TaskSpec] = []
    for step in task.steps:
        prior = "\n".join(s.gold_code for s in task.steps[:step.index])
        instruction = step.instruction
        if prior:
            instruction = f"{instruction} Here is the previous code:\n{prior}"
        derived.append(TaskSpec(
            id=f"{task.id}#{step.index}",
            kind="single_turn",
            libraries=task.libraries,
            steps=(StepSpec(
                index=0,
                instruction=instruction,
                library_hints=step.library_hints,
                gold_code=step.gold_code,
                gold_labels=step.gold_labels,
            ),),
        ))
    return derived
