"""Core data model: task specifications, agent configuration, and suite files.

A *suite* is a JSON document holding an array of tasks.  Each task is either
``single_turn`` (one step) or ``multi_turn`` (two or more steps whose code
cells build on each other inside one interpreter session).  The schema is
closed: unknown fields are rejected so that typos in hand-written suites
surface immediately instead of silently changing behaviour.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from typing import Any, Iterable, Optional

__all__ = [
    "SuiteError",
    "SuiteSchemaError",
    "SuiteValidationError",
    "StepSpec",
    "TaskSpec",
    "AgentConfig",
    "CellRecord",
    "SolutionProgram",
    "parse_suite",
    "serialize_suite",
    "estimate_tokens",
]


class SuiteError(ValueError):
    """Base class for suite file problems."""


class SuiteSchemaError(SuiteError):
    """The document shape is wrong (bad type, missing or unknown field).

    ``path`` names the offending element, e.g. ``tasks[2].steps[0].index``.
    """

    def __init__(self, path: str, message: str) -> None:
        self.path = path
        super().__init__(f"{path}: {message}")


class SuiteValidationError(SuiteError):
    """The document parsed but violates a semantic invariant."""


@dataclass(frozen=True)
class StepSpec:
    """One natural-language step of a task."""

    index: int
    instruction: str
    library_hints: tuple[str, ...] = ()
    gold_code: Optional[str] = None
    gold_labels: Optional[frozenset[str]] = None

    def __post_init__(self) -> None:
        if not isinstance(self.index, int) or self.index < 0:
            raise SuiteValidationError(f"step index must be a non-negative int, got {self.index!r}")
        if not self.instruction or not self.instruction.strip():
            raise SuiteValidationError("step instruction must be non-empty")
        if self.gold_labels is not None and self.gold_code is None:
            raise SuiteValidationError(
                f"step {self.index}: gold_labels present without gold_code"
            )


@dataclass(frozen=True)
class TaskSpec:
    """A benchmark task: an ordered sequence of steps over some libraries."""

    id: str
    kind: str  # "single_turn" | "multi_turn"
    libraries: tuple[str, ...] = ()
    steps: tuple[StepSpec, ...] = ()

    def __post_init__(self) -> None:
        if not self.id:
            raise SuiteValidationError("task id must be non-empty")
        if self.kind not in ("single_turn", "multi_turn"):
            raise SuiteValidationError(f"task {self.id}: unknown kind {self.kind!r}")
        if self.kind == "single_turn" and len(self.steps) != 1:
            raise SuiteValidationError(
                f"task {self.id}: single_turn requires exactly 1 step, got {len(self.steps)}"
            )
        if self.kind == "multi_turn" and len(self.steps) < 2:
            raise SuiteValidationError(
                f"task {self.id}: multi_turn requires at least 2 steps, got {len(self.steps)}"
            )
        indices = [s.index for s in self.steps]
        if indices != list(range(len(self.steps))):
            raise SuiteValidationError(
                f"task {self.id}: non-contiguous step indices {indices}"
            )
        known = set(self.libraries)
        for step in self.steps:
            unknown = [h for h in step.library_hints if h not in known]
            if unknown:
                raise SuiteValidationError(
                    f"task {self.id} step {step.index}: library_hints {unknown} "
                    f"not listed in task libraries"
                )


@dataclass(frozen=True)
class AgentConfig:
    """Tunable knobs for search, sampling, retrieval, and repair.

    ``lookahead_steps=None`` means "evaluate over all remaining steps".
    """

    c_base: float = 10.0
    c: float = 4.0
    n_samples: int = 6
    k_top: int = 3
    k_retrieve: int = 3
    max_attempts: int = 3
    lookahead_steps: Optional[int] = None
    temperature: float = 0.6
    top_p: float = 0.9
    max_tokens: int = 2048
    context_window_tokens: int = 32768
    query_includes_prior_code: bool = False

    def __post_init__(self) -> None:
        if self.c_base <= 0:
            raise ValueError(f"c_base must be > 0, got {self.c_base}")
        if self.c < 0:
            raise ValueError(f"c must be >= 0, got {self.c}")
        for name in ("n_samples", "k_top", "max_attempts", "max_tokens",
                     "context_window_tokens"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive int, got {value!r}")
        if self.k_retrieve < 0:
            raise ValueError(f"k_retrieve must be >= 0, got {self.k_retrieve}")
        if self.k_top > self.n_samples:
            raise ValueError(
                f"k_top ({self.k_top}) must not exceed n_samples ({self.n_samples})"
            )
        if self.lookahead_steps is not None and self.lookahead_steps < 1:
            raise ValueError(
                f"lookahead_steps must be >= 1 or None, got {self.lookahead_steps}"
            )
        if not (0.0 <= self.temperature <= 2.0):
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AgentConfig":
        unknown = set(data) - {f.name for f in _CONFIG_FIELDS}
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in _CONFIG_FIELDS}

    def with_overrides(self, **kwargs: Any) -> "AgentConfig":
        return replace(self, **kwargs)


_CONFIG_FIELDS = fields(AgentConfig)


@dataclass(frozen=True)
class CellRecord:
    """One committed code cell of a solution."""

    step_index: int
    code: str
    source: str = "agent"  # "agent" | "human"
    outcome_ref: Optional[str] = None


@dataclass(frozen=True)
class SolutionProgram:
    """The committed cells of a run plus how far it got."""

    task_id: str
    cells: tuple[CellRecord, ...]
    completed_steps: int
    total_steps: int

    def __post_init__(self) -> None:
        if self.completed_steps > self.total_steps:
            raise ValueError(
                f"completed_steps ({self.completed_steps}) exceeds "
                f"total_steps ({self.total_steps})"
            )
        indices = [c.step_index for c in self.cells]
        if indices != sorted(indices):
            raise ValueError(f"cells out of order: {indices}")

    @property
    def code(self) -> str:
        return "\n".join(c.code for c in self.cells)


def estimate_tokens(text: str) -> int:
    """Crude token estimate (4 chars/token) used for context budgeting."""
    return (len(text) + 3) // 4


# ---------------------------------------------------------------------------
# Suite file parsing / serialization
# ---------------------------------------------------------------------------

_TASK_KEYS = {"id", "kind", "libraries", "steps"}
_STEP_KEYS = {"index", "instruction", "library_hints", "gold_code", "gold_labels"}


def _expect(value: Any, kind: type, path: str, what: str) -> Any:
    if not isinstance(value, kind):
        raise SuiteSchemaError(path, f"expected {what}, got {type(value).__name__}")
    return value


def _str_list(value: Any, path: str) -> tuple[str, ...]:
    _expect(value, list, path, "an array of strings")
    out = []
    for i, item in enumerate(value):
        _expect(item, str, f"{path}[{i}]", "a string")
        out.append(item)
    return tuple(out)


def _parse_step(raw: Any, path: str) -> StepSpec:
    _expect(raw, dict, path, "an object")
    unknown = set(raw) - _STEP_KEYS
    if unknown:
        raise SuiteSchemaError(f"{path}.{sorted(unknown)[0]}", "unknown field")
    for key in ("index", "instruction"):
        if key not in raw:
            raise SuiteSchemaError(f"{path}.{key}", "missing required field")
    index = raw["index"]
    if isinstance(index, bool) or not isinstance(index, int):
        raise SuiteSchemaError(f"{path}.index", "expected an integer")
    instruction = _expect(raw["instruction"], str, f"{path}.instruction", "a string")
    hints = _str_list(raw.get("library_hints", []), f"{path}.library_hints")
    gold_code = raw.get("gold_code")
    if gold_code is not None:
        _expect(gold_code, str, f"{path}.gold_code", "a string")
    gold_labels = raw.get("gold_labels")
    if gold_labels is not None:
        gold_labels = frozenset(_str_list(gold_labels, f"{path}.gold_labels"))
    try:
        return StepSpec(index=index, instruction=instruction, library_hints=hints,
                        gold_code=gold_code, gold_labels=gold_labels)
    except SuiteValidationError as exc:
        raise SuiteValidationError(f"{path}: {exc}") from None


def _parse_task(raw: Any, path: str, derive_labels: bool) -> TaskSpec:
    _expect(raw, dict, path, "an object")
    unknown = set(raw) - _TASK_KEYS
    if unknown:
        raise SuiteSchemaError(f"{path}.{sorted(unknown)[0]}", "unknown field")
    for key in ("id", "kind", "steps"):
        if key not in raw:
            raise SuiteSchemaError(f"{path}.{key}", "missing required field")
    task_id = _expect(raw["id"], str, f"{path}.id", "a string")
    kind = _expect(raw["kind"], str, f"{path}.kind", "a string")
    libraries = _str_list(raw.get("libraries", []), f"{path}.libraries")
    steps_raw = _expect(raw["steps"], list, f"{path}.steps", "an array")
    steps = []
    for i, step_raw in enumerate(steps_raw):
        step = _parse_step(step_raw, f"{path}.steps[{i}]")
        if derive_labels and step.gold_code is not None and step.gold_labels is None:
            from . import analysis

            step = replace(step, gold_labels=frozenset(
                analysis.extract_call_labels(step.gold_code)))
        steps.append(step)
    try:
        return TaskSpec(id=task_id, kind=kind, libraries=libraries, steps=tuple(steps))
    except SuiteValidationError as exc:
        raise SuiteValidationError(f"{path}: {exc}") from None


def parse_suite(data: bytes | str, *, derive_labels: bool = False) -> list[TaskSpec]:
    """Parse a suite document into validated tasks.

    With ``derive_labels=True``, steps that carry ``gold_code`` but no
    ``gold_labels`` get labels derived from the gold code's call sites.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SuiteSchemaError("tasks", f"invalid JSON: {exc}") from None
    _expect(doc, list, "tasks", "a top-level array of tasks")
    tasks = [
        _parse_task(raw, f"tasks[{i}]", derive_labels) for i, raw in enumerate(doc)
    ]
    seen: dict[str, int] = {}
    for i, task in enumerate(tasks):
        if task.id in seen:
            raise SuiteValidationError(
                f"duplicate task id {task.id!r} (tasks[{seen[task.id]}] and tasks[{i}])"
            )
        seen[task.id] = i
    return tasks


def _step_to_dict(step: StepSpec) -> dict[str, Any]:
    out: dict[str, Any] = {
        "index": step.index,
        "instruction": step.instruction,
        "library_hints": list(step.library_hints),
    }
    if step.gold_code is not None:
        out["gold_code"] = step.gold_code
    if step.gold_labels is not None:
        out["gold_labels"] = sorted(step.gold_labels)
    return out


def task_to_dict(task: TaskSpec) -> dict[str, Any]:
    return {
        "id": task.id,
        "kind": task.kind,
        "libraries": list(task.libraries),
        "steps": [_step_to_dict(s) for s in task.steps],
    }


def serialize_suite(tasks: Iterable[TaskSpec]) -> bytes:
    """Serialize tasks to canonical suite-file bytes (round-trips losslessly)."""
    doc = [task_to_dict(t) for t in tasks]
    return (json.dumps(doc, indent=2, ensure_ascii=False, sort_keys=True) + "\n").encode("utf-8")
