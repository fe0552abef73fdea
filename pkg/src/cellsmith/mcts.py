"""Monte Carlo tree search over candidate programs.

Nodes are code cells; the path from the root to a node is a program
prefix.  Selection follows a probabilistic upper confidence bound
(p-UCB) with an exploration weight that grows logarithmically with
visits; expansion samples candidate cells and filters them through
parsing and real execution; evaluation rewards a node by how much of a
generated look-ahead continuation still executes; backpropagation takes
the running maximum of rewards.
"""
from __future__ import annotations

import io
import math
import tokenize
import uuid
import warnings
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Optional, Sequence

from . import analysis, llm, retriever, sandbox
from .model import AgentConfig, StepSpec, TaskSpec

__all__ = [
    "SearchNode",
    "SearchTree",
    "EngineDeps",
    "SearchExhausted",
    "ExpansionError",
    "EvaluationError",
    "beta",
    "pucb_score",
    "select",
    "expand",
    "evaluate",
    "backpropagate",
    "surgery_undefined",
    "apply_surgery_to_tree",
    "run_search",
    "normalize_code",
    "build_step_prompt",
]


class SearchExhausted(RuntimeError):
    """No unexpanded node is reachable; the search space is spent."""


class ExpansionError(RuntimeError):
    pass


class EvaluationError(RuntimeError):
    pass


@dataclass
class SearchNode:
    node_id: int
    parent: Optional[int]
    step_index: int
    code: str
    prior_p: float
    visits_v: int = 0
    value_Q: float = 0.0
    children: list[int] = field(default_factory=list)
    status: str = "unexpanded"  # unexpanded | expanded | terminal_pass | terminal_fail
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "parent": self.parent,
            "step_index": self.step_index,
            "code": self.code,
            "prior_p": self.prior_p,
            "visits_v": self.visits_v,
            "value_Q": self.value_Q,
            "children": list(self.children),
            "status": self.status,
            "error": self.error,
        }


class SearchTree:
    """Single-writer tree; the root (id 0) holds no code and starts with
    one visit so the exploration term is defined on the first selection."""

    def __init__(self) -> None:
        root = SearchNode(node_id=0, parent=None, step_index=-1, code="",
                          prior_p=1.0, visits_v=1)
        self.nodes: dict[int, SearchNode] = {0: root}
        self.root_id = 0
        self._next_id = 1

    def node(self, node_id: int) -> SearchNode:
        return self.nodes[node_id]

    @property
    def root(self) -> SearchNode:
        return self.nodes[self.root_id]

    def add_child(self, parent_id: int, *, step_index: int, code: str,
                  prior_p: float, status: str = "unexpanded",
                  value_q: float = 0.0, error: Optional[str] = None,
                  node_id: Optional[int] = None) -> int:
        if status == "terminal_fail" and value_q != -1.0:
            raise ValueError("terminal_fail children are created with Q=-1")
        if not (0.0 < prior_p <= 1.0):
            raise ValueError(f"prior_p must be in (0,1], got {prior_p}")
        if node_id is None:
            node_id = self._next_id
        if node_id in self.nodes:
            raise ValueError(f"node id {node_id} already present")
        self._next_id = max(self._next_id, node_id) + 1
        node = SearchNode(node_id=node_id, parent=parent_id,
                          step_index=step_index, code=code, prior_p=prior_p,
                          value_Q=value_q, status=status, error=error)
        self.nodes[node_id] = node
        self.nodes[parent_id].children.append(node_id)
        return node_id

    def remove_subtree(self, node_id: int) -> list[int]:
        """Detach and delete a node and its descendants; returns removed ids."""
        if node_id == self.root_id:
            raise ValueError("cannot remove the root")
        node = self.nodes[node_id]
        parent = self.nodes[node.parent]
        parent.children.remove(node_id)
        removed = []
        stack = [node_id]
        while stack:
            nid = stack.pop()
            removed.append(nid)
            stack.extend(self.nodes[nid].children)
            del self.nodes[nid]
        return removed

    def ancestors(self, node_id: int) -> list[int]:
        """Path node→root (inclusive of both ends)."""
        path = [node_id]
        while self.nodes[path[-1]].parent is not None:
            path.append(self.nodes[path[-1]].parent)
        return path

    def program_cells(self, node_id: int) -> list[str]:
        cells = [self.nodes[nid].code for nid in reversed(self.ancestors(node_id))]
        return [c for c in cells if c]

    def program(self, node_id: int) -> str:
        return "\n".join(self.program_cells(node_id))

    def dump(self) -> dict:
        return {
            "root": self.root_id,
            "nodes": [self.nodes[nid].to_dict() for nid in sorted(self.nodes)],
        }

    def check_invariants(self) -> None:
        root = self.nodes[self.root_id]
        assert root.parent is None and root.step_index == -1 and root.code == ""
        seen: set[int] = set()
        stack = [self.root_id]
        while stack:
            nid = stack.pop()
            assert nid not in seen, f"cycle through node {nid}"
            seen.add(nid)
            node = self.nodes[nid]
            assert -1.0 <= node.value_Q <= 1.0
            assert node.visits_v >= 0
            for child_id in node.children:
                child = self.nodes[child_id]
                assert child.parent == nid
                assert node.visits_v >= child.visits_v, \
                    f"visits invariant broken at {nid}->{child_id}"
                stack.append(child_id)
        assert seen == set(self.nodes), "unreachable nodes present"


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def beta(v0: int, c_base: float, c: float) -> float:
    """Exploration weight: ln((v0 + c_base + 1) / c_base) + c."""
    if c_base <= 0:
        raise ValueError("c_base must be positive")
    return math.log((v0 + c_base + 1) / c_base) + c


def pucb_score(child: SearchNode, parent_visits: int, cfg: AgentConfig) -> float:
    """Q plus the prior-weighted exploration bonus."""
    if parent_visits < 1:
        raise ValueError("parent_visits must be >= 1")
    weight = beta(parent_visits, cfg.c_base, cfg.c)
    explore = weight * child.prior_p * math.sqrt(math.log(parent_visits)) / (1 + child.visits_v)
    return child.value_Q + explore


def select(tree: SearchTree, cfg: AgentConfig,
           from_node: Optional[int] = None) -> int:
    """Descend by per-level p-UCB argmax to an unexpanded node.

    Ties break toward the lowest node id.  Subtrees containing no
    unexpanded node (all terminal) are skipped; if none remains, the
    search space is exhausted.
    """
    start = from_node if from_node is not None else tree.root_id

    def descend(node_id: int) -> Optional[int]:
        node = tree.nodes[node_id]
        if node.status == "unexpanded":
            return node_id
        if node.status in ("terminal_pass", "terminal_fail") or not node.children:
            return None
        ranked = sorted(
            node.children,
            key=lambda cid: (-pucb_score(tree.nodes[cid], node.visits_v, cfg), cid),
        )
        for child_id in ranked:
            found = descend(child_id)
            if found is not None:
                return found
        return None

    found = descend(start)
    if found is None:
        raise SearchExhausted(f"no unexpanded node reachable from {start}")
    return found


def backpropagate(tree: SearchTree, node_id: int, reward: float) -> None:
    """Max-update Q and bump visit counts on the node and all ancestors."""
    reward = max(-1.0, min(1.0, reward))
    for nid in tree.ancestors(node_id):
        node = tree.nodes[nid]
        node.value_Q = max(node.value_Q, reward)
        node.visits_v += 1


# ---------------------------------------------------------------------------
# Prompt assembly
# ---------------------------------------------------------------------------


@dataclass
class EngineDeps:
    """Everything the engine needs injected: generation, retrieval, sandbox,
    and an event sink."""

    provider: Any
    runner: sandbox.RunnerConfig = field(default_factory=sandbox.RunnerConfig)
    index: Optional[retriever.EmbeddingIndex] = None
    embedder: Optional[Any] = None
    rag_mode: str = "at0"  # at0 = no retrieval, at3 = top-k retrieval
    exec_timeout_ms: int = 30000
    emit: Callable[[str, dict], None] = lambda kind, payload: None


def build_step_prompt(task: TaskSpec, step: StepSpec, prior_code: str,
                      deps: EngineDeps, cfg: AgentConfig,
                      extra_context: str = "") -> str:
    """Compose the generation prompt for one step.

    First steps use the plain inference template; later steps use the
    instruction-tuning template so the committed prefix rides along.
    Retrieval snippets (when enabled and the step mentions a known
    library) and repair context are appended after the template.
    """
    libraries = ", ".join(step.library_hints or task.libraries)
    if prior_code:
        base = llm.render_prompt("instruction_tune", {
            "library": libraries,
            "previous_code": prior_code,
        })
        base = f"{base}\n{step.instruction}"
    else:
        base = llm.render_prompt("inference", {
            "library": libraries,
            "prompt": step.instruction,
        })
    parts = [base]
    if (deps.rag_mode == "at3" and deps.index is not None
            and cfg.k_retrieve > 0
            and retriever.should_retrieve(step, task.libraries)):
        query_text = step.instruction
        if cfg.query_includes_prior_code and prior_code:
            query_text = f"{query_text}\n{prior_code}"
        items = retriever.query(
            deps.index, query_text,
            library_filter=set(step.library_hints) or None,
            k=cfg.k_retrieve, embedder=deps.embedder)
        if items:
            lines = [f"- {item.function_name}: {item.usage}" for item in items]
            parts.append("Relevant API usage:\n" + "\n".join(lines))
    if extra_context:
        parts.append(extra_context)
    return "\n\n".join(parts)


# ---------------------------------------------------------------------------
# Expansion / evaluation
# ---------------------------------------------------------------------------


def _candidate_code(text: str) -> str:
    return "\n".join(analysis.split_blocks(text))


def expand(tree: SearchTree, node_id: int, task: TaskSpec, deps: EngineDeps,
           cfg: AgentConfig, extra_context: str = "") -> list[int]:
    """Sample candidate cells for the node's next step and keep the
    execution-clean top-k as children.

    Every candidate must parse and execute on top of the node's program in
    a fresh session.  Survivors enter with Q=0, ranked by sequence prior;
    the highest-prior failure is retained as a single terminal_fail
    exemplar (Q=-1) for diagnostics.
    """
    node = tree.nodes[node_id]
    if node.status != "unexpanded":
        raise ExpansionError(f"node {node_id} is {node.status}, not unexpanded")
    next_index = node.step_index + 1
    if next_index >= len(task.steps):
        raise ExpansionError(f"no step {next_index} in task {task.id}")
    step = task.steps[next_index]
    prior_code = tree.program(node_id)
    prompt = build_step_prompt(task, step, prior_code, deps, cfg, extra_context)
    candidates = llm.complete(deps.provider, prompt, cfg, n=cfg.n_samples)

    prefix_cells = tree.program_cells(node_id)
    survivors: list[tuple[llm.Candidate, str]] = []
    failures: list[tuple[llm.Candidate, str, Optional[sandbox.ExecutionOutcome]]] = []
    for candidate in candidates:
        code = _candidate_code(candidate.text)
        if not code:
            continue
        try:
            compile(code, "<candidate>", "exec")
        except SyntaxError as exc:
            error_class = analysis.classify_error(type(exc).__name__, str(exc),
                                                  phase="parse")
            tb = sandbox.Traceback(exception_type=type(exc).__name__,
                                   message=str(exc))
            outcome = sandbox.ExecutionOutcome(status="fail", traceback=tb,
                                               error_class=error_class)
            failures.append((candidate, code, outcome))
            deps.emit("execution", {
                "step_index": step.index, "phase": "filter", "status": "fail",
                "exception_type": tb.exception_type,
                "error_class": error_class.label,
            })
            continue
        session, outcomes = sandbox.replay_cells(
            deps.runner, prefix_cells + [code], deps.exec_timeout_ms)
        sandbox.close(session)
        if len(outcomes) < len(prefix_cells) + 1:
            raise ExpansionError(
                f"committed prefix no longer executes (cell {len(outcomes) - 1} "
                f"failed during replay)")
        outcome = outcomes[-1]
        deps.emit("execution", {
            "step_index": step.index, "phase": "filter", "status": outcome.status,
            "exception_type": (outcome.traceback.exception_type
                               if outcome.traceback else None),
            "error_class": (outcome.error_class.label
                            if outcome.error_class else None),
        })
        if outcome.status == "pass":
            survivors.append((candidate, code))
        else:
            failures.append((candidate, code, outcome))

    survivors.sort(key=lambda pair: -pair[0].seq_prior)
    children_payload: list[dict] = []
    for candidate, code in survivors[:cfg.k_top]:
        children_payload.append({
            "step_index": step.index, "code": code,
            "prior_p": candidate.seq_prior, "status": "unexpanded",
            "value_Q": 0.0, "error": None,
        })
    if failures:
        failures.sort(key=lambda item: -item[0].seq_prior)
        candidate, code, outcome = failures[0]
        tb = outcome.traceback if outcome else None
        children_payload.append({
            "step_index": step.index, "code": code,
            "prior_p": candidate.seq_prior, "status": "terminal_fail",
            "value_Q": -1.0,
            "error": f"{tb.exception_type}: {tb.message}" if tb else "failed",
        })

    new_ids = []
    for payload in children_payload:
        new_ids.append(tree.add_child(
            node_id, step_index=payload["step_index"], code=payload["code"],
            prior_p=payload["prior_p"], status=payload["status"],
            value_q=payload["value_Q"], error=payload["error"]))
    node.status = "expanded"
    deps.emit("node_expanded", {
        "parent_id": node_id,
        "children": [
            {**payload, "node_id": nid}
            for payload, nid in zip(children_payload, new_ids)
        ],
    })
    return new_ids


def normalize_code(code: str) -> str:
    """Equality form for the overlap check: comments and layout dropped."""
    try:
        tokens = []
        skip = {tokenize.COMMENT, tokenize.NL, tokenize.NEWLINE, tokenize.INDENT,
                tokenize.DEDENT, tokenize.ENCODING, tokenize.ENDMARKER}
        for tok in tokenize.generate_tokens(io.StringIO(code).readline):
            if tok.type not in skip:
                tokens.append(tok.string)
        return " ".join(tokens)
    except (tokenize.TokenError, IndentationError, SyntaxError):
        lines = [" ".join(line.split()) for line in code.splitlines()]
        return " ".join(line for line in lines if line and not line.startswith("#"))


def evaluate(tree: SearchTree, node_id: int, task: TaskSpec, deps: EngineDeps,
             cfg: AgentConfig) -> float:
    """Look-ahead reward: the fraction of a generated continuation that
    still executes on top of the node's program.

    The continuation covers min(lookahead_steps, remaining steps) in one
    generation.  A continuation that normalizes identically to the node's
    own cell scores 1.0; a node with no remaining steps is a complete
    program and also scores 1.0.
    """
    node = tree.nodes[node_id]
    remaining = task.steps[node.step_index + 1:]
    lookahead = len(remaining) if cfg.lookahead_steps is None else min(
        cfg.lookahead_steps, len(remaining))
    if lookahead == 0:
        deps.emit("reward", {"node_id": node_id, "reward": 1.0})
        return 1.0
    instructions = "\n".join(
        f"{i + 1}. {step.instruction}"
        for i, step in enumerate(remaining[:lookahead]))
    libraries = ", ".join(task.libraries)
    base = llm.render_prompt("instruction_tune", {
        "library": libraries,
        "previous_code": tree.program(node_id),
    })
    prompt = (f"{base}\nProvide the code for each of the following steps as a "
              f"separate fenced code block, in order:\n{instructions}")
    candidates = llm.complete(deps.provider, prompt, cfg, n=1)
    cells: list[str] = []
    if candidates:
        cells = analysis.split_blocks(candidates[0].text)
    if not cells:
        deps.emit("reward", {"node_id": node_id, "reward": 0.0})
        return 0.0
    if normalize_code("\n".join(cells)) == normalize_code(node.code):
        deps.emit("reward", {"node_id": node_id, "reward": 1.0})
        return 1.0
    prefix = tree.program_cells(node_id)
    session, outcomes = sandbox.replay_cells(deps.runner, prefix,
                                             deps.exec_timeout_ms)
    try:
        # replay stops at the first failure but still returns that outcome,
        # so a short list and a failing tail both mean a corrupt prefix
        if len(outcomes) < len(prefix) or (
                outcomes and outcomes[-1].status != "pass"):
            raise EvaluationError("node program no longer executes on replay")
        passed = 0
        for cell in cells:
            outcome = sandbox.execute(session, cell, deps.exec_timeout_ms)
            deps.emit("execution", {
                "step_index": node.step_index, "phase": "lookahead",
                "status": outcome.status,
                "exception_type": (outcome.traceback.exception_type
                                   if outcome.traceback else None),
                "error_class": (outcome.error_class.label
                                if outcome.error_class else None),
            })
            if outcome.status != "pass":
                break
            passed += 1
    finally:
        sandbox.close(session)
    reward = passed / len(cells)
    deps.emit("reward", {"node_id": node_id, "reward": reward})
    return reward


# ---------------------------------------------------------------------------
# Surgery
# ---------------------------------------------------------------------------


def apply_surgery_to_tree(tree: SearchTree, node_id: int) -> list[int]:
    """Prune the offending expansion and renumber deeper steps.

    Removes the offending node's subtree plus any terminal_fail siblings
    (they answered the step numbering being superseded), reopens the
    parent if it ends up childless, and bumps step_index on any remaining
    node at or beyond the offending step.
    """
    node = tree.nodes[node_id]
    parent_id = node.parent
    step_index = node.step_index
    removed = tree.remove_subtree(node_id)
    if parent_id is not None:
        parent = tree.nodes[parent_id]
        for sibling_id in [cid for cid in parent.children
                           if tree.nodes[cid].status == "terminal_fail"]:
            removed.extend(tree.remove_subtree(sibling_id))
        if not parent.children:
            parent.status = "unexpanded"
    for other in tree.nodes.values():
        if other.step_index >= step_index:
            other.step_index += 1
    return removed


def make_definition_step(step: StepSpec, undefined_names: Iterable[str]) -> StepSpec:
    names = ", ".join(sorted(undefined_names))
    instruction = llm.render_prompt("prepend_task", {
        "next_step_instruction": step.instruction,
    })
    instruction = f"{instruction} The undefined variables are: {names}."
    return StepSpec(index=step.index, instruction=instruction,
                    library_hints=step.library_hints)


def surgery_undefined(tree: SearchTree, node_id: int,
                      undefined_names: set[str],
                      task: TaskSpec) -> tuple[TaskSpec, Optional[StepSpec]]:
    """Remove the subtree that reads undefined names and insert a
    definition step immediately before the offending step.

    Returns the (possibly) modified task and the inserted step, or
    ``(task, None)`` when there is nothing to fix.
    """
    if not undefined_names:
        return task, None
    node = tree.nodes[node_id]
    prefix_defined = analysis.bound_names(tree.program(node.parent)) if node.parent is not None else set()
    already = set(undefined_names) & prefix_defined
    if already == set(undefined_names):
        warnings.warn(
            f"surgery requested for names already defined in prefix: {sorted(already)}",
            stacklevel=2)
        return task, None
    step_index = node.step_index
    offending = task.steps[step_index]
    new_step = make_definition_step(offending, undefined_names)
    apply_surgery_to_tree(tree, node_id)
    shifted = [replace(s, index=s.index + 1) for s in task.steps[step_index:]]
    steps = tuple(list(task.steps[:step_index]) + [new_step] + shifted)
    kind = "multi_turn" if len(steps) > 1 else task.kind
    new_task = TaskSpec(id=task.id, kind=kind, libraries=task.libraries,
                        steps=steps)
    return new_task, new_step


# ---------------------------------------------------------------------------
# Full search
# ---------------------------------------------------------------------------


def run_search(task: TaskSpec, deps: EngineDeps, cfg: AgentConfig,
               mode: str = "auto",
               scripted_edits: Optional[dict[int, str]] = None,
               run_id: Optional[str] = None):
    """Drive the per-step search loop over a whole task.

    Returns ``(SolutionProgram, SearchTree)``.  In human mode, a step that
    exhausts its attempts pauses for an intervention; scripted edits (step
    index → replacement code) stand in for a live operator.
    """
    from . import refine

    state = refine.start_run(task, deps, cfg, mode=mode,
                             run_id=run_id or uuid.uuid4().hex[:12])
    try:
        refine.advance(state)
        while state.status == "paused" and scripted_edits is not None:
            step_index = state.pending.step_index
            if step_index not in scripted_edits:
                refine.abandon(state)
                break
            edit = refine.HumanEdit(step_index=step_index,
                                    edited_code=scripted_edits[step_index])
            refine.apply_edit(state, edit)
            refine.advance(state)
        return state.solution(), state.tree
    finally:
        refine.release(state)
