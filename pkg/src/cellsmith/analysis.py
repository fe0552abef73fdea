"""Static analysis of guest code and execution failures.

Four concerns live here because they share the syntax tree and the error
taxonomy: splitting raw generation output into code cells, extracting the
set of called functions (the predicted label set for benchmarking),
finding names that are read but never bound (the trigger for task
surgery), and classifying execution failures so the repair loop can pick
a targeted hint.
"""
from __future__ import annotations

import ast
import builtins
import importlib.resources
import json
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

__all__ = [
    "ErrorClass",
    "FixHint",
    "ClassifierRules",
    "split_blocks",
    "extract_call_labels",
    "find_undefined_names",
    "classify_error",
    "suggest_fix",
    "find_receiver_expr",
    "to_bare_label",
]

ERROR_CLASSES = (
    "instruction_following",
    "api_hallucination",
    "undefined_variable",
    "lack_of_information",
    "syntax",
    "general",
)


@dataclass(frozen=True)
class ErrorClass:
    """A failure category plus the evidence that produced it."""

    label: str
    evidence: str

    def __post_init__(self) -> None:
        if self.label not in ERROR_CLASSES:
            raise ValueError(f"unknown error class {self.label!r}")


@dataclass(frozen=True)
class FixHint:
    """A targeted suggestion injected into the next repair prompt."""

    kind: str  # accessible_api_list | define_variables | traceback_advice
    payload: str

    def __post_init__(self) -> None:
        if self.kind not in ("accessible_api_list", "define_variables",
                             "traceback_advice"):
            raise ValueError(f"unknown hint kind {self.kind!r}")
        if self.kind == "accessible_api_list" and not self.payload.strip():
            raise ValueError("accessible_api_list hint requires a name list")


# ---------------------------------------------------------------------------
# Block splitting
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```[ \t]*[\w+-]*[ \t]*\r?\n(.*?)```", re.DOTALL)


def split_blocks(text: str) -> list[str]:
    """Split raw generation output into code cells.

    Fenced regions are extracted in order and surrounding prose dropped.
    Output with no fences is assumed to be bare code and returned as a
    single cell; empty output yields no cells.
    """
    if not text or not text.strip():
        return []
    blocks = [m.group(1).strip("\n") for m in _FENCE_RE.finditer(text)]
    blocks = [b for b in blocks if b.strip()]
    if blocks:
        return blocks
    if "```" in text:
        # Unterminated fence: take everything after the opening marker.
        tail = text.split("```", 1)[1]
        tail = tail.split("\n", 1)[1] if "\n" in tail else ""
        return [tail.strip("\n")] if tail.strip() else []
    return [text.strip("\n")]


# ---------------------------------------------------------------------------
# Call-label extraction
# ---------------------------------------------------------------------------

# Method names whose arguments are conventionally function references
# (callback idiom); bare-name arguments to these count as referenced
# functions, e.g. collection.map(maskS2clouds).
CALLBACK_METHODS = frozenset({"map", "apply"})


def _dotted_name(node: ast.expr) -> Optional[str]:
    parts: list[str] = []
    while isinstance(node, ast.Attribute):
        parts.append(node.attr)
        node = node.value
    if isinstance(node, ast.Name):
        parts.append(node.id)
        return ".".join(reversed(parts))
    return None


def extract_call_labels(code: str) -> set[str]:
    """Collect the functions a code cell references, as dotted labels.

    Call targets rooted at an identifier keep the full dotted chain
    (``ee.Filter.lte``); targets hanging off a computed value (method
    chaining) keep the bare method name (``filterDate``).  Bare-name
    arguments to callback-taking methods such as ``.map`` count as
    referenced functions too.
    """
    tree = ast.parse(code)
    labels: set[str] = set()
    for node in ast.walk(tree):
        if not isinstance(node, ast.Call):
            continue
        func = node.func
        terminal: Optional[str] = None
        if isinstance(func, ast.Name):
            terminal = func.id
            labels.add(func.id)
        elif isinstance(func, ast.Attribute):
            terminal = func.attr
            labels.add(_dotted_name(func) or func.attr)
        if terminal in CALLBACK_METHODS:
            args: list[ast.expr] = list(node.args)
            args.extend(kw.value for kw in node.keywords)
            for arg in args:
                if isinstance(arg, (ast.Name, ast.Attribute)):
                    label = _dotted_name(arg)
                    if label is None and isinstance(arg, ast.Attribute):
                        label = arg.attr
                    if label:
                        labels.add(label)
    return labels


def to_bare_label(label: str) -> str:
    """Reduce a dotted call label to its final component."""
    return label.rsplit(".", 1)[-1]


# ---------------------------------------------------------------------------
# Undefined-name detection
# ---------------------------------------------------------------------------

_BUILTIN_NAMES = frozenset(dir(builtins)) | {"__name__", "__file__", "__doc__"}


class _ScopeCollector(ast.NodeVisitor):
    """Collects every name bound anywhere in one scope (flow-insensitive).

    Does not descend into nested scopes (functions, lambdas, classes,
    comprehensions) except to record the binding the nested node itself
    introduces in this scope.
    """

    def __init__(self) -> None:
        self.bound: set[str] = set()

    def visit_FunctionDef(self, node: ast.FunctionDef) -> None:
        self.bound.add(node.name)

    def visit_AsyncFunctionDef(self, node: ast.AsyncFunctionDef) -> None:
        self.bound.add(node.name)

    def visit_ClassDef(self, node: ast.ClassDef) -> None:
        self.bound.add(node.name)

    def visit_Lambda(self, node: ast.Lambda) -> None:
        pass  # nested scope

    def visit_ListComp(self, node: ast.ListComp) -> None:
        pass

    def visit_SetComp(self, node: ast.SetComp) -> None:
        pass

    def visit_DictComp(self, node: ast.DictComp) -> None:
        pass

    def visit_GeneratorExp(self, node: ast.GeneratorExp) -> None:
        pass

    def visit_Name(self, node: ast.Name) -> None:
        if isinstance(node.ctx, (ast.Store, ast.Del)):
            self.bound.add(node.id)

    def visit_Import(self, node: ast.Import) -> None:
        for alias in node.names:
            self.bound.add(alias.asname or alias.name.split(".")[0])

    def visit_ImportFrom(self, node: ast.ImportFrom) -> None:
        for alias in node.names:
            if alias.name != "*":
                self.bound.add(alias.asname or alias.name)

    def visit_ExceptHandler(self, node: ast.ExceptHandler) -> None:
        if node.name:
            self.bound.add(node.name)
        self.generic_visit(node)

    def visit_Global(self, node: ast.Global) -> None:
        self.bound.update(node.names)

    def visit_Nonlocal(self, node: ast.Nonlocal) -> None:
        self.bound.update(node.names)

    def visit_MatchAs(self, node: ast.MatchAs) -> None:
        if node.name:
            self.bound.add(node.name)
        self.generic_visit(node)

    def visit_MatchStar(self, node: ast.MatchStar) -> None:
        if node.name:
            self.bound.add(node.name)
        self.generic_visit(node)


def _collect_bound(nodes: Iterable[ast.AST]) -> set[str]:
    collector = _ScopeCollector()
    for node in nodes:
        collector.visit(node)
    return collector.bound


def _arg_names(args: ast.arguments) -> set[str]:
    names = {a.arg for a in args.args + args.posonlyargs + args.kwonlyargs}
    if args.vararg:
        names.add(args.vararg.arg)
    if args.kwarg:
        names.add(args.kwarg.arg)
    return names


def _walk_scope(nodes: Sequence[ast.AST], visible: frozenset[str],
                undefined: set[str]) -> None:
    """Record undefined name loads within one scope's statements."""
    bound = _collect_bound(nodes)
    scope = visible | bound

    def check_expr(node: ast.AST) -> None:
        # Manual traversal: nested scopes are dispatched to their handlers
        # and NOT descended into here, so their locals never leak out.
        stack: list[ast.AST] = [node]
        while stack:
            child = stack.pop()
            if child is not node:
                if isinstance(child, (ast.FunctionDef, ast.AsyncFunctionDef,
                                      ast.Lambda)):
                    handle_nested(child)
                    continue
                if isinstance(child, (ast.ListComp, ast.SetComp, ast.DictComp,
                                      ast.GeneratorExp)):
                    handle_comp(child)
                    continue
                if isinstance(child, ast.ClassDef):
                    handle_class(child)
                    continue
            if isinstance(child, ast.Name) and isinstance(child.ctx, ast.Load):
                if child.id not in scope and child.id not in _BUILTIN_NAMES:
                    undefined.add(child.id)
            stack.extend(ast.iter_child_nodes(child))

    def handle_nested(node: ast.AST) -> None:
        if isinstance(node, ast.Lambda):
            inner = frozenset(scope | _arg_names(node.args))
            _walk_scope([ast.Expr(value=node.body)], inner, undefined)
            for default in node.args.defaults + [
                    d for d in node.args.kw_defaults if d is not None]:
                check_expr(default)
            return
        assert isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef))
        for decorator in node.decorator_list:
            check_expr(decorator)
        for default in node.args.defaults + [
                d for d in node.args.kw_defaults if d is not None]:
            check_expr(default)
        inner = frozenset(scope | _arg_names(node.args))
        _walk_scope(node.body, inner, undefined)

    def handle_comp(node: ast.AST) -> None:
        targets = _collect_bound(
            [gen.target for gen in node.generators])  # type: ignore[attr-defined]
        inner = frozenset(scope | targets)
        parts: list[ast.AST] = []
        if isinstance(node, ast.DictComp):
            parts = [node.key, node.value]
        else:
            parts = [node.elt]  # type: ignore[attr-defined]
        for gen in node.generators:  # type: ignore[attr-defined]
            parts.append(gen.iter)
            parts.extend(gen.ifs)
        _walk_scope([ast.Expr(value=p) for p in parts], inner, undefined)

    def handle_class(node: ast.ClassDef) -> None:
        for decorator in node.decorator_list:
            check_expr(decorator)
        for base in node.bases:
            check_expr(base)
        _walk_scope(node.body, frozenset(scope), undefined)

    for node in nodes:
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            handle_nested(node)
        elif isinstance(node, ast.ClassDef):
            handle_class(node)
        else:
            check_expr(node)


def bound_names(code: str) -> set[str]:
    """Names bound at the top level of *code* (assignments, imports, defs)."""
    if not code.strip():
        return set()
    tree = ast.parse(code)
    return _collect_bound(tree.body)


def find_undefined_names(code: str, known: Iterable[str] = ()) -> set[str]:
    """Find names read in *code* but bound nowhere visible.

    The analysis is flow-insensitive: a binding anywhere in a scope covers
    the whole scope, so a name assigned inside one branch of a conditional
    counts as defined.  Function bodies get their own scopes chained to
    the enclosing one.
    """
    tree = ast.parse(code)
    undefined: set[str] = set()
    _walk_scope(tree.body, frozenset(known), undefined)
    return undefined


def find_receiver_expr(code: str, attr_name: str) -> Optional[str]:
    """Find the receiver expression of the first ``<expr>.<attr_name>`` access.

    Used to aim introspection after an AttributeError: given the failing
    attribute name, returns source text for the object it was read from.
    """
    try:
        tree = ast.parse(code)
    except SyntaxError:
        return None
    for node in ast.walk(tree):
        if isinstance(node, ast.Attribute) and node.attr == attr_name:
            try:
                return ast.unparse(node.value)
            except Exception:
                return None
    return None


# ---------------------------------------------------------------------------
# Error classification
# ---------------------------------------------------------------------------


class ClassifierRules:
    """Pattern tables mapping exceptions to error classes.

    Loaded from a JSON config so guest-runtime-specific strings (provider
    exception wording, asset-lookup messages) stay out of code.
    """

    def __init__(self, raw: dict) -> None:
        self.syntax_types = frozenset(raw.get("syntax_exception_types", ()))
        self.undefined_types = frozenset(raw.get("undefined_exception_types", ()))
        self.message_rules = [
            (re.compile(rule["pattern"], re.IGNORECASE), rule["class"])
            for rule in raw.get("message_rules", ())
        ]
        self.type_rules = dict(raw.get("type_rules", {}))

    @classmethod
    def from_file(cls, path: str) -> "ClassifierRules":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    @classmethod
    def default(cls) -> "ClassifierRules":
        global _DEFAULT_RULES
        if _DEFAULT_RULES is None:
            text = (importlib.resources.files("cellsmith") / "data" /
                    "classifier_rules.json").read_text(encoding="utf-8")
            _DEFAULT_RULES = cls(json.loads(text))
        return _DEFAULT_RULES


_DEFAULT_RULES: Optional[ClassifierRules] = None


def classify_error(exception_type: str, message: str, phase: str = "exec",
                   rules: Optional[ClassifierRules] = None) -> ErrorClass:
    """Map a failure to an error class.

    Precedence: syntax-family exceptions (or anything raised at parse
    time), then name-resolution failures, then configured message
    patterns, then configured type rules, then ``general``.  Total over
    arbitrary inputs.  ``instruction_following`` is never produced here;
    it only arises from gold-output comparison in the harness.
    """
    rules = rules or ClassifierRules.default()
    etype = (exception_type or "").strip()
    base_type = etype.rsplit(".", 1)[-1]
    message = message or ""
    if base_type in rules.syntax_types or phase in ("parse", "static"):
        return ErrorClass("syntax", f"{etype}: {message}")
    if base_type in rules.undefined_types:
        return ErrorClass("undefined_variable", f"{etype}: {message}")
    for pattern, label in rules.message_rules:
        if pattern.search(message):
            return ErrorClass(label, f"matched /{pattern.pattern}/ in: {message}")
    if base_type in rules.type_rules:
        return ErrorClass(rules.type_rules[base_type], f"{etype}: {message}")
    return ErrorClass("general", f"{etype}: {message}")


_NAME_ERROR_RE = re.compile(r"name '([^']+)' is not defined")


def undefined_names_from_message(message: str) -> list[str]:
    """Pull variable names out of a NameError-style message."""
    return _NAME_ERROR_RE.findall(message or "")


def suggest_fix(outcome, introspection: Optional[Sequence[str]] = None) -> FixHint:
    """Build the repair hint for a failed execution outcome.

    ``outcome`` is a sandbox ``ExecutionOutcome`` (anything with
    ``traceback`` and ``error_class`` attributes works).
    """
    error_class = getattr(outcome, "error_class", None)
    label = error_class.label if error_class else "general"
    tb = getattr(outcome, "traceback", None)
    message = tb.message if tb else ""
    etype = tb.exception_type if tb else ""
    if label == "undefined_variable":
        names = undefined_names_from_message(message)
        payload = ", ".join(names) if names else message
        return FixHint("define_variables", payload)
    if label == "api_hallucination" and introspection:
        return FixHint("accessible_api_list", ", ".join(introspection))
    last_line = f"{etype}: {message}".strip(": ")
    return FixHint("traceback_advice", last_line or "execution failed")
