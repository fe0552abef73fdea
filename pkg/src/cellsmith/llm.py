"""Provider-agnostic text generation plus the agent's prompt templates.

Providers speak one wire contract: request ``{prompt, temperature, top_p,
max_tokens, n, want_logprobs}`` → response ``{candidates: [{text,
token_logprobs?}]}``.  The gateway layers candidate scoring on top: each
candidate carries a sequence prior in (0, 1] — the exponential of its mean
token log-probability, or a rank-based fallback when the provider does not
return logprobs.
"""
from __future__ import annotations

import json
import math
import re
import threading
import urllib.request
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

from .model import AgentConfig, estimate_tokens

__all__ = [
    "Candidate",
    "PromptTemplate",
    "TEMPLATES",
    "render_prompt",
    "complete",
    "generate_instruction",
    "Provider",
    "ScriptedProvider",
    "HttpProvider",
    "ProviderError",
    "GatewayError",
    "RenderError",
]


class ProviderError(RuntimeError):
    """The provider failed to produce a response."""


class GatewayError(RuntimeError):
    """The gateway gave up after retries, or the request was invalid."""


class RenderError(KeyError):
    """A template slot was left unfilled."""


@dataclass(frozen=True)
class Candidate:
    """One sampled generation with its sequence prior."""

    text: str
    token_logprobs: tuple[float, ...] = ()
    seq_prior: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 < self.seq_prior <= 1.0):
            raise ValueError(f"seq_prior must be in (0, 1], got {self.seq_prior}")


def _prior_from(token_logprobs: Sequence[float], rank: int) -> float:
    if token_logprobs:
        mean = sum(token_logprobs) / len(token_logprobs)
        return min(1.0, math.exp(mean))
    return 1.0 / (rank + 1)


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

_SLOT_RE = re.compile(r"\{([a-z_][a-z0-9_]*)\}")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    slots: tuple[str, ...] = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "slots", tuple(dict.fromkeys(_SLOT_RE.findall(self.body))))


TEMPLATES: dict[str, PromptTemplate] = {
    t.name: t
    for t in (
        PromptTemplate(
            "refactor",
            "Here is a task script written in JavaScript using GEE; please "
            "refactor it into a Python version using the Earth Engine API.",
        ),
        PromptTemplate(
            "instruction_gen",
            "Here are the used Python libraries {libraries} and the previous "
            "steps {previous_steps}. I want you to become my Expert Prompt "
            "Creator. Your goal is to help me reverse Python code into "
            "prompts. The prompt you provide should be a very detailed text "
            "description, including all necessary information, such as exact "
            "parameter values, input files, date, location, etc. Provide the "
            "prompt for this step's code {code} in the format { 'prompt': "
            "detailed prompts with all parameters and values }.",
        ),
        PromptTemplate(
            "instruction_tune",
            "I will give you a task description that needs to use some of the "
            "given library {library} to implement it. You need to provide the "
            "Python code for the given task description. Here is the previous "
            "code {previous_code}. Please provide the Python code for the "
            "current step with this description.",
        ),
        PromptTemplate(
            "inference",
            "I want you to become my expert programmer. Your goal is to help "
            "me write Python code for the given task using the Python library "
            "{library}. You need to write code according to the detailed "
            "prompt {prompt}. Please provide the corresponding code.",
        ),
        PromptTemplate(
            "update_node",
            "Your goal is to fix the error in the initial prompt. I first "
            "give you the Python code {code}. Give your solution for fixing "
            "the error {error} and add it to the initial prompt.",
        ),
        PromptTemplate(
            "prepend_task",
            "Defining the undefined variables for the next step task: "
            "{next_step_instruction}. Give your code for the undefined "
            "variables in this step:",
        ),
    )
}


def render_prompt(template: PromptTemplate | str, slots: dict[str, str]) -> str:
    """Fill a template's named slots; every declared slot must be supplied."""
    if isinstance(template, str):
        template = TEMPLATES[template]
    missing = [name for name in template.slots if name not in slots]
    if missing:
        raise RenderError(f"template {template.name!r} missing slot {missing[0]!r}")
    return _SLOT_RE.sub(
        lambda m: slots[m.group(1)] if m.group(1) in template.slots else m.group(0),
        template.body,
    )


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------


class Provider(Protocol):
    def generate(self, request: dict) -> dict:
        """Serve one wire-contract request; may raise ProviderError."""
        ...


class ScriptedProvider:
    """Deterministic provider for tests, driven by a reply transcript.

    The transcript is a list of rules, each ``{"match": substring,
    "replies": [{"text": ..., "token_logprobs": [...]}], "max_uses": int}``.
    A request is served by the first rule whose ``match`` occurs in the
    prompt and that still has uses left; ``"match": ""`` matches anything,
    and ``max_uses`` omitted means unlimited.  An unmatched request raises,
    so tests fail loudly instead of improvising.
    """

    def __init__(self, rules: Sequence[dict]) -> None:
        self._rules = []
        for rule in rules:
            replies = []
            for reply in rule.get("replies", []):
                if isinstance(reply, str):
                    reply = {"text": reply}
                replies.append({
                    "text": reply["text"],
                    "token_logprobs": list(reply.get("token_logprobs", [])),
                })
            self._rules.append({
                "match": rule.get("match", ""),
                "replies": replies,
                "uses_left": rule.get("max_uses"),
            })
        self.requests: list[dict] = []
        self._lock = threading.Lock()

    @classmethod
    def sequential(cls, texts: Sequence[str]) -> "ScriptedProvider":
        """Each call consumes the next reply, regardless of prompt."""
        return cls([{"match": "", "replies": [t], "max_uses": 1} for t in texts])

    @classmethod
    def from_file(cls, path: str) -> "ScriptedProvider":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        rules = doc["rules"] if isinstance(doc, dict) else doc
        return cls(rules)

    def generate(self, request: dict) -> dict:
        with self._lock:  # suites may evaluate tasks from worker threads
            self.requests.append(dict(request))
            prompt = request.get("prompt", "")
            n = int(request.get("n", 1))
            for rule in self._rules:
                if rule["uses_left"] is not None and rule["uses_left"] <= 0:
                    continue
                if rule["match"] in prompt:
                    if rule["uses_left"] is not None:
                        rule["uses_left"] -= 1
                    return {"candidates": [dict(r) for r in rule["replies"][:n]]}
            head = prompt[:120].replace("\n", "\\n")
            raise ProviderError(f"no scripted reply matches prompt: {head!r}...")


class HttpProvider:
    """POSTs wire-contract requests to an HTTP endpoint as JSON."""

    def __init__(self, endpoint: str, timeout_s: float = 120.0,
                 headers: Optional[dict[str, str]] = None) -> None:
        self.endpoint = endpoint
        self.timeout_s = timeout_s
        self.headers = {"Content-Type": "application/json", **(headers or {})}

    def generate(self, request: dict) -> dict:
        body = json.dumps(request).encode("utf-8")
        req = urllib.request.Request(self.endpoint, data=body,
                                     headers=self.headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except Exception as exc:  # noqa: BLE001 - provider failures all map the same
            raise ProviderError(f"provider request failed: {exc}") from exc


# ---------------------------------------------------------------------------
# Gateway operations
# ---------------------------------------------------------------------------


def complete(provider: Provider, prompt: str, cfg: AgentConfig, n: int = 1,
             want_logprobs: bool = True, retries: int = 2) -> list[Candidate]:
    """Sample up to *n* candidates for *prompt* and score their priors."""
    if not prompt or not prompt.strip():
        raise GatewayError("prompt must be non-empty")
    if estimate_tokens(prompt) > cfg.context_window_tokens:
        raise GatewayError(
            f"prompt overflows context window: ~{estimate_tokens(prompt)} tokens "
            f"> {cfg.context_window_tokens}")
    request = {
        "prompt": prompt,
        "temperature": cfg.temperature,
        "top_p": cfg.top_p,
        "max_tokens": cfg.max_tokens,
        "n": n,
        "want_logprobs": want_logprobs,
    }
    last_error: Optional[Exception] = None
    for attempt in range(1 + retries):
        try:
            response = provider.generate(request)
            break
        except ProviderError as exc:
            last_error = exc
    else:
        raise GatewayError(
            f"provider failed after {1 + retries} attempts: {last_error}")
    candidates = []
    for rank, raw in enumerate(response.get("candidates", [])[:n]):
        text = raw.get("text", "")
        if not text:
            continue
        logprobs = tuple(raw.get("token_logprobs") or ())
        candidates.append(Candidate(
            text=text,
            token_logprobs=logprobs,
            seq_prior=_prior_from(logprobs, rank),
        ))
    return candidates


def generate_instruction(code: str, prior_summaries: Sequence[str],
                         provider: Provider,
                         cfg: Optional[AgentConfig] = None,
                         libraries: str = "") -> tuple[str, list[str]]:
    """Summarize a code cell into a step instruction and extend the history.

    Returns ``(s_i, S_i)`` where ``S_i`` is ``prior_summaries`` with the new
    summary appended.  Prior summaries are joined with newlines to fill the
    template's previous-steps slot.
    """
    if not code or not code.strip():
        raise ValueError("code must be non-empty")
    cfg = cfg or AgentConfig()
    prompt = render_prompt("instruction_gen", {
        "libraries": libraries,
        "previous_steps": "\n".join(prior_summaries),
        "code": code,
    })
    replies = complete(provider, prompt, cfg, n=1)
    if not replies:
        raise GatewayError("provider returned no candidates for summarization")
    s_i = replies[0].text
    return s_i, list(prior_summaries) + [s_i]
