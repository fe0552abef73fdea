"""Shared helpers: task builders and scripted-provider shortcuts."""
from __future__ import annotations

from hypothesis import settings

from cellsmith import llm
from cellsmith.model import AgentConfig, StepSpec, TaskSpec

# Sandbox-backed tests spawn subprocesses; hypothesis's default deadline is
# too twitchy for that.
settings.register_profile("sandboxed", deadline=None)
settings.load_profile("sandboxed")


def make_task(*instructions: str, task_id: str = "t", libraries: tuple = (),
              gold: tuple = ()) -> TaskSpec:
    steps = tuple(
        StepSpec(index=i, instruction=text,
                 gold_code=gold[i] if i < len(gold) else None)
        for i, text in enumerate(instructions)
    )
    kind = "single_turn" if len(steps) == 1 else "multi_turn"
    return TaskSpec(id=task_id, kind=kind, libraries=tuple(libraries),
                    steps=steps)


def fenced(code: str) -> str:
    return f"```python\n{code}\n```"


def provider_map(rules: dict[str, str | list]) -> llm.ScriptedProvider:
    """Match-substring -> fenced reply (or list of replies)."""
    out = []
    for match, replies in rules.items():
        if isinstance(replies, str):
            replies = [replies]
        out.append({"match": match,
                    "replies": [fenced(r) if isinstance(r, str) else r
                                for r in replies]})
    return llm.ScriptedProvider(out)


def small_cfg(**overrides) -> AgentConfig:
    base = dict(n_samples=2, k_top=2, max_attempts=2, lookahead_steps=1)
    base.update(overrides)
    return AgentConfig(**base)
