"""Canonical JSON encoding helpers.

Every artifact the package writes to disk or onto a wire (suite files,
event logs, protocol records, reports) goes through one of these helpers
so that identical values always produce identical bytes.
"""
from __future__ import annotations

import json
from typing import Any

__all__ = ["dumps_line", "dumps_pretty", "loads"]


def dumps_line(obj: Any) -> str:
    """Encode *obj* as a single compact JSON line (no trailing newline).

    Keys are sorted and separators are minimal, so two structurally equal
    values are byte-equal after encoding.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def dumps_pretty(obj: Any) -> str:
    """Encode *obj* as human-editable JSON (two-space indent, sorted keys)."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False)


def loads(data: str | bytes) -> Any:
    return json.loads(data)
