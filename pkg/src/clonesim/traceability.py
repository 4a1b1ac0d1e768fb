"""Machine-readable basis for every built-in flag and elicitation rule."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from .profiles import BUILTIN_PROFILES, FLAG_FIELDS, TABLE_ORDER
from .threatlens import RULES


@dataclass(frozen=True)
class TraceabilityEntry:
    key: str
    value: object
    basis: str


@dataclass
class TraceReport:
    missing: list[str] = field(default_factory=list)
    mismatched: list[str] = field(default_factory=list)
    duplicated: list[str] = field(default_factory=list)
    unused: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.missing or self.mismatched or self.duplicated)

    def lines(self) -> list[str]:
        out = [f"FAIL missing {k}" for k in self.missing]
        out += [f"FAIL mismatch {k}" for k in self.mismatched]
        out += [f"FAIL duplicate {k}" for k in self.duplicated]
        out += [f"WARN unused {k}" for k in self.unused]
        return out or ["PASS"]


def load_table() -> list[TraceabilityEntry]:
    raw = json.loads((resources.files("clonesim") / "data" / "traceability.json").read_text(encoding="utf-8"))
    return [TraceabilityEntry(e["key"], e["value"], e["basis"]) for e in raw["entries"]]


def required_entries() -> dict[str, object]:
    """Every key the table must cover, with the value it must record."""
    req: dict[str, object] = {}
    for name in TABLE_ORDER:
        d = BUILTIN_PROFILES[name].to_dict()
        for f in FLAG_FIELDS:
            req[f"{name}.{f}"] = d[f]
    for key, rule in RULES.items():
        req[f"rule.{key}"] = rule
    return req


def verify_traceability(entries: Optional[list[TraceabilityEntry]] = None) -> TraceReport:
    entries = load_table() if entries is None else entries
    required = required_entries()
    report = TraceReport()
    seen: dict[str, TraceabilityEntry] = {}
    for e in entries:
        if e.key in seen:
            report.duplicated.append(e.key)
            continue
        seen[e.key] = e
        if e.key not in required:
            report.unused.append(e.key)
        elif e.value != required[e.key] or not e.basis.strip():
            report.mismatched.append(e.key)
    report.missing = [k for k in required if k not in seen]
    return report
