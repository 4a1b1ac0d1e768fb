"""From attack outcomes to STRIDE/LINDDUN findings.

Elicitation is a pure function of a completed :class:`AttackOutcome`. The
TM_Δ row of an application is what the cloning phase makes possible on top
of the eavesdropper-only baseline.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Union

from .adversary import AttackOutcome, ExtractedMetadata, Step, mentions
from .profiles import AppProfile, EnrollmentArchetype

__all__ = [
    "StrideCategory",
    "LinddunCategory",
    "Category",
    "CATEGORIES",
    "UNTESTED",
    "Cell",
    "Phase",
    "ThreatMatrix",
    "PhaseMismatch",
    "TmDelta",
    "elicit_stride",
    "elicit_linddun",
    "elicit",
    "compute_tm_delta",
    "NodeKind",
    "LinkEdge",
    "LinkGraph",
    "build_link_graph",
    "BoundaryPlacement",
    "classify_boundary",
    "render_table",
]


class StrideCategory(str, Enum):
    SPOOFING = "Spoofing"
    TAMPERING = "Tampering"
    REPUDIATION = "Repudiation"
    INFO_DISCLOSURE = "InfoDisclosure"
    DENIAL_OF_SERVICE = "DenialOfService"
    ELEVATION_OF_PRIVILEGE = "ElevationOfPrivilege"

    @property
    def letter(self) -> str:
        return self.value[0]


class LinddunCategory(str, Enum):
    LINKABILITY = "Linkability"
    IDENTIFIABILITY = "Identifiability"
    NON_REPUDIATION = "NonRepudiation"
    DETECTABILITY = "Detectability"
    DISCLOSURE = "Disclosure"
    UNAWARENESS = "Unawareness"
    NONCOMPLIANCE = "Noncompliance"

    @property
    def letter(self) -> str:
        return self.value[0]


Category = Union[StrideCategory, LinddunCategory]
CATEGORIES: tuple[Category, ...] = tuple(StrideCategory) + tuple(LinddunCategory)
UNTESTED: frozenset[Category] = frozenset(
    {
        StrideCategory.TAMPERING,
        LinddunCategory.DETECTABILITY,
        LinddunCategory.UNAWARENESS,
        LinddunCategory.NONCOMPLIANCE,
    }
)


def category_key(c: Category) -> str:
    prefix = "stride" if isinstance(c, StrideCategory) else "linddun"
    return f"{prefix}.{c.value}"


def category_from_key(key: str) -> Category:
    prefix, _, value = key.partition(".")
    return StrideCategory(value) if prefix == "stride" else LinddunCategory(value)


class Cell(str, Enum):
    POSSIBLE = "possible"
    NOT_POSSIBLE = "not_possible"
    UNTESTED = "untested"

    @property
    def symbol(self) -> str:
        return {"possible": "✓", "not_possible": "✗", "untested": "-"}[self.value]


class Phase(Enum):
    TM1 = ("S1", "t1")
    TM2 = ("S2", "t2")


class PhaseMismatch(ValueError):
    pass


class MatrixError(ValueError):
    pass


Finding = tuple[Cell, tuple[str, ...]]


@dataclass(frozen=True)
class ThreatMatrix:
    profile: str
    phase: Phase
    cells: dict[Category, Cell]
    evidence: dict[Category, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.cells) != set(CATEGORIES):
            raise MatrixError("matrix must cover every STRIDE and LINDDUN category")
        for c in CATEGORIES:
            cell = self.cells[c]
            if c in UNTESTED and cell != Cell.UNTESTED:
                raise MatrixError(f"{category_key(c)} is never tested")
            if c not in UNTESTED and cell == Cell.UNTESTED:
                raise MatrixError(f"{category_key(c)} must be tested")
            if cell == Cell.POSSIBLE and not self.evidence.get(c):
                raise MatrixError(f"{category_key(c)} is possible without evidence")

    @classmethod
    def from_findings(cls, profile: str, phase: Phase, findings: dict[Category, Finding]) -> "ThreatMatrix":
        return cls(
            profile,
            phase,
            {c: findings[c][0] for c in CATEGORIES},
            {c: findings[c][1] for c in CATEGORIES if findings[c][1]},
        )

    @property
    def possible(self) -> frozenset[Category]:
        return frozenset(c for c, v in self.cells.items() if v == Cell.POSSIBLE)

    def row(self) -> tuple[Cell, ...]:
        return tuple(self.cells[c] for c in CATEGORIES)

    def symbols(self) -> str:
        return "".join(cell.symbol for cell in self.row())

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "phase": list(self.phase.value),
            "cells": {category_key(c): self.cells[c].value for c in CATEGORIES},
            "evidence": {category_key(c): list(v) for c, v in self.evidence.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThreatMatrix":
        cells = {category_from_key(k): Cell(v) for k, v in d["cells"].items()}
        evidence = {category_from_key(k): tuple(v) for k, v in d.get("evidence", {}).items()}
        return cls(d["profile"], Phase(tuple(d["phase"])), cells, evidence)


# elicitation rules, keyed as in the traceability table
RULES: dict[str, str] = {
    "stride.Spoofing": "clone online and (send_as_victim or receive_future) succeeded",
    "stride.Tampering": "untested",
    "stride.Repudiation": "send_as_victim succeeded and the third party could not tell it apart",
    "stride.InfoDisclosure": "decrypt_history or receive_future or extract_metadata succeeded",
    "stride.DenialOfService": "victim continuity violated",
    "stride.ElevationOfPrivilege": "delink_then_reconnect succeeded",
    "linddun.Linkability": "link graph has a node besides the victim",
    "linddun.Identifiability": "extracted evidence holds phone numbers or account ids of peers",
    "linddun.NonRepudiation": "mirrors stride.Repudiation",
    "linddun.Detectability": "untested",
    "linddun.Disclosure": "mirrors stride.InfoDisclosure",
    "linddun.Unawareness": "untested",
    "linddun.Noncompliance": "untested",
}


def _events(outcome: AttackOutcome, *steps: Step) -> tuple[str, ...]:
    return tuple(e.event for e in outcome.evidence_for(*steps))


def _finding(possible: bool, evidence: tuple[str, ...]) -> Finding:
    return (Cell.POSSIBLE, evidence) if possible and evidence else (Cell.NOT_POSSIBLE, ())


def elicit_stride(outcome: AttackOutcome) -> dict[StrideCategory, Finding]:
    s = outcome.succeeded
    spoof_steps = [x for x in (Step.SEND_AS_VICTIM, Step.RECEIVE_FUTURE) if s(x)]
    info_steps = [x for x in (Step.DECRYPT_HISTORY, Step.RECEIVE_FUTURE, Step.EXTRACT_METADATA) if s(x)]
    repudiable = s(Step.SEND_AS_VICTIM) and outcome.indistinguishable is True
    return {
        StrideCategory.SPOOFING: _finding(
            outcome.clone_online and bool(spoof_steps), _events(outcome, Step.INSTANTIATE_CLONE, *spoof_steps)
        ),
        StrideCategory.TAMPERING: (Cell.UNTESTED, ()),
        StrideCategory.REPUDIATION: _finding(repudiable, _events(outcome, Step.SEND_AS_VICTIM)),
        StrideCategory.INFO_DISCLOSURE: _finding(bool(info_steps), _events(outcome, *info_steps)),
        StrideCategory.DENIAL_OF_SERVICE: _finding(
            outcome.continuity_violated is True, _events(outcome, Step.CHECK_VICTIM_CONTINUITY)
        ),
        StrideCategory.ELEVATION_OF_PRIVILEGE: _finding(
            s(Step.DELINK_THEN_RECONNECT), _events(outcome, Step.DELINK_THEN_RECONNECT)
        ),
    }


def elicit_linddun(outcome: AttackOutcome, graph: Optional["LinkGraph"] = None) -> dict[LinddunCategory, Finding]:
    graph = graph if graph is not None else build_link_graph(outcome.metadata)
    stride = elicit_stride(outcome)
    meta = outcome.metadata
    source = _events(outcome, Step.EXTRACT_METADATA, Step.DECRYPT_HISTORY)
    identifiable = meta is not None and bool(meta.direct_identifiers) and len(graph.nodes) > 1
    return {
        LinddunCategory.LINKABILITY: _finding(len(graph.nodes) > 1, source),
        LinddunCategory.IDENTIFIABILITY: _finding(identifiable, _events(outcome, Step.EXTRACT_METADATA)),
        # a victim cannot deny what a faithful spoof sent in their name
        LinddunCategory.NON_REPUDIATION: stride[StrideCategory.REPUDIATION],
        LinddunCategory.DETECTABILITY: (Cell.UNTESTED, ()),
        LinddunCategory.DISCLOSURE: stride[StrideCategory.INFO_DISCLOSURE],
        LinddunCategory.UNAWARENESS: (Cell.UNTESTED, ()),
        LinddunCategory.NONCOMPLIANCE: (Cell.UNTESTED, ()),
    }


def elicit(outcome: AttackOutcome, phase: Phase = Phase.TM2, graph: Optional["LinkGraph"] = None) -> ThreatMatrix:
    findings: dict[Category, Finding] = {}
    findings.update(elicit_stride(outcome))
    findings.update(elicit_linddun(outcome, graph))
    return ThreatMatrix.from_findings(outcome.profile, phase, findings)


@dataclass(frozen=True)
class TmDelta:
    baseline: ThreatMatrix
    current: ThreatMatrix
    delta: frozenset[Category]

    def __post_init__(self):
        if self.delta != self.current.possible - self.baseline.possible:
            raise MatrixError("delta must equal current.possible minus baseline.possible")

    def cells(self) -> dict[Category, Cell]:
        return {
            c: Cell.UNTESTED if c in UNTESTED else (Cell.POSSIBLE if c in self.delta else Cell.NOT_POSSIBLE)
            for c in CATEGORIES
        }

    def row(self) -> tuple[Cell, ...]:
        cells = self.cells()
        return tuple(cells[c] for c in CATEGORIES)

    def symbols(self) -> str:
        return "".join(c.symbol for c in self.row())

    def to_dict(self) -> dict:
        return {
            "profile": self.current.profile,
            "delta": [category_key(c) for c in CATEGORIES if c in self.delta],
            "row": self.symbols(),
        }


def compute_tm_delta(baseline: ThreatMatrix, current: ThreatMatrix) -> TmDelta:
    if baseline.phase == current.phase:
        raise PhaseMismatch(f"both matrices are labelled {baseline.phase.value}")
    return TmDelta(baseline, current, current.possible - baseline.possible)


# -- linkability graph --------------------------------------------------------


class NodeKind(str, Enum):
    VICTIM = "victim"
    DIRECT_CONTACT = "direct_contact"
    SECONDARY = "secondary"
    TERTIARY = "tertiary"


_KIND_BY_DEGREE = {0: NodeKind.VICTIM, 1: NodeKind.DIRECT_CONTACT, 2: NodeKind.SECONDARY, 3: NodeKind.TERTIARY}

# evidence weights: a shared conversation is one hop, sharing a group or
# being named inside someone's message is two
CONTACT_WEIGHT = 1
GROUP_WEIGHT = 2
MENTION_WEIGHT = 2


@dataclass(frozen=True)
class LinkEdge:
    a: str
    b: str
    degree: int
    evidence: str


@dataclass(frozen=True)
class LinkGraph:
    victim: str
    nodes: dict[str, NodeKind]
    degrees: dict[str, int]
    edges: tuple[LinkEdge, ...]

    def to_dict(self) -> dict:
        return {
            "victim": self.victim,
            "nodes": {n: {"kind": self.nodes[n].value, "degree": self.degrees[n]} for n in sorted(self.nodes)},
            "edges": [[e.a, e.b, e.degree, e.evidence] for e in self.edges],
        }


def evidence_edges(meta: ExtractedMetadata) -> list[LinkEdge]:
    """Weighted edges the attacker can justify from ``meta``."""
    v = meta.victim
    edges: list[LinkEdge] = []
    for c in meta.contacts:
        if c["username"] != v:
            edges.append(LinkEdge(v, c["username"], CONTACT_WEIGHT, f"contact:{c['username']}"))
    for conv in meta.conversations:
        if conv["peer"] != v:
            edges.append(LinkEdge(v, conv["peer"], CONTACT_WEIGHT, f"conversation:{conv['message_id']}"))
    for group, members in meta.groups:
        for m in members:
            if m != v:
                edges.append(LinkEdge(v, m, GROUP_WEIGHT, f"group:{group}"))
    for partner, body in meta.bodies:
        for name in mentions(body):
            if name not in (v, partner):
                edges.append(LinkEdge(partner, name, MENTION_WEIGHT, f"mention:{partner}"))
    return edges


def build_link_graph(evidence: Optional[ExtractedMetadata], victim: str = "") -> LinkGraph:
    if evidence is None or not evidence.victim:
        root = victim or (evidence.victim if evidence else "") or "victim"
        return LinkGraph(root, {root: NodeKind.VICTIM}, {root: 0}, ())
    v = evidence.victim
    edges = evidence_edges(evidence)
    adj: dict[str, list[tuple[str, int]]] = {}
    for e in edges:
        adj.setdefault(e.a, []).append((e.b, e.degree))
        adj.setdefault(e.b, []).append((e.a, e.degree))
    dist = {v: 0}
    heap = [(0, v)]
    while heap:
        d, node = heapq.heappop(heap)
        if d > dist.get(node, d):
            continue
        for nxt, w in sorted(adj.get(node, ())):
            nd = d + w
            if nd < dist.get(nxt, nd + 1):
                dist[nxt] = nd
                heapq.heappush(heap, (nd, nxt))
    nodes = {n: _KIND_BY_DEGREE.get(d, NodeKind.TERTIARY) for n, d in dist.items()}
    kept = tuple(sorted({e for e in edges if e.a in dist and e.b in dist}, key=lambda e: (e.a, e.b, e.degree, e.evidence)))
    return LinkGraph(v, nodes, dict(sorted(dist.items())), kept)


# -- trust boundary -----------------------------------------------------------


class BoundaryPlacement(str, Enum):
    MALACTORS_INSIDE = "malactors_inside"
    PRIMARY_ONLY = "primary_only"
    MALACTORS_OUTSIDE = "malactors_outside"


def classify_boundary(profile: Optional[AppProfile], *, mobile_only: bool = False) -> BoundaryPlacement:
    """Where the trust boundary sits relative to whoever can touch a desktop.

    ``None`` or ``mobile_only`` describes an account with no companions.
    """
    if profile is None or mobile_only:
        return BoundaryPlacement.PRIMARY_ONLY
    if profile.archetype == EnrollmentArchetype.INDEPENDENT_COMPANION_KEY:
        return BoundaryPlacement.MALACTORS_INSIDE
    return BoundaryPlacement.MALACTORS_OUTSIDE


# -- rendering ----------------------------------------------------------------


HEADER = tuple(c.letter for c in CATEGORIES)


def render_table(rows: Iterable[tuple[str, Union[ThreatMatrix, TmDelta, Iterable[Cell]]]]) -> str:
    """Fixed-order text table: one row per application, STRIDE then LINDDUN."""
    rows = list(rows)
    label = "Application"
    width = max([len(label)] + [len(name) for name, _ in rows])
    split = len(StrideCategory)

    def line(name: str, cells: tuple[str, ...]) -> str:
        left = " ".join(cells[:split])
        right = " ".join(cells[split:])
        return f"{name:<{width}} | {left} | {right}"

    out = [line(label, HEADER)]
    out.append("-" * len(out[0]))
    for name, row in rows:
        cells = row.row() if isinstance(row, (ThreatMatrix, TmDelta)) else tuple(row)
        out.append(line(name, tuple(c.symbol for c in cells)))
    return "\n".join(out) + "\n"
