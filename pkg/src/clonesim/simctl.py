"""Scenario runner and command-line front end.

A scenario is a JSON document naming a seed, a primitive suite, an
application profile, a small cast of people, a message script and one
attack. Running it produces a :class:`Report` whose canonical JSON form is
a pure function of the scenario.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Sequence

import jsonschema

from .adversary import PLAYBOOK, AttackPlan, Step, run_plan
from .device import DeviceDescriptor, DeviceKind
from .primitives import SUITES
from .profiles import (
    BUILTIN_PROFILES,
    PROFILE_FIELDS,
    TABLE_ORDER,
    AppProfile,
    ProfileError,
    UnknownProfileError,
    dump_profile as _dump_profile,
    get_profile,
    profile_from_dict,
)
from .server import ServerError
from .threatlens import (
    CATEGORIES,
    Phase,
    TmDelta,
    build_link_graph,
    classify_boundary,
    compute_tm_delta,
    elicit,
    render_table,
)
from .world import World

__all__ = [
    "ConfigError",
    "Scenario",
    "Report",
    "SCENARIO_SCHEMA",
    "parse_scenario",
    "render_scenario",
    "load_scenario",
    "builtin_scenario",
    "build_world",
    "attack_plan",
    "prepare",
    "run",
    "run_all_builtins",
    "golden_table",
    "dump_profile",
    "main",
]

EXIT_PASS, EXIT_MISMATCH, EXIT_CONFIG = 0, 1, 2

_NAME = {"type": "string", "pattern": "^[a-z][a-z0-9_]*$"}
_ROW = {"type": "string", "pattern": "^[✓✗\\- |]*$"}

SCENARIO_SCHEMA: dict = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "seed", "profile", "topology", "attack"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "seed": {"type": "integer"},
        "suite": {"enum": sorted(SUITES)},
        "profile": {"oneOf": [{"type": "string"}, {"type": "object"}]},
        "overrides": {"type": "object", "propertyNames": {"enum": [f for f in PROFILE_FIELDS if f != "name"]}},
        "topology": {
            "type": "object",
            "additionalProperties": False,
            "required": ["victim", "third_parties"],
            "properties": {
                "victim": _NAME,
                "companions": {
                    "type": "array",
                    "maxItems": 2,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["name"],
                        "properties": {"name": _NAME, "tick": {"type": "integer", "minimum": 0}},
                    },
                },
                "third_parties": {"type": "array", "items": _NAME},
                "contacts": {"type": "array", "items": {"type": "array", "items": _NAME, "minItems": 2, "maxItems": 2}},
                "groups": {"type": "object", "additionalProperties": {"type": "array", "items": _NAME, "minItems": 2}},
            },
        },
        "script": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["tick", "from", "to", "body"],
                "properties": {
                    "tick": {"type": "integer", "minimum": 1},
                    "from": _NAME,
                    "to": _NAME,
                    "body": {"type": "string"},
                    "device": _NAME,
                },
            },
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "required": ["tick", "third_party"],
            "properties": {
                "tick": {"type": "integer", "minimum": 0},
                "third_party": _NAME,
                "steps": {"type": "array", "items": {"enum": [s.value for s in Step]}, "uniqueItems": True},
                "victim_device": _NAME,
                "attacker_hardware": {"type": "string", "minLength": 1},
                "access": {"type": "boolean"},
                "continuity_bound": {"type": "integer", "minimum": 1},
            },
        },
        "expectations": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"tm_delta": _ROW},
        },
    },
}


class ConfigError(ValueError):
    """An invalid scenario; ``diagnostics`` holds ``line N: field: message`` strings."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        super().__init__("\n".join(diagnostics))


@dataclass(frozen=True)
class Companion:
    name: str
    tick: int = 0


@dataclass(frozen=True)
class ScriptEvent:
    tick: int
    sender: str
    recipient: str
    body: str
    device: Optional[str] = None


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    profile: AppProfile
    victim: str
    third_parties: tuple[str, ...]
    attack_tick: int
    attack_third_party: str
    suite: str = "toy"
    companions: tuple[Companion, ...] = (Companion("desktop"),)
    contacts: tuple[tuple[str, str], ...] = ()
    groups: tuple[tuple[str, tuple[str, ...]], ...] = ()
    script: tuple[ScriptEvent, ...] = ()
    steps: tuple[Step, ...] = PLAYBOOK
    victim_device: Optional[str] = None
    attacker_hardware: str = "attacker-laptop"
    access: bool = True
    continuity_bound: int = 5
    expected_tm_delta: Optional[str] = None

    @property
    def people(self) -> tuple[str, ...]:
        return (self.victim,) + self.third_parties

    def to_dict(self) -> dict:
        builtin = BUILTIN_PROFILES.get(self.profile.name)
        d: dict[str, Any] = {
            "name": self.name,
            "seed": self.seed,
            "suite": self.suite,
            "profile": self.profile.name if builtin == self.profile else self.profile.to_dict(),
            "topology": {
                "victim": self.victim,
                "companions": [{"name": c.name, "tick": c.tick} for c in self.companions],
                "third_parties": list(self.third_parties),
                "contacts": [list(c) for c in self.contacts],
                "groups": {g: list(m) for g, m in self.groups},
            },
            "script": [
                {"tick": e.tick, "from": e.sender, "to": e.recipient, "body": e.body, **({"device": e.device} if e.device else {})}
                for e in self.script
            ],
            "attack": {
                "tick": self.attack_tick,
                "third_party": self.attack_third_party,
                "steps": [s.value for s in self.steps],
                "attacker_hardware": self.attacker_hardware,
                "access": self.access,
                "continuity_bound": self.continuity_bound,
                **({"victim_device": self.victim_device} if self.victim_device else {}),
            },
        }
        if self.expected_tm_delta is not None:
            d["expectations"] = {"tm_delta": self.expected_tm_delta}
        return d


# -- parsing ------------------------------------------------------------------


def _line_of(text: str, path: Sequence[Any]) -> int:
    """Best-effort line number of the deepest object key on ``path``."""
    offset = 0
    for part in path:
        if isinstance(part, str):
            m = re.compile(r'"%s"\s*:' % re.escape(part)).search(text, offset)
            if m is None:
                break
            offset = m.start()
    return text.count("\n", 0, offset) + 1


def _field(path: Sequence[Any]) -> str:
    out = ""
    for part in path:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<root>"


def parse_scenario(text: str) -> Scenario:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"line {exc.lineno}: <json>: {exc.msg} (column {exc.colno})"]) from None
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        raise ConfigError(
            [f"line {_line_of(text, list(e.absolute_path))}: {_field(list(e.absolute_path))}: {e.message}" for e in errors]
        )
    problems: list[tuple[list, str]] = []
    scenario = _build(raw, problems)
    if problems:
        raise ConfigError([f"line {_line_of(text, p)}: {_field(p)}: {msg}" for p, msg in problems])
    return scenario


def _build(raw: dict, problems: list[tuple[list, str]]) -> Optional[Scenario]:
    def bad(path: list, msg: str) -> None:
        problems.append((path, msg))

    prof = raw["profile"]
    profile: Optional[AppProfile] = None
    try:
        profile = get_profile(prof) if isinstance(prof, str) else profile_from_dict(dict(prof))
        if raw.get("overrides"):
            profile = profile.with_flags(**raw["overrides"])
    except UnknownProfileError:
        bad(["profile"], f"unknown profile {prof!r}")
    except (ProfileError, TypeError, ValueError) as exc:
        bad(["overrides"] if raw.get("overrides") else ["profile"], str(exc))

    topo = raw["topology"]
    victim = topo["victim"]
    thirds = list(topo["third_parties"])
    people = [victim] + thirds
    for i, name in enumerate(thirds):
        if people.count(name) > 1:
            bad(["topology", "third_parties", i], f"duplicate person {name!r}")
    companions = tuple(Companion(c["name"], c.get("tick", 0)) for c in topo.get("companions", [{"name": "desktop"}]))
    names = [c.name for c in companions]
    if len(set(names)) != len(names):
        bad(["topology", "companions"], "companion names must be unique")
    enrolled = {c.name: c.tick for c in companions}
    for i, pair in enumerate(topo.get("contacts", [])):
        for who in pair:
            if who not in people:
                bad(["topology", "contacts", i], f"unknown person {who!r}")
        if pair[0] == pair[1]:
            bad(["topology", "contacts", i], "a person cannot be their own contact")
    for g, members in sorted(topo.get("groups", {}).items()):
        for who in members:
            if who not in people:
                bad(["topology", "groups", g], f"unknown person {who!r}")

    script = []
    last = 0
    for i, e in enumerate(raw.get("script", [])):
        path = ["script", i]
        if e["tick"] < last:
            bad(path + ["tick"], "script ticks must not go backwards")
        last = e["tick"]
        for key in ("from", "to"):
            if e[key] not in people:
                bad(path + [key], f"unknown person {e[key]!r}")
        if e["from"] == e["to"]:
            bad(path + ["to"], "sender and recipient must differ")
        dev = e.get("device")
        if dev is not None:
            if e["from"] != victim or dev not in enrolled:
                bad(path + ["device"], f"{e['from']!r} has no companion {dev!r}")
            elif e["tick"] < enrolled[dev]:
                bad(path + ["device"], f"companion {dev!r} is not enrolled until tick {enrolled[dev]}")
        script.append(ScriptEvent(e["tick"], e["from"], e["to"], e["body"], dev))

    atk = raw["attack"]
    victim_device = atk.get("victim_device") or (names[0] if names else None)
    if victim_device is None:
        bad(["attack"], "the victim has no companion to copy")
    elif victim_device not in enrolled:
        bad(["attack", "victim_device"], f"no companion named {victim_device!r}")
    elif atk["tick"] <= enrolled[victim_device]:
        bad(["attack", "tick"], f"attack at tick {atk['tick']} precedes enrollment of {victim_device!r} at tick {enrolled[victim_device]}")
    if script and not (script[0].tick <= atk["tick"]):
        bad(["attack", "tick"], "access tick lies before the message script starts")
    if atk["third_party"] not in thirds:
        bad(["attack", "third_party"], f"unknown third party {atk['third_party']!r}")
    elif sorted([victim, atk["third_party"]]) not in [sorted(c) for c in topo.get("contacts", [])]:
        bad(["attack", "third_party"], "the attack's third party must be a contact of the victim")
    steps = tuple(Step(s) for s in atk.get("steps", [s.value for s in PLAYBOOK]))
    if steps and steps[0] != Step.COPY_STATE:
        bad(["attack", "steps"], "copy_state must come first")

    if problems or profile is None:
        return None
    return Scenario(
        name=raw["name"],
        seed=raw["seed"],
        suite=raw.get("suite", "toy"),
        profile=profile,
        victim=victim,
        third_parties=tuple(thirds),
        companions=companions,
        contacts=tuple(tuple(c) for c in topo.get("contacts", [])),
        groups=tuple((g, tuple(m)) for g, m in sorted(topo.get("groups", {}).items())),
        script=tuple(script),
        attack_tick=atk["tick"],
        attack_third_party=atk["third_party"],
        steps=steps,
        victim_device=atk.get("victim_device"),
        attacker_hardware=atk.get("attacker_hardware", "attacker-laptop"),
        access=atk.get("access", True),
        continuity_bound=atk.get("continuity_bound", 5),
        expected_tm_delta=raw.get("expectations", {}).get("tm_delta"),
    )


def render_scenario(s: Scenario) -> str:
    return json.dumps(s.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def load_scenario(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"line 0: <file>: {exc}"]) from None
    return parse_scenario(text)


def builtin_scenario(name: str) -> Scenario:
    ref = resources.files("clonesim") / "data" / "scenarios" / f"{name}.json"
    if not ref.is_file():
        raise UnknownProfileError(name)
    return parse_scenario(ref.read_text(encoding="utf-8"))


def golden_table() -> str:
    return (resources.files("clonesim") / "data" / "findings.txt").read_text(encoding="utf-8")


# -- running ------------------------------------------------------------------


def _row_symbols(row: str) -> str:
    return "".join(ch for ch in row if ch in "✓✗-")


@dataclass
class Report:
    scenario: str
    profile: str
    display_name: str
    seed: int
    suite: str
    boundary: str
    transcript: list[dict]
    outcome: dict
    tm1: dict
    tm2: dict
    tm_delta: TmDelta
    link_graph: dict
    expected: Optional[str] = None
    deviations: list[str] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        if self.expected is None:
            return "none"
        return "pass" if self.expected == self.tm_delta.symbols() else "fail"

    def to_dict(self, transcript: bool = True) -> dict:
        d = {
            "scenario": self.scenario,
            "profile": self.profile,
            "display_name": self.display_name,
            "seed": self.seed,
            "suite": self.suite,
            "boundary": self.boundary,
            "outcome": self.outcome,
            "tm1": self.tm1,
            "tm2": self.tm2,
            "tm_delta": self.tm_delta.to_dict(),
            "link_graph": self.link_graph,
            "expected": self.expected,
            "verdict": self.verdict,
        }
        if transcript:
            d["transcript"] = self.transcript
        return d

    def to_json(self, transcript: bool = True) -> str:
        return json.dumps(self.to_dict(transcript), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def render_text(self, transcript: bool = False) -> str:
        lines = [
            f"scenario: {self.scenario}  profile: {self.profile}  seed: {self.seed}  suite: {self.suite}",
            f"boundary: {self.boundary}",
            "",
            render_table([(self.display_name, self.tm_delta)]).rstrip("\n"),
            "",
        ]
        for step in self.outcome["steps"]:
            why = f"  ({step['reason']})" if step["reason"] else ""
            lines.append(f"  {step['step']:<24} {step['status']}{why}")
        lines.append(f"verdict: {self.verdict}")
        if transcript:
            lines.append("")
            lines.extend(json.dumps(e, sort_keys=True, ensure_ascii=False) for e in self.transcript)
        return "\n".join(lines) + "\n"


def build_world(s: Scenario, *, until: Optional[int] = None) -> World:
    """Set up people and devices, then play the script up to ``until``."""
    world = World(s.profile, seed=s.seed, suite=SUITES[s.suite])
    for who in s.people:
        world.add_person(who)
    for a, b in s.contacts:
        world.add_contact(a, b)
    for g, members in s.groups:
        world.add_group(g, list(members))
    pending = sorted(s.companions, key=lambda c: c.tick)
    for event in s.script:
        if until is not None and event.tick > until:
            break
        pending = _enroll_due(world, s, pending, event.tick)
        _play(world, s, event)
    _enroll_due(world, s, pending, until if until is not None else world.clock)
    return world


def _enroll_due(world: World, s: Scenario, pending: list[Companion], tick: int) -> list[Companion]:
    rest = []
    for c in pending:
        if c.tick <= tick:
            if c.tick > world.clock:
                world.advance(c.tick)
            world.enroll(s.victim, c.name)
        else:
            rest.append(c)
    return rest


def _play(world: World, s: Scenario, event: ScriptEvent) -> None:
    world.advance(max(event.tick, world.clock))
    device_id = f"{s.victim}-{event.device}" if event.device else None
    try:
        world.send(event.sender, event.recipient, event.body, device_id=device_id)
    except ServerError as exc:
        world.log("send_failed", sender=event.sender, error=type(exc).__name__)
        return
    world.sync_all(event.recipient)


def attack_plan(s: Scenario, *, access: bool = True, hardware: Optional[bytes] = None) -> AttackPlan:
    return AttackPlan(
        target_profile=s.profile,
        victim_account=s.victim,
        attacker_device=DeviceDescriptor(
            "attacker-desktop", DeviceKind.DESKTOP_COMPANION, hardware if hardware is not None else s.attacker_hardware.encode()
        ),
        steps=s.steps,
        third_party=s.attack_third_party,
        victim_device=f"{s.victim}-{s.victim_device or s.companions[0].name}",
        access=access,
        continuity_bound=s.continuity_bound,
    )


def prepare(s: Scenario, *, access: bool = True, hardware: Optional[bytes] = None) -> tuple[World, AttackPlan]:
    """World as it stands at the access tick, plus the scenario's plan."""
    world = build_world(s, until=s.attack_tick)
    world.advance(max(s.attack_tick, world.clock))
    return world, attack_plan(s, access=access, hardware=hardware)


def _attack(s: Scenario, *, access: bool):
    world, plan = prepare(s, access=access)
    outcome = run_plan(plan, world)
    for event in s.script:
        if event.tick > s.attack_tick:
            _play(world, s, event)
    return world, outcome


def run(scenario: Scenario, *, seed: Optional[int] = None, suite: Optional[str] = None) -> Report:
    """Run the scenario twice: once without access (TM1), once with (TM2)."""
    s = scenario
    if seed is not None:
        s = replace(s, seed=seed)
    if suite is not None:
        if suite not in SUITES:
            raise ConfigError([f"line 0: suite: unknown suite {suite!r}"])
        s = replace(s, suite=suite)
    _, base_outcome = _attack(s, access=False)
    world, outcome = _attack(s, access=True)
    tm1 = elicit(base_outcome, Phase.TM1)
    graph = build_link_graph(outcome.metadata, s.victim)
    tm2 = elicit(outcome, Phase.TM2, graph)
    delta = compute_tm_delta(tm1, tm2)
    expected = _row_symbols(s.expected_tm_delta) if s.expected_tm_delta is not None else None
    return Report(
        scenario=s.name,
        profile=s.profile.name,
        display_name=s.profile.display_name,
        seed=s.seed,
        suite=s.suite,
        boundary=classify_boundary(s.profile).value,
        transcript=world.transcript,
        outcome=outcome.to_dict(),
        tm1=tm1.to_dict(),
        tm2=tm2.to_dict(),
        tm_delta=delta,
        link_graph=graph.to_dict(),
        expected=expected,
    )


@dataclass
class RunAllResult:
    reports: list[Report]
    summary: str
    deviations: list[str]

    @property
    def ok(self) -> bool:
        return not self.deviations and all(r.verdict != "fail" for r in self.reports)

    def to_json(self) -> str:
        return json.dumps(
            {
                "summary": self.summary,
                "deviations": self.deviations,
                "reports": [r.to_dict(transcript=False) for r in self.reports],
            },
            indent=2,
            sort_keys=True,
            ensure_ascii=False,
        ) + "\n"


def run_all_builtins(
    names: Optional[Sequence[str]] = None,
    *,
    seed: Optional[int] = None,
    suite: Optional[str] = None,
    overrides: Optional[dict[str, dict[str, Any]]] = None,
) -> RunAllResult:
    """Run every golden scenario and compare the summary with the golden table."""
    names = list(TABLE_ORDER if names is None else names)
    if not names:
        return RunAllResult([], "", [])
    reports = []
    for name in names:
        s = builtin_scenario(name)
        if overrides and name in overrides:
            s = replace(s, profile=s.profile.with_flags(**overrides[name]))
        reports.append(run(s, seed=seed, suite=suite))
    summary = render_table([(r.display_name, r.tm_delta) for r in reports])
    deviations = []
    golden = {line.split("|")[0].strip(): line for line in golden_table().splitlines()[2:]}
    for r, line in zip(reports, summary.splitlines()[2:]):
        want = golden.get(r.display_name)
        if want is None:
            deviations.append(f"{r.display_name}: no golden row")
        elif want != line:
            diffs = [
                c.letter
                for c, got, exp in zip(CATEGORIES, _row_symbols(line.split("|", 1)[1]), _row_symbols(want.split("|", 1)[1]))
                if got != exp
            ]
            deviations.append(f"{r.display_name}: deviates from golden in {' '.join(diffs)}")
        r.deviations = [d for d in deviations if d.startswith(r.display_name + ":")]
    return RunAllResult(reports, summary, deviations)


def dump_profile(name: str) -> str:
    return _dump_profile(name)


# -- compare ------------------------------------------------------------------


def rows_from(text: str) -> dict[str, str]:
    """Profile name -> TM_Δ symbols, from a report, a run-all report, an
    expectations file or a rendered table."""
    by_display = {p.display_name: p.name for p in BUILTIN_PROFILES.values()}
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        rows = {}
        for line in text.splitlines()[2:]:
            if "|" in line:
                name = line.split("|")[0].strip()
                rows[by_display.get(name, name)] = _row_symbols(line.split("|", 1)[1])
        return rows
    if isinstance(obj, dict) and "reports" in obj:
        return {r["profile"]: r["tm_delta"]["row"] for r in obj["reports"]}
    if isinstance(obj, dict) and isinstance(obj.get("tm_delta"), dict):
        return {obj["profile"]: obj["tm_delta"]["row"]}
    if isinstance(obj, dict) and "expectations" in obj:
        prof = obj.get("profile")
        return {prof if isinstance(prof, str) else "*": _row_symbols(obj["expectations"]["tm_delta"])}
    if isinstance(obj, dict) and isinstance(obj.get("tm_delta"), str):
        return {obj.get("profile", "*"): _row_symbols(obj["tm_delta"])}
    raise ValueError("unrecognised report format")


def compare(report_text: str, expected_text: str) -> list[str]:
    got = rows_from(report_text)
    want = rows_from(expected_text)
    if list(want) == ["*"] and len(got) == 1:
        want = {next(iter(got)): want["*"]}
    problems = []
    for name, row in sorted(want.items()):
        if name not in got:
            problems.append(f"{name}: missing from report")
        elif got[name] != row:
            problems.append(f"{name}: got {got[name]} expected {row}")
    return problems


# -- CLI ----------------------------------------------------------------------


def _parse_flag(text: str) -> tuple[str, str, Any]:
    target, _, value = text.partition("=")
    profile, _, name = target.partition(".")
    if not (profile and name and value):
        raise argparse.ArgumentTypeError(f"expected profile.field=value, got {text!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return profile, name, parsed


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simctl", description="Run device-cloning scenarios against messaging profiles.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--suite", choices=sorted(SUITES), help="primitive suite")
    common.add_argument("--format", choices=("table", "json"), default="table")
    common.add_argument("--transcript", action="store_true", help="include the event transcript")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", parents=[common], help="run one scenario file")
    p_run.add_argument("file")
    p_all = sub.add_parser("run-all", parents=[common], help="run the six built-in scenarios")
    p_all.add_argument("--flag", action="append", type=_parse_flag, default=[], metavar="PROFILE.FIELD=VALUE")
    p_all.add_argument("--only", nargs="*", help="restrict to these profiles")
    p_dump = sub.add_parser("dump-profile", help="print a built-in profile as JSON")
    p_dump.add_argument("name")
    p_cmp = sub.add_parser("compare", help="compare a report with expected TM_Δ rows")
    p_cmp.add_argument("report")
    p_cmp.add_argument("expected")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out = sys.stdout
    try:
        if args.command == "dump-profile":
            out.write(dump_profile(args.name))
            return EXIT_PASS
        if args.command == "run":
            report = run(load_scenario(args.file), seed=args.seed, suite=args.suite)
            out.write(report.to_json(args.transcript) if args.format == "json" else report.render_text(args.transcript))
            return EXIT_MISMATCH if report.verdict == "fail" else EXIT_PASS
        if args.command == "run-all":
            overrides: dict[str, dict[str, Any]] = {}
            for profile, name, value in args.flag:
                overrides.setdefault(profile, {})[name] = value
            result = run_all_builtins(args.only, seed=args.seed, suite=args.suite, overrides=overrides)
            if args.format == "json":
                out.write(result.to_json())
            else:
                out.write(result.summary)
                for d in result.deviations:
                    out.write(f"deviation: {d}\n")
                if args.transcript:
                    for r in result.reports:
                        out.write(f"\n# {r.profile}\n")
                        out.writelines(json.dumps(e, sort_keys=True, ensure_ascii=False) + "\n" for e in r.transcript)
            return EXIT_PASS if result.ok else EXIT_MISMATCH
        if args.command == "compare":
            try:
                report_text = Path(args.report).read_text(encoding="utf-8")
                expected_text = Path(args.expected).read_text(encoding="utf-8")
                problems = compare(report_text, expected_text)
            except (OSError, ValueError, KeyError) as exc:
                print(f"config error: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            for p in problems:
                out.write(f"mismatch: {p}\n")
            if not problems:
                out.write("match\n")
            return EXIT_MISMATCH if problems else EXIT_PASS
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(f"config error: {d}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnknownProfileError, ProfileError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
