"""Deterministic simulator of device-cloning attacks on multi-device E2EE messengers."""

from .adversary import AttackOutcome, AttackPlan, Step, StepStatus, run_plan
from .primitives import STANDARD, TOY, get_suite
from .profiles import BUILTIN_PROFILES, TABLE_ORDER, AppProfile, get_profile
from .threatlens import ThreatMatrix, TmDelta, build_link_graph, classify_boundary, compute_tm_delta, elicit
from .world import World

__version__ = "0.1.0"

__all__ = [
    "AppProfile",
    "AttackOutcome",
    "AttackPlan",
    "BUILTIN_PROFILES",
    "STANDARD",
    "Step",
    "StepStatus",
    "TABLE_ORDER",
    "TOY",
    "ThreatMatrix",
    "TmDelta",
    "World",
    "build_link_graph",
    "classify_boundary",
    "compute_tm_delta",
    "elicit",
    "get_profile",
    "get_suite",
    "run_plan",
]
