"""Acceptance criteria AC1 to AC8, each at its stated tolerance.

Every test prints one PASS/FAIL line; the conftest repeats them in the
terminal summary.
"""

import itertools
import random
import time
from dataclasses import replace

import pytest

from clonesim.adversary import elevation_path, run_plan
from clonesim.linking import AuthFailure, CloneExit, launch_companion
from clonesim.primitives import TOY
from clonesim.profiles import TABLE_ORDER, WEEK_TICKS, EnrollmentArchetype, get_profile
from clonesim.ratchet import SkippedLimitExceeded
from clonesim.simctl import builtin_scenario, golden_table, rows_from, run, run_all_builtins
from clonesim.threatlens import CATEGORIES, UNTESTED, Cell, Phase, compute_tm_delta, elicit
from clonesim.world import World

from support import candidate_keys, clone_device, clone_graph, open_pair, opens, oracle_for, random_world, scenario_world

GOLDEN_ROWS = {
    "signal": "✓-✓✓✗✓✓✓✓-✓--",
    "whatsapp": "✓-✓✓✗✗✓✓✓-✓--",
    "element": "✗-✗✓✗✗✓✗✗-✓--",
    "wickrme": "✗-✗✗✗✗✗✗✗-✗--",
    "viber": "✗-✗✗✗✗✗✗✗-✗--",
    "telegram": "✓-✓✓✗✗✓✓✓-✓--",
}


def report(key, ok, detail):
    print(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_ac1_findings_table_reproduced():
    start = time.perf_counter()
    result = run_all_builtins()
    elapsed = time.perf_counter() - start
    got = {r.profile: r.tm_delta.symbols() for r in result.reports}
    assert rows_from(golden_table()) == GOLDEN_ROWS
    untested = all(
        r.tm_delta.cells()[c] is Cell.UNTESTED for r in result.reports for c in UNTESTED
    )
    ok = got == GOLDEN_ROWS and result.summary == golden_table() and untested and elapsed < 10
    report("AC1", ok, f"6/6 rows exact={got == GOLDEN_ROWS}, '-' for untested={untested}, run-all {elapsed:.2f}s (< 10s)")


def test_ac2_delta_is_findings_minus_empty_baseline():
    problems = []
    for name in TABLE_ORDER:
        world, plan = scenario_world(name, access=False)
        base = elicit(run_plan(plan, world), Phase.TM1)
        world, plan = scenario_world(name)
        cur = elicit(run_plan(plan, world), Phase.TM2)
        delta = compute_tm_delta(base, cur)
        expected = {c for c, s in zip(CATEGORIES, GOLDEN_ROWS[name]) if s == "✓"}
        if base.possible:
            problems.append(f"{name} baseline elicits {len(base.possible)}")
        if delta.delta != expected:
            problems.append(f"{name} delta differs")
    report("AC2", not problems, "baseline empty and delta exact for 6/6 profiles" if not problems else "; ".join(problems))


def _telegram_world():
    world = World(get_profile("telegram"), seed=3)
    for who in ("victor", "alice"):
        world.add_person(who)
    world.add_contact("victor", "alice")
    return world


def _secret_session(world):
    (state,) = world.people["victor"].primary.secret_sessions.values()
    return state


def test_ac3_telegram_rekey():
    # ratchet level: exactly 100 messages per key pair, or the week budget
    pair = open_pair(seed=301, acked=False, rekey_every_messages=100, rekey_every_ticks=WEEK_TICKS)
    for i in range(250):
        pair.send("alice", b"%d" % i)
    by_count = [at for _, at in pair.alice.sending_rotations]
    pair = open_pair(seed=302, acked=False, rekey_every_messages=100, rekey_every_ticks=WEEK_TICKS)
    # chain index i + 1 because the handshake message took index 0 at tick 0
    expected_ticks, born = [], 0
    for i in range(10):
        pair.now = i * (WEEK_TICKS // 3)
        if pair.now - born >= WEEK_TICKS:
            expected_ticks.append(i + 1)
            born = pair.now
        pair.send("alice", b"%d" % i)
    by_ticks = [at for _, at in pair.alice.sending_rotations]

    # world level: secret chats under the telegram profile, read by the peer
    world = _telegram_world()
    bodies = []
    for i in range(250):
        world.step()
        world.send("victor", "alice", f"s{i}", secret=True)
        bodies += [r["body"] for r in world.sync("alice") if r.get("kind") == "secret"]
    world_rotations = [at for _, at in _secret_session(world).sending_rotations]
    world_ok = world_rotations == [100, 200] and bodies == [f"s{i}" for i in range(250)]
    cloud_untouched = all(not s.sending_rotations for s in world.people["victor"].primary.sessions.values())

    ok = by_count == [100, 200] and by_ticks == expected_ticks == [4, 7, 10] and world_ok and cloud_untouched
    report(
        "AC3",
        ok,
        f"rotations by count {by_count}, by week budget {by_ticks}, in world {world_rotations}, peer read {len(bodies)}/250",
    )


def test_ac4_ratchet_properties():
    failures = []
    # (a) every delivery order of a six-message conversation
    for every in (None, 2, 1):
        base = open_pair(seed=400, rekey_every_messages=every)
        envs = [base.send("alice", b"m%d" % i) for i in range(6)]
        for perm in itertools.permutations(range(6)):
            pair = replace(base, bob=base.bob.copy())
            if [pair.deliver("bob", envs[i]) for i in perm] != [b"m%d" % i for i in perm]:
                failures.append(f"perm {perm} every={every}")
    cases = 0
    for seed in range(1000):
        r = random.Random(seed)
        every = r.choice([None, None, 1, 2, 3])
        limit = r.randrange(6, 12)
        pair = open_pair(seed=10_000 + seed, skipped_limit=limit, rekey_every_messages=every)
        envs = [pair.send("alice", b"m%d" % i) for i in range(6)]
        order = r.sample(range(6), 6)
        held = set(order[r.randrange(3, 7):])
        delivered = [i for i in order if i not in held]
        if [pair.deliver("bob", envs[i]) for i in delivered] != [b"m%d" % i for i in delivered]:
            failures.append(f"(a) seed {seed}")
        # (b) a snapshot opens nothing already consumed, only its cached keys
        for who in ("alice", "bob"):
            snap = getattr(pair, who)
            keys = candidate_keys(TOY, snap.to_bytes())
            for i, env in enumerate(envs):
                cached = who == "bob" and (env.sender_dh_public, env.index) in snap.skipped
                hit = any(opens(TOY, k, env, pair.bob.associated_data) for k in keys)
                if hit and not cached and not (who == "bob" and i in held):
                    failures.append(f"(b) seed {seed} {who} opens {i}")
                if cached and not hit:
                    failures.append(f"(b) seed {seed} cache entry unusable")
        # (c) a gap one beyond the limit raises and leaves the session alone
        over = open_pair(seed=20_000 + seed, skipped_limit=limit, rekey_every_messages=every)
        gap = [over.send("alice", b"g") for _ in range(limit + 2)]
        before = over.bob.to_bytes()
        try:
            over.deliver("bob", gap[limit + 1])
            failures.append(f"(c) seed {seed} no error")
        except SkippedLimitExceeded:
            if over.bob.to_bytes() != before:
                failures.append(f"(c) seed {seed} state changed")
        if over.deliver("bob", gap[limit]) != b"g":
            failures.append(f"(c) seed {seed} at-limit delivery failed")
        cases += 1
    report("AC4", not failures, f"720 orders x 3 policies, {cases} seeded cases, {len(failures)} failures")


def test_ac5_clone_resistance():
    counts = {}
    for name in TABLE_ORDER:
        world, _ = scenario_world(name)
        companion = world.people["victor"].companions["victor-desktop"]
        rng = random.Random(f"ac5-{name}")
        online = 0
        for _ in range(100):
            clone = clone_device(world, companion, rng.randbytes(16))
            try:
                online += launch_companion(clone, world.server, now=world.clock, label="clone").online
            except (CloneExit, AuthFailure):
                pass
        counts[name] = online
    expected = {
        n: 100 if get_profile(n).archetype is EnrollmentArchetype.INDEPENDENT_COMPANION_KEY else 0 for n in TABLE_ORDER
    }
    report("AC5", counts == expected, "online clones per 100 attempts: " + ", ".join(f"{n}={c}" for n, c in counts.items()))


def test_ac6_elevation_path():
    expected = {
        "signal": None,
        "whatsapp": "open_keystore",
        "element": "clone",
        "wickrme": "clone",
        "viber": "clone",
        "telegram": "open_keystore",
    }
    got = {}
    for name in TABLE_ORDER:
        world, plan = scenario_world(name)
        result = elevation_path(plan, world)
        got[name] = None if result.succeeded else result.failed_at
    report("AC6", got == expected, ", ".join(f"{n}: {'full path' if s is None else 'stops at ' + s}" for n, s in got.items()))


@pytest.mark.parametrize("suite", ["toy", "standard"])
def test_ac7_byte_identical_reports(suite):
    same = []
    for name in TABLE_ORDER:
        s = builtin_scenario(name)
        same.append(run(s, suite=suite).to_json() == run(s, suite=suite).to_json())
    report("AC7", all(same), f"{sum(same)}/6 golden scenarios byte-identical across two runs ({suite} suite)")


def test_ac8_link_graph_oracle():
    mismatched = []
    sizes = []
    for seed in range(50):
        s = random_world(seed)
        sizes.append(len(s.people))
        graph = clone_graph(s)
        if graph.degrees != dict(sorted(oracle_for(s).items())):
            mismatched.append(seed)
    ok = not mismatched and max(sizes) <= 10
    report("AC8", ok, f"50 random worlds ({min(sizes)} to {max(sizes)} entities), {len(mismatched)} mismatches")
