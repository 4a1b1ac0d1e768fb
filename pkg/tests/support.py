"""Shared builders for the test modules."""

from __future__ import annotations

import random
import re
from collections import deque
from dataclasses import dataclass, field

from clonesim.adversary import extract_metadata
from clonesim.device import DeviceDescriptor, DeviceKind, create_device, export_copyable, import_image
from clonesim.primitives import TOY, AuthenticationError, Suite
from clonesim.ratchet import (
    Envelope,
    SessionState,
    generate_prekeys,
    init_initiator,
    init_responder,
    ratchet_decrypt,
    ratchet_encrypt,
)
from clonesim.profiles import get_profile
from clonesim.simctl import Companion, Scenario, ScriptEvent, build_world, builtin_scenario, prepare
from clonesim.threatlens import build_link_graph

HEX32 = re.compile(rb"[0-9a-f]{64}")
SECRET_FIELDS = {"secret", "root_key", "key", "device_password", "auth_key", "signature", "plaintext"}


def secrets_in(obj, fields=SECRET_FIELDS):
    """Secret-bearing leaves of a serialized record."""
    if isinstance(obj, dict):
        for k, v in obj.items():
            if k in fields and isinstance(v, str) and len(v) >= 8:
                yield v
            elif k == "skipped":
                yield from (entry[2] for entry in v)
            else:
                yield from secrets_in(v, fields)
    elif isinstance(obj, list):
        for v in obj:
            yield from secrets_in(v, fields)


@dataclass
class Pair:
    """Two session ends plus the rng both draw from."""

    suite: Suite
    rng: random.Random
    alice: SessionState
    bob: SessionState
    now: int = 0
    sent: list = field(default_factory=list)

    def send(self, who: str, body: bytes) -> Envelope:
        state, env = ratchet_encrypt(self.suite, getattr(self, who), body, self.rng, now=self.now)
        setattr(self, who, state)
        self.sent.append((who, env, body))
        return env

    def deliver(self, who: str, env: Envelope) -> bytes:
        state, plaintext = ratchet_decrypt(self.suite, getattr(self, who), env, self.rng, now=self.now)
        setattr(self, who, state)
        return plaintext


def open_pair(suite: Suite = TOY, seed: int = 0, *, acked: bool = True, **policy) -> Pair:
    """Alice initiates to Bob; with ``acked`` Bob has replied once."""
    rng = random.Random(seed)
    alice_id, bob_id = suite.keygen(rng), suite.keygen(rng)
    store = generate_prekeys(suite, bob_id, rng)
    bundle = store.bundle(bob_id.public, one_time_id=min(store.one_time))
    alice = init_initiator(suite, alice_id, bundle, rng, **policy)
    alice, hello = ratchet_encrypt(suite, alice, b"hello", rng)
    bob, first = init_responder(suite, bob_id, store, hello, rng, **policy)
    assert first == b"hello"
    pair = Pair(suite, rng, alice, bob)
    if acked:
        pair.deliver("alice", pair.send("bob", b"ack"))
    return pair


def candidate_keys(suite: Suite, blob: bytes) -> set[bytes]:
    """Every 32-byte value in a serialized state, used directly or as a chain key."""
    out = set()
    for match in HEX32.findall(blob):
        value = bytes.fromhex(match.decode())
        out.add(value)
        out.add(suite.kdf_chain(value)[1])
    return out


def opens(suite: Suite, key: bytes, env: Envelope, ad: bytes) -> bool:
    try:
        suite.aead_open(key, env.ciphertext, ad + env.header_ad)
    except AuthenticationError:
        return False
    return True


def scenario_world(profile: str, **kw):
    """World at the access tick of a built-in scenario, with its plan."""
    return prepare(builtin_scenario(profile), **kw)


MENTION = re.compile(r"@([a-z][a-z0-9_]*)")


def bfs_oracle(victim, contacts, groups, messages):
    """Distances from the victim, by plain BFS over a graph where every
    two-hop relation is split through a fresh midpoint node."""
    adj = {}

    def link(a, b, hops):
        chain = [a] + [("mid", a, b, i) for i in range(hops - 1)] + [b]
        for x, y in zip(chain, chain[1:]):
            adj.setdefault(x, set()).add(y)
            adj.setdefault(y, set()).add(x)

    for c in contacts:
        link(victim, c, 1)
    for sender, recipient, body in messages:
        peer = recipient if sender == victim else sender
        link(victim, peer, 1)
        for name in MENTION.findall(body):
            if name not in (victim, peer):
                link(peer, name, 2)
    for members in groups:
        for m in members:
            if m != victim:
                link(victim, m, 2)
    dist = {victim: 0}
    queue = deque([victim])
    while queue:
        node = queue.popleft()
        for nxt in adj.get(node, ()):
            if nxt not in dist:
                dist[nxt] = dist[node] + 1
                queue.append(nxt)
    return {n: d for n, d in dist.items() if isinstance(n, str)}


def random_world(seed: int) -> Scenario:
    """A signal scenario with at most ten people and a random script."""
    rng = random.Random(seed)
    names = [f"p{i}" for i in range(rng.randint(2, 9))]
    victim = "v"
    contacts = sorted(set(rng.sample(names, rng.randint(1, len(names)))))
    groups = []
    for g in range(rng.randint(0, 2)):
        members = sorted(set(rng.sample(names, rng.randint(1, min(3, len(names))))) | {victim})
        groups.append((f"g{g}", tuple(members)))
    script = []
    for tick in range(2, 2 + rng.randint(1, 6)):
        peer = rng.choice(contacts)
        body = " ".join(f"@{n}" for n in rng.sample(names, rng.randint(0, 2))) or "hi"
        if rng.random() < 0.5:
            script.append(ScriptEvent(tick, peer, victim, body))
        else:
            script.append(ScriptEvent(tick, victim, peer, body, "desktop"))
    return Scenario(
        name=f"rand{seed}",
        seed=seed,
        profile=get_profile("signal"),
        victim=victim,
        third_parties=tuple(names),
        attack_tick=len(script) + 2,
        attack_third_party=contacts[0],
        companions=(Companion("desktop", 1),),
        contacts=tuple((victim, c) for c in contacts),
        groups=tuple(groups),
        script=tuple(script),
    )


def oracle_for(s: Scenario):
    return bfs_oracle(
        s.victim,
        [b for a, b in s.contacts],
        [m for _, m in s.groups],
        [(e.sender, e.recipient, e.body) for e in s.script],
    )


def clone_graph(s: Scenario):
    """Link graph built from what the victim's desktop holds after the script."""
    world = build_world(s)
    return build_link_graph(extract_metadata(world.people[s.victim].companions[f"{s.victim}-desktop"]))


def clone_device(world, companion, hardware: bytes):
    """Fresh attacker desktop on ``hardware`` holding a copy of ``companion``."""
    desc = DeviceDescriptor("attacker-desktop", DeviceKind.DESKTOP_COMPANION, hardware)
    target = create_device(desc, world.profile, random.Random(hardware), world.suite)
    return import_image(target, export_copyable(companion))
