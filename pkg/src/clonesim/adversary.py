"""The short-lived-access attacker.

The attacker copies a companion's application directory onto their own
machine, launches the client from it and then works through a playbook of
steps. Every step ends as succeeded, failed or not applicable; a failure is
an outcome, never an exception.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from .device import (
    AccountCredentials,
    DeviceDescriptor,
    DeviceKind,
    DeviceState,
    KeystoreLocked,
    StateImage,
    create_device,
    export_copyable,
    import_image,
    open_keystore,
)
from .linking import AuthFailure, CloneExit, LaunchMode, delink, launch_companion
from .primitives import TOY, Suite
from .profiles import AppProfile, DirectoryIdentifier
from .server import BadCredentials, NotSupported, Revoked, RevokedConnection, ServerError
from .world import World

__all__ = [
    "Step",
    "StepStatus",
    "Evidence",
    "StepResult",
    "PlanError",
    "AttackPlan",
    "AttackOutcome",
    "ExtractedMetadata",
    "Clone",
    "PLAYBOOK",
    "run_plan",
    "decrypt_history",
    "send_as_victim",
    "capture_credentials",
    "extract_metadata",
    "ElevationStep",
    "ElevationResult",
    "elevation_path",
]


class Step(str, Enum):
    COPY_STATE = "copy_state"
    INSTANTIATE_CLONE = "instantiate_clone"
    EXTRACT_METADATA = "extract_metadata"
    DECRYPT_HISTORY = "decrypt_history"
    CAPTURE_CREDENTIALS = "capture_credentials"
    RECEIVE_FUTURE = "receive_future"
    SEND_AS_VICTIM = "send_as_victim"
    INITIATE_SECRET_CHAT = "initiate_secret_chat"
    CHECK_VICTIM_CONTINUITY = "check_victim_continuity"
    DELINK_THEN_RECONNECT = "delink_then_reconnect"


PLAYBOOK: tuple[Step, ...] = tuple(Step)


class StepStatus(str, Enum):
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    NOT_APPLICABLE = "not_applicable"


@dataclass(frozen=True)
class Evidence:
    kind: str
    ref: str
    event: str  # transcript event id

    def to_dict(self) -> dict:
        return {"kind": self.kind, "ref": self.ref, "event": self.event}


@dataclass(frozen=True)
class StepResult:
    step: Step
    status: StepStatus
    reason: str = ""
    evidence: tuple[Evidence, ...] = ()

    def __post_init__(self):
        if (self.status == StepStatus.SUCCEEDED) != bool(self.evidence):
            raise ValueError(f"{self.step.value}: evidence must be present exactly when the step succeeded")

    @property
    def succeeded(self) -> bool:
        return self.status == StepStatus.SUCCEEDED

    def to_dict(self) -> dict:
        return {
            "step": self.step.value,
            "status": self.status.value,
            "reason": self.reason,
            "evidence": [e.to_dict() for e in self.evidence],
        }


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class AttackPlan:
    target_profile: AppProfile
    victim_account: str
    attacker_device: DeviceDescriptor
    steps: tuple[Step, ...] = PLAYBOOK
    third_party: str = ""
    victim_device: Optional[str] = None
    access: bool = True
    continuity_bound: int = 5

    def __post_init__(self):
        try:
            steps = tuple(Step(s) for s in self.steps)
        except ValueError as exc:
            raise PlanError(str(exc)) from None
        object.__setattr__(self, "steps", steps)
        if len(set(steps)) != len(steps):
            raise PlanError("a step may appear only once")
        clone_steps = [s for s in steps if s != Step.COPY_STATE]
        if clone_steps and (Step.COPY_STATE not in steps or steps[0] != Step.COPY_STATE):
            raise PlanError("copy_state must precede every clone-dependent step")
        if not self.third_party:
            raise PlanError("plan needs a third party")
        if self.continuity_bound < 1:
            raise PlanError("continuity_bound must be positive")
        if self.attacker_device.kind != DeviceKind.DESKTOP_COMPANION:
            raise PlanError("attacker runs a desktop client")


@dataclass(frozen=True)
class ExtractedMetadata:
    """What the copied state tells the attacker about the victim's circle."""

    victim: str
    contacts: tuple[dict, ...] = ()
    groups: tuple[tuple[str, tuple[str, ...]], ...] = ()
    conversations: tuple[dict, ...] = ()
    bodies: tuple[tuple[str, str], ...] = ()  # (conversation partner, plaintext)

    @property
    def empty(self) -> bool:
        return not (self.contacts or self.groups or self.conversations)

    @property
    def direct_identifiers(self) -> tuple[str, ...]:
        ids = set()
        for c in self.contacts:
            ids.update(v for v in (c.get("account_id"), c.get("phone")) if v)
        return tuple(sorted(ids))

    def to_dict(self) -> dict:
        return {
            "victim": self.victim,
            "contacts": list(self.contacts),
            "groups": {g: list(m) for g, m in self.groups},
            "conversations": list(self.conversations),
            "bodies": [list(b) for b in self.bodies],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractedMetadata":
        return cls(
            victim=d["victim"],
            contacts=tuple(d.get("contacts", ())),
            groups=tuple((g, tuple(m)) for g, m in sorted(d.get("groups", {}).items())),
            conversations=tuple(d.get("conversations", ())),
            bodies=tuple((p, b) for p, b in d.get("bodies", ())),
        )


@dataclass
class AttackOutcome:
    profile: str
    results: dict[Step, StepResult] = field(default_factory=dict)
    launch_mode: Optional[str] = None
    indistinguishable: Optional[bool] = None
    continuity_violated: Optional[bool] = None
    metadata: Optional[ExtractedMetadata] = None
    plaintexts: tuple[str, ...] = ()

    def status(self, step: Step) -> StepStatus:
        result = self.results.get(Step(step))
        return StepStatus.NOT_APPLICABLE if result is None else result.status

    def succeeded(self, step: Step) -> bool:
        return self.status(step) == StepStatus.SUCCEEDED

    @property
    def succeeded_steps(self) -> frozenset[Step]:
        return frozenset(s for s, r in self.results.items() if r.succeeded)

    @property
    def clone_online(self) -> bool:
        return self.launch_mode == LaunchMode.ONLINE.value

    def evidence_for(self, *steps: Step) -> tuple[Evidence, ...]:
        out: list[Evidence] = []
        for s in steps:
            r = self.results.get(s)
            if r is not None and r.succeeded:
                out.extend(r.evidence)
        return tuple(out)

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "launch_mode": self.launch_mode,
            "indistinguishable": self.indistinguishable,
            "continuity_violated": self.continuity_violated,
            "steps": [r.to_dict() for r in self.results.values()],
            "metadata": None if self.metadata is None else self.metadata.to_dict(),
            "plaintexts": list(self.plaintexts),
        }


@dataclass
class Clone:
    world: World
    victim: str
    device: DeviceState
    image: StateImage
    token: Optional[str] = None
    mode: Optional[LaunchMode] = None
    exited: bool = False
    launch_error: str = ""
    captured: Optional[AccountCredentials] = None
    access_tick: int = 0

    @property
    def online(self) -> bool:
        return self.token is not None and self.mode == LaunchMode.ONLINE

    def launch(self, label: str = "clone") -> LaunchMode | None:
        world = self.world
        try:
            result = launch_companion(self.device, world.server, now=world.clock, label=label)
        except CloneExit as exc:
            self.exited, self.launch_error, self.mode, self.token = True, f"clone_exit: {exc}", None, None
            return None
        except AuthFailure as exc:
            self.launch_error, self.mode, self.token = f"auth_failure: {exc}", None, None
            return None
        self.mode, self.token = result.mode, result.token
        self.launch_error = "" if result.online else f"offline_only: {result.detail}"
        return result.mode


def _evidence(world: World, step: Step, kind: str, refs) -> tuple[Evidence, ...]:
    out = []
    for ref in refs:
        event = world.log("evidence", step=step.value, kind=kind, ref=ref)
        out.append(Evidence(kind, ref, event))
    return tuple(out)


def _ok(world: World, step: Step, kind: str, refs, reason: str = "") -> StepResult:
    return StepResult(step, StepStatus.SUCCEEDED, reason, _evidence(world, step, kind, refs))


def _fail(step: Step, reason: str) -> StepResult:
    return StepResult(step, StepStatus.FAILED, reason)


def _na(step: Step, reason: str) -> StepResult:
    return StepResult(step, StepStatus.NOT_APPLICABLE, reason)


# -- standalone clone operations ----------------------------------------------


def decrypt_history(clone: Clone) -> tuple[StepResult, tuple[str, ...]]:
    """Recover messages exchanged before the copy was taken."""
    step = Step.DECRYPT_HISTORY
    world = clone.world
    found: dict[str, str] = {}
    for e in clone.device.message_log:
        if e.plaintext is not None and e.tick <= clone.access_tick and e.chat != "secret":
            found[e.message_id] = e.plaintext
    notes = []
    if world.profile.cloud_history:
        if clone.online:
            try:
                for m in world.server.fetch_cloud_history(clone.token, clone.device.account_id):
                    if m.tick <= clone.access_tick:
                        found.setdefault(m.message_id, m.text)
            except (NotSupported, RevokedConnection) as exc:
                notes.append(str(exc))
        else:
            notes.append("cloud history needs a connection")
    if not found:
        try:
            open_keystore(clone.device)
        except KeystoreLocked:
            notes.insert(0, "keystore locked")
        reason = "; ".join(notes) or "no readable history"
        return _fail(step, reason), ()
    ids = sorted(found)
    return _ok(world, step, "plaintext", ids), tuple(found[i] for i in ids)


def extract_metadata(
    source: Union[Clone, DeviceState, StateImage],
    profile: Optional[AppProfile] = None,
    suite: Suite = TOY,
) -> ExtractedMetadata:
    """Who the victim talks to and when, as far as ``source`` reveals it.

    A bare image is read on a scratch machine, so hardware-bound secrets
    stay out of reach.
    """
    if isinstance(source, Clone):
        dev = source.device
    elif isinstance(source, DeviceState):
        dev = source
    else:
        if profile is None:
            raise ValueError("reading a bare image needs the profile")
        scratch = DeviceDescriptor("image-reader", DeviceKind.DESKTOP_COMPANION, b"image-reader")
        dev = import_image(create_device(scratch, profile, 0, suite), source)
    username_only = dev.profile.directory_identifier == DirectoryIdentifier.USERNAME
    contacts = tuple(
        {
            "username": c.username,
            "account_id": None if username_only or not c.account_id else c.account_id,
            "phone": None if username_only else c.phone,
        }
        for c in dev.contacts
    )
    conversations = tuple(
        {"message_id": e.message_id, "peer": e.peer, "direction": e.direction, "tick": e.tick, "chat": e.chat}
        for e in dev.message_log
        if e.chat != "secret"
    )
    bodies = tuple((e.peer, e.plaintext) for e in dev.message_log if e.plaintext is not None and e.chat != "secret")
    return ExtractedMetadata(
        victim=dev.username or "",
        contacts=contacts,
        groups=tuple((g, tuple(m)) for g, m in sorted(dev.groups.items())),
        conversations=conversations,
        bodies=bodies,
    )


def send_as_victim(clone: Clone, third_party: str) -> tuple[StepResult, Optional[bool]]:
    """Send from the clone; returns the result and whether the third party
    could tell the message apart from a genuine one."""
    step = Step.SEND_AS_VICTIM
    world = clone.world
    if not clone.online:
        return _fail(step, clone.launch_error or "clone is not online"), None
    world.step()
    try:
        message_id = world.send(clone.victim, third_party, "hello from your usual desktop", device=clone.device, token=clone.token)
    except ServerError as exc:
        return _fail(step, f"server refused: {type(exc).__name__}"), None
    world.step()
    seen = [r for r in world.sync(third_party) if r.get("message_id") == message_id]
    if not seen:
        return _fail(step, "third party never rendered the message"), None
    expected = world.expected_attribution(clone.victim, clone.device.device_id)
    same = seen[0]["attribution"] == expected
    world.log("third_party_view", recipient=third_party, message=message_id, indistinguishable=same)
    if not same:
        return _fail(step, "third party sees a different sender"), False
    return _ok(world, step, "sent_message", [message_id]), True


def capture_credentials(clone: Clone) -> StepResult:
    """Read the account's primary-device credentials out of the clone's keystore."""
    step = Step.CAPTURE_CREDENTIALS
    try:
        access = open_keystore(clone.device)
    except KeystoreLocked as exc:
        return _fail(step, f"keystore locked: {exc}")
    raw = access.records.get("primary_credentials")
    if raw is None:
        return _fail(step, "no primary credentials in the readable store")
    clone.captured = AccountCredentials.from_dict(raw)
    return _ok(clone.world, step, "credentials", [f"{clone.captured.account_id}/{clone.captured.device_id}"])


# -- playbook -----------------------------------------------------------------


class _Runner:
    def __init__(self, plan: AttackPlan, world: World):
        self.plan = plan
        self.world = world
        self.outcome = AttackOutcome(plan.target_profile.name)
        self.clone: Optional[Clone] = None
        person = world.people[plan.victim_account]
        device_id = plan.victim_device or (sorted(person.companions)[0] if person.companions else None)
        if device_id is None or device_id not in person.companions:
            raise PlanError(f"{plan.victim_account} has no linked desktop to copy")
        self.victim_device = device_id

    def run(self) -> AttackOutcome:
        world = self.world
        world.log("attack_start", victim=self.plan.victim_account, access=self.plan.access)
        for step in self.plan.steps:
            result = self._dispatch(step)
            self.outcome.results[step] = result
            world.log("attack_step", step=step.value, status=result.status.value, reason=result.reason)
        world.log("attack_end")
        return self.outcome

    def _dispatch(self, step: Step) -> StepResult:
        if step == Step.COPY_STATE:
            return self.copy_state()
        clone = self.clone
        if clone is None:
            return _na(step, "no state was copied")
        if clone.exited:
            return _na(step, "clone exited at launch")
        return getattr(self, step.value)()

    def copy_state(self) -> StepResult:
        world, plan = self.world, self.plan
        world.step()
        victim_dev = world.people[plan.victim_account].companions[self.victim_device]
        if not plan.access:
            return _fail(Step.COPY_STATE, "no access to the victim's machine")
        image = export_copyable(victim_dev)
        target = create_device(plan.attacker_device, plan.target_profile, world.rng, world.suite)
        import_image(target, image)
        self.clone = Clone(world, plan.victim_account, target, image, access_tick=world.clock)
        world.log("copy_state", source=victim_dev.device_id, files=sorted(image.files))
        if not image.files:
            return _fail(Step.COPY_STATE, "nothing to copy")
        return _ok(world, Step.COPY_STATE, "file", sorted(image.files))

    def instantiate_clone(self) -> StepResult:
        step = Step.INSTANTIATE_CLONE
        clone = self.clone
        self.world.step()
        mode = clone.launch()
        self.outcome.launch_mode = None if mode is None else mode.value
        if clone.online:
            return _ok(self.world, step, "connection", [clone.token])
        return _fail(step, clone.launch_error)

    def extract_metadata(self) -> StepResult:
        meta = extract_metadata(self.clone)
        self.outcome.metadata = meta
        if meta.empty:
            return _fail(Step.EXTRACT_METADATA, "no readable contacts or conversations")
        refs = [f"contact:{c['username']}" for c in meta.contacts]
        refs += [f"conversation:{c['message_id']}" for c in meta.conversations]
        refs += [f"group:{g}" for g, _ in meta.groups]
        return _ok(self.world, Step.EXTRACT_METADATA, "metadata", refs)

    def decrypt_history(self) -> StepResult:
        result, plaintexts = decrypt_history(self.clone)
        self.outcome.plaintexts = plaintexts
        return result

    def capture_credentials(self) -> StepResult:
        return capture_credentials(self.clone)

    def receive_future(self) -> StepResult:
        step = Step.RECEIVE_FUTURE
        clone, world, plan = self.clone, self.world, self.plan
        if not clone.online:
            return _fail(step, clone.launch_error or "clone is not online")
        world.step()
        message_id = world.send(plan.third_party, plan.victim_account, "are we still on for friday?")
        world.step()
        got = _clone_reads(clone, message_id)
        if not got:
            return _fail(step, "message did not reach the clone")
        return _ok(world, step, "plaintext", [message_id])

    def send_as_victim(self) -> StepResult:
        result, same = send_as_victim(self.clone, self.plan.third_party)
        self.outcome.indistinguishable = same
        return result

    def initiate_secret_chat(self) -> StepResult:
        step = Step.INITIATE_SECRET_CHAT
        clone, world, plan = self.clone, self.world, self.plan
        if not plan.target_profile.secret_chats:
            return _na(step, "application has no secret chats")
        if not clone.online:
            return _fail(step, clone.launch_error or "clone is not online")
        world.step()
        try:
            message_id = world.send(plan.victim_account, plan.third_party, "let's move to a secret chat", secret=True, device=clone.device, token=clone.token)
        except ServerError as exc:
            return _fail(step, f"server refused: {type(exc).__name__}")
        world.step()
        seen = [r for r in world.sync(plan.third_party) if r.get("message_id") == message_id and r["kind"] == "secret"]
        victim_account = world.people[plan.victim_account].account_id
        if not seen or seen[0]["attribution"]["account"] != victim_account:
            return _fail(step, "third party did not accept the secret chat")
        return _ok(world, step, "secret_chat", [message_id])

    def check_victim_continuity(self) -> StepResult:
        """Succeeds only when the victim is pushed off the network."""
        step = Step.CHECK_VICTIM_CONTINUITY
        clone, world, plan = self.clone, self.world, self.plan
        victim = world.people[plan.victim_account]
        problems: list[str] = []
        world.step()
        try:
            sent = world.send(plan.victim_account, plan.third_party, "continuity check")
        except ServerError as exc:
            problems.append(f"victim send refused: {type(exc).__name__}")
            sent = None
        if sent is not None:
            world.step()
            if not any(r.get("message_id") == sent for r in world.sync(plan.third_party)):
                problems.append("victim's message never arrived")

        if clone.token is not None:
            world.server.disconnect(clone.token)
            clone.token = None
        world.step()
        probe = world.send(plan.third_party, plan.victim_account, "ping")
        live = [d for d in victim.devices if world.is_connected(plan.victim_account, d.device_id)]
        reached: set[str] = set()
        fetched: set[str] = set()
        for _ in range(plan.continuity_bound):
            world.step()
            for dev in live:
                before = len(world.transcript)
                items = world.sync(plan.victim_account, dev.device_id)
                if any(r.get("message_id") == probe for r in items):
                    reached.add(dev.device_id)
                if items or any(e["event"] == "undecryptable" for e in world.transcript[before:]):
                    fetched.add(dev.device_id)
            if reached and fetched >= {d.device_id for d in live}:
                break
        starved = sorted({d.device_id for d in live} - fetched)
        if starved:
            problems.append("mailbox starved: " + ",".join(starved))
        if not reached:
            problems.append("probe never read by any victim device")
        world.log("continuity", reached=sorted(reached), starved=starved, live=[d.device_id for d in live])

        # the attacker comes back afterwards
        if clone.mode == LaunchMode.ONLINE:
            clone.launch()
        self.outcome.continuity_violated = bool(problems)
        if problems:
            return _ok(world, step, "continuity_violation", problems)
        return _fail(step, "victim kept sending and receiving")

    def delink_then_reconnect(self) -> StepResult:
        step = Step.DELINK_THEN_RECONNECT
        ok, reason = _delink_both(self.clone, self.victim_device)
        if not ok:
            return _fail(step, reason)
        ok, reason = _reconnect(self.clone, self.plan.third_party)
        if not ok:
            return _fail(step, reason)
        return _ok(self.world, step, "reattached", [reason])


def _clone_reads(clone: Clone, message_id: str) -> bool:
    items = clone.world.sync(clone.victim, device=clone.device, token=clone.token)
    return any(r.get("message_id") == message_id for r in items)


def _delink_both(clone: Clone, victim_device: str) -> tuple[bool, str]:
    """The victim removes the desktop; the copy shares its slot and goes too."""
    world = clone.world
    victim = world.people[clone.victim]
    world.step()
    try:
        delink(victim.primary, world.server, victim_device, now=world.clock)
    except ServerError as exc:
        return False, f"victim could not delink: {exc}"
    world.log("delink", person=clone.victim, device=victim_device)
    refused = True
    if clone.token is not None:
        try:
            world.server.fetch(clone.token, world.clock)
            refused = False
        except RevokedConnection:
            pass
    clone.token = None
    if refused and clone.launch(label="clone-after-delink") == LaunchMode.ONLINE:
        refused = False
    if not refused:
        return False, "clone kept its connection after the delink"
    return True, "clone refused after delink"


def _reconnect(clone: Clone, third_party: str) -> tuple[bool, str]:
    world = clone.world
    if clone.captured is None:
        return False, "no primary credentials captured"
    world.step()
    try:
        clone.token = world.server.authenticate(clone.captured, clone.device.slot, world.clock, label="clone-reattach")
    except (BadCredentials, Revoked) as exc:
        return False, f"reattach refused: {exc}"
    clone.mode = LaunchMode.ONLINE
    world.step()
    message_id = world.send(third_party, clone.victim, "did you get my last message?")
    world.step()
    if not _clone_reads(clone, message_id):
        return False, "reattached clone received nothing"
    return True, message_id


def run_plan(plan: AttackPlan, world: World) -> AttackOutcome:
    """Run ``plan`` against the live simulation."""
    if plan.target_profile != world.profile:
        raise PlanError(f"plan targets {plan.target_profile.name} but the world runs {world.profile.name}")
    for who in (plan.victim_account, plan.third_party):
        if who not in world.people:
            raise PlanError(f"unknown person {who!r}")
    return _Runner(plan, world).run()


# -- elevation path -----------------------------------------------------------


ELEVATION_STEPS = ("clone", "open_keystore", "capture_credentials", "delink_both", "reconnect")


@dataclass(frozen=True)
class ElevationStep:
    name: str
    ok: bool
    detail: str


@dataclass(frozen=True)
class ElevationResult:
    profile: str
    steps: tuple[ElevationStep, ...]

    @property
    def succeeded(self) -> bool:
        return len(self.steps) == len(ELEVATION_STEPS) and all(s.ok for s in self.steps)

    @property
    def failed_at(self) -> Optional[str]:
        for s in self.steps:
            if not s.ok:
                return s.name
        return None


def elevation_path(plan: AttackPlan, world: World) -> ElevationResult:
    """Clone, open the keystore, capture credentials, survive the victim
    delinking the desktop, then reattach. Stops at the first failing step."""
    runner = _Runner(plan, world)
    steps: list[ElevationStep] = []

    def record(name: str, ok: bool, detail: str) -> bool:
        steps.append(ElevationStep(name, ok, detail))
        world.log("elevation_step", step=name, ok=ok, detail=detail)
        return ok

    copied = runner.copy_state()
    clone = runner.clone
    if not copied.succeeded or clone is None:
        record("clone", False, copied.reason)
        return ElevationResult(plan.target_profile.name, tuple(steps))
    world.step()
    clone.launch()
    if not record("clone", clone.online, clone.launch_error or "online"):
        return ElevationResult(plan.target_profile.name, tuple(steps))
    try:
        open_keystore(clone.device)
        ok, detail = True, "opened"
    except KeystoreLocked as exc:
        ok, detail = False, str(exc)
    if not record("open_keystore", ok, detail):
        return ElevationResult(plan.target_profile.name, tuple(steps))
    captured = capture_credentials(clone)
    if not record("capture_credentials", captured.succeeded, captured.reason or "captured"):
        return ElevationResult(plan.target_profile.name, tuple(steps))
    if not record("delink_both", *_delink_both(clone, runner.victim_device)):
        return ElevationResult(plan.target_profile.name, tuple(steps))
    record("reconnect", *_reconnect(clone, plan.third_party))
    return ElevationResult(plan.target_profile.name, tuple(steps))


def outcome_json(outcome: AttackOutcome) -> str:
    return json.dumps(outcome.to_dict(), sort_keys=True, indent=2)


_MENTION = re.compile(r"@([A-Za-z0-9_.-]+)")


def mentions(body: str) -> list[str]:
    """Usernames referenced as ``@name`` in a message body."""
    return _MENTION.findall(body)
