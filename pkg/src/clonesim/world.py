"""Deterministic simulation loop: people, devices, sessions and traffic.

Everything random flows from one seed. Key material comes from the main
stream; contention tie-breaks on the server use a separate stream so that
changing one never perturbs the other.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Optional

from .device import AccountCredentials, Contact, DeviceDescriptor, DeviceKind, DeviceState, LogEntry, create_device
from .linking import enroll_companion, launch_companion, sync_links
from .primitives import Suite, TOY
from .profiles import AppProfile
from .ratchet import (
    DecryptionFailure,
    DuplicateMessageError,
    RatchetError,
    SkippedLimitExceeded,
    UnknownPreKeyError,
    generate_prekeys,
    init_initiator,
    init_responder,
    ratchet_decrypt,
    ratchet_encrypt,
)
from .server import CloudMessage, Delivery, ServerState


@dataclass
class Person:
    username: str
    account_id: str
    phone: str
    primary: DeviceState
    companions: dict[str, DeviceState] = field(default_factory=dict)
    tokens: dict[str, str] = field(default_factory=dict)

    def device(self, device_id: Optional[str] = None) -> DeviceState:
        if device_id is None or device_id == self.primary.device_id:
            return self.primary
        return self.companions[device_id]

    @property
    def devices(self) -> list[DeviceState]:
        return [self.primary] + [self.companions[d] for d in sorted(self.companions)]


def peer_key(account_id: str, device_id: str) -> str:
    return f"{account_id}/{device_id}"


def encode_body(message_id: str, body: str) -> bytes:
    return json.dumps({"id": message_id, "body": body}, sort_keys=True).encode()


def decode_body(plaintext: bytes) -> tuple[str, str]:
    d = json.loads(plaintext)
    return d["id"], d["body"]


class World:
    def __init__(self, profile: AppProfile, *, seed: int = 0, suite: Suite = TOY):
        self.profile = profile
        self.suite = suite
        self.seed = seed
        self.rng = random.Random(seed)
        self.server = ServerState(profile, suite, rng=random.Random(f"contention:{seed}"))
        self.server.listeners.append(self._device_list_changed)
        self.clock = 0
        self.transcript: list[dict] = []
        self.people: dict[str, Person] = {}
        self.received: dict[str, list[dict]] = {}
        self._message_counter = 0
        self._hardware_counter = 0

    # -- bookkeeping ---------------------------------------------------------

    def log(self, event: str, **fields) -> str:
        event_id = f"ev-{len(self.transcript) + 1:05d}"
        self.transcript.append({"id": event_id, "tick": self.clock, "event": event, **fields})
        return event_id

    def _device_list_changed(self, account_id: str) -> None:
        for person in self.people.values():
            if person.account_id == account_id:
                sync_links(person.primary, self.server)
                person.primary.persist()

    def advance(self, tick: int) -> None:
        if tick < self.clock:
            raise ValueError(f"clock cannot go back from {self.clock} to {tick}")
        self.clock = tick
        self.server.expire_links(tick)

    def step(self) -> int:
        self.advance(self.clock + 1)
        return self.clock

    def new_hardware(self) -> bytes:
        self._hardware_counter += 1
        return self.rng.randbytes(16)

    def next_message_id(self) -> str:
        self._message_counter += 1
        return f"m{self._message_counter:04d}"

    # -- setup ---------------------------------------------------------------

    def add_person(self, username: str, phone: Optional[str] = None) -> Person:
        if username in self.people:
            raise ValueError(f"duplicate person {username!r}")
        account_id = f"acct-{username}"
        phone = phone or f"+44-7700-{900000 + len(self.people):06d}"
        descriptor = DeviceDescriptor(f"{username}-phone", DeviceKind.PRIMARY_MOBILE, self.new_hardware())
        device = create_device(descriptor, self.profile, self.rng, self.suite)
        device.account_id = account_id
        device.username = username
        device.app_device_id = descriptor.device_id
        device.identity = self.suite.keygen(self.rng)
        device.prekeys = generate_prekeys(self.suite, device.identity, self.rng)
        device.credentials = AccountCredentials(account_id, descriptor.device_id, self.suite.random_key(self.rng))
        device.primary_credentials = device.credentials
        self.server.register_account(
            device.identity.public,
            device.prekeys.bundles(device.identity.public),
            device.credentials,
            username=username,
            phone=phone,
        )
        person = Person(username, account_id, phone, device)
        person.tokens[device.device_id] = self.server.authenticate(device.credentials, device.slot, self.clock, label=descriptor.device_id)
        if self.profile.secret_chats:
            self._provision_secret_keys(device, person.tokens[device.device_id])
        device.persist()
        self.people[username] = person
        self.log("register", person=username, device=descriptor.device_id)
        return person

    def _provision_secret_keys(self, dev: DeviceState, token: str) -> None:
        dev.secret_identity = self.suite.keygen(self.rng)
        dev.secret_prekeys = generate_prekeys(self.suite, dev.secret_identity, self.rng, first_id=1000)
        self.server.publish_secret_bundles(token, dev.secret_prekeys.bundles(dev.secret_identity.public))

    def enroll(self, username: str, name: str = "desktop") -> DeviceState:
        person = self.people[username]
        descriptor = DeviceDescriptor(f"{username}-{name}", DeviceKind.DESKTOP_COMPANION, self.new_hardware())
        companion = create_device(descriptor, self.profile, self.rng, self.suite)
        enroll_companion(
            person.primary,
            companion,
            self.server,
            self.profile,
            primary_token=person.tokens[person.primary.device_id],
            now=self.clock,
            rng=self.rng,
        )
        person.companions[companion.device_id] = companion
        result = launch_companion(companion, self.server, now=self.clock)
        person.tokens[companion.device_id] = result.token
        self.log("enroll", person=username, device=companion.device_id)
        return companion

    def add_contact(self, a: str, b: str) -> None:
        pa, pb = self.people[a], self.people[b]
        for owner, other in ((pa, pb), (pb, pa)):
            contact = Contact(other.username, other.account_id, other.phone)
            for dev in owner.devices:
                if contact not in dev.contacts:
                    dev.contacts.append(contact)
                    dev.persist()

    def add_group(self, group_id: str, members: list[str]) -> None:
        for m in members:
            for dev in self.people[m].devices:
                dev.groups[group_id] = list(members)
                dev.persist()

    # -- traffic -------------------------------------------------------------

    def send(
        self,
        sender: str,
        recipient: str,
        body: str,
        *,
        device_id: Optional[str] = None,
        secret: bool = False,
        device: Optional[DeviceState] = None,
        token: Optional[str] = None,
    ) -> str:
        """Send ``body`` and return its message id.

        ``device``/``token`` let a caller drive a device that is not one of
        ``sender``'s registered devices (a clone).
        """
        person = self.people[sender]
        dev = device or person.device(device_id)
        token = token or person.tokens[dev.device_id]
        to = self.people[recipient]
        message_id = self.next_message_id()
        plaintext = encode_body(message_id, body)
        chat = "secret" if secret else ("cloud" if self.profile.cloud_history else "e2ee")

        if chat == "cloud":
            msg = CloudMessage(message_id, dev.account_id, dev.device_id, to.account_id, self.clock, body)
            self.server.route(msg, token, to.account_id, self.clock)
        else:
            sessions = dev.secret_sessions if secret else dev.sessions
            if secret and dev.secret_identity is None:
                self._provision_secret_keys(dev, token)
            if secret:
                # secret chats live on exactly one device pair
                prefix = f"{to.account_id}/"
                existing = sorted(k[len(prefix):] for k in sessions if k.startswith(prefix))
                targets = existing[:1] or [to.primary.device_id]
            else:
                targets = self.server.active_devices(to.account_id)
            payload = {}
            for target in targets:
                key = peer_key(to.account_id, target)
                state = sessions.get(key)
                if state is None:
                    if secret:
                        bundle = self.server.fetch_secret_bundle(to.account_id, target)
                    else:
                        bundle = self.server.fetch_bundle(to.account_id, target)
                    identity = dev.secret_identity if secret else dev.identity
                    state = init_initiator(self.suite, identity, bundle, self.rng, **self._session_policy(secret), now=self.clock)
                state, env = ratchet_encrypt(self.suite, state, plaintext, self.rng, now=self.clock)
                sessions[key] = state
                payload[target] = env
            self.server.route(payload, token, to.account_id, self.clock, secret_chat=secret)

        dev.message_log.append(LogEntry(message_id, recipient, "out", self.clock, chat, body))
        dev.persist()
        self.log("send", sender=sender, device=dev.device_id, recipient=recipient, message=message_id, chat=chat)
        return message_id

    def _session_policy(self, secret: bool) -> dict:
        p = self.profile
        return {
            "skipped_limit": p.skipped_limit,
            "skipped_max_age": p.skipped_max_age,
            "rekey_every_messages": p.rekey_every_n_messages if secret else None,
            "rekey_every_ticks": p.rekey_every_ticks if secret else None,
        }

    def sync(self, username: str, device_id: Optional[str] = None, *, device: Optional[DeviceState] = None, token: Optional[str] = None) -> list[dict]:
        """Fetch and process the mailbox for one device; returns what it read."""
        person = self.people[username]
        dev = device or person.device(device_id)
        token = token or person.tokens[dev.device_id]
        out = []
        for delivery in self.server.fetch(token, self.clock):
            item = self._process(dev, delivery)
            if item is not None:
                out.append(item)
        dev.persist()
        self.received.setdefault(token, []).extend(out)
        return out

    def sync_all(self, username: str) -> None:
        person = self.people[username]
        for dev in person.devices:
            if self.is_connected(username, dev.device_id):
                self.sync(username, dev.device_id)

    def is_connected(self, username: str, device_id: str) -> bool:
        token = self.people[username].tokens.get(device_id)
        conn = self.server.connections.get(token) if token else None
        return conn is not None and conn.live

    def _sender_name(self, account_id: str) -> str:
        for p in self.people.values():
            if p.account_id == account_id:
                return p.username
        return account_id

    def _process(self, dev: DeviceState, delivery: Delivery) -> Optional[dict]:
        if delivery.kind == "alert":
            dev.notifications.append(dict(delivery.payload))
            return {"kind": "alert", **delivery.payload}
        peer = self._sender_name(delivery.sender_account)
        if delivery.kind == "cloud":
            msg: CloudMessage = delivery.payload
            dev.message_log.append(LogEntry(msg.message_id, peer, "in", self.clock, "cloud", msg.text))
            return {
                "kind": "cloud",
                "message_id": msg.message_id,
                "body": msg.text,
                "attribution": {"account": delivery.sender_account},
            }
        env = delivery.payload
        key = peer_key(delivery.sender_account, delivery.sender_device)
        sessions = dev.secret_sessions if delivery.secret_chat else dev.sessions
        state = sessions.get(key)
        try:
            if state is None or (env.prekey is not None and state.base_public != env.prekey.base_public):
                identity, prekeys = (
                    (dev.secret_identity, dev.secret_prekeys) if delivery.secret_chat else (dev.identity, dev.prekeys)
                )
                if identity is None or prekeys is None:
                    raise UnknownPreKeyError("device holds no pre-keys")
                state, plaintext = init_responder(
                    self.suite, identity, prekeys, env, self.rng, **self._session_policy(delivery.secret_chat), now=self.clock
                )
                if env.prekey.one_time_prekey_id is not None:
                    prekeys.one_time.pop(env.prekey.one_time_prekey_id, None)
            else:
                state, plaintext = ratchet_decrypt(self.suite, state, env, self.rng, now=self.clock)
        except (DecryptionFailure, DuplicateMessageError, SkippedLimitExceeded, UnknownPreKeyError, RatchetError) as exc:
            self.log("undecryptable", device=dev.device_id, sender=key, error=type(exc).__name__)
            return None
        sessions[key] = state
        message_id, body = decode_body(plaintext)
        chat = "secret" if delivery.secret_chat else "e2ee"
        dev.message_log.append(LogEntry(message_id, peer, "in", self.clock, chat, body))
        return {
            "kind": chat,
            "message_id": message_id,
            "body": body,
            "attribution": {
                "account": delivery.sender_account,
                "device": delivery.sender_device,
                "identity": state.remote_identity.hex(),
            },
        }

    def expected_attribution(self, username: str, device_id: str) -> dict:
        """How a recipient renders a genuine message from ``username``'s device."""
        person = self.people[username]
        if self.profile.cloud_history:
            return {"account": person.account_id}
        return {
            "account": person.account_id,
            "device": device_id,
            "identity": self.server.device_identity(person.account_id, device_id).hex(),
        }
