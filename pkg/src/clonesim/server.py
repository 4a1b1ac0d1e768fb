"""Application server: accounts, pre-key distribution, device lists, routing.

The server is a passive structure driven by the simulation loop. It stores
public keys, password digests and ciphertext only; the one exception is
cloud history for profiles whose cloud chats are server-readable.

When two live connections hold the same device slot (a victim's desktop and
its clone), mailbox delivery goes to the one that refreshed its session most
recently. Ties are broken by a seeded draw taken at refresh time.
"""

from __future__ import annotations

import hashlib
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from .device import AccountCredentials
from .primitives import Suite
from .profiles import AppProfile
from .ratchet import Envelope, PreKeyBundle


class ServerError(Exception):
    pass


class DuplicateAccount(ServerError):
    pass


class BadSignature(ServerError):
    pass


class UnknownAccount(ServerError):
    pass


class UnknownCompanion(ServerError):
    pass


class AlreadyLinked(ServerError):
    pass


class Unauthorized(ServerError):
    pass


class RevokedConnection(ServerError):
    pass


class Revoked(ServerError):
    pass


class BadCredentials(ServerError):
    pass


class NotSupported(ServerError):
    pass


@dataclass
class LinkRecord:
    companion_device_id: str
    companion_identity_public: bytes
    linked_at: int
    expires_at: Optional[int] = None
    active: bool = True

    def to_dict(self) -> dict:
        return {
            "companion_device_id": self.companion_device_id,
            "companion_identity_public": self.companion_identity_public.hex(),
            "linked_at": self.linked_at,
            "expires_at": self.expires_at,
            "active": self.active,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinkRecord":
        return cls(
            d["companion_device_id"],
            bytes.fromhex(d["companion_identity_public"]),
            d["linked_at"],
            d["expires_at"],
            d["active"],
        )


@dataclass(frozen=True)
class CloudMessage:
    message_id: str
    sender_account: str
    sender_device: str
    recipient_account: str
    tick: int
    text: str


@dataclass(frozen=True)
class Delivery:
    kind: str  # "envelope" | "cloud" | "alert"
    sender_account: str
    sender_device: str
    tick: int
    payload: Union[Envelope, CloudMessage, dict]
    secret_chat: bool = False


@dataclass
class Connection:
    token: str
    slot: tuple[str, str]
    refresh_key: tuple[int, float]
    label: str
    live: bool = True

    @property
    def refreshed_at(self) -> int:
        return self.refresh_key[0]


@dataclass
class Account:
    account_id: str
    identity_public: bytes
    primary_device_id: str
    bundles: dict[str, list[PreKeyBundle]] = field(default_factory=dict)
    secret_bundles: dict[str, list[PreKeyBundle]] = field(default_factory=dict)
    device_list: dict[str, LinkRecord] = field(default_factory=dict)
    password_digests: dict[str, bytes] = field(default_factory=dict)
    device_identities: dict[str, bytes] = field(default_factory=dict)
    notification_queue: list[dict] = field(default_factory=list)
    username: str = ""
    phone: Optional[str] = None


@dataclass(frozen=True)
class DeliveryOutcome:
    delivered: tuple[tuple[str, str], ...]
    missing: tuple[str, ...] = ()


def _digest(password: bytes) -> bytes:
    return hashlib.sha256(b"clonesim/password" + password).digest()


class ServerState:
    def __init__(self, profile: AppProfile, suite: Suite, rng: Optional[random.Random] = None):
        self.profile = profile
        self.suite = suite
        self.rng = rng or random.Random(0)
        self.accounts: dict[str, Account] = {}
        self.mailboxes: dict[tuple[str, str], deque[Delivery]] = {}
        self.cloud_history: dict[str, list[CloudMessage]] = {}
        self.connections: dict[str, Connection] = {}
        self.events: list[dict] = []
        # called with an account id whenever that account's device list changes
        self.listeners: list[Callable[[str], None]] = []
        self._token_counter = 0

    def _changed(self, account_id: str) -> None:
        for listener in self.listeners:
            listener(account_id)

    # -- registry ------------------------------------------------------------

    def register_account(
        self,
        identity_public: bytes,
        prekey_bundles: list[PreKeyBundle],
        credentials: AccountCredentials,
        *,
        username: str = "",
        phone: Optional[str] = None,
    ) -> str:
        account_id = credentials.account_id
        if account_id in self.accounts:
            raise DuplicateAccount(account_id)
        self._check_bundles(identity_public, prekey_bundles)
        acct = Account(
            account_id=account_id,
            identity_public=identity_public,
            primary_device_id=credentials.device_id,
            username=username or account_id,
            phone=phone,
        )
        acct.bundles[credentials.device_id] = list(prekey_bundles)
        acct.password_digests[credentials.device_id] = _digest(credentials.device_password)
        acct.device_identities[credentials.device_id] = identity_public
        self.accounts[account_id] = acct
        self.mailboxes[(account_id, credentials.device_id)] = deque()
        if self.profile.cloud_history:
            self.cloud_history[account_id] = []
        return account_id

    def _check_bundles(self, identity_public: bytes, bundles: list[PreKeyBundle]) -> None:
        for b in bundles:
            if b.identity_public != identity_public or not self.suite.verify_with(
                identity_public, b.signed_prekey_public, b.signed_prekey_signature
            ):
                raise BadSignature(f"pre-key bundle {b.prekey_ids} does not verify")

    def account(self, account_id: str) -> Account:
        try:
            return self.accounts[account_id]
        except KeyError:
            raise UnknownAccount(account_id) from None

    def fetch_bundle(self, account_id: str, device_id: str) -> PreKeyBundle:
        """Hand out the next bundle; one-time pre-keys are consumed, the last
        signed-only bundle is kept."""
        return self._take(self.account(account_id).bundles.get(device_id), account_id, device_id)

    def publish_secret_bundles(self, token: str, bundles: list[PreKeyBundle]) -> None:
        """Secret-chat pre-keys for the connected device, under their own identity."""
        if not self.profile.secret_chats:
            raise NotSupported("secret chats are not offered by this application")
        conn = self._live(token)
        if bundles:
            self._check_bundles(bundles[0].identity_public, bundles)
        account_id, device_id = conn.slot
        self.account(account_id).secret_bundles[device_id] = list(bundles)

    def fetch_secret_bundle(self, account_id: str, device_id: str) -> PreKeyBundle:
        return self._take(self.account(account_id).secret_bundles.get(device_id), account_id, device_id)

    @staticmethod
    def _take(bundles: Optional[list[PreKeyBundle]], account_id: str, device_id: str) -> PreKeyBundle:
        if not bundles:
            raise UnknownCompanion(f"{account_id}/{device_id} has no published pre-keys")
        bundle = bundles[0]
        if bundle.one_time_prekey_id is not None:
            bundles.pop(0)
            if not bundles:
                bundles.append(
                    PreKeyBundle(
                        bundle.identity_public,
                        bundle.signed_prekey_public,
                        bundle.signed_prekey_signature,
                        bundle.signed_prekey_id,
                    )
                )
        return bundle

    def active_devices(self, account_id: str) -> list[str]:
        acct = self.account(account_id)
        return [acct.primary_device_id] + sorted(d for d, rec in acct.device_list.items() if rec.active)

    def device_identity(self, account_id: str, device_id: str) -> bytes:
        return self.account(account_id).device_identities[device_id]

    # -- linking -------------------------------------------------------------

    def add_companion(
        self,
        primary_token: str,
        record: LinkRecord,
        credentials: AccountCredentials,
        bundles: list[PreKeyBundle],
        authorization: bytes,
    ) -> None:
        """Register a companion on the primary's say-so.

        ``authorization`` is the primary identity's signature over the
        companion's device id and identity key; the request must arrive on a
        live primary connection.
        """
        conn = self.connections.get(primary_token)
        account_id = credentials.account_id
        acct = self.account(account_id)
        if conn is None or not conn.live or conn.slot != (account_id, acct.primary_device_id):
            raise Unauthorized("enrollment must be authorized from the primary device")
        message = record.companion_device_id.encode() + record.companion_identity_public
        if not self.suite.verify_with(acct.identity_public, message, authorization):
            raise Unauthorized("companion authorization signature does not verify")
        existing = acct.device_list.get(record.companion_device_id)
        if existing is not None and existing.active:
            raise AlreadyLinked(record.companion_device_id)
        if bundles:
            self._check_bundles(record.companion_identity_public, bundles)
        acct.device_list[record.companion_device_id] = record
        acct.bundles[record.companion_device_id] = list(bundles)
        acct.password_digests[record.companion_device_id] = _digest(credentials.device_password)
        acct.device_identities[record.companion_device_id] = record.companion_identity_public
        self.mailboxes[(account_id, record.companion_device_id)] = deque()
        self.events.append({"event": "link", "account": account_id, "device": record.companion_device_id, "tick": record.linked_at})
        self._changed(account_id)

    def queue_alert(self, account_id: str, event: dict) -> None:
        acct = self.account(account_id)
        acct.notification_queue.append(event)
        self.mailboxes[(account_id, acct.primary_device_id)].append(
            Delivery("alert", "server", "server", event.get("tick", 0), dict(event))
        )

    def deactivate(self, account_id: str, device_id: str, now: int, reason: str) -> LinkRecord:
        rec = self.account(account_id).device_list.get(device_id)
        if rec is None or not rec.active:
            raise UnknownCompanion(f"{account_id}/{device_id} is not an active companion")
        rec.active = False
        for conn in self.connections.values():
            if conn.slot == (account_id, device_id):
                conn.live = False
        self.mailboxes[(account_id, device_id)].clear()
        self.events.append({"event": reason, "account": account_id, "device": device_id, "tick": now})
        self._changed(account_id)
        return rec

    def expire_links(self, now: int) -> list[LinkRecord]:
        expired = []
        for acct in self.accounts.values():
            for device_id, rec in sorted(acct.device_list.items()):
                if rec.active and rec.expires_at is not None and rec.expires_at <= now:
                    expired.append(self.deactivate(acct.account_id, device_id, now, "expire"))
        return expired

    # -- connections ---------------------------------------------------------

    def authenticate(self, credentials: AccountCredentials, device_slot: tuple[str, str], now: int, label: str = "") -> str:
        """Issue a connection token for ``device_slot``.

        Own-slot credentials work while the slot's link is active. Valid
        primary-device credentials also (re)attach a companion slot when the
        profile lets companions run without the primary.
        """
        self.expire_links(now)
        account_id, device_id = device_slot
        acct = self.accounts.get(credentials.account_id)
        if acct is None or credentials.account_id != account_id:
            raise BadCredentials("unknown account for these credentials")
        digest = acct.password_digests.get(credentials.device_id)
        if digest is None or digest != _digest(credentials.device_password):
            raise BadCredentials("password does not match")

        if credentials.device_id == device_id:
            if device_id != acct.primary_device_id:
                rec = acct.device_list.get(device_id)
                if rec is None or not rec.active:
                    raise Revoked(f"{account_id}/{device_id} is no longer linked")
            return self._open(device_slot, now, label)

        if credentials.device_id == acct.primary_device_id and device_id in acct.device_list:
            if not self.profile.companion_independent_relaunch:
                raise BadCredentials("companion slots need the primary device present to attach")
            rec = acct.device_list[device_id]
            if not rec.active:
                rec.active = True
                rec.expires_at = None if self.profile.link_lifetime() is None else now + self.profile.link_lifetime()
                self.events.append({"event": "reattach", "account": account_id, "device": device_id, "tick": now})
                if self.profile.link_alerts:
                    self.queue_alert(account_id, {"event": "reattach", "device": device_id, "tick": now})
                self._changed(account_id)
            return self._open(device_slot, now, label)
        raise BadCredentials("credentials are not valid for this slot")

    def _open(self, slot: tuple[str, str], now: int, label: str) -> str:
        self._token_counter += 1
        token = f"conn-{self._token_counter:05d}"
        self.connections[token] = Connection(token, slot, (now, self.rng.random()), label)
        self.mailboxes.setdefault(slot, deque())
        return token

    def refresh(self, token: str, now: int) -> None:
        conn = self._live(token)
        conn.refresh_key = (now, self.rng.random())

    def disconnect(self, token: str) -> None:
        conn = self.connections.get(token)
        if conn is not None:
            conn.live = False

    def _live(self, token: str) -> Connection:
        conn = self.connections.get(token)
        if conn is None or not conn.live:
            raise RevokedConnection(f"connection {token} is not live")
        return conn

    def holder(self, slot: tuple[str, str]) -> Optional[str]:
        live = [c for c in self.connections.values() if c.slot == slot and c.live]
        if not live:
            return None
        return max(live, key=lambda c: c.refresh_key).token

    # -- traffic -------------------------------------------------------------

    def route(
        self,
        payload: Union[dict[str, Envelope], CloudMessage],
        from_token: str,
        to_account: str,
        now: int,
        *,
        secret_chat: bool = False,
    ) -> DeliveryOutcome:
        """Queue a message for every active device of ``to_account``.

        ``payload`` is either one envelope per recipient device (pairwise
        sessions) or a cloud message.
        """
        self.expire_links(now)
        conn = self._live(from_token)
        sender_account, sender_device = conn.slot
        sender = self.account(sender_account)
        if sender_device != sender.primary_device_id and not sender.device_list[sender_device].active:
            raise RevokedConnection("sender slot is no longer linked")
        self.account(to_account)
        devices = self.active_devices(to_account)
        delivered, missing = [], []
        if isinstance(payload, CloudMessage):
            if not self.profile.cloud_history:
                raise NotSupported("cloud chats are not offered by this application")
            self.cloud_history[sender_account].append(payload)
            if to_account != sender_account:
                self.cloud_history[to_account].append(payload)
            for device_id in devices:
                self.mailboxes[(to_account, device_id)].append(Delivery("cloud", sender_account, sender_device, now, payload))
                delivered.append((to_account, device_id))
        else:
            for device_id in devices:
                env = payload.get(device_id)
                if env is None:
                    missing.append(device_id)
                    continue
                self.mailboxes[(to_account, device_id)].append(
                    Delivery("envelope", sender_account, sender_device, now, env, secret_chat)
                )
                delivered.append((to_account, device_id))
        return DeliveryOutcome(tuple(delivered), tuple(missing))

    def fetch(self, token: str, now: int) -> list[Delivery]:
        """Drain the slot's mailbox if ``token`` currently holds the slot."""
        self.expire_links(now)
        conn = self._live(token)
        if self.holder(conn.slot) != token:
            return []
        box = self.mailboxes.setdefault(conn.slot, deque())
        out = list(box)
        box.clear()
        return out

    def fetch_cloud_history(self, token: str, account_id: str) -> list[CloudMessage]:
        if not self.profile.cloud_history:
            raise NotSupported("this application keeps no cloud history")
        conn = self._live(token)
        if conn.slot[0] != account_id:
            raise Unauthorized("connection belongs to a different account")
        return list(self.cloud_history.get(account_id, []))
