"""Companion enrollment and link lifecycle.

The QR scan is an authenticated out-of-band channel: the companion's
device id and identity key reach the primary intact, and the primary signs
them for the server.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .device import AccountCredentials, DeviceState
from .profiles import AppProfile, EnrollmentArchetype
from .ratchet import generate_prekeys
from .server import AlreadyLinked, BadCredentials, LinkRecord, Revoked, ServerState, UnknownCompanion

__all__ = [
    "LinkRecord",
    "LaunchMode",
    "LaunchResult",
    "CloneExit",
    "AuthFailure",
    "enroll_companion",
    "launch_companion",
    "delink",
    "expire_links",
    "sync_links",
]


class LaunchMode(str, Enum):
    ONLINE = "online"
    OFFLINE_ONLY = "offline_only"


class LaunchError(Exception):
    pass


class CloneExit(LaunchError):
    """The client quits at start-up: no authorized identity on this device."""


class AuthFailure(LaunchError):
    pass


@dataclass(frozen=True)
class LaunchResult:
    mode: LaunchMode
    token: Optional[str] = None
    detail: str = ""

    @property
    def online(self) -> bool:
        return self.mode == LaunchMode.ONLINE


def _authorization_message(device_id: str, identity_public: bytes) -> bytes:
    return device_id.encode() + identity_public


def _pin_message(device_id: str, fp: bytes) -> bytes:
    return b"pin:" + device_id.encode() + fp


def enroll_companion(
    primary: DeviceState,
    companion: DeviceState,
    server: ServerState,
    profile: AppProfile,
    *,
    primary_token: str,
    now: int,
    rng: random.Random,
    device_password: Optional[bytes] = None,
) -> tuple[DeviceState, DeviceState, LinkRecord]:
    """Link ``companion`` to ``primary``'s account under the profile's archetype."""
    if primary.account_id is None or primary.identity is None:
        raise BadCredentials("primary device is not registered")
    if companion.account_id is not None:
        raise AlreadyLinked(f"{companion.device_id} already belongs to {companion.account_id}")
    suite = primary.suite
    device_id = companion.descriptor.device_id
    fp = companion.descriptor.fingerprint

    if profile.archetype == EnrollmentArchetype.IDENTITY_KEY_TRANSFER:
        identity = primary.identity
        companion.transfer = {
            "kind": "identity_transfer",
            "fingerprint": fp.hex(),
            "signature": suite.sign_with(primary.identity, _pin_message(device_id, fp)).hex(),
        }
    else:
        identity = suite.keygen(rng)
        if profile.archetype == EnrollmentArchetype.DEVICE_PINNED_KEY:
            companion.transfer = {
                "kind": "device_pin",
                "fingerprint": fp.hex(),
                "signature": suite.sign_with(identity, _pin_message(device_id, fp)).hex(),
            }

    companion.account_id = primary.account_id
    companion.username = primary.username
    companion.app_device_id = device_id
    companion.identity = identity
    companion.prekeys = generate_prekeys(suite, identity, rng, first_id=100)
    companion.credentials = AccountCredentials(
        primary.account_id,
        device_id,
        device_password if device_password is not None else suite.random_key(rng),
    )
    companion.primary_credentials = primary.credentials
    companion.contacts = list(primary.contacts)
    companion.groups = {g: list(m) for g, m in primary.groups.items()}

    lifetime = profile.link_lifetime()
    record = LinkRecord(
        companion_device_id=device_id,
        companion_identity_public=identity.public,
        linked_at=now,
        expires_at=None if lifetime is None else now + lifetime,
    )
    authorization = suite.sign_with(primary.identity, _authorization_message(device_id, identity.public))
    server.add_companion(primary_token, record, companion.credentials, companion.prekeys.bundles(identity.public), authorization)
    if profile.link_alerts:
        event = {"event": "link", "device": device_id, "tick": now}
        server.queue_alert(primary.account_id, event)
        primary.notifications.append(event)
    sync_links(primary, server)
    primary.persist()
    companion.persist()
    return primary, companion, record


def launch_companion(companion: DeviceState, server: ServerState, *, now: int, label: str = "") -> LaunchResult:
    """Start a companion client from its current state.

    Raises :class:`CloneExit` or :class:`AuthFailure`; a client that starts
    but cannot reach the server returns ``LaunchMode.OFFLINE_ONLY``.
    """
    profile = companion.profile
    fp = companion.descriptor.fingerprint
    archetype = profile.archetype

    if archetype == EnrollmentArchetype.IDENTITY_KEY_TRANSFER:
        if not _pin_holds(companion, fp, "identity_transfer"):
            raise CloneExit("no primary identity transferred to this device")
    elif archetype == EnrollmentArchetype.DEVICE_PINNED_KEY:
        if not _pin_holds(companion, fp, "device_pin"):
            if profile.metadata_copyable and (companion.contacts or companion.message_log):
                return LaunchResult(LaunchMode.OFFLINE_ONLY, detail="device keys missing; cached metadata only")
            raise AuthFailure("identity is pinned to a different device")

    creds = companion.credentials
    if creds is None:
        raise AuthFailure("no session credentials readable on this device")
    try:
        token = server.authenticate(creds, companion.slot, now, label=label or companion.descriptor.device_id)
    except (BadCredentials, Revoked) as exc:
        raise AuthFailure(str(exc)) from exc
    return LaunchResult(LaunchMode.ONLINE, token)


def _pin_holds(companion: DeviceState, fp: bytes, kind: str) -> bool:
    pin = companion.transfer
    if pin is None or companion.identity is None or pin.get("kind") != kind:
        return False
    if pin["fingerprint"] != fp.hex():
        return False
    return companion.suite.verify_with(
        companion.identity.public, _pin_message(companion.device_id, fp), bytes.fromhex(pin["signature"])
    )


def delink(primary: DeviceState, server: ServerState, companion_id: str, *, now: int) -> DeviceState:
    if primary.account_id is None:
        raise UnknownCompanion(companion_id)
    server.deactivate(primary.account_id, companion_id, now, "delink")
    if primary.profile.link_alerts:
        event = {"event": "delink", "device": companion_id, "tick": now}
        server.queue_alert(primary.account_id, event)
        primary.notifications.append(event)
    sync_links(primary, server)
    primary.persist()
    return primary


def expire_links(server: ServerState, now: int, primaries: tuple[DeviceState, ...] = ()) -> list[LinkRecord]:
    expired = server.expire_links(now)
    for p in primaries:
        sync_links(p, server)
    return expired


def sync_links(primary: DeviceState, server: ServerState) -> None:
    """Refresh the primary's view of its linked companions from the server."""
    acct = server.account(primary.account_id)
    primary.links = [acct.device_list[d].to_dict() for d in sorted(acct.device_list)]
