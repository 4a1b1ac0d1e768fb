"""Devices and their persisted state stores.

A device keeps its working state in memory (:class:`DeviceState`) and
mirrors it into a :class:`StateStore` on :meth:`DeviceState.persist`. The
store has two halves:

* ``copyable``: what a file copy of the application directory captures.
  Records either sit there readable (``plain``) or inside one encrypted
  database blob whose key is governed by the keystore mode (``sealed``).
* ``device_bound``: records that live in hardware-backed storage and never
  leave the device (``bound``).

Which logical record goes where is decided by :func:`placement` from the
active profile alone.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .primitives import TOY, AuthenticationError, KeyPair, Suite, fingerprint
from .profiles import AppProfile, DirectoryIdentifier, EnrollmentArchetype, KeystoreMode
from .ratchet import PreKeyStore, SessionState


class DeviceKind(str, Enum):
    PRIMARY_MOBILE = "primary_mobile"
    DESKTOP_COMPANION = "desktop_companion"


class Placement(str, Enum):
    PLAIN = "plain"
    SEALED = "sealed"
    BOUND = "bound"


class KeystoreLocked(Exception):
    """The sealed database cannot be opened on this device."""


RECORDS = (
    "account",
    "identity",
    "prekeys",
    "sessions",
    "secret_sessions",
    "secret_keys",
    "link_credentials",
    "primary_credentials",
    "history",
    "secret_history",
    "metadata",
    "links",
    "transfer",
)

DB_PATH = "databases/Databases.db"
CONFIG_PATH = "config.json"
KEYSTORE_META_PATH = "keystore.meta"
_DB_AD = b"clonesim/sealed-db"
_IMAGE_MAGIC = b"CSIMG1"


def placement(profile: AppProfile, record: str) -> Placement:
    """Where ``record`` lives on a device running ``profile``."""
    if record not in RECORDS:
        raise ValueError(f"unknown record {record!r}")
    archetype = profile.archetype
    pinned = archetype == EnrollmentArchetype.DEVICE_PINNED_KEY
    independent = archetype == EnrollmentArchetype.INDEPENDENT_COMPANION_KEY
    readable = (
        Placement.SEALED if profile.keystore_mode == KeystoreMode.PLAINTEXT_KEY_ALONGSIDE else Placement.PLAIN
    )
    hidden = Placement.BOUND if pinned else Placement.SEALED

    if record in ("secret_sessions", "secret_keys", "secret_history", "transfer"):
        return Placement.BOUND
    if record == "identity":
        return readable if independent else Placement.BOUND
    if record in ("prekeys", "sessions", "link_credentials"):
        return readable if independent else hidden
    if record == "primary_credentials":
        return hidden if pinned else Placement.SEALED
    if record == "history":
        # copied with the database; readable only where the keystore opens
        return Placement.SEALED if profile.history_copyable else hidden
    if record in ("metadata", "account", "links"):
        return readable if (profile.metadata_copyable or independent) else hidden
    raise AssertionError(record)


@dataclass(frozen=True)
class DeviceDescriptor:
    device_id: str
    kind: DeviceKind
    hardware_tag: bytes

    @property
    def fingerprint(self) -> bytes:
        return fingerprint(self.hardware_tag)


@dataclass(frozen=True)
class AccountCredentials:
    account_id: str
    device_id: str
    device_password: bytes
    auth_key: Optional[bytes] = None

    def to_dict(self) -> dict:
        return {
            "account_id": self.account_id,
            "device_id": self.device_id,
            "device_password": self.device_password.hex(),
            "auth_key": self.auth_key.hex() if self.auth_key else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AccountCredentials":
        return cls(
            d["account_id"],
            d["device_id"],
            bytes.fromhex(d["device_password"]),
            bytes.fromhex(d["auth_key"]) if d.get("auth_key") else None,
        )


@dataclass(frozen=True)
class Contact:
    username: str
    account_id: str
    phone: Optional[str] = None


@dataclass(frozen=True)
class LogEntry:
    message_id: str
    peer: str
    direction: str  # "in" | "out"
    tick: int
    chat: str  # "e2ee" | "cloud" | "secret"
    plaintext: Optional[str]


@dataclass
class StateStore:
    keystore_mode: KeystoreMode
    copyable: dict[str, bytes] = field(default_factory=dict)
    device_bound: dict[str, bytes] = field(default_factory=dict)


@dataclass(frozen=True)
class StateImage:
    """Byte-faithful copy of a store's copyable half."""

    files: dict[str, bytes]

    def __len__(self) -> int:
        return len(self.files)

    def to_bytes(self) -> bytes:
        out = bytearray(_IMAGE_MAGIC)
        for path in sorted(self.files):
            p = path.encode()
            v = self.files[path]
            out += len(p).to_bytes(4, "big") + p + len(v).to_bytes(4, "big") + v
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "StateImage":
        if not data.startswith(_IMAGE_MAGIC):
            raise ValueError("not a state image")
        files, pos = {}, len(_IMAGE_MAGIC)
        while pos < len(data):
            n = int.from_bytes(data[pos : pos + 4], "big")
            path = data[pos + 4 : pos + 4 + n].decode()
            pos += 4 + n
            m = int.from_bytes(data[pos : pos + 4], "big")
            files[path] = data[pos + 4 : pos + 4 + m]
            pos += 4 + m
        return cls(files)


@dataclass
class KeyAccess:
    key: bytes
    records: dict[str, object]


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _pair_dict(pair: KeyPair) -> dict:
    return {"public": pair.public.hex(), "secret": pair.secret.hex()}


def _pair_from(d: dict) -> KeyPair:
    return KeyPair(bytes.fromhex(d["public"]), bytes.fromhex(d["secret"]))


@dataclass
class DeviceState:
    descriptor: DeviceDescriptor
    profile: AppProfile
    suite: Suite
    store: StateStore
    account_id: Optional[str] = None
    username: Optional[str] = None
    app_device_id: Optional[str] = None
    identity: Optional[KeyPair] = None
    prekeys: Optional[PreKeyStore] = None
    sessions: dict[str, SessionState] = field(default_factory=dict)
    secret_sessions: dict[str, SessionState] = field(default_factory=dict)
    # secret chats run on their own identity and pre-keys
    secret_identity: Optional[KeyPair] = None
    secret_prekeys: Optional[PreKeyStore] = None
    credentials: Optional[AccountCredentials] = None
    primary_credentials: Optional[AccountCredentials] = None
    contacts: list[Contact] = field(default_factory=list)
    groups: dict[str, list[str]] = field(default_factory=dict)
    message_log: list[LogEntry] = field(default_factory=list)
    links: list[dict] = field(default_factory=list)
    transfer: Optional[dict] = None
    notifications: list[dict] = field(default_factory=list)
    passphrase: Optional[bytes] = None

    @property
    def device_id(self) -> str:
        return self.app_device_id or self.descriptor.device_id

    @property
    def slot(self) -> tuple[str, str]:
        return (self.account_id or "", self.device_id)

    @property
    def identity_location(self) -> str:
        place = placement(self.profile, "identity")
        if self.identity is None:
            return "absent"
        return "device_bound" if place == Placement.BOUND else "copyable"

    # -- persistence -------------------------------------------------------

    def _records(self) -> dict[str, object]:
        return {
            "account": None
            if self.account_id is None
            else {
                "account_id": self.account_id,
                "username": self.username,
                "device_id": self.device_id,
                "kind": self.descriptor.kind.value,
            },
            "identity": None if self.identity is None else _pair_dict(self.identity),
            "prekeys": None if self.prekeys is None else self.prekeys.to_dict(),
            "sessions": {k: v.to_dict() for k, v in sorted(self.sessions.items())} or None,
            "secret_sessions": {k: v.to_dict() for k, v in sorted(self.secret_sessions.items())} or None,
            "secret_keys": None
            if self.secret_identity is None
            else {
                "identity": _pair_dict(self.secret_identity),
                "prekeys": None if self.secret_prekeys is None else self.secret_prekeys.to_dict(),
            },
            "link_credentials": None if self.credentials is None else self.credentials.to_dict(),
            "primary_credentials": None if self.primary_credentials is None else self.primary_credentials.to_dict(),
            "history": [e.__dict__ for e in self.message_log if e.chat != "secret"] or None,
            "secret_history": [e.__dict__ for e in self.message_log if e.chat == "secret"] or None,
            "metadata": self._metadata_record(),
            "links": self.links or None,
            "transfer": self.transfer,
        }

    def _metadata_record(self) -> Optional[dict]:
        if not (self.contacts or self.groups or self.message_log):
            return None
        username_only = self.profile.directory_identifier == DirectoryIdentifier.USERNAME
        return {
            "contacts": [
                {"username": c.username, "account_id": None if username_only else c.account_id,
                 "phone": None if username_only else c.phone}
                for c in self.contacts
            ],
            "groups": {g: list(m) for g, m in sorted(self.groups.items())},
            "conversations": [
                {"message_id": e.message_id, "peer": e.peer, "direction": e.direction, "tick": e.tick, "chat": e.chat}
                for e in self.message_log
                if e.chat != "secret"
            ],
        }

    def persist(self) -> None:
        """Write the in-memory state into the store."""
        store = self.store
        sealed: dict[str, object] = {}
        previous_db = store.copyable.get(DB_PATH)
        keep = {CONFIG_PATH, KEYSTORE_META_PATH}
        store.copyable = {k: v for k, v in store.copyable.items() if k in keep}
        store.device_bound = {k: v for k, v in store.device_bound.items() if k.startswith("keychain/")}
        for record, value in self._records().items():
            if value is None:
                continue
            place = placement(self.profile, record)
            if place == Placement.PLAIN:
                store.copyable[f"{record}.json"] = _dumps(value)
            elif place == Placement.BOUND:
                store.device_bound[record] = _dumps(value)
            else:
                sealed[record] = value
        try:
            key = _keystore_key(self)
        except KeystoreLocked:
            # a clone cannot re-seal; the copied blob stays as it was
            if previous_db is not None:
                store.copyable[DB_PATH] = previous_db
            return
        if sealed:
            store.copyable[DB_PATH] = self.suite.aead_seal(key, _dumps(sealed), _DB_AD)

    def hydrate(self, passphrase: Optional[bytes] = None) -> list[str]:
        """Rebuild in-memory state from whatever the store lets this device read.

        Returns the names of records that could not be read because the
        keystore stayed locked.
        """
        readable: dict[str, object] = {}
        for path, raw in self.store.copyable.items():
            if path.endswith(".json") and path != CONFIG_PATH:
                readable[path[: -len(".json")]] = json.loads(raw)
        for record, raw in self.store.device_bound.items():
            if record in RECORDS:
                readable[record] = json.loads(raw)
        locked: list[str] = []
        if DB_PATH in self.store.copyable:
            try:
                readable.update(open_keystore(self, passphrase).records)
            except KeystoreLocked:
                locked = ["sealed database"]
        self._load(readable)
        return locked

    def _load(self, r: dict) -> None:
        acct = r.get("account")
        self.account_id = acct["account_id"] if acct else None
        self.username = acct.get("username") if acct else None
        self.app_device_id = acct["device_id"] if acct else None
        self.identity = _pair_from(r["identity"]) if r.get("identity") else None
        self.prekeys = PreKeyStore.from_dict(r["prekeys"]) if r.get("prekeys") else None
        self.sessions = {k: SessionState.from_dict(v) for k, v in (r.get("sessions") or {}).items()}
        self.secret_sessions = {k: SessionState.from_dict(v) for k, v in (r.get("secret_sessions") or {}).items()}
        sk = r.get("secret_keys")
        self.secret_identity = _pair_from(sk["identity"]) if sk else None
        self.secret_prekeys = PreKeyStore.from_dict(sk["prekeys"]) if sk and sk.get("prekeys") else None
        lc = r.get("link_credentials")
        self.credentials = AccountCredentials.from_dict(lc) if lc else None
        pc = r.get("primary_credentials")
        self.primary_credentials = AccountCredentials.from_dict(pc) if pc else None
        log = [LogEntry(**e) for e in (r.get("history") or []) + (r.get("secret_history") or [])]
        meta = r.get("metadata")
        if meta and not log:
            # metadata-only view: who and when, no content
            log = [LogEntry(plaintext=None, **c) for c in meta["conversations"]]
        self.message_log = sorted(log, key=lambda e: (e.tick, e.message_id))
        self.contacts = (
            [Contact(c["username"], c.get("account_id") or "", c.get("phone")) for c in meta["contacts"]] if meta else []
        )
        self.groups = {g: list(m) for g, m in meta["groups"].items()} if meta else {}
        self.links = r.get("links") or []
        self.transfer = r.get("transfer")


def _keystore_key(state: DeviceState, passphrase: Optional[bytes] = None) -> bytes:
    store = state.store
    suite = state.suite
    mode = store.keystore_mode
    if mode == KeystoreMode.PLAINTEXT_KEY_ALONGSIDE:
        if CONFIG_PATH not in store.copyable:
            raise KeystoreLocked("no database key present")
        return bytes.fromhex(json.loads(store.copyable[CONFIG_PATH])["key"])
    meta_raw = store.copyable.get(KEYSTORE_META_PATH)
    if meta_raw is None:
        raise KeystoreLocked("no keystore metadata present")
    meta = json.loads(meta_raw)
    salt = bytes.fromhex(meta["salt"])
    if mode == KeystoreMode.DEVICE_BOUND_KEY:
        current = state.descriptor.fingerprint
        if bytes.fromhex(meta["binding"]) != current:
            raise KeystoreLocked("keystore is bound to a different device fingerprint")
        return suite.kdf(current + salt, b"device-bound-keystore")
    secret = passphrase if passphrase is not None else state.passphrase
    if secret is None:
        raise KeystoreLocked("passphrase required")
    return suite.kdf(secret + salt, b"passphrase-keystore")


def open_keystore(state: DeviceState, passphrase: Optional[bytes] = None) -> KeyAccess:
    """Open the sealed database on ``state``'s current hardware.

    Raises :class:`KeystoreLocked` on a fingerprint mismatch, a missing or
    wrong passphrase, or a missing key.
    """
    key = _keystore_key(state, passphrase)
    blob = state.store.copyable.get(DB_PATH)
    if blob is None:
        return KeyAccess(key, {})
    try:
        records = json.loads(state.suite.aead_open(key, blob, _DB_AD))
    except AuthenticationError:
        raise KeystoreLocked("database key does not open the sealed database") from None
    return KeyAccess(key, records)


def create_device(
    descriptor: DeviceDescriptor,
    profile: AppProfile,
    seed: int | random.Random = 0,
    suite: Suite = TOY,
    passphrase: Optional[bytes] = None,
) -> DeviceState:
    """A fresh installation of ``profile``'s client on ``descriptor``'s hardware."""
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    store = StateStore(keystore_mode=profile.keystore_mode)
    if profile.keystore_mode == KeystoreMode.PLAINTEXT_KEY_ALONGSIDE:
        store.copyable[CONFIG_PATH] = _dumps({"key": suite.random_key(rng).hex()})
    else:
        meta = {"salt": suite.random_key(rng).hex()}
        if profile.keystore_mode == KeystoreMode.DEVICE_BOUND_KEY:
            meta["binding"] = descriptor.fingerprint.hex()
            store.device_bound["keychain/binding"] = descriptor.fingerprint
        elif passphrase is None:
            raise ValueError("passphrase_protected keystore needs a passphrase")
        store.copyable[KEYSTORE_META_PATH] = _dumps(meta)
    state = DeviceState(descriptor=descriptor, profile=profile, suite=suite, store=store, passphrase=passphrase)
    state.persist()
    return state


def export_copyable(state: DeviceState) -> StateImage:
    """Copy the application directory. Needs no credentials."""
    return StateImage(dict(state.store.copyable))


def import_image(target: DeviceState, image: StateImage) -> DeviceState:
    """Replace ``target``'s copyable half with ``image``.

    The device-bound half and the hardware are untouched. The in-memory view
    is rebuilt from what the target can now read.
    """
    target.store.copyable = dict(image.files)
    target.hydrate()
    return target


def empty_image() -> StateImage:
    return StateImage({})
