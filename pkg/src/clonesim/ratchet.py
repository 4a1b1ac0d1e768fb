"""Pre-key session setup and the Double Ratchet.

Session state is a plain dataclass. Every operation returns a fresh state
and leaves its input untouched, so a failed decrypt never corrupts the
caller's session.
"""

from __future__ import annotations

import json
import random
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Optional

from .primitives import KEY_LEN, AuthenticationError, ChainKey, KeyPair, MessageKey, Suite

DEFAULT_SKIPPED_LIMIT = 1000

_X3DH_PAD = b"\xff" * KEY_LEN
_ZERO_SALT = b"\x00" * KEY_LEN


class RatchetError(Exception):
    pass


class BadSignatureError(RatchetError):
    pass


class UnknownPreKeyError(RatchetError):
    pass


class SkippedLimitExceeded(RatchetError):
    pass


class DuplicateMessageError(RatchetError):
    pass


class DecryptionFailure(RatchetError):
    pass


@dataclass(frozen=True)
class PreKeyBundle:
    identity_public: bytes
    signed_prekey_public: bytes
    signed_prekey_signature: bytes
    signed_prekey_id: int
    one_time_prekey_public: Optional[bytes] = None
    one_time_prekey_id: Optional[int] = None

    @property
    def prekey_ids(self) -> tuple[int, Optional[int]]:
        return (self.signed_prekey_id, self.one_time_prekey_id)


@dataclass
class PreKeyStore:
    """Secret halves of an account's (or device's) published pre-keys."""

    signed_id: int
    signed: KeyPair
    signature: bytes
    one_time: dict[int, KeyPair] = field(default_factory=dict)

    def bundle(self, identity_public: bytes, one_time_id: Optional[int] = None) -> PreKeyBundle:
        if one_time_id is None and self.one_time:
            one_time_id = min(self.one_time)
        otk = self.one_time.get(one_time_id) if one_time_id is not None else None
        return PreKeyBundle(
            identity_public=identity_public,
            signed_prekey_public=self.signed.public,
            signed_prekey_signature=self.signature,
            signed_prekey_id=self.signed_id,
            one_time_prekey_public=otk.public if otk else None,
            one_time_prekey_id=one_time_id if otk else None,
        )

    def bundles(self, identity_public: bytes) -> list[PreKeyBundle]:
        if not self.one_time:
            return [self.bundle(identity_public)]
        return [self.bundle(identity_public, i) for i in sorted(self.one_time)]

    def to_dict(self) -> dict:
        return {
            "signed_id": self.signed_id,
            "signed": _pair_dict(self.signed),
            "signature": self.signature.hex(),
            "one_time": {str(k): _pair_dict(v) for k, v in sorted(self.one_time.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreKeyStore":
        return cls(
            signed_id=d["signed_id"],
            signed=_pair_from(d["signed"]),
            signature=bytes.fromhex(d["signature"]),
            one_time={int(k): _pair_from(v) for k, v in d["one_time"].items()},
        )


def generate_prekeys(
    suite: Suite, identity: KeyPair, rng: random.Random, count: int = 5, first_id: int = 1
) -> PreKeyStore:
    signed = suite.keygen(rng)
    return PreKeyStore(
        signed_id=first_id,
        signed=signed,
        signature=suite.sign_with(identity, signed.public),
        one_time={first_id + 1 + i: suite.keygen(rng) for i in range(count)},
    )


@dataclass(frozen=True)
class PreKeyHeader:
    """Carried by an initiator's envelopes until the responder replies."""

    identity_public: bytes
    base_public: bytes
    signed_prekey_id: int
    one_time_prekey_id: Optional[int]

    def encode(self) -> bytes:
        otk = -1 if self.one_time_prekey_id is None else self.one_time_prekey_id
        return (
            self.identity_public
            + self.base_public
            + self.signed_prekey_id.to_bytes(4, "big")
            + otk.to_bytes(4, "big", signed=True)
        )


@dataclass(frozen=True)
class Envelope:
    sender_dh_public: bytes
    prev_chain_len: int
    index: int
    ciphertext: bytes
    header_ad: bytes
    prekey: Optional[PreKeyHeader] = None
    # (rekey public, first index it covers) for this chain and the previous one
    rotations: tuple[tuple[bytes, int], ...] = ()
    prev_rotations: tuple[tuple[bytes, int], ...] = ()

    @property
    def message_id(self) -> str:
        return f"{self.sender_dh_public.hex()[:12]}:{self.index}"


def _encode_rotations(tag: bytes, rotations) -> bytes:
    if not rotations:
        return b""
    return tag + len(rotations).to_bytes(2, "big") + b"".join(pub + at.to_bytes(4, "big") for pub, at in rotations)


def encode_header(
    sender_dh_public: bytes,
    prev_chain_len: int,
    index: int,
    prekey: Optional[PreKeyHeader] = None,
    rotations=(),
    prev_rotations=(),
) -> bytes:
    out = sender_dh_public + prev_chain_len.to_bytes(4, "big") + index.to_bytes(4, "big")
    if prekey is not None:
        out += b"PK" + prekey.encode()
    return out + _encode_rotations(b"RK", rotations) + _encode_rotations(b"RP", prev_rotations)


@dataclass
class SessionState:
    root_key: bytes
    sending_chain: Optional[ChainKey]
    receiving_chain: Optional[ChainKey]
    dh_self: KeyPair
    dh_remote: Optional[bytes]
    associated_data: bytes
    remote_identity: bytes
    send_count: int = 0
    recv_count: int = 0
    prev_chain_len: int = 0
    skipped: "OrderedDict[tuple[bytes, int], tuple[bytes, int]]" = field(default_factory=OrderedDict)
    skipped_limit: int = DEFAULT_SKIPPED_LIMIT
    skipped_max_age: Optional[int] = None
    # metadata only, never key material: ids whose keys were evicted, and
    # remote ratchet keys of retired receiving chains
    evicted: list[tuple[bytes, int]] = field(default_factory=list)
    retired_remote: list[bytes] = field(default_factory=list)
    pending_prekey: Optional[PreKeyHeader] = None
    base_public: Optional[bytes] = None
    rekey_every_messages: Optional[int] = None
    rekey_every_ticks: Optional[int] = None
    messages_on_key: int = 0
    key_born_at: int = 0
    rekey_count: int = 0
    # chain rekeys: ours on the current and previous sending chain, the
    # peer's on the current receiving chain (index -> public), and the
    # ratchet pair the peer's current chain was derived against
    sending_rotations: list[tuple[bytes, int]] = field(default_factory=list)
    prev_sending_rotations: list[tuple[bytes, int]] = field(default_factory=list)
    receiving_rotations: dict[int, bytes] = field(default_factory=dict)
    receiving_anchor: Optional[KeyPair] = None

    def copy(self) -> "SessionState":
        return replace(
            self,
            skipped=OrderedDict(self.skipped),
            evicted=list(self.evicted),
            retired_remote=list(self.retired_remote),
            sending_rotations=list(self.sending_rotations),
            prev_sending_rotations=list(self.prev_sending_rotations),
            receiving_rotations=dict(self.receiving_rotations),
        )

    def to_dict(self) -> dict:
        def chain(c: Optional[ChainKey]):
            return None if c is None else {"key": c.key.hex(), "index": c.index}

        return {
            "root_key": self.root_key.hex(),
            "sending_chain": chain(self.sending_chain),
            "receiving_chain": chain(self.receiving_chain),
            "dh_self": _pair_dict(self.dh_self),
            "dh_remote": self.dh_remote.hex() if self.dh_remote else None,
            "associated_data": self.associated_data.hex(),
            "remote_identity": self.remote_identity.hex(),
            "send_count": self.send_count,
            "recv_count": self.recv_count,
            "prev_chain_len": self.prev_chain_len,
            "skipped": [[k[0].hex(), k[1], v[0].hex(), v[1]] for k, v in self.skipped.items()],
            "skipped_limit": self.skipped_limit,
            "skipped_max_age": self.skipped_max_age,
            "evicted": [[d.hex(), i] for d, i in self.evicted],
            "retired_remote": [d.hex() for d in self.retired_remote],
            "pending_prekey": None
            if self.pending_prekey is None
            else {
                "identity_public": self.pending_prekey.identity_public.hex(),
                "base_public": self.pending_prekey.base_public.hex(),
                "signed_prekey_id": self.pending_prekey.signed_prekey_id,
                "one_time_prekey_id": self.pending_prekey.one_time_prekey_id,
            },
            "base_public": self.base_public.hex() if self.base_public else None,
            "rekey_every_messages": self.rekey_every_messages,
            "rekey_every_ticks": self.rekey_every_ticks,
            "messages_on_key": self.messages_on_key,
            "key_born_at": self.key_born_at,
            "rekey_count": self.rekey_count,
            "sending_rotations": [[p.hex(), i] for p, i in self.sending_rotations],
            "prev_sending_rotations": [[p.hex(), i] for p, i in self.prev_sending_rotations],
            "receiving_rotations": [[i, p.hex()] for i, p in sorted(self.receiving_rotations.items())],
            "receiving_anchor": None if self.receiving_anchor is None else _pair_dict(self.receiving_anchor),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionState":
        def chain(c):
            return None if c is None else ChainKey(bytes.fromhex(c["key"]), c["index"])

        pk = d.get("pending_prekey")
        return cls(
            root_key=bytes.fromhex(d["root_key"]),
            sending_chain=chain(d["sending_chain"]),
            receiving_chain=chain(d["receiving_chain"]),
            dh_self=_pair_from(d["dh_self"]),
            dh_remote=bytes.fromhex(d["dh_remote"]) if d["dh_remote"] else None,
            associated_data=bytes.fromhex(d["associated_data"]),
            remote_identity=bytes.fromhex(d["remote_identity"]),
            send_count=d["send_count"],
            recv_count=d["recv_count"],
            prev_chain_len=d["prev_chain_len"],
            skipped=OrderedDict(
                ((bytes.fromhex(a), i), (bytes.fromhex(k), t)) for a, i, k, t in d["skipped"]
            ),
            skipped_limit=d["skipped_limit"],
            skipped_max_age=d["skipped_max_age"],
            evicted=[(bytes.fromhex(a), i) for a, i in d["evicted"]],
            retired_remote=[bytes.fromhex(a) for a in d["retired_remote"]],
            pending_prekey=None
            if pk is None
            else PreKeyHeader(
                bytes.fromhex(pk["identity_public"]),
                bytes.fromhex(pk["base_public"]),
                pk["signed_prekey_id"],
                pk["one_time_prekey_id"],
            ),
            base_public=bytes.fromhex(d["base_public"]) if d.get("base_public") else None,
            rekey_every_messages=d["rekey_every_messages"],
            rekey_every_ticks=d["rekey_every_ticks"],
            messages_on_key=d["messages_on_key"],
            key_born_at=d["key_born_at"],
            rekey_count=d["rekey_count"],
            sending_rotations=[(bytes.fromhex(p), i) for p, i in d.get("sending_rotations", [])],
            prev_sending_rotations=[(bytes.fromhex(p), i) for p, i in d.get("prev_sending_rotations", [])],
            receiving_rotations={i: bytes.fromhex(p) for i, p in d.get("receiving_rotations", [])},
            receiving_anchor=_pair_from(d["receiving_anchor"]) if d.get("receiving_anchor") else None,
        )

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def _pair_dict(pair: KeyPair) -> dict:
    return {"public": pair.public.hex(), "secret": pair.secret.hex()}


def _pair_from(d: dict) -> KeyPair:
    return KeyPair(public=bytes.fromhex(d["public"]), secret=bytes.fromhex(d["secret"]))


def _x3dh_secret(suite: Suite, parts: list[bytes]) -> bytes:
    root, _ = suite.kdf_root(_ZERO_SALT, suite.hash(_X3DH_PAD + b"".join(parts)))
    return root


def init_initiator(
    suite: Suite,
    self_identity: KeyPair,
    bundle: PreKeyBundle,
    rng: random.Random,
    *,
    skipped_limit: int = DEFAULT_SKIPPED_LIMIT,
    skipped_max_age: Optional[int] = None,
    rekey_every_messages: Optional[int] = None,
    rekey_every_ticks: Optional[int] = None,
    now: int = 0,
) -> SessionState:
    """Start a session towards the owner of ``bundle``.

    Raises :class:`BadSignatureError` if the signed pre-key does not verify
    under the bundle's identity key.
    """
    if not suite.verify_with(bundle.identity_public, bundle.signed_prekey_public, bundle.signed_prekey_signature):
        raise BadSignatureError("signed pre-key signature does not verify")
    base = suite.keygen(rng)
    parts = [
        suite.dh(self_identity.secret, bundle.signed_prekey_public),
        suite.dh(base.secret, bundle.identity_public),
        suite.dh(base.secret, bundle.signed_prekey_public),
    ]
    if bundle.one_time_prekey_public is not None:
        parts.append(suite.dh(base.secret, bundle.one_time_prekey_public))
    shared = _x3dh_secret(suite, parts)

    dh_self = suite.keygen(rng)
    root, chain = suite.kdf_root(shared, suite.dh(dh_self.secret, bundle.signed_prekey_public))
    return SessionState(
        root_key=root,
        sending_chain=ChainKey(chain, 0),
        receiving_chain=None,
        dh_self=dh_self,
        dh_remote=bundle.signed_prekey_public,
        associated_data=self_identity.public + bundle.identity_public,
        remote_identity=bundle.identity_public,
        skipped_limit=skipped_limit,
        skipped_max_age=skipped_max_age,
        pending_prekey=PreKeyHeader(
            identity_public=self_identity.public,
            base_public=base.public,
            signed_prekey_id=bundle.signed_prekey_id,
            one_time_prekey_id=bundle.one_time_prekey_id,
        ),
        base_public=base.public,
        rekey_every_messages=rekey_every_messages,
        rekey_every_ticks=rekey_every_ticks,
        key_born_at=now,
    )


def init_responder(
    suite: Suite,
    self_identity: KeyPair,
    self_prekeys: PreKeyStore,
    first_envelope: Envelope,
    rng: random.Random,
    *,
    skipped_limit: int = DEFAULT_SKIPPED_LIMIT,
    skipped_max_age: Optional[int] = None,
    rekey_every_messages: Optional[int] = None,
    rekey_every_ticks: Optional[int] = None,
    now: int = 0,
) -> tuple[SessionState, bytes]:
    """Accept an initiator's first envelope.

    ``self_prekeys`` is not modified; the caller deletes the consumed
    one-time pre-key (``first_envelope.prekey.one_time_prekey_id``).
    """
    header = first_envelope.prekey
    if header is None:
        raise UnknownPreKeyError("envelope carries no pre-key header")
    if header.signed_prekey_id != self_prekeys.signed_id:
        raise UnknownPreKeyError(f"signed pre-key {header.signed_prekey_id} not held")
    otk = None
    if header.one_time_prekey_id is not None:
        otk = self_prekeys.one_time.get(header.one_time_prekey_id)
        if otk is None:
            raise UnknownPreKeyError(f"one-time pre-key {header.one_time_prekey_id} not held")
    spk = self_prekeys.signed
    parts = [
        suite.dh(spk.secret, header.identity_public),
        suite.dh(self_identity.secret, header.base_public),
        suite.dh(spk.secret, header.base_public),
    ]
    if otk is not None:
        parts.append(suite.dh(otk.secret, header.base_public))
    shared = _x3dh_secret(suite, parts)
    state = SessionState(
        root_key=shared,
        sending_chain=None,
        receiving_chain=None,
        dh_self=spk,
        dh_remote=None,
        associated_data=header.identity_public + self_identity.public,
        remote_identity=header.identity_public,
        skipped_limit=skipped_limit,
        skipped_max_age=skipped_max_age,
        base_public=header.base_public,
        rekey_every_messages=rekey_every_messages,
        rekey_every_ticks=rekey_every_ticks,
        key_born_at=now,
    )
    try:
        return ratchet_decrypt(suite, state, first_envelope, rng, now=now)
    except DecryptionFailure as exc:
        raise DecryptionFailure(f"first message does not decrypt: {exc}") from exc


def _due_for_rekey(state: SessionState, now: int) -> bool:
    if state.rekey_every_messages is not None and state.messages_on_key >= state.rekey_every_messages:
        return True
    if state.rekey_every_ticks is not None and now - state.key_born_at >= state.rekey_every_ticks:
        return True
    return False


def _rekey_chain(suite: Suite, chain: bytes, dh_out: bytes) -> bytes:
    return suite.kdf_root(chain, dh_out)[1]


def _rotate_sending_key(suite: Suite, state: SessionState, rng: random.Random, now: int) -> None:
    # A fresh pair is mixed into the sending chain against the peer's ratchet
    # key. The root chain is untouched, so the peer can follow without
    # having to answer first; its secret is dropped right away.
    pair = suite.keygen(rng)
    chain = _rekey_chain(suite, state.sending_chain.key, suite.dh(pair.secret, state.dh_remote))
    state.sending_chain = ChainKey(chain, state.send_count)
    state.sending_rotations.append((pair.public, state.send_count))
    state.messages_on_key = 0
    state.key_born_at = now


def ratchet_encrypt(
    suite: Suite, state: SessionState, plaintext: bytes, rng: Optional[random.Random] = None, *, now: int = 0
) -> tuple[SessionState, Envelope]:
    """Encrypt one message.

    When the session carries a rekey policy and it is due, a fresh ratchet
    key pair is generated before this message (``rng`` is then required).
    """
    if state.dh_remote is None:
        raise RatchetError("session cannot send before it has received")
    s = state.copy()
    if _due_for_rekey(s, now):
        if rng is None:
            raise RatchetError("rekey due but no rng supplied")
        _rotate_sending_key(suite, s, rng, now)
        s.rekey_count += 1
    if s.sending_chain is None:
        raise RatchetError("no sending chain")
    next_chain, mk = suite.kdf_chain(s.sending_chain.key)
    index = s.send_count
    rotations = tuple(s.sending_rotations)
    prev_rotations = tuple(s.prev_sending_rotations)
    header_ad = encode_header(s.dh_self.public, s.prev_chain_len, index, s.pending_prekey, rotations, prev_rotations)
    ct = suite.aead_seal(mk, plaintext, s.associated_data + header_ad)
    s.sending_chain = ChainKey(next_chain, index + 1)
    s.send_count = index + 1
    s.messages_on_key += 1
    env = Envelope(
        sender_dh_public=s.dh_self.public,
        prev_chain_len=s.prev_chain_len,
        index=index,
        ciphertext=ct,
        header_ad=header_ad,
        prekey=s.pending_prekey,
        rotations=rotations,
        prev_rotations=prev_rotations,
    )
    return s, env


def _skip_keys(suite: Suite, s: SessionState, until: int, now: int) -> None:
    if s.receiving_chain is None:
        return
    if until - s.recv_count > s.skipped_limit:
        raise SkippedLimitExceeded(f"gap of {until - s.recv_count} exceeds skipped_limit {s.skipped_limit}")
    while s.recv_count < until:
        chain, mk = _receiving_step(suite, s)
        s.skipped[(s.dh_remote, s.recv_count)] = (mk, now)
        s.recv_count += 1
        s.receiving_chain = ChainKey(chain, s.recv_count)
        while len(s.skipped) > s.skipped_limit:
            old_id, _ = s.skipped.popitem(last=False)
            _tombstone(s, old_id)


def _receiving_step(suite: Suite, s: SessionState) -> tuple[bytes, bytes]:
    """(next chain key, message key) at ``s.recv_count``, honouring peer rekeys."""
    chain = s.receiving_chain.key
    rekey = s.receiving_rotations.get(s.recv_count)
    if rekey is not None:
        if s.receiving_anchor is None:
            raise DecryptionFailure("peer rekeyed a chain this session cannot follow")
        chain = _rekey_chain(suite, chain, suite.dh(s.receiving_anchor.secret, rekey))
    return suite.kdf_chain(chain)


def _learn_rotations(s: SessionState, rotations) -> None:
    for pub, at in rotations:
        if at >= s.recv_count:
            s.receiving_rotations.setdefault(at, pub)


def _tombstone(s: SessionState, msg_id: tuple[bytes, int]) -> None:
    s.evicted.append(msg_id)
    if len(s.evicted) > s.skipped_limit:
        del s.evicted[: len(s.evicted) - s.skipped_limit]


def ratchet_decrypt(
    suite: Suite, state: SessionState, env: Envelope, rng: random.Random, *, now: int = 0
) -> tuple[SessionState, bytes]:
    expected_ad = encode_header(
        env.sender_dh_public, env.prev_chain_len, env.index, env.prekey, env.rotations, env.prev_rotations
    )
    if env.header_ad != expected_ad:
        raise DecryptionFailure("header does not match its associated data")
    ad = state.associated_data + env.header_ad
    msg_id = (env.sender_dh_public, env.index)

    if msg_id in state.skipped:
        s = state.copy()
        mk, _ = s.skipped.pop(msg_id)
        try:
            plaintext = suite.aead_open(mk, env.ciphertext, ad)
        except AuthenticationError as exc:
            raise DecryptionFailure(str(exc)) from exc
        s.messages_on_key += 1
        s.pending_prekey = None
        return s, plaintext

    if msg_id in state.evicted:
        raise DecryptionFailure("message key was evicted from the skipped cache")
    if env.sender_dh_public in state.retired_remote or (
        env.sender_dh_public == state.dh_remote and env.index < state.recv_count
    ):
        raise DuplicateMessageError(f"message {env.index} on this chain was already consumed")

    s = state.copy()
    if env.sender_dh_public != s.dh_remote:
        _learn_rotations(s, env.prev_rotations)
        _skip_keys(suite, s, env.prev_chain_len, now)
        if s.dh_remote is not None:
            s.retired_remote.append(s.dh_remote)
            if len(s.retired_remote) > 64:
                del s.retired_remote[0]
        # DH ratchet step
        s.prev_chain_len = s.send_count
        s.send_count = 0
        s.recv_count = 0
        s.dh_remote = env.sender_dh_public
        s.root_key, recv_chain = suite.kdf_root(s.root_key, suite.dh(s.dh_self.secret, s.dh_remote))
        s.receiving_chain = ChainKey(recv_chain, 0)
        s.receiving_anchor = s.dh_self
        s.receiving_rotations = {}
        s.prev_sending_rotations = s.sending_rotations
        s.sending_rotations = []
        s.dh_self = suite.keygen(rng)
        s.root_key, send_chain = suite.kdf_root(s.root_key, suite.dh(s.dh_self.secret, s.dh_remote))
        s.sending_chain = ChainKey(send_chain, 0)
        s.messages_on_key = 0
        s.key_born_at = now

    _learn_rotations(s, env.rotations)
    _skip_keys(suite, s, env.index, now)
    next_chain, mk = _receiving_step(suite, s)
    try:
        plaintext = suite.aead_open(mk, env.ciphertext, ad)
    except AuthenticationError as exc:
        raise DecryptionFailure(str(exc)) from exc
    s.receiving_chain = ChainKey(next_chain, env.index + 1)
    s.recv_count = env.index + 1
    s.messages_on_key += 1
    s.pending_prekey = None
    return s, plaintext


def trim_skipped(
    state: SessionState,
    max_entries: Optional[int] = None,
    max_age: Optional[int] = None,
    now: Optional[int] = None,
) -> SessionState:
    """Evict skipped keys, oldest first, until both bounds hold.

    ``max_age`` defaults to the session's ``skipped_max_age`` and needs
    ``now``.
    """
    max_age = state.skipped_max_age if max_age is None else max_age
    s = state.copy()
    if max_age is not None and now is not None:
        for msg_id, (_, born) in list(s.skipped.items()):
            if now - born > max_age:
                del s.skipped[msg_id]
                _tombstone(s, msg_id)
    if max_entries is not None:
        while len(s.skipped) > max_entries:
            msg_id, _ = s.skipped.popitem(last=False)
            _tombstone(s, msg_id)
    return s


def next_sending_key(suite: Suite, state: SessionState) -> Optional[MessageKey]:
    if state.sending_chain is None:
        return None
    return MessageKey(suite.kdf_chain(state.sending_chain.key)[1], state.send_count)


def next_receiving_key(suite: Suite, state: SessionState) -> Optional[MessageKey]:
    if state.receiving_chain is None:
        return None
    return MessageKey(_receiving_step(suite, state)[1], state.recv_count)
