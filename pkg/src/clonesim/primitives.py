"""Cryptographic primitive suites.

Two instantiations share one interface:

* ``toy``: modular-exponentiation DH over the 31-bit prime 2**31 - 1,
  Schnorr signatures in the same group, SHA-256 based KDF and a
  synthetic-IV AEAD. Small enough for brute-force oracles.
* ``standard``: X25519 key agreement, Ed25519 signatures, HKDF/HMAC-SHA256
  and ChaCha20-Poly1305.

Every secret and shared secret is 32 bytes. All randomness is drawn from a
caller-supplied :class:`random.Random`, so a fixed seed replays bit-exactly.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ed25519, x25519
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

KEY_LEN = 32

TOY_PRIME = 2147483647
TOY_GENERATOR = 5
_TOY_ORDER = TOY_PRIME - 1

# Domain-separation tags; kdf_root and kdf_chain must never collide.
_ROOT_TAG = b"clonesim/kdf-root"
_CHAIN_KEY_TAG = b"\x01"
_MESSAGE_KEY_TAG = b"\x02"


class CryptoError(Exception):
    """Base class for primitive failures."""


class MalformedKeyError(CryptoError, ValueError):
    pass


class AuthenticationError(CryptoError):
    """AEAD open failed: wrong key, tampered ciphertext or associated data."""


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    secret: bytes = b""

    def __repr__(self) -> str:
        return f"KeyPair(public={self.public.hex()[:16]}...)"


@dataclass(frozen=True)
class ChainKey:
    key: bytes
    index: int = 0


@dataclass(frozen=True)
class MessageKey:
    key: bytes
    index: int


def fingerprint(hardware_tag: bytes) -> bytes:
    """SHA-256 device identifier derived from a hardware tag."""
    return hashlib.sha256(b"clonesim/device-fp" + hardware_tag).digest()


def _hmac(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


def _check_len(value: bytes, length: int, what: str) -> None:
    if not isinstance(value, (bytes, bytearray)) or len(value) != length:
        raise MalformedKeyError(f"{what} must be {length} bytes, got {len(value) if value is not None else None}")


# -- toy suite ---------------------------------------------------------------


def _toy_int(value: bytes, what: str) -> int:
    _check_len(value, KEY_LEN, what)
    n = int.from_bytes(value, "big")
    if not 1 < n < TOY_PRIME:
        raise MalformedKeyError(f"{what} out of range for toy group")
    return n


def _toy_bytes(n: int) -> bytes:
    return n.to_bytes(KEY_LEN, "big")


def _toy_keygen(rng: random.Random) -> KeyPair:
    x = 2 + rng.randrange(TOY_PRIME - 3)
    return KeyPair(public=_toy_bytes(pow(TOY_GENERATOR, x, TOY_PRIME)), secret=_toy_bytes(x))


def _toy_derive_public(secret: bytes) -> bytes:
    return _toy_bytes(pow(TOY_GENERATOR, _toy_int(secret, "secret"), TOY_PRIME))


def _toy_dh(secret: bytes, public: bytes) -> bytes:
    return _toy_bytes(pow(_toy_int(public, "public key"), _toy_int(secret, "secret"), TOY_PRIME))


def _toy_kdf_root(root: bytes, dh_out: bytes) -> tuple[bytes, bytes]:
    _check_len(root, KEY_LEN, "root key")
    _check_len(dh_out, KEY_LEN, "dh output")
    base = hashlib.sha256(_ROOT_TAG + root + dh_out).digest()
    return (
        hashlib.sha256(base + b"/root").digest(),
        hashlib.sha256(base + b"/chain").digest(),
    )


def _toy_kdf_chain(chain: bytes) -> tuple[bytes, bytes]:
    _check_len(chain, KEY_LEN, "chain key")
    return (
        hashlib.sha256(chain + _CHAIN_KEY_TAG).digest(),
        hashlib.sha256(chain + _MESSAGE_KEY_TAG).digest(),
    )


def _keystream(key: bytes, iv: bytes, length: int) -> bytes:
    out = bytearray()
    counter = 0
    while len(out) < length:
        out += hashlib.sha256(key + iv + counter.to_bytes(8, "big")).digest()
        counter += 1
    return bytes(out[:length])


def _siv(key: bytes, plaintext: bytes, ad: bytes) -> bytes:
    return _hmac(key, b"siv" + len(ad).to_bytes(8, "big") + ad + plaintext)[:16]


def _toy_seal(key: bytes, plaintext: bytes, ad: bytes) -> bytes:
    _check_len(key, KEY_LEN, "aead key")
    iv = _siv(key, plaintext, ad)
    body = bytes(a ^ b for a, b in zip(plaintext, _keystream(key, iv, len(plaintext))))
    return iv + body


def _toy_open(key: bytes, ciphertext: bytes, ad: bytes) -> bytes:
    _check_len(key, KEY_LEN, "aead key")
    if len(ciphertext) < 16:
        raise AuthenticationError("ciphertext too short")
    iv, body = ciphertext[:16], ciphertext[16:]
    plaintext = bytes(a ^ b for a, b in zip(body, _keystream(key, iv, len(body))))
    if not hmac.compare_digest(iv, _siv(key, plaintext, ad)):
        raise AuthenticationError("authentication failed")
    return plaintext


def _toy_challenge(r: int, public: int, message: bytes) -> int:
    digest = hashlib.sha256(b"schnorr" + _toy_bytes(r) + _toy_bytes(public) + message).digest()
    return int.from_bytes(digest, "big") % _TOY_ORDER


def _toy_sign(secret: bytes, message: bytes) -> bytes:
    x = _toy_int(secret, "secret")
    y = pow(TOY_GENERATOR, x, TOY_PRIME)
    k = 1 + int.from_bytes(_hmac(secret, b"nonce" + message), "big") % (_TOY_ORDER - 1)
    r = pow(TOY_GENERATOR, k, TOY_PRIME)
    s = (k + x * _toy_challenge(r, y, message)) % _TOY_ORDER
    return _toy_bytes(r) + _toy_bytes(s)


def _toy_verify(public: bytes, message: bytes, signature: bytes) -> bool:
    try:
        y = _toy_int(public, "public key")
    except MalformedKeyError:
        return False
    if len(signature) != 2 * KEY_LEN:
        return False
    r = int.from_bytes(signature[:KEY_LEN], "big")
    s = int.from_bytes(signature[KEY_LEN:], "big")
    if not (0 < r < TOY_PRIME and 0 <= s < _TOY_ORDER):
        return False
    e = _toy_challenge(r, y, message)
    return pow(TOY_GENERATOR, s, TOY_PRIME) == (r * pow(y, e, TOY_PRIME)) % TOY_PRIME


# -- standard suite ----------------------------------------------------------
# One 32-byte secret seeds both an X25519 key (agreement) and an Ed25519 key
# (signatures); the public value is the 64-byte concatenation.

_STD_PUBLIC_LEN = 64


def _std_derive_public(secret: bytes) -> bytes:
    _check_len(secret, KEY_LEN, "secret")
    xpub = x25519.X25519PrivateKey.from_private_bytes(secret).public_key().public_bytes_raw()
    epub = ed25519.Ed25519PrivateKey.from_private_bytes(secret).public_key().public_bytes_raw()
    return xpub + epub


def _std_keygen(rng: random.Random) -> KeyPair:
    secret = rng.randbytes(KEY_LEN)
    return KeyPair(public=_std_derive_public(secret), secret=secret)


def _std_dh(secret: bytes, public: bytes) -> bytes:
    _check_len(secret, KEY_LEN, "secret")
    _check_len(public, _STD_PUBLIC_LEN, "public key")
    try:
        peer = x25519.X25519PublicKey.from_public_bytes(public[:KEY_LEN])
        return x25519.X25519PrivateKey.from_private_bytes(secret).exchange(peer)
    except ValueError as exc:
        raise MalformedKeyError(str(exc)) from exc


def _std_kdf_root(root: bytes, dh_out: bytes) -> tuple[bytes, bytes]:
    _check_len(root, KEY_LEN, "root key")
    _check_len(dh_out, KEY_LEN, "dh output")
    okm = HKDF(algorithm=hashes.SHA256(), length=2 * KEY_LEN, salt=root, info=_ROOT_TAG).derive(dh_out)
    return okm[:KEY_LEN], okm[KEY_LEN:]


def _std_kdf_chain(chain: bytes) -> tuple[bytes, bytes]:
    _check_len(chain, KEY_LEN, "chain key")
    return _hmac(chain, _CHAIN_KEY_TAG), _hmac(chain, _MESSAGE_KEY_TAG)


def _std_seal(key: bytes, plaintext: bytes, ad: bytes) -> bytes:
    _check_len(key, KEY_LEN, "aead key")
    nonce = _siv(key, plaintext, ad)[:12]
    return nonce + ChaCha20Poly1305(key).encrypt(nonce, plaintext, ad)


def _std_open(key: bytes, ciphertext: bytes, ad: bytes) -> bytes:
    _check_len(key, KEY_LEN, "aead key")
    if len(ciphertext) < 12 + 16:
        raise AuthenticationError("ciphertext too short")
    try:
        return ChaCha20Poly1305(key).decrypt(ciphertext[:12], ciphertext[12:], ad)
    except InvalidTag as exc:
        raise AuthenticationError("authentication failed") from exc


def _std_sign(secret: bytes, message: bytes) -> bytes:
    _check_len(secret, KEY_LEN, "secret")
    return ed25519.Ed25519PrivateKey.from_private_bytes(secret).sign(message)


def _std_verify(public: bytes, message: bytes, signature: bytes) -> bool:
    if len(public) != _STD_PUBLIC_LEN:
        return False
    try:
        ed25519.Ed25519PublicKey.from_public_bytes(public[KEY_LEN:]).verify(signature, message)
    except Exception:
        return False
    return True


def _sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class Suite:
    """A named bundle of primitive functions.

    ``sign`` and ``verify`` take the raw secret/public byte strings of a
    :class:`KeyPair`; :meth:`sign_with` / :meth:`verify_with` accept the pair.
    """

    name: str
    _keygen: Callable[[random.Random], KeyPair]
    derive_public: Callable[[bytes], bytes]
    dh: Callable[[bytes, bytes], bytes]
    kdf_root: Callable[[bytes, bytes], tuple[bytes, bytes]]
    kdf_chain: Callable[[bytes], tuple[bytes, bytes]]
    aead_seal: Callable[[bytes, bytes, bytes], bytes]
    aead_open: Callable[[bytes, bytes, bytes], bytes]
    sign: Callable[[bytes, bytes], bytes]
    verify: Callable[[bytes, bytes, bytes], bool]
    hash: Callable[[bytes], bytes]

    def keygen(self, rng: random.Random) -> KeyPair:
        return self._keygen(rng)

    def sign_with(self, identity: KeyPair, message: bytes) -> bytes:
        return self.sign(identity.secret, message)

    def verify_with(self, public: bytes, message: bytes, signature: bytes) -> bool:
        try:
            return bool(self.verify(public, message, signature))
        except Exception:
            return False

    def kdf(self, secret: bytes, label: bytes) -> bytes:
        """General-purpose 32-byte derivation (keystore keys, tokens)."""
        return _hmac(self.hash(b"clonesim/kdf" + label), secret)

    def random_key(self, rng: random.Random) -> bytes:
        return rng.randbytes(KEY_LEN)


TOY = Suite(
    name="toy",
    _keygen=_toy_keygen,
    derive_public=_toy_derive_public,
    dh=_toy_dh,
    kdf_root=_toy_kdf_root,
    kdf_chain=_toy_kdf_chain,
    aead_seal=_toy_seal,
    aead_open=_toy_open,
    sign=_toy_sign,
    verify=_toy_verify,
    hash=_sha256,
)

STANDARD = Suite(
    name="standard",
    _keygen=_std_keygen,
    derive_public=_std_derive_public,
    dh=_std_dh,
    kdf_root=_std_kdf_root,
    kdf_chain=_std_kdf_chain,
    aead_seal=_std_seal,
    aead_open=_std_open,
    sign=_std_sign,
    verify=_std_verify,
    hash=_sha256,
)

SUITES = {"toy": TOY, "standard": STANDARD}


def get_suite(name: str) -> Suite:
    try:
        return SUITES[name]
    except KeyError:
        raise ValueError(f"unknown suite {name!r}; expected one of {sorted(SUITES)}") from None


def toy_keypair(exponent: int) -> KeyPair:
    """Toy-suite pair with a chosen secret exponent (for oracle tests)."""
    return KeyPair(public=_toy_bytes(pow(TOY_GENERATOR, exponent, TOY_PRIME)), secret=_toy_bytes(exponent))
