"""Application profiles: enrollment archetype plus mitigation flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from typing import Any, Optional

TICKS_PER_DAY = 1440
WEEK_TICKS = 7 * TICKS_PER_DAY


class ProfileError(ValueError):
    pass


class UnknownProfileError(ProfileError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown profile"


class EnrollmentArchetype(str, Enum):
    INDEPENDENT_COMPANION_KEY = "independent_companion_key"
    IDENTITY_KEY_TRANSFER = "identity_key_transfer"
    DEVICE_PINNED_KEY = "device_pinned_key"


class KeystoreMode(str, Enum):
    PLAINTEXT_KEY_ALONGSIDE = "plaintext_key_alongside"
    PASSPHRASE_PROTECTED = "passphrase_protected"
    DEVICE_BOUND_KEY = "device_bound_key"


class DirectoryIdentifier(str, Enum):
    """What a contact entry exposes as its handle."""

    PHONE_NUMBER = "phone_number"
    USERNAME = "username"


@dataclass(frozen=True)
class AppProfile:
    name: str
    display_name: str
    archetype: EnrollmentArchetype
    keystore_mode: KeystoreMode
    companion_independent_relaunch: bool
    session_expiry: Optional[int] = None
    link_alerts: bool = False
    rekey_every_n_messages: Optional[int] = None
    rekey_every_ticks: Optional[int] = None
    cloud_history: bool = False
    secret_chats: bool = False
    metadata_copyable: bool = True
    history_copyable: bool = True
    mfa_logout_option: bool = False
    auto_logout_after: Optional[int] = None
    directory_identifier: DirectoryIdentifier = DirectoryIdentifier.PHONE_NUMBER
    skipped_limit: int = 1000
    skipped_max_age: Optional[int] = None

    def __post_init__(self) -> None:
        # accept plain strings from config files
        for name, enum in (
            ("archetype", EnrollmentArchetype),
            ("keystore_mode", KeystoreMode),
            ("directory_identifier", DirectoryIdentifier),
        ):
            value = getattr(self, name)
            if not isinstance(value, enum):
                try:
                    object.__setattr__(self, name, enum(value))
                except ValueError:
                    raise ProfileError(f"{name}: invalid value {value!r}") from None
        validate_profile(self)

    @property
    def expires_links(self) -> bool:
        return self.session_expiry is not None or self.auto_logout_after is not None

    def link_lifetime(self) -> Optional[int]:
        windows = [w for w in (self.session_expiry, self.auto_logout_after) if w is not None]
        return min(windows) if windows else None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, Enum):
                d[k] = v.value
        return d

    def with_flags(self, **changes: Any) -> "AppProfile":
        return replace(self, **changes)


def validate_profile(p: AppProfile) -> None:
    problems = []
    if p.archetype != EnrollmentArchetype.INDEPENDENT_COMPANION_KEY and p.companion_independent_relaunch:
        problems.append(f"{p.archetype.value} companions cannot relaunch without the primary device")
    if (p.rekey_every_n_messages is not None or p.rekey_every_ticks is not None) and not p.secret_chats:
        problems.append("rekey policy applies only to secret-chat sessions")
    for name in ("session_expiry", "rekey_every_n_messages", "rekey_every_ticks", "auto_logout_after", "skipped_max_age"):
        value = getattr(p, name)
        if value is not None and (not isinstance(value, int) or isinstance(value, bool) or value <= 0):
            problems.append(f"{name} must be a positive integer or null")
    if not isinstance(p.skipped_limit, int) or p.skipped_limit <= 0:
        problems.append("skipped_limit must be a positive integer")
    if p.auto_logout_after is not None and not p.mfa_logout_option:
        problems.append("auto_logout_after requires mfa_logout_option")
    if problems:
        raise ProfileError(f"profile {p.name!r}: " + "; ".join(problems))


_INDEPENDENT = EnrollmentArchetype.INDEPENDENT_COMPANION_KEY

BUILTIN_PROFILES: dict[str, AppProfile] = {
    "signal": AppProfile(
        name="signal",
        display_name="Signal",
        archetype=_INDEPENDENT,
        keystore_mode=KeystoreMode.PLAINTEXT_KEY_ALONGSIDE,
        companion_independent_relaunch=True,
    ),
    "whatsapp": AppProfile(
        name="whatsapp",
        display_name="Whatsapp",
        archetype=_INDEPENDENT,
        keystore_mode=KeystoreMode.DEVICE_BOUND_KEY,
        companion_independent_relaunch=True,
        session_expiry=2000,
        link_alerts=True,
    ),
    "element": AppProfile(
        name="element",
        display_name="Element",
        archetype=EnrollmentArchetype.DEVICE_PINNED_KEY,
        keystore_mode=KeystoreMode.DEVICE_BOUND_KEY,
        companion_independent_relaunch=False,
        history_copyable=False,
        directory_identifier=DirectoryIdentifier.USERNAME,
    ),
    "wickrme": AppProfile(
        name="wickrme",
        display_name="Wickr Me",
        archetype=EnrollmentArchetype.DEVICE_PINNED_KEY,
        keystore_mode=KeystoreMode.DEVICE_BOUND_KEY,
        companion_independent_relaunch=False,
        metadata_copyable=False,
        history_copyable=False,
    ),
    "viber": AppProfile(
        name="viber",
        display_name="Viber",
        archetype=EnrollmentArchetype.IDENTITY_KEY_TRANSFER,
        keystore_mode=KeystoreMode.DEVICE_BOUND_KEY,
        companion_independent_relaunch=False,
        metadata_copyable=False,
        history_copyable=False,
    ),
    "telegram": AppProfile(
        name="telegram",
        display_name="Telegram",
        archetype=_INDEPENDENT,
        keystore_mode=KeystoreMode.DEVICE_BOUND_KEY,
        companion_independent_relaunch=True,
        rekey_every_n_messages=100,
        rekey_every_ticks=WEEK_TICKS,
        cloud_history=True,
        secret_chats=True,
        mfa_logout_option=True,
    ),
}

# Row order of the findings table.
TABLE_ORDER = ("signal", "whatsapp", "element", "wickrme", "viber", "telegram")

PROFILE_FIELDS = tuple(f.name for f in fields(AppProfile))
FLAG_FIELDS = tuple(n for n in PROFILE_FIELDS if n not in ("name", "display_name"))


def get_profile(name: str) -> AppProfile:
    try:
        return BUILTIN_PROFILES[name]
    except KeyError:
        raise UnknownProfileError(f"unknown profile {name!r}; built-ins: {', '.join(TABLE_ORDER)}") from None


def profile_from_dict(d: dict[str, Any]) -> AppProfile:
    unknown = set(d) - set(PROFILE_FIELDS)
    if unknown:
        raise ProfileError(f"unknown profile fields: {sorted(unknown)}")
    missing = {"name", "display_name", "archetype", "keystore_mode", "companion_independent_relaunch"} - set(d)
    if missing:
        raise ProfileError(f"missing profile fields: {sorted(missing)}")
    return AppProfile(**d)


def dump_profile(name_or_profile: str | AppProfile) -> str:
    """Canonical JSON text for a profile; loading it back yields an equal profile."""
    p = get_profile(name_or_profile) if isinstance(name_or_profile, str) else name_or_profile
    return json.dumps(p.to_dict(), indent=2, sort_keys=True) + "\n"


def load_profile(text: str) -> AppProfile:
    return profile_from_dict(json.loads(text))
