import json

import pytest

from clonesim.profiles import (
    BUILTIN_PROFILES,
    FLAG_FIELDS,
    TABLE_ORDER,
    WEEK_TICKS,
    EnrollmentArchetype,
    KeystoreMode,
    ProfileError,
    UnknownProfileError,
    dump_profile,
    get_profile,
    load_profile,
    profile_from_dict,
)


class TestBuiltins:
    def test_six_profiles_in_table_order(self):
        assert TABLE_ORDER == ("signal", "whatsapp", "element", "wickrme", "viber", "telegram")
        assert set(BUILTIN_PROFILES) == set(TABLE_ORDER)

    @pytest.mark.parametrize(
        "name,archetype",
        [
            ("signal", EnrollmentArchetype.INDEPENDENT_COMPANION_KEY),
            ("whatsapp", EnrollmentArchetype.INDEPENDENT_COMPANION_KEY),
            ("telegram", EnrollmentArchetype.INDEPENDENT_COMPANION_KEY),
            ("element", EnrollmentArchetype.DEVICE_PINNED_KEY),
            ("wickrme", EnrollmentArchetype.DEVICE_PINNED_KEY),
            ("viber", EnrollmentArchetype.IDENTITY_KEY_TRANSFER),
        ],
    )
    def test_archetypes(self, name, archetype):
        assert get_profile(name).archetype is archetype

    def test_only_signal_keeps_key_alongside(self):
        plain = [n for n in TABLE_ORDER if get_profile(n).keystore_mode is KeystoreMode.PLAINTEXT_KEY_ALONGSIDE]
        assert plain == ["signal"]

    def test_telegram_rekey_budget(self):
        p = get_profile("telegram")
        assert (p.rekey_every_n_messages, p.rekey_every_ticks) == (100, WEEK_TICKS)
        assert p.cloud_history and p.secret_chats

    def test_whatsapp_expires_and_alerts(self):
        p = get_profile("whatsapp")
        assert p.expires_links and p.link_alerts
        assert p.link_lifetime() == p.session_expiry

    def test_unknown_name(self):
        with pytest.raises(UnknownProfileError) as exc:
            get_profile("slack")
        assert "signal" in str(exc.value)


class TestSerialization:
    @pytest.mark.parametrize("name", TABLE_ORDER)
    def test_dump_load_round_trip(self, name):
        text = dump_profile(name)
        assert load_profile(text) == get_profile(name)
        assert dump_profile(load_profile(text)) == text

    def test_strings_become_enums(self):
        d = json.loads(dump_profile("signal"))
        assert isinstance(profile_from_dict(d).archetype, EnrollmentArchetype)

    def test_unknown_field(self):
        d = json.loads(dump_profile("signal"))
        d["colour"] = "blue"
        with pytest.raises(ProfileError, match="colour"):
            profile_from_dict(d)

    def test_missing_field(self):
        d = json.loads(dump_profile("signal"))
        del d["archetype"]
        with pytest.raises(ProfileError, match="archetype"):
            profile_from_dict(d)

    def test_bad_enum_value(self):
        d = json.loads(dump_profile("signal"))
        d["keystore_mode"] = "in_the_cloud"
        with pytest.raises(ProfileError, match="keystore_mode"):
            profile_from_dict(d)

    def test_flag_fields_exclude_names(self):
        assert "name" not in FLAG_FIELDS and "display_name" not in FLAG_FIELDS
        assert "archetype" in FLAG_FIELDS


class TestValidation:
    def test_pinned_companion_cannot_relaunch_alone(self):
        with pytest.raises(ProfileError, match="relaunch"):
            get_profile("element").with_flags(companion_independent_relaunch=True)

    def test_rekey_needs_secret_chats(self):
        with pytest.raises(ProfileError, match="secret"):
            get_profile("signal").with_flags(rekey_every_n_messages=10)

    @pytest.mark.parametrize("value", [0, -5, True, 2.5])
    def test_windows_must_be_positive_ints(self, value):
        with pytest.raises(ProfileError):
            get_profile("whatsapp").with_flags(session_expiry=value)

    def test_auto_logout_needs_mfa_option(self):
        with pytest.raises(ProfileError, match="mfa"):
            get_profile("signal").with_flags(auto_logout_after=100)
        assert get_profile("telegram").with_flags(auto_logout_after=100).link_lifetime() == 100

    def test_skipped_limit_positive(self):
        with pytest.raises(ProfileError):
            get_profile("signal").with_flags(skipped_limit=0)
