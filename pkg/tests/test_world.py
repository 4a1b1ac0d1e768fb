import pytest

from clonesim.primitives import STANDARD
from clonesim.profiles import TABLE_ORDER, get_profile
from clonesim.world import World


def pair_world(name="signal", seed=0, suite=None):
    world = World(get_profile(name), seed=seed, **({"suite": suite} if suite else {}))
    world.add_person("victor")
    world.add_person("alice")
    world.add_contact("victor", "alice")
    return world


class TestClock:
    def test_cannot_go_back(self):
        world = pair_world()
        world.advance(5)
        with pytest.raises(ValueError):
            world.advance(4)

    def test_transcript_ids_in_order(self):
        world = pair_world()
        ids = [e["id"] for e in world.transcript]
        assert ids == sorted(ids) and len(set(ids)) == len(ids)

    def test_duplicate_person(self):
        with pytest.raises(ValueError):
            pair_world().add_person("alice")


class TestTraffic:
    @pytest.mark.parametrize("name", TABLE_ORDER)
    def test_message_reaches_every_active_device(self, name):
        world = pair_world(name)
        world.enroll("victor")
        world.send("alice", "victor", "hi both")
        for dev in world.people["victor"].devices:
            got = [r for r in world.sync("victor", dev.device_id) if r.get("body") == "hi both"]
            assert len(got) == 1

    def test_reply_from_desktop_is_attributed_to_desktop(self):
        world = pair_world()
        desktop = world.enroll("victor")
        world.send("victor", "alice", "from my desk", device_id=desktop.device_id)
        (item,) = world.sync("alice")
        assert item["attribution"] == world.expected_attribution("victor", desktop.device_id)

    def test_standard_suite_round_trip(self):
        world = pair_world(suite=STANDARD)
        world.send("alice", "victor", "x25519 says hi")
        assert [r["body"] for r in world.sync("victor")] == ["x25519 says hi"]

    def test_secret_chat_stays_on_one_device(self):
        world = pair_world("telegram")
        world.enroll("victor")
        world.send("alice", "victor", "psst", secret=True)
        phone = [r for r in world.sync("victor") if r["kind"] == "secret"]
        desktop = [r for r in world.sync("victor", "victor-desktop") if r["kind"] == "secret"]
        assert [r["body"] for r in phone] == ["psst"] and desktop == []

    def test_same_seed_same_transcript(self):
        def play():
            world = pair_world(seed=9)
            world.enroll("victor")
            for i in range(5):
                world.step()
                world.send("alice", "victor", f"n{i}")
                world.sync_all("victor")
            return world.transcript

        assert play() == play()
