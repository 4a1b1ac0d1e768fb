import itertools
import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clonesim.primitives import STANDARD, TOY
from clonesim.profiles import WEEK_TICKS
from clonesim.ratchet import (
    BadSignatureError,
    DecryptionFailure,
    DuplicateMessageError,
    RatchetError,
    SessionState,
    SkippedLimitExceeded,
    UnknownPreKeyError,
    generate_prekeys,
    init_initiator,
    init_responder,
    next_receiving_key,
    next_sending_key,
    ratchet_decrypt,
    ratchet_encrypt,
    trim_skipped,
)

from support import candidate_keys, open_pair, opens


def one_way(pair, n, prefix=b"m"):
    return [pair.send("alice", prefix + b"%d" % i) for i in range(n)]


class TestHandshake:
    def setup_method(self):
        self.rng = random.Random(5)
        self.alice_id = TOY.keygen(self.rng)
        self.bob_id = TOY.keygen(self.rng)
        self.store = generate_prekeys(TOY, self.bob_id, self.rng)

    def test_bad_signature_rejected(self):
        bundle = self.store.bundle(self.bob_id.public)
        forged = replace(bundle, signed_prekey_signature=bytes(len(bundle.signed_prekey_signature)))
        with pytest.raises(BadSignatureError):
            init_initiator(TOY, self.alice_id, forged, self.rng)

    def test_bundle_signed_by_someone_else(self):
        bundle = self.store.bundle(self.bob_id.public)
        with pytest.raises(BadSignatureError):
            init_initiator(TOY, self.alice_id, replace(bundle, identity_public=self.alice_id.public), self.rng)

    def test_unknown_one_time_prekey(self):
        otk = min(self.store.one_time)
        alice = init_initiator(TOY, self.alice_id, self.store.bundle(self.bob_id.public, otk), self.rng)
        _, env = ratchet_encrypt(TOY, alice, b"hi", self.rng)
        del self.store.one_time[otk]
        with pytest.raises(UnknownPreKeyError):
            init_responder(TOY, self.bob_id, self.store, env, self.rng)

    def test_unknown_signed_prekey(self):
        alice = init_initiator(TOY, self.alice_id, self.store.bundle(self.bob_id.public), self.rng)
        _, env = ratchet_encrypt(TOY, alice, b"hi", self.rng)
        other = generate_prekeys(TOY, self.bob_id, self.rng, first_id=50)
        with pytest.raises(UnknownPreKeyError):
            init_responder(TOY, self.bob_id, other, env, self.rng)

    def test_envelope_without_prekey_header(self):
        pair = open_pair(seed=1)
        env = pair.send("alice", b"x")
        assert env.prekey is None
        with pytest.raises(UnknownPreKeyError):
            init_responder(TOY, self.bob_id, self.store, env, self.rng)

    def test_prekey_header_dropped_after_first_reply(self):
        pair = open_pair(seed=2, acked=False)
        assert pair.send("alice", b"again").prekey is not None
        pair.deliver("alice", pair.send("bob", b"ack"))
        assert pair.send("alice", b"later").prekey is None

    def test_responder_does_not_consume_prekeys_itself(self):
        otk = min(self.store.one_time)
        alice = init_initiator(TOY, self.alice_id, self.store.bundle(self.bob_id.public, otk), self.rng)
        _, env = ratchet_encrypt(TOY, alice, b"hi", self.rng)
        init_responder(TOY, self.bob_id, self.store, env, self.rng)
        assert otk in self.store.one_time

    def test_distinct_roots_from_same_bundle(self):
        bundle = self.store.bundle(self.bob_id.public)
        roots = set()
        for seed in range(100):
            rng = random.Random(1000 + seed)
            alice = init_initiator(TOY, self.alice_id, bundle, rng)
            alice, env = ratchet_encrypt(TOY, alice, b"open", rng)
            bob, _ = init_responder(TOY, self.bob_id, self.store, env, rng)
            roots.add(alice.root_key)
            senders = {"alice": alice, "bob": bob}
            for i in range(20):
                who, other = ("bob", "alice") if i % 2 == 0 else ("alice", "bob")
                state, env = ratchet_encrypt(TOY, senders[who], b"%d" % i, rng)
                senders[who] = state
                senders[other], pt = ratchet_decrypt(TOY, senders[other], env, rng)
                assert pt == b"%d" % i
        assert len(roots) == 100

    @pytest.mark.parametrize("suite", [TOY, STANDARD], ids=["toy", "standard"])
    def test_both_suites_agree_on_shared_secret(self, suite):
        pair = open_pair(suite, seed=3)
        for i in range(4):
            assert pair.deliver("bob", pair.send("alice", b"%d" % i)) == b"%d" % i

    def test_cannot_send_before_receiving(self):
        pair = open_pair(seed=4)
        stuck = replace(pair.bob.copy(), dh_remote=None)
        with pytest.raises(RatchetError):
            ratchet_encrypt(TOY, stuck, b"x", pair.rng)


class TestRoundTrip:
    def test_delivery_order_0_2_1(self):
        pair = open_pair(seed=10)
        envs = one_way(pair, 3)
        assert [pair.deliver("bob", envs[i]) for i in (0, 2, 1)] == [b"m0", b"m2", b"m1"]

    @pytest.mark.parametrize("every", [None, 2, 1], ids=["plain", "rekey2", "rekey1"])
    def test_all_permutations_of_six(self, every):
        base = open_pair(seed=11, rekey_every_messages=every)
        envs = one_way(base, 6)
        for perm in itertools.permutations(range(6)):
            bob = base.bob.copy()
            pair = replace(base, bob=bob)
            assert [pair.deliver("bob", envs[i]) for i in perm] == [b"m%d" % i for i in perm]

    def test_redelivery_is_duplicate(self):
        pair = open_pair(seed=12)
        envs = one_way(pair, 3)
        for i in (2, 0, 1):
            pair.deliver("bob", envs[i])
        for env in envs:
            before = pair.bob.to_bytes()
            with pytest.raises(DuplicateMessageError):
                pair.deliver("bob", env)
            assert pair.bob.to_bytes() == before

    def test_old_chain_redelivery_is_duplicate(self):
        pair = open_pair(seed=13)
        old = pair.send("alice", b"old")
        pair.deliver("bob", old)
        pair.deliver("alice", pair.send("bob", b"reply"))
        pair.deliver("bob", pair.send("alice", b"new chain"))
        with pytest.raises(DuplicateMessageError):
            pair.deliver("bob", old)

    def test_tampered_envelope_leaves_state_alone(self):
        pair = open_pair(seed=14)
        env = pair.send("alice", b"secret")
        before = pair.bob.to_bytes()
        bad = replace(env, ciphertext=env.ciphertext[:-1] + bytes([env.ciphertext[-1] ^ 1]))
        with pytest.raises(DecryptionFailure):
            pair.deliver("bob", bad)
        assert pair.bob.to_bytes() == before
        assert pair.deliver("bob", env) == b"secret"

    def test_header_mismatch_rejected(self):
        pair = open_pair(seed=15)
        env = pair.send("alice", b"x")
        with pytest.raises(DecryptionFailure):
            pair.deliver("bob", replace(env, index=env.index + 1))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32), n=st.integers(1, 100), every=st.sampled_from([None, 3, 17]))
    def test_any_permutation_of_one_way_conversation(self, seed, n, every):
        pair = open_pair(seed=seed % 1000, rekey_every_messages=every)
        envs = one_way(pair, n)
        order = list(range(n))
        random.Random(seed).shuffle(order)
        for i in order:
            assert pair.deliver("bob", envs[i]) == b"m%d" % i

    @pytest.mark.parametrize("every", [None, 1, 2, 3])
    def test_bidirectional_with_reordering(self, every):
        for seed in range(60):
            self._converse(seed, every)

    @staticmethod
    def _converse(seed, every):
        pair = open_pair(seed=seed, rekey_every_messages=every)
        r = random.Random(seed + 1)
        inflight = {"alice": [], "bob": []}
        count = 0
        for _ in range(60):
            sender = r.choice(["alice", "bob"])
            receiver = "bob" if sender == "alice" else "alice"
            if r.random() < 0.5:
                body = b"%d" % count
                inflight[receiver].append((pair.send(sender, body), body))
                count += 1
            elif inflight[receiver]:
                env, body = inflight[receiver].pop(r.randrange(len(inflight[receiver])))
                assert pair.deliver(receiver, env) == body
        for who, queue in inflight.items():
            r.shuffle(queue)
            for env, body in queue:
                assert pair.deliver(who, env) == body


class TestDhStep:
    def test_reply_moves_root_and_resets_counters(self):
        pair = open_pair(seed=20)
        one_way(pair, 3)
        root, sent = pair.alice.root_key, pair.alice.send_count
        assert sent == 3
        pair.deliver("bob", pair.sent[-1][1])
        reply = pair.send("bob", b"reply")
        assert reply.prev_chain_len == 1
        pair.deliver("alice", reply)
        assert pair.alice.root_key != root
        assert pair.alice.send_count == 0
        assert pair.alice.recv_count == 1
        assert pair.alice.prev_chain_len == sent
        assert pair.send("alice", b"next").prev_chain_len == sent

    def test_missing_tail_of_previous_chain_is_cached(self):
        pair = open_pair(seed=21)
        envs = one_way(pair, 4)
        pair.deliver("bob", envs[0])
        pair.deliver("alice", pair.send("bob", b"reply"))
        new = pair.send("alice", b"fresh")
        assert pair.deliver("bob", new) == b"fresh"
        assert len(pair.bob.skipped) == 3
        assert [pair.deliver("bob", e) for e in envs[1:]] == [b"m1", b"m2", b"m3"]
        assert not pair.bob.skipped


class TestMirror:
    @pytest.mark.parametrize("suite", [TOY, STANDARD], ids=["toy", "standard"])
    def test_alternating_messages_keep_keys_in_step(self, suite):
        pair = open_pair(suite, seed=30)
        for k in range(20):
            sender, receiver = ("alice", "bob") if k % 2 == 0 else ("bob", "alice")
            env = pair.send(sender, b"%d" % k)
            pair.deliver(receiver, env)
            assert next_sending_key(suite, getattr(pair, sender)) == next_receiving_key(suite, getattr(pair, receiver))

    def test_bursts(self):
        pair = open_pair(seed=31)
        for burst in (1, 3, 2, 5):
            for _ in range(burst):
                pair.deliver("bob", pair.send("alice", b"x"))
            assert next_sending_key(TOY, pair.alice) == next_receiving_key(TOY, pair.bob)
            pair.deliver("alice", pair.send("bob", b"y"))
            assert next_sending_key(TOY, pair.bob) == next_receiving_key(TOY, pair.alice)


class TestSkippedCache:
    def test_gap_beyond_limit(self):
        pair = open_pair(seed=40, skipped_limit=5)
        envs = one_way(pair, 8)
        with pytest.raises(SkippedLimitExceeded):
            pair.deliver("bob", envs[7])

    def test_gap_at_limit(self):
        pair = open_pair(seed=41, skipped_limit=5)
        envs = one_way(pair, 6)
        assert pair.deliver("bob", envs[5]) == b"m5"
        assert len(pair.bob.skipped) == 5

    def test_gap_across_chains_counts_previous_tail(self):
        pair = open_pair(seed=42, skipped_limit=5)
        envs = one_way(pair, 7)
        pair.deliver("bob", envs[0])
        reply = pair.send("bob", b"r")
        pair.deliver("alice", reply)
        with pytest.raises(SkippedLimitExceeded):
            pair.deliver("bob", pair.send("alice", b"late"))

    def test_trim_evicts_oldest(self):
        pair = open_pair(seed=43)
        envs = one_way(pair, 11)
        pair.deliver("bob", envs[10])
        assert len(pair.bob.skipped) == 10
        trimmed = trim_skipped(pair.bob, max_entries=5)
        assert [i for _, i in trimmed.skipped] == [5, 6, 7, 8, 9]
        assert [i for _, i in trimmed.evicted] == [0, 1, 2, 3, 4]
        assert len(pair.bob.skipped) == 10
        pair.bob = trimmed
        with pytest.raises(DecryptionFailure):
            pair.deliver("bob", envs[2])
        assert pair.deliver("bob", envs[7]) == b"m7"

    def test_trim_by_age(self):
        pair = open_pair(seed=44, skipped_max_age=10)
        envs = one_way(pair, 3)
        pair.deliver("bob", envs[2])
        assert len(trim_skipped(pair.bob, now=10).skipped) == 2
        assert len(trim_skipped(pair.bob, now=11).skipped) == 0

    def test_cache_overflow_is_fifo(self):
        pair = open_pair(seed=45, skipped_limit=3)
        envs = one_way(pair, 8)
        pair.deliver("bob", envs[3])
        pair.deliver("bob", envs[7])
        assert [i for _, i in pair.bob.skipped] == [4, 5, 6]
        with pytest.raises(DecryptionFailure):
            pair.deliver("bob", envs[0])


class TestForwardSecrecy:
    def test_used_message_key_is_gone_after_encrypt(self):
        pair = open_pair(seed=50)
        for i in range(10):
            mk = next_sending_key(TOY, pair.alice)
            pair.send("alice", b"%d" % i)
            assert mk.key.hex().encode() not in pair.alice.to_bytes()

    @pytest.mark.parametrize("seed", range(40))
    def test_snapshot_cannot_open_consumed_envelopes(self, seed):
        r = random.Random(seed)
        pair = open_pair(seed=seed, rekey_every_messages=r.choice([None, 2, 4]))
        envs = []
        for _ in range(r.randrange(2, 5)):
            envs += one_way(pair, r.randrange(1, 5))
            if r.random() < 0.5:
                pair.deliver("alice", pair.send("bob", b"r"))
        held_back = set(r.sample(range(len(envs)), k=len(envs) // 3))
        for i, env in enumerate(envs):
            if i not in held_back:
                pair.deliver("bob", env)
        for who in ("alice", "bob"):
            snapshot = getattr(pair, who)
            keys = candidate_keys(TOY, snapshot.to_bytes())
            for i, env in enumerate(envs):
                hits = [k for k in keys if opens(TOY, k, env, pair.bob.associated_data)]
                if who == "bob" and (env.sender_dh_public, env.index) in snapshot.skipped:
                    assert hits
                elif who == "alice" or i not in held_back:
                    assert not hits, f"{who} snapshot opens envelope {i}"


class TestRekey:
    def test_default_sessions_never_rotate(self):
        pair = open_pair(seed=60)
        envs = one_way(pair, 250)
        assert pair.alice.rekey_count == 0
        assert all(not e.rotations for e in envs)

    def test_rotates_after_exactly_100_messages(self):
        pair = open_pair(seed=61, acked=False, rekey_every_messages=100, rekey_every_ticks=WEEK_TICKS)
        envs = one_way(pair, 250)
        # chain indices; the handshake message was index 0
        assert [at for _, at in pair.alice.sending_rotations] == [100, 200]
        assert [e.index for e in envs[98:101]] == [99, 100, 101]
        assert [len(e.rotations) for e in envs[98:101]] == [0, 1, 1]
        assert len({pub for pub, _ in pair.alice.sending_rotations}) == 2
        assert [pair.deliver("bob", e) for e in envs] == [b"m%d" % i for i in range(250)]

    def test_received_messages_count_towards_the_key(self):
        pair = open_pair(seed=62, rekey_every_messages=100)
        assert pair.alice.messages_on_key == 1
        for _ in range(98):
            pair.deliver("alice", pair.send("bob", b"b"))
        assert pair.alice.messages_on_key == 99
        pair.send("alice", b"hundredth")
        assert pair.alice.rekey_count == 0
        pair.send("alice", b"fresh key")
        assert pair.alice.rekey_count == 1

    def test_messages_on_key_reach_exactly_100(self):
        pair = open_pair(seed=63, rekey_every_messages=100)
        seen = []
        for i in range(300):
            seen.append(pair.alice.messages_on_key)
            pair.send("alice", b"%d" % i)
        assert max(seen) == 100
        assert pair.alice.rekey_count == 3

    def test_rotates_when_tick_budget_runs_out(self):
        pair = open_pair(seed=64, rekey_every_messages=100, rekey_every_ticks=WEEK_TICKS)
        for i in range(12):
            pair.now = i * 1000
            pair.send("alice", b"%d" % i)
        assert [at for _, at in pair.alice.sending_rotations] == [11]
        for _, env, body in pair.sent[1:]:
            assert pair.deliver("bob", env) == body

    @settings(max_examples=50, deadline=None)
    @given(gaps=st.lists(st.integers(0, 3000), min_size=1, max_size=220), every=st.integers(1, 120))
    def test_whichever_comes_first(self, gaps, every):
        pair = open_pair(seed=65, rekey_every_messages=every, rekey_every_ticks=WEEK_TICKS)
        # oracle: the acknowledgement already used alice's key once, at tick 0
        expected, count, born, now = [], 1, 0, 0
        for i, gap in enumerate(gaps):
            now += gap
            if count >= every or now - born >= WEEK_TICKS:
                expected.append(i)
                count, born = 0, now
            count += 1
            pair.now = now
            pair.send("alice", b"%d" % i)
        assert [at for _, at in pair.alice.sending_rotations] == expected
        assert pair.alice.rekey_count == len(expected)
        order = list(range(len(gaps)))
        random.Random(len(gaps)).shuffle(order)
        sent = pair.sent[1:]
        for i in order:
            assert pair.deliver("bob", sent[i][1]) == b"%d" % i

    def test_rekey_requires_rng(self):
        pair = open_pair(seed=64, rekey_every_messages=1)
        pair.send("alice", b"first")
        with pytest.raises(RatchetError):
            ratchet_encrypt(TOY, pair.alice, b"second", None)


class TestSerialization:
    @pytest.mark.parametrize("every", [None, 2])
    def test_round_trip(self, every):
        pair = open_pair(seed=70, rekey_every_messages=every)
        envs = one_way(pair, 6)
        pair.deliver("bob", envs[4])
        for state in (pair.alice, pair.bob):
            assert SessionState.from_dict(state.to_dict()) == state
        restored = SessionState.from_dict(pair.bob.to_dict())
        pair.bob = restored
        assert pair.deliver("bob", envs[1]) == b"m1"
