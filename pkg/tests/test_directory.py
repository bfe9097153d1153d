import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tomen.crypto import gen_identity
from tomen.directory import (
    Consensus,
    Directory,
    DirectoryClient,
    DirectoryServer,
    DirectoryUnreachable,
    FrameReader,
    InsufficientRelaysError,
    NoEligibleExitError,
    NotFoundError,
    PathConstraints,
    RelayDescriptor,
    ValidationError,
    encode_frame,
    select_path,
)
from tomen.net import LogicalClock, Simulator


# recorded once from a seeded run over consensus(10); a change here changes every seeded path
FROZEN_SEED_7 = ["10.0.0.3:9001", "10.0.0.7:9001", "10.0.0.8:9001"]


def descriptor(i: int, policy=frozenset({443}), address=None, bandwidth=1000) -> RelayDescriptor:
    pub = gen_identity(random.Random(f"dir-{i}")).public
    return RelayDescriptor.for_identity(pub, address or f"10.0.0.{i + 1}:9001", policy, bandwidth)


def consensus(n: int, exits: int | None = None) -> Consensus:
    exits = n if exits is None else exits
    return Consensus(0.0, tuple(descriptor(i, frozenset({443}) if i < exits else None) for i in range(n)))


@pytest.fixture
def clock():
    return LogicalClock(1000.0)


@pytest.fixture
def directory(clock):
    return Directory(clock)


class TestPublish:
    def test_publish_then_fetch(self, directory):
        d = descriptor(0)
        directory.publish(d)
        (got,) = directory.fetch_consensus().descriptors
        assert got.relay_id == d.relay_id and got.address == d.address

    def test_fingerprint_mismatch_rejected(self, directory):
        d = descriptor(0)
        forged = RelayDescriptor(descriptor(1).relay_id, d.address, d.identity_pubkey)
        with pytest.raises(ValidationError):
            directory.publish(forged)

    def test_republish_keeps_first_seen(self, directory, clock):
        directory.publish(descriptor(0))
        clock.advance(50)
        directory.publish(descriptor(0, address="10.0.0.99:9001"))
        (got,) = directory.fetch_consensus().descriptors
        assert got.address == "10.0.0.99:9001"
        assert got.first_seen == 1000.0
        assert got.last_heartbeat == 1050.0

    def test_heartbeat_advances(self, directory, clock):
        d = descriptor(0)
        directory.publish(d)
        clock.advance(30)
        directory.heartbeat(d.relay_id)
        assert directory.fetch_consensus().descriptors[0].last_heartbeat == 1030.0

    def test_heartbeat_unknown(self, directory):
        with pytest.raises(NotFoundError):
            directory.heartbeat("00" * 20)


class TestLiveness:
    def test_empty(self, directory):
        assert directory.fetch_consensus().descriptors == ()

    def test_three_live(self, directory):
        for i in range(3):
            directory.publish(descriptor(i))
        assert len(directory.fetch_consensus().descriptors) == 3

    def test_silent_relay_drops_out(self, directory, clock):
        d = descriptor(0)
        directory.publish(d)
        clock.advance(120)
        assert len(directory.fetch_consensus().descriptors) == 1
        clock.advance(0.001)
        assert directory.fetch_consensus().descriptors == ()

    def test_five_published_two_stale(self, directory, clock):
        for i in range(5):
            directory.publish(descriptor(i))
        clock.advance(100)
        for i in range(3):
            directory.heartbeat(descriptor(i).relay_id)
        clock.advance(60)
        live = {d.relay_id for d in directory.fetch_consensus().descriptors}
        assert live == {descriptor(i).relay_id for i in range(3)}

    @given(st.lists(st.tuples(st.integers(0, 7), st.floats(0, 300)), max_size=30))
    def test_consensus_never_stale(self, steps):
        clock = LogicalClock()
        directory = Directory(clock)
        for i, dt in steps:
            clock.advance(dt)
            directory.publish(descriptor(i))
            c = directory.fetch_consensus()
            assert all(c.issued_at - d.last_heartbeat <= 120 for d in c.descriptors)
            assert len({d.relay_id for d in c.descriptors}) == len(c.descriptors)
            assert all(d.last_heartbeat >= d.first_seen for d in c.descriptors)


class TestWire:
    def test_descriptor_json_field_names(self):
        d = descriptor(3, frozenset({80, 443}))
        j = d.to_json()
        assert set(j) == {"relay_id", "address", "identity_pubkey", "egress_policy", "bandwidth",
                          "first_seen", "last_heartbeat"}
        assert j["egress_policy"] == [80, 443]
        assert RelayDescriptor.from_json(j) == d

    def test_frame_reader_splits(self):
        data = encode_frame({"verb": "fetch"}) + encode_frame({"verb": "heartbeat", "relay_id": "x"})
        reader = FrameReader()
        assert reader.feed(data[:3]) == []
        assert reader.feed(data[3:]) == [{"verb": "fetch"}, {"verb": "heartbeat", "relay_id": "x"}]

    @pytest.mark.parametrize("msg,error", [
        ({"verb": "dance"}, "bad-verb"),
        ({"verb": "publish"}, "malformed"),
        ({"verb": "heartbeat", "relay_id": "ab"}, "not-found"),
    ])
    def test_error_responses(self, directory, msg, error):
        resp = directory.handle(msg)
        assert resp["status"] == "error" and resp["error"] == error

    def test_over_simulated_network(self):
        sim = Simulator(1)
        DirectoryServer(sim, sim.register("dir", "10.9.0.1"), "10.9.0.1:7000")
        client = DirectoryClient(sim, sim.register("c", "10.0.0.1"), "10.9.0.1:7000")
        client.publish(descriptor(0))
        client.heartbeat(descriptor(0).relay_id)
        assert [d.relay_id for d in client.fetch_consensus().descriptors] == [descriptor(0).relay_id]
        with pytest.raises(NotFoundError):
            client.heartbeat("ff" * 20)

    def test_unreachable(self):
        sim = Simulator(1)
        client = DirectoryClient(sim, sim.register("c", "10.0.0.1"), "10.9.0.1:7000")
        with pytest.raises(DirectoryUnreachable):
            client.fetch_consensus()


class TestPathSelection:
    def test_exactly_three(self):
        c = consensus(3)
        path = select_path(c, PathConstraints(443), random.Random(0))
        assert {d.relay_id for d in path} == {d.relay_id for d in c.descriptors}

    def test_no_exit(self):
        with pytest.raises(NoEligibleExitError):
            select_path(consensus(3, exits=0), PathConstraints(443), random.Random(0))

    def test_port_not_allowed(self):
        with pytest.raises(NoEligibleExitError):
            select_path(consensus(5), PathConstraints(80), random.Random(0))

    def test_too_few(self):
        with pytest.raises(InsufficientRelaysError):
            select_path(consensus(2), PathConstraints(443), random.Random(0))

    def test_port_range(self):
        with pytest.raises(ValueError):
            PathConstraints(0)
        with pytest.raises(ValueError):
            PathConstraints(65536)

    def test_seed_7_regression(self):
        c = consensus(10)
        ids = [d.relay_id for d in select_path(c, PathConstraints(443), random.Random(7))]
        again = [d.relay_id for d in select_path(c, PathConstraints(443), random.Random(7))]
        assert ids == again
        by_id = {d.relay_id: d.address for d in c.descriptors}
        assert [by_id[i] for i in ids] == FROZEN_SEED_7

    @settings(max_examples=300, deadline=None)
    @given(st.integers(3, 12), st.integers(1, 12), st.integers(0, 2**32))
    def test_distinct_and_exit_allowed(self, n, exits, seed):
        exits = min(exits, n)
        guard, middle, exit_ = select_path(consensus(n, exits), PathConstraints(443), random.Random(seed))
        assert len({guard.relay_id, middle.relay_id, exit_.relay_id}) == 3
        assert exit_.allows_exit(443)

    def test_uniform_over_roles(self):
        c = consensus(10)
        counts = {role: Counter() for role in range(3)}
        rng = random.Random(2024)
        trials = 10_000
        for _ in range(trials):
            for role, d in enumerate(select_path(c, PathConstraints(443), rng)):
                counts[role][d.relay_id] += 1
        for role in range(3):
            for d in c.descriptors:
                assert abs(counts[role][d.relay_id] / trials - 0.1) < 0.05

    def test_weighted_prefers_bandwidth(self):
        descs = tuple(descriptor(i, bandwidth=100 if i else 100_000) for i in range(5))
        rng = random.Random(3)
        exits = Counter(select_path(Consensus(0, descs), PathConstraints(443), rng, weighted=True)[2].relay_id
                        for _ in range(2000))
        assert exits.most_common(1)[0][0] == descs[0].relay_id

