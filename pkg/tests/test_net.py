import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tomen.net import LiveNetwork, NetworkError, Simulator
from tomen.net.sim import TICK_SECONDS


def pair(sim, kind="stream"):
    got = []
    server = sim.register("server", "10.0.0.1")
    client = sim.register("client", "10.0.0.2")
    sim.listen("10.0.0.1:80", server, lambda conn: (lambda b: got.append((conn, b)), lambda: None), kind)
    conn = sim.connect(client, "10.0.0.1:80", lambda b: None, lambda: None)
    return conn, got


class TestSimulator:
    def test_one_tick_per_delivery(self):
        sim = Simulator(1)
        conn, got = pair(sim)
        conn.send(b"x")
        sim.run_until_quiescent()
        assert sim.tick == 1 and got[0][1] == b"x"
        assert sim.clock.now() == pytest.approx(TICK_SECONDS)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.binary(min_size=1, max_size=8), min_size=1, max_size=20), st.integers(0, 1000))
    def test_connection_fifo(self, msgs, seed):
        sim = Simulator(seed)
        conn, got = pair(sim)
        for m in msgs:
            conn.send(m)
        sim.run_until_quiescent()
        assert [b for _, b in got] == msgs

    def test_refused(self):
        sim = Simulator()
        with pytest.raises(NetworkError):
            sim.connect(sim.register("c", "10.0.0.2"), "10.0.0.1:80", lambda b: None, lambda: None)

    def test_address_in_use(self):
        sim = Simulator()
        pair(sim)
        with pytest.raises(NetworkError):
            sim.listen("10.0.0.1:80", sim.register("other", "10.0.0.1"), lambda c: (None, None))

    def test_records_and_taps(self):
        sim = Simulator()
        conn, _ = pair(sim)
        conn.send(b"abc")
        sim.run_until_quiescent()
        observers = [r.observer for r in sim.records]
        assert observers == ["server", "tap:10.0.0.1|10.0.0.2"]
        assert all(r.visible_plaintext_digest for r in sim.records)

    def test_link_kind_has_no_plaintext(self):
        sim = Simulator()
        conn, _ = pair(sim, kind="link")
        conn.send(b"abc")
        sim.run_until_quiescent()
        assert all(r.visible_plaintext_digest is None for r in sim.records)

    def test_unobserved_owner_keeps_no_record(self):
        sim = Simulator()
        server = sim.register("server", "10.0.0.1", observe=False)
        sim.listen("10.0.0.1:80", server, lambda conn: (lambda b: None, lambda: None))
        conn = sim.connect(sim.register("c", "10.0.0.2"), "10.0.0.1:80", lambda b: None, lambda: None)
        conn.send(b"x")
        sim.run_until_quiescent()
        assert [r.role for r in sim.records] == ["tap"]

    def test_timer_fires_on_advance(self):
        sim = Simulator()
        owner = sim.register("o", "10.0.0.9")
        fired = []
        sim.call_later(owner, 30, lambda: fired.append(sim.clock.now()))
        sim.advance(29.999)
        assert fired == []
        sim.advance(0.001)
        assert fired == [pytest.approx(30)]

    def test_close_propagates(self):
        sim = Simulator()
        closed = []
        server = sim.register("server", "10.0.0.1")
        sim.listen("10.0.0.1:80", server, lambda conn: (lambda b: None, lambda: closed.append(1)))
        conn = sim.connect(sim.register("c", "10.0.0.2"), "10.0.0.1:80", lambda b: None, lambda: None)
        conn.close()
        sim.run_until_quiescent()
        assert closed == [1]
        with pytest.raises(NetworkError):
            conn.send(b"x")


class TestLive:
    def test_roundtrip_over_tcp(self):
        net = LiveNetwork()
        try:
            server = net.register("server", "127.0.0.1")
            addr = net.listen("127.0.0.1:0", server,
                              lambda conn: (lambda b: conn.send(b.upper()), lambda: None))
            client = net.register("client", "127.0.0.1")
            buf = bytearray()
            got = threading.Event()

            def on_data(b):
                buf.extend(b)
                with client.cond:
                    client.cond.notify_all()

            conn = net.connect(client, addr, on_data, got.set)
            conn.send(b"hello")
            assert net.run_until(client, lambda: bytes(buf) == b"HELLO", 5)
        finally:
            net.close()

    def test_connect_refused(self):
        net = LiveNetwork()
        try:
            with pytest.raises(NetworkError):
                net.connect(net.register("c", "127.0.0.1"), "127.0.0.1:1", lambda b: None, lambda: None)
        finally:
            net.close()

    def test_bind_conflict(self):
        net = LiveNetwork()
        try:
            owner = net.register("s", "127.0.0.1")
            addr = net.listen("127.0.0.1:0", owner, lambda c: (lambda b: None, lambda: None))
            with pytest.raises(NetworkError):
                net.listen(addr, owner, lambda c: (lambda b: None, lambda: None))
        finally:
            net.close()
