import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netkit import build_net
from tomen.gossip import (
    MAX_PAYLOAD,
    GossipNode,
    MalformedTransaction,
    Transaction,
    TxFramer,
    broadcast_via_circuit,
    parse_tx,
    serialize_tx,
    submit_direct,
)
from tomen.harness import gossip_edges
from tomen.net import Simulator

COFFEE = Transaction.from_payload(b"coffee")


def overlay(edges, n, seed=0):
    sim = Simulator(seed)
    nodes = []
    for i in range(n):
        host = f"10.1.0.{i + 1}"
        node = GossipNode(sim, sim.register(f"g{i}", host), f"g{i}", f"{host}:8333", f"{host}:8334")
        node.start()
        nodes.append(node)
    for a, b in edges:
        nodes[a].add_peer(nodes[b].peer_addr)
        nodes[b].add_peer(nodes[a].peer_addr)
    client = sim.register("client", "192.168.0.1", observe=False)
    return sim, nodes, client


class TestWire:
    def test_coffee_layout(self):
        raw = serialize_tx(COFFEE)
        assert raw[:2] == b"\x00\x06"
        assert raw[2:8] == b"coffee"
        assert raw[8:] == hashlib.sha256(b"coffee").digest()
        assert parse_tx(raw) == COFFEE

    def test_flipped_payload_bit(self):
        raw = bytearray(serialize_tx(COFFEE))
        raw[3] ^= 0x01
        with pytest.raises(MalformedTransaction):
            parse_tx(bytes(raw))

    @pytest.mark.parametrize("raw", [b"", b"\x00", b"\x00\x00" + bytes(32), b"\x01\x91" + bytes(433),
                                     serialize_tx(COFFEE)[:-1], serialize_tx(COFFEE) + b"x"])
    def test_malformed(self, raw):
        with pytest.raises(MalformedTransaction):
            parse_tx(raw)

    def test_payload_bounds(self):
        Transaction.from_payload(bytes(MAX_PAYLOAD))
        with pytest.raises(MalformedTransaction):
            Transaction.from_payload(bytes(MAX_PAYLOAD + 1))
        with pytest.raises(MalformedTransaction):
            Transaction.from_payload(b"")

    @settings(max_examples=1000, deadline=None)
    @given(st.binary(min_size=1, max_size=MAX_PAYLOAD))
    def test_roundtrip(self, payload):
        tx = Transaction.from_payload(payload)
        assert tx.txid == hashlib.sha256(payload).digest()
        assert parse_tx(serialize_tx(tx)) == tx

    @given(st.lists(st.binary(min_size=1, max_size=60), min_size=1, max_size=5), st.integers(1, 50))
    def test_framer_any_split(self, payloads, step):
        stream = b"".join(serialize_tx(Transaction.from_payload(p)) for p in payloads)
        framer, frames = TxFramer(), []
        for i in range(0, len(stream), step):
            frames += framer.feed(stream[i:i + step])
        assert [parse_tx(f).payload for f in frames] == payloads


class TestSubmit:
    def test_fresh_ack(self):
        sim, (node,), client = overlay([], 1)
        resp = submit_direct(sim, client, node.submit_addr, COFFEE)
        assert resp == {"status": "ack", "txid": COFFEE.hex_id, "known": False}
        assert COFFEE.txid in node.mempool

    def test_duplicate_known_and_flooded_once(self):
        sim, nodes, client = overlay([(0, 1)], 2)
        submit_direct(sim, client, nodes[0].submit_addr, COFFEE)
        resp = submit_direct(sim, client, nodes[0].submit_addr, COFFEE)
        sim.run_until_quiescent()
        assert resp["known"] is True
        assert nodes[0].metrics["gossip_sent"] == 1

    def test_malformed_rejected(self):
        sim, (node,), client = overlay([], 1)
        box = []
        conn = sim.connect(client, node.submit_addr, box.append, lambda: None)
        conn.send(b"\x00\x02ab" + bytes(32))
        sim.run_until_quiescent()
        assert b'"status": "reject"' in b"".join(box)
        assert node.mempool == {}


class TestFlooding:
    def test_line(self):
        sim, nodes, client = overlay([(0, 1), (1, 2)], 3)
        submit_direct(sim, client, nodes[0].submit_addr, COFFEE)
        sim.run_until_quiescent()
        assert COFFEE.txid in nodes[2].mempool

    def test_cycle_terminates_once_per_link(self):
        sim, nodes, client = overlay([(0, 1), (1, 2), (2, 3), (3, 0)], 4)
        txs = [Transaction.from_payload(bytes([i + 1])) for i in range(3)]
        for i, tx in enumerate(txs):
            submit_direct(sim, client, nodes[i].submit_addr, tx)
        sim.run_until_quiescent()
        for node in nodes:
            assert set(node.mempool) == {tx.txid for tx in txs}
            assert max(node.sent.values()) == 1

    def test_known_tx_from_peer_sends_nothing(self):
        sim, nodes, client = overlay([(0, 1)], 2)
        submit_direct(sim, client, nodes[0].submit_addr, COFFEE)
        sim.run_until_quiescent()
        before = nodes[1].metrics["gossip_sent"]
        nodes[1].on_gossip("10.1.0.1", serialize_tx(COFFEE))
        sim.run_until_quiescent()
        assert nodes[1].metrics["gossip_sent"] == before
        assert nodes[1].metrics["duplicate_gossip"] >= 1

    def test_malformed_gossip_dropped(self):
        sim, nodes, _ = overlay([(0, 1)], 2)
        nodes[0].on_gossip("10.1.0.2", b"\x00\x01x" + bytes(32))
        assert nodes[0].metrics["malformed_gossip"] == 1 and nodes[0].mempool == {}

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 20), st.integers(0, 2**32))
    def test_random_graph_complete_and_efficient(self, n, seed):
        sim, nodes, client = overlay(gossip_edges("random", n, seed), n, seed)
        submit_direct(sim, client, nodes[seed % n].submit_addr, COFFEE)
        sim.run_until_quiescent()
        assert all(COFFEE.txid in node.mempool for node in nodes)
        assert all(max(node.sent.values(), default=0) <= 1 for node in nodes)
        for node in nodes:
            for txid, tx in node.mempool.items():
                assert hashlib.sha256(tx.payload).digest() == txid


class TestVantage:
    def test_via_circuit_node_sees_exit(self):
        net = build_net(n_relays=3, gossip=3)
        for a, b in [(0, 1), (1, 2)]:
            net.gossip[a].add_peer(net.gossip[b].peer_addr)
            net.gossip[b].add_peer(net.gossip[a].peer_addr)
        target = net.gossip[0].submit_addr
        ack = broadcast_via_circuit(net.proxy, target, COFFEE)
        net.sim.run_until_quiescent()
        assert ack["status"] == "ack" and ack["txid"] == COFFEE.hex_id
        assert all(COFFEE.txid in g.mempool for g in net.gossip)
        (entry,) = net.gossip[0].connection_log
        (circ,) = net.proxy.circuits
        assert entry["peer_addr"].split(":")[0] == circ.path[-1].address.split(":")[0]
        assert not entry["peer_addr"].startswith("192.168.")

    def test_direct_node_sees_client(self):
        sim, (node,), client = overlay([], 1)
        submit_direct(sim, client, node.submit_addr, COFFEE)
        (entry,) = node.connection_log
        assert entry["peer_addr"].split(":")[0] == "192.168.0.1"
