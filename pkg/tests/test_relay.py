import random

import pytest

from netkit import ECHO_BYTES, ECHO_IP, build_net, relay_by_address
from tomen.cellwire import Cell, CellReader, Command, RelayCommand, RelayPayload, decode_cell, encode_cell
from tomen.client import CircuitBuildError, StreamError
from tomen.crypto import client_create_payload, client_finish, gen_identity, gen_keypair
from tomen.directory import PathConstraints, select_path
from tomen.relay import END_POLICY, RelayConfig


def raw_link(net, relay):
    """A bare link to ``relay``; returns (conn, list of decoded cells received)."""
    got, reader = [], CellReader()
    conn = net.sim.connect(net.owner, relay.address,
                           lambda b: got.extend(decode_cell(c) for c in reader.feed(b)), lambda: None)
    return conn, got


def circuit(net, port=7000):
    return net.proxy.build_circuit(PathConstraints(port))


def roles(net, circ):
    return [relay_by_address(net, d.address) for d in circ.path]


class TestCreate:
    def test_created_passes_client_finish(self):
        net = build_net()
        relay = net.relays[0]
        conn, got = raw_link(net, relay)
        eph = gen_keypair(random.Random(1))
        conn.send(encode_cell(Cell(5, Command.CREATE, client_create_payload(eph))))
        net.sim.run_until_quiescent()
        (reply,) = got
        assert reply.command == Command.CREATED and reply.circuit_id == 5
        client_finish(eph, reply.payload, relay.config.identity.public)

    def test_reused_circuit_id_destroyed(self):
        net = build_net()
        conn, got = raw_link(net, net.relays[0])
        for seed in (1, 2):
            conn.send(encode_cell(Cell(5, Command.CREATE, gen_keypair(random.Random(seed)).public)))
        net.sim.run_until_quiescent()
        assert [c.command for c in got] == [Command.CREATED, Command.DESTROY]

    def test_malformed_handshake_destroyed(self):
        net = build_net()
        conn, got = raw_link(net, net.relays[0])
        conn.send(encode_cell(Cell(5, Command.CREATE, b"short")))
        net.sim.run_until_quiescent()
        assert [c.command for c in got] == [Command.DESTROY]

    def test_two_circuits_independent(self):
        net = build_net()
        relay = net.relays[0]
        conn, got = raw_link(net, relay)
        for circ in (5, 6):
            conn.send(encode_cell(Cell(circ, Command.CREATE, gen_keypair(random.Random(circ)).public)))
        net.sim.run_until_quiescent()
        assert len(relay.inbound) == 2
        a, b = relay.inbound.values()
        assert a.hop_keys.forward_key != b.hop_keys.forward_key

    def test_destroy_for_unknown_circuit_ignored(self):
        net = build_net()
        relay = net.relays[0]
        conn, got = raw_link(net, relay)
        conn.send(encode_cell(Cell(77, Command.DESTROY)))
        net.sim.run_until_quiescent()
        assert got == [] and relay.metrics["unknown_circuit"] == 1


class TestForwarding:
    def test_middle_never_dispatches_extend_for_exit(self):
        net = build_net()
        circ = circuit(net)
        guard, middle, exit_ = roles(net, circ)
        assert guard.metrics["recognized"] == 1  # the EXTEND to the middle
        assert middle.metrics["recognized"] == 1  # the EXTEND to the exit
        assert exit_.metrics["recognized"] == 0
        assert guard.metrics["forwarded"] == 1

    def test_exit_dispatches_data(self):
        net = build_net()
        circ = circuit(net)
        stream = net.proxy.open_stream(ECHO_BYTES, circ)
        net.proxy.send(stream, b"ping")
        assert net.proxy.recv_exactly(stream, 4) == b"ping"
        _, middle, exit_ = roles(net, circ)
        assert exit_.metrics["recognized"] == 2  # BEGIN and DATA
        assert middle.metrics["recognized"] == 1

    def test_single_peel_per_cell(self):
        net = build_net()
        circ = circuit(net)
        stream = net.proxy.open_stream(ECHO_BYTES, circ)
        net.proxy.send(stream, bytes(2000))
        net.proxy.recv_exactly(stream, 2000)
        for relay in roles(net, circ):
            relay_cells_in = sum(1 for r in net.sim.records
                                 if r.observer == relay.owner.name and r.extra.get("command") == "RELAY")
            assert relay_cells_in > 0
            assert relay.metrics["layer_ops"] == relay_cells_in + relay.metrics["originated"]

    def test_corrupted_digest_destroys_circuit(self):
        net = build_net()
        circ = circuit(net)
        exit_ = roles(net, circ)[2]
        cell = net.proxy.encrypt_outbound(circ, RelayPayload(RelayCommand.DATA, b"x", 1))
        # flip a byte of the exit's digest field under all three layers
        tampered = bytearray(cell.payload)
        tampered[5] ^= 0x40
        circ.conn.send(encode_cell(Cell(circ.circuit_id, Command.RELAY, bytes(tampered))))
        net.sim.run_until_quiescent()
        assert exit_.metrics["unrecognized_at_end"] == 1
        assert not any(r.inbound for r in net.relays)
        assert circ.destroyed

    def test_tables_consistent_and_cleared(self):
        net = build_net(n_relays=5)
        circs = [circuit(net) for _ in range(4)]
        for relay in net.relays:
            assert relay.check_tables() == []
        for c in circs:
            net.proxy.destroy_circuit(c)
        net.sim.run_until_quiescent()
        for relay in net.relays:
            assert relay.check_tables() == []
            assert relay.inbound == {} and relay.outbound == {}


class TestExtend:
    def test_extend_to_dead_address_tears_down(self):
        net = build_net()
        # drop a relay that will appear in the path, after the consensus is fetched
        consensus = net.proxy.fetch_consensus()
        path = select_path(consensus, PathConstraints(7000), random.Random(5))
        relay_by_address(net, path[1].address).stop()
        with pytest.raises(CircuitBuildError) as err:
            net.proxy._build(path)
        assert err.value.hop_index == 1

    def test_second_extend_is_protocol_error(self):
        net = build_net()
        circ = circuit(net)
        guard = roles(net, circ)[0]
        rp = RelayPayload(RelayCommand.EXTEND, b"\x0d10.0.0.3:9001" + bytes(32))
        net.proxy._send_cell(circ, net.proxy.encrypt_outbound(circ, rp, hop_index=0))
        net.sim.run_until_quiescent()
        assert guard.metrics["protocol_errors"] == 1
        assert circ.destroyed


class TestExit:
    def test_begin_allowed(self):
        net = build_net()
        stream = net.proxy.open_stream(ECHO_BYTES, circuit(net))
        assert stream.state == "open"

    def test_begin_refused(self):
        net = build_net(n_relays=4, n_exits=1)
        circ = circuit(net)
        with pytest.raises(StreamError) as err:
            net.proxy.open_stream("10.2.0.9:22", circ)
        assert err.value.reason == END_POLICY

    def test_begin_unreachable(self):
        net = build_net()
        with pytest.raises(StreamError) as err:
            net.proxy.open_stream("10.2.0.9:7000", circuit(net))
        assert err.value.reason == "unreachable"

    def test_long_response_chunked(self):
        net = build_net()
        circ = circuit(net)
        stream = net.proxy.open_stream(ECHO_BYTES, circ)
        payload = random.Random(9).randbytes(2000)
        net.proxy.send(stream, payload)
        assert net.proxy.recv_exactly(stream, 2000) == payload
        exit_ = roles(net, circ)[2]
        data_back = [r for r in net.sim.records if r.observer == "client"]
        assert exit_.metrics["cells_out"] >= 5 + 2  # DATA cells plus CREATED and CONNECTED
        assert data_back == []  # clients keep no records

    def test_teardown_closes_external_stream(self):
        net = build_net()
        circ = circuit(net)
        net.proxy.open_stream(ECHO_BYTES, circ)
        exit_ = roles(net, circ)[2]
        (entry,) = exit_.inbound.values()
        (ext,) = entry.exit_streams.values()
        net.proxy.destroy_circuit(circ)
        net.sim.run_until_quiescent()
        assert ext.closed

    def test_echo_sees_exit_host(self):
        net = build_net()
        circ = circuit(net)
        stream = net.proxy.open_stream(ECHO_IP, circ)
        net.proxy.send(stream, b"?")
        seen = net.proxy.recv_until(stream, b"\n").decode().strip()
        assert seen.split(":")[0] == circ.path[-1].address.split(":")[0]


class TestConfig:
    def test_heartbeat_must_beat_liveness(self):
        with pytest.raises(ValueError):
            RelayConfig(gen_identity(random.Random(1)), "10.0.0.1:9001", heartbeat_interval=120)

    def test_heartbeats_keep_relay_listed(self):
        net = build_net()
        net.sim.advance(600)
        assert len(net.proxy.fetch_consensus().descriptors) == 3

    def test_stopped_relay_ages_out(self):
        net = build_net(n_relays=4)
        net.relays[3].stop()
        net.sim.advance(200)
        assert len(net.proxy.fetch_consensus().descriptors) == 3
