"""Relay node: answers handshakes, peels or adds one layer per cell, forwards, and exits."""

from __future__ import annotations

import hashlib
import logging
import random
from collections import Counter
from dataclasses import dataclass, field

from tomen.cellwire import (
    CELL_PAYLOAD_SIZE,
    Cell,
    CellError,
    CellReader,
    Command,
    RelayCommand,
    RelayPayload,
    chunk,
    decode_cell,
    decode_extend,
    decode_relay_payload,
    encode_cell,
    encode_relay_payload,
    peek_recognized,
)
from tomen.crypto import (
    CounterExhaustedError,
    HandshakeError,
    HopKeys,
    KeyPair,
    LayerCipherState,
    apply_layer,
    fingerprint,
    relay_respond,
    update_and_seal_digest,
    verify_digest,
)
from tomen.directory import LIVENESS_WINDOW, DirectoryClient, RelayDescriptor
from tomen.net.base import NetworkError, Owner, split_addr

log = logging.getLogger(__name__)

END_DONE = "done"
END_POLICY = "exit policy refused"
END_UNREACHABLE = "unreachable"
END_NOT_EXIT = "not an exit"


@dataclass
class RelayConfig:
    identity: KeyPair
    address: str
    egress_policy: frozenset[int] | None = None
    directory: str | None = None
    heartbeat_interval: float = 30.0
    bandwidth: int = 1_000_000

    def __post_init__(self):
        if self.heartbeat_interval >= LIVENESS_WINDOW:
            raise ValueError("heartbeat interval must be shorter than the directory liveness window")
        if self.egress_policy is not None:
            self.egress_policy = frozenset(self.egress_policy)


@dataclass(eq=False)
class CircuitEntry:
    inbound: tuple  # (conn, circuit_id)
    hop_keys: HopKeys
    forward: LayerCipherState
    backward: LayerCipherState
    outbound: tuple | None = None
    extending: bool = False
    exit_streams: dict = field(default_factory=dict)


class Relay:
    def __init__(self, net, owner: Owner, config: RelayConfig, rng: random.Random | None = None):
        self.net = net
        self.owner = owner
        self.config = config
        self.rng = rng or random.SystemRandom()
        self.relay_id = fingerprint(config.identity.public)
        self.address = config.address
        self.inbound: dict[tuple[str, int], CircuitEntry] = {}
        self.outbound: dict[tuple[str, int], CircuitEntry] = {}
        self.metrics: Counter = Counter()
        self.events: list[dict] = []  # circuit bookkeeping, read by the harness
        self.running = False

    # lifecycle ----------------------------------------------------------

    def descriptor(self) -> RelayDescriptor:
        return RelayDescriptor.for_identity(
            self.config.identity.public, self.address, self.config.egress_policy,
            self.config.bandwidth,
        )

    def start(self, publish: bool = True) -> None:
        bound = self.net.listen(self.config.address, self.owner, self._accept, kind="link")
        if bound:
            self.address = bound
        self.running = True
        if publish and self.config.directory:
            self.publish()

    def publish(self) -> None:
        """Publish the descriptor (blocking) and start heartbeats."""
        with self.owner.cond:
            DirectoryClient(self.net, self.owner, self.config.directory).publish(self.descriptor())
        self.net.call_later(self.owner, self.config.heartbeat_interval, self._heartbeat)

    def stop(self) -> None:
        """Stop accepting links and tear down every circuit (simulates the relay dying)."""
        self.running = False
        self.net.unlisten(self.address)
        with self.owner.cond:
            for entry in list(self.inbound.values()):
                self._teardown(entry, notify_in=False, notify_out=False)
                entry.inbound[0].close()

    def _heartbeat(self) -> None:
        if not self.running:
            return
        client = DirectoryClient(self.net, self.owner, self.config.directory)

        def done(resp):
            if resp is None:
                self.metrics["heartbeat_failed"] += 1
            elif resp.get("error") == "not-found":
                client.request_async({"verb": "publish", "descriptor": self.descriptor().to_json()},
                                     lambda r: None)

        try:
            client.request_async({"verb": "heartbeat", "relay_id": self.relay_id}, done)
        except NetworkError:
            self.metrics["heartbeat_failed"] += 1
        self.net.call_later(self.owner, self.config.heartbeat_interval, self._heartbeat)

    # link plumbing --------------------------------------------------------

    def _accept(self, conn):
        return self._link_handlers(conn)

    def _link_handlers(self, conn):
        reader = CellReader()

        def on_data(data: bytes) -> None:
            self.metrics["bytes_in"] += len(data)
            for raw in reader.feed(data):
                try:
                    cell = decode_cell(raw)
                except CellError:
                    self.metrics["malformed_cells"] += 1
                    continue
                self.handle_cell(conn, cell)

        return on_data, lambda: self._link_closed(conn)

    def _send(self, conn, cell: Cell) -> None:
        if conn.closed:
            self.metrics["send_on_closed"] += 1
            return
        data = encode_cell(cell)
        self.metrics["bytes_out"] += len(data)
        self.metrics["cells_out"] += 1
        try:
            conn.send(data)
        except NetworkError:
            self.metrics["send_failed"] += 1

    def _annotate(self, **fields) -> None:
        self.net.annotate(self.owner, **fields)

    def _link_closed(self, conn) -> None:
        for (cid, circ), entry in list(self.inbound.items()):
            if cid == conn.conn_id:
                self._teardown(entry, notify_in=False, notify_out=True)
        for (cid, circ), entry in list(self.outbound.items()):
            if cid == conn.conn_id:
                self._teardown(entry, notify_in=True, notify_out=False)

    # cell dispatch --------------------------------------------------------

    def handle_cell(self, conn, cell: Cell) -> None:
        self.metrics["cells_in"] += 1
        key = (conn.conn_id, cell.circuit_id)
        self._annotate(circ=cell.circuit_id, command=cell.command.name)
        if cell.command == Command.CREATE:
            self.handle_create(conn, cell)
        elif key in self.inbound:
            entry = self.inbound[key]
            if cell.command == Command.RELAY:
                self.handle_relay_forward(entry, cell)
            elif cell.command == Command.DESTROY:
                self._annotate(action="destroy")
                self.handle_destroy(entry, from_client_side=True)
            else:
                self.metrics["protocol_errors"] += 1
        elif key in self.outbound:
            entry = self.outbound[key]
            if cell.command == Command.CREATED:
                self._handle_created(entry, cell)
            elif cell.command == Command.RELAY:
                self.handle_backward(entry, cell.payload)
            elif cell.command == Command.DESTROY:
                self._annotate(action="destroy")
                self.handle_destroy(entry, from_client_side=False)
            else:
                self.metrics["protocol_errors"] += 1
        else:
            if cell.command != Command.DESTROY:
                log.debug("%s: cell for unknown circuit %s", self.owner.name, key)
            self.metrics["unknown_circuit"] += 1
            self._annotate(action="drop")

    def handle_create(self, conn, cell: Cell) -> None:
        key = (conn.conn_id, cell.circuit_id)
        self._annotate(action="create")
        if key in self.inbound or key in self.outbound:
            self.metrics["duplicate_circuit"] += 1
            self._send(conn, Cell(cell.circuit_id, Command.DESTROY))
            return
        try:
            created, keys = relay_respond(cell.payload, self.config.identity, self.rng)
        except HandshakeError:
            self.metrics["handshake_failed"] += 1
            self._send(conn, Cell(cell.circuit_id, Command.DESTROY))
            return
        entry = CircuitEntry(
            inbound=(conn, cell.circuit_id),
            hop_keys=keys,
            forward=LayerCipherState(keys.forward_key),
            backward=LayerCipherState(keys.backward_key),
        )
        self.inbound[key] = entry
        self.events.append({"event": "create", "in_conn": conn.conn_id, "in_circ": cell.circuit_id})
        self._send(conn, Cell(cell.circuit_id, Command.CREATED, created))

    def _peel(self, state: LayerCipherState, payload: bytes) -> bytes:
        self.metrics["layer_ops"] += 1
        return apply_layer(state, payload.ljust(CELL_PAYLOAD_SIZE, b"\x00"))

    def handle_relay_forward(self, entry: CircuitEntry, cell: Cell) -> None:
        try:
            plain = self._peel(entry.forward, cell.payload)
        except CounterExhaustedError:
            self._teardown(entry, notify_in=True, notify_out=True)
            return
        rp = None
        if peek_recognized(plain) == 0:
            try:
                candidate = decode_relay_payload(plain)
            except CellError:
                candidate = None
            if candidate is not None and verify_digest(entry.hop_keys.forward_digest_state, candidate):
                rp = candidate
        if rp is not None:
            self.metrics["recognized"] += 1
            self._annotate(action="recognized", relay_command=rp.relay_command.name,
                           stream_id=rp.stream_id)
            self._dispatch(entry, rp)
            return
        if entry.outbound is None:
            # nothing further down the circuit could read it
            self.metrics["unrecognized_at_end"] += 1
            self._annotate(action="destroy")
            self._teardown(entry, notify_in=True, notify_out=False)
            return
        out_conn, out_circ = entry.outbound
        self.metrics["forwarded"] += 1
        self._annotate(action="forward", out_conn=out_conn.conn_id, out_circ=out_circ,
                       next_hop=out_conn.peer_addr)
        self._send(out_conn, Cell(out_circ, Command.RELAY, plain))

    def _dispatch(self, entry: CircuitEntry, rp: RelayPayload) -> None:
        cmd = rp.relay_command
        if cmd == RelayCommand.EXTEND:
            self.handle_extend(entry, rp.data)
        elif cmd == RelayCommand.BEGIN:
            self.handle_begin(entry, rp)
        elif cmd == RelayCommand.DATA:
            self.handle_data(entry, rp)
        elif cmd == RelayCommand.END:
            self.handle_end(entry, rp)
        else:
            self.metrics["protocol_errors"] += 1

    def send_backward(self, entry: CircuitEntry, rp: RelayPayload) -> None:
        """Originate a relay payload at this hop, sealed and layered toward the client."""
        sealed = update_and_seal_digest(entry.hop_keys.backward_digest_state, rp)
        self.metrics["originated"] += 1
        self.metrics["layer_ops"] += 1
        payload = apply_layer(entry.backward, encode_relay_payload(sealed))
        conn, circ = entry.inbound
        self._send(conn, Cell(circ, Command.RELAY, payload))

    def handle_backward(self, entry: CircuitEntry, payload: bytes) -> None:
        try:
            layered = self._peel(entry.backward, payload)
        except CounterExhaustedError:
            self._teardown(entry, notify_in=True, notify_out=True)
            return
        conn, circ = entry.inbound
        self._annotate(action="backward", out_conn=conn.conn_id, out_circ=circ,
                       next_hop=conn.peer_addr)
        self._send(conn, Cell(circ, Command.RELAY, layered))

    # extend -----------------------------------------------------------

    def handle_extend(self, entry: CircuitEntry, data: bytes) -> None:
        if entry.outbound is not None or entry.extending or entry.exit_streams:
            self.metrics["protocol_errors"] += 1
            self._teardown(entry, notify_in=True, notify_out=True)
            return
        try:
            addr, handshake = decode_extend(data)
            split_addr(addr)
        except (CellError, ValueError, UnicodeDecodeError):
            self.metrics["protocol_errors"] += 1
            self._teardown(entry, notify_in=True, notify_out=False)
            return
        handlers: list = []
        try:
            conn = self.net.connect(
                self.owner, addr, lambda b: handlers[0](b), lambda: handlers[1]()
            )
        except NetworkError:
            self.metrics["extend_failed"] += 1
            self._teardown(entry, notify_in=True, notify_out=False)
            return
        # no delivery can happen before we return: the owner's lock is held
        handlers.extend(self._link_handlers(conn))
        circ = self._fresh_circuit_id(conn)
        entry.outbound = (conn, circ)
        entry.extending = True
        self.outbound[(conn.conn_id, circ)] = entry
        in_conn, in_circ = entry.inbound
        self.events.append({"event": "extend", "in_conn": in_conn.conn_id, "in_circ": in_circ,
                            "out_conn": conn.conn_id, "out_circ": circ})
        self._send(conn, Cell(circ, Command.CREATE, handshake))

    def _fresh_circuit_id(self, conn) -> int:
        while True:
            circ = self.rng.randrange(1, 2**32)
            if (conn.conn_id, circ) not in self.outbound:
                return circ

    def _handle_created(self, entry: CircuitEntry, cell: Cell) -> None:
        if not entry.extending:
            self.metrics["protocol_errors"] += 1
            return
        entry.extending = False
        self._annotate(action="extended")
        self.send_backward(entry, RelayPayload(RelayCommand.EXTENDED, cell.payload))

    # exit role --------------------------------------------------------

    def _end(self, entry: CircuitEntry, stream_id: int, reason: str) -> None:
        self.send_backward(entry, RelayPayload(RelayCommand.END, reason.encode(), stream_id))

    def handle_begin(self, entry: CircuitEntry, rp: RelayPayload) -> None:
        sid = rp.stream_id
        if entry.outbound is not None:
            self._end(entry, sid, END_NOT_EXIT)
            return
        try:
            target = rp.data.decode("ascii")
            _, port = split_addr(target)
        except (UnicodeDecodeError, ValueError):
            self._end(entry, sid, END_UNREACHABLE)
            return
        policy = self.config.egress_policy
        if policy is None or port not in policy:
            self.metrics["policy_refused"] += 1
            self._end(entry, sid, END_POLICY)
            return
        if sid == 0 or sid in entry.exit_streams:
            self.metrics["protocol_errors"] += 1
            self._end(entry, sid, END_UNREACHABLE)
            return

        def on_data(data: bytes) -> None:
            if entry.exit_streams.get(sid) is not conn_box[0]:
                return
            for piece in chunk(data):
                self.send_backward(entry, RelayPayload(RelayCommand.DATA, piece, sid))

        def on_close() -> None:
            if entry.exit_streams.get(sid) is conn_box[0]:
                del entry.exit_streams[sid]
                self._end(entry, sid, END_DONE)

        conn_box: list = []
        try:
            conn = self.net.connect(self.owner, target, on_data, on_close)
        except NetworkError:
            self.metrics["exit_unreachable"] += 1
            self._end(entry, sid, END_UNREACHABLE)
            return
        conn_box.append(conn)
        entry.exit_streams[sid] = conn
        self.metrics["streams_opened"] += 1
        self.send_backward(entry, RelayPayload(RelayCommand.CONNECTED, b"", sid))

    def handle_data(self, entry: CircuitEntry, rp: RelayPayload) -> None:
        self._annotate(visible_plaintext_digest=hashlib.sha256(rp.data).hexdigest())
        conn = entry.exit_streams.get(rp.stream_id)
        if conn is None or conn.closed:
            self.metrics["data_unknown_stream"] += 1
            return
        try:
            conn.send(rp.data)
        except NetworkError:
            del entry.exit_streams[rp.stream_id]
            self._end(entry, rp.stream_id, END_UNREACHABLE)

    def handle_end(self, entry: CircuitEntry, rp: RelayPayload) -> None:
        conn = entry.exit_streams.pop(rp.stream_id, None)
        if conn is not None:
            conn.close()

    # teardown ---------------------------------------------------------

    def handle_destroy(self, entry: CircuitEntry, from_client_side: bool) -> None:
        self._teardown(entry, notify_in=not from_client_side, notify_out=from_client_side)

    def _teardown(self, entry: CircuitEntry, notify_in: bool, notify_out: bool) -> None:
        in_conn, in_circ = entry.inbound
        if self.inbound.pop((in_conn.conn_id, in_circ), None) is None:
            return
        self.metrics["circuits_destroyed"] += 1
        for conn in entry.exit_streams.values():
            conn.close()
        entry.exit_streams.clear()
        if notify_in:
            self._send(in_conn, Cell(in_circ, Command.DESTROY))
        if entry.outbound is not None:
            out_conn, out_circ = entry.outbound
            self.outbound.pop((out_conn.conn_id, out_circ), None)
            if notify_out:
                self._send(out_conn, Cell(out_circ, Command.DESTROY))
            out_conn.close()
        self.events.append({"event": "destroy", "in_conn": in_conn.conn_id, "in_circ": in_circ})

    def check_tables(self) -> list[str]:
        """Return inconsistencies between forward and reverse circuit maps."""
        problems = []
        for key, entry in self.outbound.items():
            conn, circ = entry.inbound
            if self.inbound.get((conn.conn_id, circ)) is not entry:
                problems.append(f"outbound {key} has no inbound entry")
            if entry.outbound is None or (entry.outbound[0].conn_id, entry.outbound[1]) != key:
                problems.append(f"outbound {key} does not match its entry")
        for key, entry in self.inbound.items():
            if entry.outbound is not None:
                okey = (entry.outbound[0].conn_id, entry.outbound[1])
                if self.outbound.get(okey) is not entry:
                    problems.append(f"inbound {key} missing reverse mapping")
            if entry.outbound is not None and entry.exit_streams:
                problems.append(f"inbound {key} both forwards and exits")
        return problems
