"""Onion proxy: builds and rotates 3-hop circuits and carries streams over them."""

from __future__ import annotations

import enum
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

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
    decode_relay_payload,
    encode_cell,
    encode_extend,
    encode_relay_payload,
    peek_recognized,
)
from tomen.crypto import (
    HandshakeError,
    HopKeys,
    LayerCipherState,
    apply_layer,
    client_create_payload,
    client_finish,
    gen_keypair,
    update_and_seal_digest,
    verify_digest,
)
from tomen.directory import (
    Consensus,
    DirectoryClient,
    PathConstraints,
    RelayDescriptor,
    select_path,
)
from tomen.net.base import NetworkError, Owner, split_addr

log = logging.getLogger(__name__)

CIRCUIT_LIFETIME = 600.0
HOPS = 3


class CircuitState(enum.Enum):
    BUILDING = "building"
    OPEN = "open"
    CLOSING = "closing"
    CLOSED = "closed"


class ClientError(Exception):
    pass


class CircuitBuildError(ClientError):
    def __init__(self, hop_index: int, reason: str):
        super().__init__(f"circuit build failed at hop {hop_index}: {reason}")
        self.hop_index = hop_index
        self.reason = reason


class StreamError(ClientError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class CircuitClosedError(StreamError):
    pass


@dataclass(eq=False)
class Hop:
    descriptor: RelayDescriptor
    keys: HopKeys
    forward: LayerCipherState
    backward: LayerCipherState

    @property
    def relay_id(self) -> str:
        return self.descriptor.relay_id


@dataclass(eq=False)
class Circuit:
    circuit_id: int
    conn: object
    created_at: float
    path: tuple[RelayDescriptor, ...] = ()
    hops: list[Hop] = field(default_factory=list)
    state: CircuitState = CircuitState.BUILDING
    retired: bool = False
    streams: dict[int, Stream] = field(default_factory=dict)
    next_stream_id: int = 1
    inbox: list = field(default_factory=list)  # (hop_index, RelayPayload) during build
    destroyed: bool = False

    def age(self, now: float) -> float:
        # rounded so whole-second boundaries on a tick clock compare exactly
        return round(now - self.created_at, 9)

    @property
    def relay_ids(self) -> list[str]:
        return [h.relay_id for h in self.hops]


@dataclass(eq=False)
class Stream:
    stream_id: int
    circuit: Circuit
    target: str
    state: str = "connecting"  # connecting, open, closed
    buffer: bytearray = field(default_factory=bytearray)
    end_reason: str | None = None


class OnionProxy:
    def __init__(
        self,
        net,
        owner: Owner,
        directory_addr: str,
        rng: random.Random | None = None,
        clock=None,
        events: Callable[[dict], None] | None = None,
        timeout: float = 10.0,
        weighted: bool = False,
    ):
        self.net = net
        self.owner = owner
        self.directory_addr = directory_addr
        self.rng = rng or random.SystemRandom()
        self.clock = clock or net.clock
        self.timeout = timeout
        self.weighted = weighted
        self.circuits: list[Circuit] = []
        self.history: list[Circuit] = []  # every circuit completed, open or not
        self.metrics: Counter = Counter()
        self._emit = events or (lambda e: None)
        self.transcript: list[bytes] = []  # every cell this proxy sent, in order

    # helpers ----------------------------------------------------------

    def _event(self, name: str, **fields) -> None:
        self._emit({"event": name, **fields})

    def _send_cell(self, circ: Circuit, cell: Cell) -> None:
        data = encode_cell(cell)
        self.transcript.append(data)
        self.metrics["cells_sent"] += 1
        circ.conn.send(data)

    def _wait(self, pred: Callable[[], bool]) -> bool:
        return self.net.run_until(self.owner, pred, self.timeout)

    def fetch_consensus(self) -> Consensus:
        return DirectoryClient(self.net, self.owner, self.directory_addr).fetch_consensus()

    # layering ---------------------------------------------------------

    def encrypt_outbound(self, circuit: Circuit, rp: RelayPayload, hop_index: int | None = None) -> Cell:
        """Seal for the target hop (the last one by default) and add its layer and every layer before it."""
        target = len(circuit.hops) - 1 if hop_index is None else hop_index
        sealed = update_and_seal_digest(circuit.hops[target].keys.forward_digest_state, rp)
        payload = encode_relay_payload(sealed)
        for hop in reversed(circuit.hops[:target + 1]):
            payload = apply_layer(hop.forward, payload)
        return Cell(circuit.circuit_id, Command.RELAY, payload)

    def decrypt_inbound(self, circuit: Circuit, cell: Cell) -> tuple[int, RelayPayload]:
        """Peel hop by hop until one recognizes the payload; returns (hop index, payload)."""
        payload = cell.payload.ljust(CELL_PAYLOAD_SIZE, b"\x00")
        for i, hop in enumerate(circuit.hops):
            payload = apply_layer(hop.backward, payload)
            if peek_recognized(payload) != 0:
                continue
            try:
                rp = decode_relay_payload(payload)
            except CellError:
                continue
            if verify_digest(hop.keys.backward_digest_state, rp):
                return i, rp
        raise HandshakeError("inbound cell not recognized by any hop")

    # inbound dispatch -------------------------------------------------

    def _link_handlers(self, circ: Circuit):
        reader = CellReader()

        def on_data(data: bytes) -> None:
            for raw in reader.feed(data):
                try:
                    cell = decode_cell(raw)
                except CellError:
                    self.metrics["malformed_cells"] += 1
                    continue
                self._on_cell(circ, cell)

        def on_close() -> None:
            self._mark_dead(circ, "link closed")

        return on_data, on_close

    def _on_cell(self, circ: Circuit, cell: Cell) -> None:
        if cell.circuit_id != circ.circuit_id or circ.state == CircuitState.CLOSED:
            self.metrics["unknown_circuit"] += 1
            return
        if cell.command == Command.DESTROY:
            circ.destroyed = True
            self._mark_dead(circ, "circuit destroyed")
            return
        if cell.command == Command.CREATED:
            circ.inbox.append((-1, cell.payload))
            return
        if cell.command != Command.RELAY:
            self.metrics["protocol_errors"] += 1
            return
        try:
            hop_index, rp = self.decrypt_inbound(circ, cell)
        except HandshakeError:
            # digest failure: somebody tampered with the circuit
            self.metrics["digest_failures"] += 1
            log.warning("inbound digest failure on circuit %08x, tearing down", circ.circuit_id)
            self.destroy_circuit(circ, "digest failure")
            return
        if circ.state == CircuitState.BUILDING:
            circ.inbox.append((hop_index, rp))
            return
        stream = circ.streams.get(rp.stream_id)
        if stream is None:
            self.metrics["unknown_stream"] += 1
            return
        cmd = rp.relay_command
        if cmd == RelayCommand.CONNECTED:
            stream.state = "open"
        elif cmd == RelayCommand.DATA:
            stream.buffer += rp.data
        elif cmd == RelayCommand.END:
            stream.end_reason = rp.data.decode("utf-8", "replace")
            stream.state = "closed"
            self._stream_finished(stream)

    def _mark_dead(self, circ: Circuit, reason: str) -> None:
        if circ.state == CircuitState.CLOSED:
            return
        circ.state = CircuitState.CLOSED
        for stream in circ.streams.values():
            if stream.state != "closed":
                stream.state = "closed"
                stream.end_reason = stream.end_reason or reason
        if circ in self.circuits:
            self.circuits.remove(circ)
        if not circ.conn.closed:
            circ.conn.close()

    # circuits ---------------------------------------------------------

    def build_circuit(self, constraints: PathConstraints) -> Circuit:
        with self.owner.cond:
            consensus = self.fetch_consensus()
            path = select_path(consensus, constraints, self.rng, weighted=self.weighted)
            return self._build(path)

    def _build(self, path) -> Circuit:
        guard = path[0]
        circ_id = self.rng.randrange(1, 2**32)
        handlers: list = []
        try:
            conn = self.net.connect(
                self.owner, guard.address, lambda b: handlers[0](b), lambda: handlers[1]()
            )
        except NetworkError as exc:
            raise CircuitBuildError(0, f"guard unreachable: {exc}") from exc
        circ = Circuit(circ_id, conn, created_at=self.clock.now(), path=tuple(path))
        handlers.extend(self._link_handlers(circ))

        for index, desc in enumerate(path):
            eph = gen_keypair(self.rng)
            handshake = client_create_payload(eph)
            if index == 0:
                self._send_cell(circ, Cell(circ_id, Command.CREATE, handshake))
            else:
                rp = RelayPayload(RelayCommand.EXTEND, encode_extend(desc.address, handshake))
                self._send_cell(circ, self.encrypt_outbound(circ, rp))
            self._wait(lambda: bool(circ.inbox) or circ.state == CircuitState.CLOSED)
            if not circ.inbox:
                self._mark_dead(circ, "build failed")
                raise CircuitBuildError(index, "no reply (circuit torn down)")
            src, reply = circ.inbox.pop(0)
            if index == 0:
                created = reply
            elif src != index - 1 or reply.relay_command != RelayCommand.EXTENDED:
                self.destroy_circuit(circ, "unexpected reply")
                raise CircuitBuildError(index, f"unexpected {reply.relay_command.name} from hop {src}")
            else:
                created = reply.data
            try:
                keys = client_finish(eph, created, desc.identity_pubkey)
            except HandshakeError as exc:
                self.destroy_circuit(circ, "handshake failed")
                raise CircuitBuildError(index, str(exc)) from exc
            circ.hops.append(
                Hop(desc, keys, LayerCipherState(keys.forward_key), LayerCipherState(keys.backward_key))
            )
        circ.state = CircuitState.OPEN
        circ.created_at = self.clock.now()
        self.circuits.append(circ)
        self.history.append(circ)
        self.metrics["circuits_built"] += 1
        self._event("circuit_built", circuit_id=circ_id, path=circ.relay_ids,
                    exit=path[-1].address, created_at=circ.created_at)
        return circ

    def destroy_circuit(self, circ: Circuit, reason: str = "closed") -> None:
        with self.owner.cond:
            if circ.state == CircuitState.CLOSED:
                return
            circ.state = CircuitState.CLOSING
            if not circ.conn.closed:
                try:
                    self._send_cell(circ, Cell(circ.circuit_id, Command.DESTROY))
                except NetworkError:
                    pass
            self._mark_dead(circ, reason)

    def eligible(self, circ: Circuit) -> bool:
        return (circ.state == CircuitState.OPEN and not circ.retired
                and circ.age(self.clock.now()) < CIRCUIT_LIFETIME)

    def rotation_check(self, constraints: PathConstraints | None = None) -> None:
        """Retire circuits at or past their lifetime and build a replacement.

        Retired circuits keep carrying the streams already on them and are
        destroyed when the last of those closes. If no replacement can be built
        the old circuit is left up for its streams.
        """
        with self.owner.cond:
            now = self.clock.now()
            expired = [c for c in self.circuits
                       if c.state == CircuitState.OPEN and not c.retired
                       and c.age(now) >= CIRCUIT_LIFETIME]
            if not expired:
                return
            for circ in expired:
                circ.retired = True
                self._event("rotated", circuit_id=circ.circuit_id, age=circ.age(now))
                self._drain(circ)
            if constraints is not None and not any(self.eligible(c) for c in self.circuits):
                try:
                    self.build_circuit(constraints)
                except Exception as exc:  # availability over freshness
                    self.metrics["rotation_build_failed"] += 1
                    self._event("error", where="rotation", detail=str(exc))

    def _drain(self, circ: Circuit) -> None:
        if circ.retired and not any(s.state != "closed" for s in circ.streams.values()):
            self.destroy_circuit(circ, "rotated")

    def circuit_for(self, constraints: PathConstraints) -> Circuit:
        self.rotation_check(constraints)
        for circ in self.circuits:
            if self.eligible(circ) and circ.path[-1].allows_exit(constraints.target_port):
                return circ
        return self.build_circuit(constraints)

    # streams ----------------------------------------------------------

    def open_stream(self, target: str, circuit: Circuit | None = None) -> Stream:
        _, port = split_addr(target)
        with self.owner.cond:
            circ = circuit or self.circuit_for(PathConstraints(port))
            if circ.state != CircuitState.OPEN:
                raise CircuitClosedError("circuit is not open")
            sid = circ.next_stream_id
            circ.next_stream_id += 1
            stream = Stream(sid, circ, target)
            circ.streams[sid] = stream
            self._send_cell(circ, self.encrypt_outbound(
                circ, RelayPayload(RelayCommand.BEGIN, target.encode("ascii"), sid)))
            self._wait(lambda: stream.state != "connecting")
            if stream.state != "open":
                reason = stream.end_reason or "timed out"
                stream.state = "closed"
                self._stream_finished(stream)
                raise StreamError(reason)
            self._event("stream_opened", circuit_id=circ.circuit_id, stream_id=sid, target=target)
            return stream

    def send(self, stream: Stream, data: bytes) -> None:
        with self.owner.cond:
            if stream.state != "open":
                raise StreamError(stream.end_reason or "stream is closed")
            circ = stream.circuit
            for piece in chunk(bytes(data)):
                self._send_cell(circ, self.encrypt_outbound(
                    circ, RelayPayload(RelayCommand.DATA, piece, stream.stream_id)))

    def recv(self, stream: Stream, max_bytes: int = 65536, wait: bool = True) -> bytes:
        """Return up to ``max_bytes`` in order; ``b""`` once the stream has ended."""
        with self.owner.cond:
            if wait:
                self._wait(lambda: bool(stream.buffer) or stream.state == "closed")
            if not stream.buffer and stream.state == "closed" and stream.end_reason not in (None, "done"):
                raise StreamError(stream.end_reason)
            out = bytes(stream.buffer[:max_bytes])
            del stream.buffer[:max_bytes]
            return out

    def recv_exactly(self, stream: Stream, n: int) -> bytes:
        out = bytearray()
        with self.owner.cond:
            while len(out) < n:
                part = self.recv(stream, n - len(out))
                if not part:
                    break
                out += part
        return bytes(out)

    def recv_until(self, stream: Stream, delim: bytes = b"\n") -> bytes:
        with self.owner.cond:
            self._wait(lambda: delim in stream.buffer or stream.state == "closed")
            idx = stream.buffer.find(delim)
            if idx < 0:
                return self.recv(stream, len(stream.buffer), wait=False)
            return self.recv(stream, idx + len(delim), wait=False)

    def close(self, stream: Stream) -> None:
        with self.owner.cond:
            if stream.state == "open":
                stream.state = "closed"
                stream.end_reason = "done"
                circ = stream.circuit
                if circ.state == CircuitState.OPEN:
                    self._send_cell(circ, self.encrypt_outbound(
                        circ, RelayPayload(RelayCommand.END, b"done", stream.stream_id)))
            self._stream_finished(stream)

    def _stream_finished(self, stream: Stream) -> None:
        circ = stream.circuit
        if circ.state == CircuitState.OPEN:
            self._drain(circ)

    def shutdown(self) -> None:
        for circ in list(self.circuits):
            self.destroy_circuit(circ, "shutdown")
