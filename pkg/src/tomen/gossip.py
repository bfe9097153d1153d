"""Transaction overlay: opaque content-addressed transactions flooded between mempools.

Wire format, both for submissions and peer gossip::

    payload_length  2   big-endian, 1..400
    payload         payload_length
    txid            32  SHA-256(payload)

A submission stream carries exactly one transaction and is answered with a
single JSON line: ``{"status": "ack", "txid": ..., "known": bool}`` or
``{"status": "reject", "reason": ...}``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass

from tomen.net.base import NetworkError, Owner, host_of

log = logging.getLogger(__name__)

MAX_PAYLOAD = 400
TXID_SIZE = 32


class MalformedTransaction(ValueError):
    pass


@dataclass(frozen=True)
class Transaction:
    txid: bytes
    payload: bytes

    @classmethod
    def from_payload(cls, payload: bytes) -> Transaction:
        if not 1 <= len(payload) <= MAX_PAYLOAD:
            raise MalformedTransaction(f"payload must be 1..{MAX_PAYLOAD} bytes, got {len(payload)}")
        return cls(hashlib.sha256(payload).digest(), bytes(payload))

    @property
    def hex_id(self) -> str:
        return self.txid.hex()


def serialize_tx(tx: Transaction) -> bytes:
    return len(tx.payload).to_bytes(2, "big") + tx.payload + tx.txid


def parse_tx(data: bytes) -> Transaction:
    if len(data) < 2:
        raise MalformedTransaction("truncated length prefix")
    n = int.from_bytes(data[:2], "big")
    if not 1 <= n <= MAX_PAYLOAD:
        raise MalformedTransaction(f"payload length {n} out of range")
    if len(data) != 2 + n + TXID_SIZE:
        raise MalformedTransaction(f"expected {2 + n + TXID_SIZE} bytes, got {len(data)}")
    payload = data[2:2 + n]
    txid = data[2 + n:]
    if hashlib.sha256(payload).digest() != txid:
        raise MalformedTransaction("txid does not match payload hash")
    return Transaction(txid, payload)


def wire_digest(tx: Transaction) -> str:
    """Digest of the serialized transaction, as an observer of the bytes would compute it."""
    return hashlib.sha256(serialize_tx(tx)).hexdigest()


class TxFramer:
    """Splits a byte stream into serialized-transaction frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf += data
        out = []
        while len(self._buf) >= 2:
            n = int.from_bytes(self._buf[:2], "big")
            if not 1 <= n <= MAX_PAYLOAD:
                frame = bytes(self._buf)
                self._buf.clear()
                out.append(frame)  # let the parser reject it
                break
            total = 2 + n + TXID_SIZE
            if len(self._buf) < total:
                break
            out.append(bytes(self._buf[:total]))
            del self._buf[:total]
        return out


class GossipNode:
    def __init__(self, net, owner: Owner, node_id: str, submit_addr: str, peer_addr: str,
                 peers: list[str] | None = None):
        self.net = net
        self.owner = owner
        self.node_id = node_id
        self.submit_addr = submit_addr
        self.peer_addr = peer_addr
        self.peers: list[str] = list(peers or [])
        self.mempool: dict[bytes, Transaction] = {}
        self.first_seen: dict[bytes, float] = {}
        self.connection_log: list[dict] = []
        self.sent: Counter = Counter()  # (peer address, txid hex) -> transmissions
        self.metrics: Counter = Counter()
        self._out: dict[str, object] = {}

    def start(self) -> None:
        self.submit_addr = self.net.listen(self.submit_addr, self.owner, self._accept_submit) or self.submit_addr
        self.peer_addr = self.net.listen(self.peer_addr, self.owner, self._accept_peer) or self.peer_addr

    def add_peer(self, addr: str) -> None:
        if addr not in self.peers and addr != self.peer_addr:
            self.peers.append(addr)

    # mempool ----------------------------------------------------------

    def _store(self, tx: Transaction) -> bool:
        if tx.txid in self.mempool:
            return False
        self.mempool[tx.txid] = tx
        self.first_seen[tx.txid] = self.net.clock.now()
        return True

    def _flood(self, tx: Transaction, exclude_host: str | None) -> None:
        frame = serialize_tx(tx)
        for peer in self.peers:
            if exclude_host is not None and host_of(peer) == exclude_host:
                continue
            key = (peer, tx.hex_id)
            if self.sent[key]:
                continue
            conn = self._peer_conn(peer)
            if conn is None:
                continue
            try:
                conn.send(frame)
            except NetworkError:
                self._out.pop(peer, None)
                self.metrics["gossip_send_failed"] += 1
                continue
            self.sent[key] += 1
            self.metrics["gossip_sent"] += 1

    def _peer_conn(self, peer: str):
        conn = self._out.get(peer)
        if conn is not None and not conn.closed:
            return conn
        try:
            conn = self.net.connect(self.owner, peer, lambda b: None,
                                    lambda: self._out.pop(peer, None))
        except NetworkError:
            self.metrics["peer_unreachable"] += 1
            return None
        self._out[peer] = conn
        return conn

    def submit(self, submitter: str, data: bytes) -> dict:
        try:
            tx = parse_tx(data)
        except MalformedTransaction as exc:
            self.metrics["rejected"] += 1
            self.connection_log.append({"time": self.net.clock.now(), "peer_addr": submitter,
                                        "status": "reject", "txid": None})
            return {"status": "reject", "reason": str(exc)}
        fresh = self._store(tx)
        self.connection_log.append({"time": self.net.clock.now(), "peer_addr": submitter,
                                    "status": "ack", "txid": tx.hex_id})
        self.net.annotate(self.owner, txid=tx.hex_id, action="submit")
        if fresh:
            self._flood(tx, exclude_host=None)
        return {"status": "ack", "txid": tx.hex_id, "known": not fresh}

    def on_gossip(self, peer_host: str, data: bytes) -> None:
        try:
            tx = parse_tx(data)
        except MalformedTransaction:
            self.metrics["malformed_gossip"] += 1
            return
        self.net.annotate(self.owner, txid=tx.hex_id, action="gossip")
        if self._store(tx):
            self._flood(tx, exclude_host=peer_host)
        else:
            self.metrics["duplicate_gossip"] += 1

    # network handlers -------------------------------------------------

    def _accept_submit(self, conn):
        framer = TxFramer()

        def on_data(data: bytes) -> None:
            for frame in framer.feed(data):
                resp = self.submit(conn.peer_addr, frame)
                if not conn.closed:
                    conn.send((json.dumps(resp, sort_keys=True) + "\n").encode())

        return on_data, lambda: None

    def _accept_peer(self, conn):
        framer = TxFramer()
        peer_host = host_of(conn.peer_addr)

        def on_data(data: bytes) -> None:
            for frame in framer.feed(data):
                self.on_gossip(peer_host, frame)

        return on_data, lambda: None


def submit_direct(net, owner: Owner, submit_addr: str, tx: Transaction, timeout: float = 10.0) -> dict:
    """Submit without anonymization: the node sees the caller's own address."""
    box: list = []
    buf = bytearray()

    def on_data(data: bytes) -> None:
        buf.extend(data)
        if b"\n" in buf and not box:
            box.append(json.loads(bytes(buf).split(b"\n", 1)[0]))

    with owner.cond:
        conn = net.connect(owner, submit_addr, on_data, lambda: box.append(None) if not box else None)
        conn.send(serialize_tx(tx))
        net.run_until(owner, lambda: bool(box), timeout)
        conn.close()
    if not box or box[0] is None:
        raise NetworkError(f"no acknowledgement from {submit_addr}")
    return box[0]


def broadcast_via_circuit(proxy, target: str, tx: Transaction, circuit=None) -> dict:
    """Submit ``tx`` to a gossip node through the proxy; the node sees the exit's address."""
    stream = proxy.open_stream(target, circuit)
    try:
        proxy.send(stream, serialize_tx(tx))
        line = proxy.recv_until(stream, b"\n")
    finally:
        proxy.close(stream)
    if not line.endswith(b"\n"):
        raise NetworkError("stream ended before the acknowledgement")
    return json.loads(line)

