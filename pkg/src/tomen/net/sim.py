"""Deterministic logical-time network.

One delivery takes exactly one tick. Messages sent in the same tick are
delivered in an order drawn from the simulator's seeded RNG, but every
connection stays FIFO: each scheduled event delivers the head of its
connection's queue, whichever message that is.

Every delivery to an observing entity produces a vantage record, plus one
for the passive tap on that link. Entities may annotate the record of the
delivery they are currently handling (for instance a relay noting which
circuit a cell belonged to and whether it could read plaintext).
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from tomen.net.base import CloseHandler, DataHandler, NetworkError, Owner, host_of

TICKS_PER_SECOND = 1000
TICK_SECONDS = 1 / TICKS_PER_SECOND
EPHEMERAL_PORT_BASE = 40000


@dataclass
class VantageRecord:
    time: int
    seq: int
    observer: str
    src_addr: str
    dst_addr: str
    n_bytes: int
    visible_plaintext_digest: str | None = None
    conn: str = ""
    kind: str = "stream"
    role: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "time": self.time,
            "seq": self.seq,
            "observer": self.observer,
            "src_addr": self.src_addr,
            "dst_addr": self.dst_addr,
            "n_bytes": self.n_bytes,
            "visible_plaintext_digest": self.visible_plaintext_digest,
            "conn": self.conn,
            "kind": self.kind,
            "role": self.role,
        }
        out.update(self.extra)
        return out

    @classmethod
    def from_json(cls, d: dict) -> VantageRecord:
        d = dict(d)
        base = {k: d.pop(k) for k in (
            "time", "seq", "observer", "src_addr", "dst_addr", "n_bytes",
            "visible_plaintext_digest", "conn", "kind", "role",
        )}
        return cls(**base, extra=d)


def tap_name(addr_a: str, addr_b: str) -> str:
    a, b = sorted((host_of(addr_a), host_of(addr_b)))
    return f"tap:{a}|{b}"


class SimConn:
    def __init__(self, sim: Simulator, owner: Owner, conn_id: str, local_addr: str,
                 peer_addr: str, kind: str):
        self.sim = sim
        self.owner = owner
        self.conn_id = conn_id
        self.local_addr = local_addr
        self.peer_addr = peer_addr
        self.kind = kind
        self.peer: SimConn | None = None
        self.on_data: DataHandler | None = None
        self.on_close: CloseHandler | None = None
        self.closed = False
        self.outq: deque = deque()

    def send(self, data: bytes) -> None:
        if self.closed:
            raise NetworkError(f"send on closed connection {self.conn_id}")
        self.sim._enqueue(self, ("data", bytes(data)))

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self.sim._enqueue(self, ("close", None))

    def __repr__(self) -> str:
        return f"SimConn({self.local_addr}->{self.peer_addr})"


class SimClock:
    def __init__(self, sim: Simulator):
        self._sim = sim

    def now(self) -> float:
        return self._sim.tick / TICKS_PER_SECOND


class Simulator:
    def __init__(self, seed: int = 0, keep_raw: bool = False):
        self.rng = random.Random(f"sim-{seed}")
        self.tick = 0
        self.clock = SimClock(self)
        self.records: list[VantageRecord] = []
        self.keep_raw = keep_raw
        self.raw: list[tuple[int, str, str, bytes]] = []  # (tick, owner, conn_id, bytes)
        self.delivered = 0
        self._events: list = []
        self._seq = itertools.count()
        self._record_seq = itertools.count()
        self._pending_msgs = 0
        self._owners: dict[str, Owner] = {}
        self._listeners: dict[str, tuple[Owner, Callable, str]] = {}
        self._next_port: dict[str, int] = {}
        self._current: dict[str, list[VantageRecord]] = {}

    # registration -------------------------------------------------------

    def register(self, name: str, host: str, observe: bool = True) -> Owner:
        if name in self._owners:
            raise ValueError(f"duplicate entity name {name}")
        owner = Owner(name, host, observe)
        self._owners[name] = owner
        return owner

    def listen(self, addr: str, owner: Owner, on_accept, kind: str = "stream") -> None:
        if addr in self._listeners:
            raise NetworkError(f"address in use: {addr}")
        self._listeners[addr] = (owner, on_accept, kind)
        return addr

    def unlisten(self, addr: str) -> None:
        self._listeners.pop(addr, None)

    def is_listening(self, addr: str) -> bool:
        return addr in self._listeners

    def connect(self, owner: Owner, addr: str, on_data: DataHandler, on_close: CloseHandler) -> SimConn:
        if addr not in self._listeners:
            raise NetworkError(f"connection refused: {addr}")
        lowner, on_accept, kind = self._listeners[addr]
        port = self._next_port.get(owner.host, EPHEMERAL_PORT_BASE)
        self._next_port[owner.host] = port + 1
        local = f"{owner.host}:{port}"
        conn_id = f"{local}>{addr}"
        a = SimConn(self, owner, conn_id, local, addr, kind)
        b = SimConn(self, lowner, conn_id, addr, local, kind)
        a.peer, b.peer = b, a
        a.on_data, a.on_close = on_data, on_close
        with lowner.cond:
            b.on_data, b.on_close = on_accept(b)
        return a

    # scheduling ---------------------------------------------------------

    def _push(self, when: int, kind: str, item) -> None:
        heapq.heappush(self._events, (when, self.rng.random(), next(self._seq), kind, item))

    def _enqueue(self, conn: SimConn, msg) -> None:
        conn.outq.append(msg)
        self._pending_msgs += 1
        self._push(self.tick + 1, "msg", conn)

    def call_later(self, owner: Owner, delay: float, fn: Callable[[], None]) -> None:
        ticks = max(1, math.ceil(delay / TICK_SECONDS - 1e-9))
        self._push(self.tick + ticks, "timer", (owner, fn))

    def _step(self) -> None:
        when, _, _, kind, item = heapq.heappop(self._events)
        self.tick = max(self.tick, when)
        if kind == "timer":
            owner, fn = item
            with owner.cond:
                fn()
            return
        self._pending_msgs -= 1
        conn: SimConn = item
        what, data = conn.outq.popleft()
        dst = conn.peer
        if what == "close":
            if not dst.closed:
                dst.closed = True
                if dst.on_close is not None:
                    with dst.owner.cond:
                        dst.on_close()
            return
        if dst.closed:
            return
        self.delivered += 1
        self._deliver(conn, dst, data)

    def _deliver(self, src: SimConn, dst: SimConn, data: bytes) -> None:
        plain = hashlib.sha256(data).hexdigest() if src.kind == "stream" else None
        if self.keep_raw:
            self.raw.append((self.tick, dst.owner.name, src.conn_id, data))
        recs = []
        if dst.owner.observe:
            recs.append(self._record(dst.owner.name, src, dst, data, plain))
        recs.append(self._record(tap_name(src.local_addr, dst.local_addr), src, dst, data, plain,
                                 role="tap"))
        self._current[dst.owner.name] = recs[:1] if dst.owner.observe else []
        try:
            if dst.on_data is not None:
                with dst.owner.cond:
                    dst.on_data(data)
        finally:
            self._current.pop(dst.owner.name, None)

    def _record(self, observer, src, dst, data, plain, role="") -> VantageRecord:
        rec = VantageRecord(
            time=self.tick,
            seq=next(self._record_seq),
            observer=observer,
            src_addr=src.local_addr,
            dst_addr=dst.local_addr,
            n_bytes=len(data),
            visible_plaintext_digest=plain,
            conn=src.conn_id,
            kind=src.kind,
            role=role,
        )
        self.records.append(rec)
        return rec

    def annotate(self, owner: Owner, **fields) -> None:
        for rec in self._current.get(owner.name, ()):
            for k, v in fields.items():
                if k == "visible_plaintext_digest":
                    rec.visible_plaintext_digest = v
                elif k == "role":
                    rec.role = v
                else:
                    rec.extra[k] = v

    @property
    def quiescent(self) -> bool:
        return self._pending_msgs == 0

    def run_until(self, owner: Owner | None, pred: Callable[[], bool], timeout: float | None = None,
                  max_events: int = 5_000_000) -> bool:
        """Run until ``pred`` holds or no message is in flight. Timers alone do not keep it going."""
        for _ in range(max_events):
            if pred():
                return True
            if self._pending_msgs == 0:
                return False
            self._step()
        raise RuntimeError("simulation did not settle")

    def run_until_quiescent(self) -> None:
        self.run_until(None, lambda: False)

    def advance(self, seconds: float) -> None:
        """Move logical time forward, firing timers and deliveries due on the way."""
        target = self.tick + max(0, round(seconds / TICK_SECONDS))
        while self._events and self._events[0][0] <= target:
            self._step()
        self.tick = max(self.tick, target)
