"""Transport interface shared by the simulator and the live socket backend.

Entities (relays, gossip nodes, the onion proxy, ...) never touch sockets
directly. They register an :class:`Owner` with a network, listen and
connect through it, and receive bytes through callbacks. Every callback
runs with the owner's condition held, so entity state needs no further
locking.
"""

from __future__ import annotations

import threading
import time
from typing import Callable, Protocol

DataHandler = Callable[[bytes], None]
CloseHandler = Callable[[], None]


class NetworkError(ConnectionError):
    pass


def split_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host, int(port)


def host_of(addr: str) -> str:
    return split_addr(addr)[0]


class Owner:
    """Identity and serialization context of one entity on the network."""

    def __init__(self, name: str, host: str, observe: bool = True):
        self.name = name
        self.host = host
        self.observe = observe
        self.cond = threading.Condition(threading.RLock())

    def __repr__(self) -> str:
        return f"Owner({self.name!r}, {self.host!r})"


class Conn(Protocol):
    conn_id: str
    local_addr: str
    peer_addr: str
    closed: bool

    def send(self, data: bytes) -> None: ...

    def close(self) -> None: ...


class Clock(Protocol):
    def now(self) -> float: ...


class LogicalClock:
    """Manually advanced clock, in seconds."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("clock cannot go backwards")
        self._now += seconds

    def set(self, t: float) -> None:
        self._now = float(t)


class WallClock:
    def now(self) -> float:
        return time.time()


class Network(Protocol):
    clock: Clock

    def register(self, name: str, host: str, observe: bool = True) -> Owner: ...

    def listen(
        self, addr: str, owner: Owner, on_accept: Callable[[Conn], tuple[DataHandler, CloseHandler]],
        kind: str = "stream",
    ) -> None: ...

    def connect(
        self, owner: Owner, addr: str, on_data: DataHandler, on_close: CloseHandler
    ) -> Conn: ...

    def run_until(self, owner: Owner, pred: Callable[[], bool], timeout: float | None = None) -> bool: ...

    def call_later(self, owner: Owner, delay: float, fn: Callable[[], None]) -> None: ...

    def annotate(self, owner: Owner, **fields) -> None: ...
