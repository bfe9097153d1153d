"""Bundled echo service: tells each caller which address it connected from."""

from __future__ import annotations

from tomen.net.base import Owner


class EchoService:
    """Answers every stream with the address it observed for the peer, then closes."""

    def __init__(self, net, owner: Owner, address: str):
        self.net = net
        self.owner = owner
        self.address = address
        self.seen: list[str] = []

    def start(self) -> None:
        self.address = self.net.listen(self.address, self.owner, self._accept) or self.address

    def _accept(self, conn):
        def on_data(data: bytes) -> None:
            if conn.closed:
                return
            self.seen.append(conn.peer_addr)
            conn.send(f"{conn.peer_addr}\n".encode())
            conn.close()

        return on_data, lambda: None


class ByteEchoService:
    """Sends every byte straight back on the same stream."""

    def __init__(self, net, owner: Owner, address: str):
        self.net = net
        self.owner = owner
        self.address = address
        self.received = 0

    def start(self) -> None:
        self.address = self.net.listen(self.address, self.owner, self._accept) or self.address

    def _accept(self, conn):
        def on_data(data: bytes) -> None:
            self.received += len(data)
            if not conn.closed:
                conn.send(data)

        return on_data, lambda: None
