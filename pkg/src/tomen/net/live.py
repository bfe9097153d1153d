"""Real TCP transport over loopback.

Each entity binds its listeners and the source address of its outgoing
connections to its own host, so that on Linux distinct 127.x.y.z hosts
show up as distinct peer addresses to whoever accepts the connection.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Callable

from tomen.net.base import (
    CloseHandler,
    DataHandler,
    NetworkError,
    Owner,
    WallClock,
    split_addr,
)

log = logging.getLogger(__name__)

RECV_SIZE = 65536


class LiveConn:
    def __init__(self, sock: socket.socket, owner: Owner, kind: str = "stream"):
        self.sock = sock
        self.owner = owner
        self.kind = kind
        lh, lp = sock.getsockname()[:2]
        ph, pp = sock.getpeername()[:2]
        self.local_addr = f"{lh}:{lp}"
        self.peer_addr = f"{ph}:{pp}"
        self.conn_id = f"{self.local_addr}>{self.peer_addr}"
        self.on_data: DataHandler | None = None
        self.on_close: CloseHandler | None = None
        self.closed = False
        self._send_lock = threading.Lock()

    def send(self, data: bytes) -> None:
        if self.closed:
            raise NetworkError(f"send on closed connection {self.conn_id}")
        try:
            with self._send_lock:
                self.sock.sendall(data)
        except OSError as exc:
            raise NetworkError(str(exc)) from exc

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    def start(self) -> None:
        threading.Thread(target=self._reader, name=f"rd-{self.owner.name}", daemon=True).start()

    def _reader(self) -> None:
        while True:
            try:
                data = self.sock.recv(RECV_SIZE)
            except OSError:
                data = b""
            with self.owner.cond:
                if not data:
                    was_closed = self.closed
                    self.closed = True
                    if not was_closed and self.on_close is not None:
                        try:
                            self.on_close()
                        except Exception:
                            log.exception("close handler failed in %s", self.owner.name)
                    self.sock.close()
                    self.owner.cond.notify_all()
                    return
                if not self.closed and self.on_data is not None:
                    try:
                        self.on_data(data)
                    except Exception:
                        log.exception("data handler failed in %s", self.owner.name)
                self.owner.cond.notify_all()


class LiveNetwork:
    def __init__(self, connect_timeout: float = 2.0):
        self.clock = WallClock()
        self.connect_timeout = connect_timeout
        self._servers: dict[str, socket.socket] = {}
        self._conns: list[LiveConn] = []
        self._stopped = threading.Event()

    def register(self, name: str, host: str, observe: bool = True) -> Owner:
        return Owner(name, host, observe)

    def listen(self, addr: str, owner: Owner, on_accept, kind: str = "stream") -> str:
        host, port = split_addr(addr)
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            srv.bind((host, port))
        except OSError as exc:
            srv.close()
            raise NetworkError(f"cannot listen on {addr}: {exc}") from exc
        srv.listen(64)
        bound = f"{host}:{srv.getsockname()[1]}"
        self._servers[bound] = srv

        def accept_loop() -> None:
            while not self._stopped.is_set():
                try:
                    sock, _ = srv.accept()
                except OSError:
                    return
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                conn = LiveConn(sock, owner, kind)
                self._conns.append(conn)
                with owner.cond:
                    conn.on_data, conn.on_close = on_accept(conn)
                conn.start()

        threading.Thread(target=accept_loop, name=f"acc-{owner.name}", daemon=True).start()
        return bound

    def unlisten(self, addr: str) -> None:
        srv = self._servers.pop(addr, None)
        if srv is not None:
            try:
                srv.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            srv.close()

    def connect(self, owner: Owner, addr: str, on_data: DataHandler, on_close: CloseHandler) -> LiveConn:
        host, port = split_addr(addr)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.settimeout(self.connect_timeout)
        try:
            sock.bind((owner.host, 0))
            sock.connect((host, port))
        except OSError as exc:
            sock.close()
            raise NetworkError(f"cannot connect to {addr}: {exc}") from exc
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = LiveConn(sock, owner)
        self._conns.append(conn)
        conn.on_data, conn.on_close = on_data, on_close
        conn.start()
        return conn

    def run_until(self, owner: Owner, pred: Callable[[], bool], timeout: float | None = 10.0) -> bool:
        with owner.cond:
            return owner.cond.wait_for(pred, timeout)

    def call_later(self, owner: Owner, delay: float, fn: Callable[[], None]) -> None:
        def fire() -> None:
            if self._stopped.is_set():
                return
            with owner.cond:
                fn()
                owner.cond.notify_all()

        t = threading.Timer(delay, fire)
        t.daemon = True
        t.start()

    def annotate(self, owner: Owner, **fields) -> None:
        pass

    def close(self) -> None:
        self._stopped.set()
        for srv in self._servers.values():
            try:
                srv.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            srv.close()
        self._servers.clear()
        for conn in list(self._conns):
            with conn.owner.cond:
                conn.close()
        self._conns.clear()


def wait_for_port(addr: str, timeout: float = 5.0) -> bool:
    host, port = split_addr(addr)
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            with socket.create_connection((host, port), timeout=0.2):
                return True
        except OSError:
            time.sleep(0.05)
    return False
