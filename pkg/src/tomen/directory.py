"""Directory server, its length-prefixed JSON protocol, and path selection."""

from __future__ import annotations

import json
import logging
import random
import struct
import threading
from dataclasses import dataclass, field, replace
from typing import Callable

from tomen.crypto import fingerprint
from tomen.net.base import NetworkError, Owner

log = logging.getLogger(__name__)

LIVENESS_WINDOW = 120.0
FRAME_HEADER = struct.Struct("!I")
MAX_FRAME = 4 * 1024 * 1024


class DirectoryError(Exception):
    pass


class ValidationError(DirectoryError):
    pass


class NotFoundError(DirectoryError):
    pass


class DirectoryUnreachable(DirectoryError, NetworkError):
    pass


class PathError(Exception):
    pass


class InsufficientRelaysError(PathError):
    pass


class NoEligibleExitError(PathError):
    pass


@dataclass(frozen=True)
class RelayDescriptor:
    relay_id: str
    address: str
    identity_pubkey: bytes
    egress_policy: frozenset[int] | None = None  # None: exit disallowed
    bandwidth: int = 1_000_000
    first_seen: float = 0.0
    last_heartbeat: float = 0.0

    def allows_exit(self, port: int) -> bool:
        return self.egress_policy is not None and port in self.egress_policy

    def to_json(self) -> dict:
        return {
            "relay_id": self.relay_id,
            "address": self.address,
            "identity_pubkey": self.identity_pubkey.hex(),
            "egress_policy": None if self.egress_policy is None else sorted(self.egress_policy),
            "bandwidth": self.bandwidth,
            "first_seen": self.first_seen,
            "last_heartbeat": self.last_heartbeat,
        }

    @classmethod
    def from_json(cls, d: dict) -> RelayDescriptor:
        policy = d.get("egress_policy")
        return cls(
            relay_id=d["relay_id"],
            address=d["address"],
            identity_pubkey=bytes.fromhex(d["identity_pubkey"]),
            egress_policy=None if policy is None else frozenset(int(p) for p in policy),
            bandwidth=int(d.get("bandwidth", 0)),
            first_seen=float(d.get("first_seen", 0.0)),
            last_heartbeat=float(d.get("last_heartbeat", 0.0)),
        )

    @classmethod
    def for_identity(cls, identity_pubkey: bytes, address: str, egress_policy=None,
                     bandwidth: int = 1_000_000) -> RelayDescriptor:
        return cls(
            relay_id=fingerprint(identity_pubkey),
            address=address,
            identity_pubkey=identity_pubkey,
            egress_policy=None if egress_policy is None else frozenset(egress_policy),
            bandwidth=bandwidth,
        )


@dataclass(frozen=True)
class Consensus:
    issued_at: float
    descriptors: tuple[RelayDescriptor, ...] = ()

    def to_json(self) -> dict:
        return {"issued_at": self.issued_at, "descriptors": [d.to_json() for d in self.descriptors]}

    @classmethod
    def from_json(cls, d: dict) -> Consensus:
        return cls(float(d["issued_at"]),
                   tuple(RelayDescriptor.from_json(x) for x in d.get("descriptors", [])))


@dataclass(frozen=True)
class PathConstraints:
    target_port: int
    require_distinct: bool = field(default=True, init=False)

    def __post_init__(self):
        if not 1 <= self.target_port <= 65535:
            raise ValueError(f"target port out of range: {self.target_port}")


class Directory:
    """The directory's state. Thread-safe; every operation is atomic."""

    def __init__(self, clock, liveness_window: float = LIVENESS_WINDOW):
        self.clock = clock
        self.liveness_window = liveness_window
        self._relays: dict[str, RelayDescriptor] = {}
        self._lock = threading.Lock()

    def publish(self, descriptor: RelayDescriptor) -> None:
        if descriptor.relay_id != fingerprint(descriptor.identity_pubkey):
            raise ValidationError("relay_id does not match identity key fingerprint")
        if descriptor.last_heartbeat < descriptor.first_seen:
            raise ValidationError("last_heartbeat precedes first_seen")
        now = self.clock.now()
        with self._lock:
            prior = self._relays.get(descriptor.relay_id)
            first_seen = prior.first_seen if prior is not None else now
            self._relays[descriptor.relay_id] = replace(
                descriptor, first_seen=first_seen, last_heartbeat=now
            )

    def heartbeat(self, relay_id: str) -> None:
        now = self.clock.now()
        with self._lock:
            prior = self._relays.get(relay_id)
            if prior is None:
                raise NotFoundError(f"unknown relay {relay_id}")
            self._relays[relay_id] = replace(prior, last_heartbeat=max(now, prior.last_heartbeat))

    def fetch_consensus(self) -> Consensus:
        now = self.clock.now()
        with self._lock:
            live = [d for d in self._relays.values() if now - d.last_heartbeat <= self.liveness_window]
        live.sort(key=lambda d: d.relay_id)
        return Consensus(now, tuple(live))

    def handle(self, msg: dict) -> dict:
        verb = msg.get("verb")
        try:
            if verb == "publish":
                self.publish(RelayDescriptor.from_json(msg["descriptor"]))
                return {"status": "ok"}
            if verb == "heartbeat":
                self.heartbeat(msg["relay_id"])
                return {"status": "ok"}
            if verb == "fetch":
                return {"status": "ok", "consensus": self.fetch_consensus().to_json()}
            return {"status": "error", "error": "bad-verb", "detail": f"unknown verb {verb!r}"}
        except NotFoundError as exc:
            return {"status": "error", "error": "not-found", "detail": str(exc)}
        except ValidationError as exc:
            return {"status": "error", "error": "invalid", "detail": str(exc)}
        except (KeyError, ValueError, TypeError) as exc:
            return {"status": "error", "error": "malformed", "detail": str(exc)}


# wire -------------------------------------------------------------------

def encode_frame(msg: dict) -> bytes:
    body = json.dumps(msg, sort_keys=True, separators=(",", ":")).encode()
    return FRAME_HEADER.pack(len(body)) + body


class FrameReader:
    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[dict]:
        self._buf += data
        out = []
        while len(self._buf) >= FRAME_HEADER.size:
            (n,) = FRAME_HEADER.unpack_from(self._buf)
            if n > MAX_FRAME:
                raise DirectoryError(f"frame of {n} bytes is too large")
            if len(self._buf) < FRAME_HEADER.size + n:
                break
            body = bytes(self._buf[FRAME_HEADER.size:FRAME_HEADER.size + n])
            del self._buf[:FRAME_HEADER.size + n]
            out.append(json.loads(body.decode()))
        return out


class DirectoryServer:
    def __init__(self, net, owner: Owner, address: str, directory: Directory | None = None):
        self.net = net
        self.owner = owner
        self.directory = directory or Directory(net.clock)
        self.address = net.listen(address, owner, self._accept, kind="control") or address

    def _accept(self, conn):
        reader = FrameReader()

        def on_data(data: bytes) -> None:
            try:
                msgs = reader.feed(data)
            except (DirectoryError, ValueError):
                conn.close()
                return
            for msg in msgs:
                if not conn.closed:
                    conn.send(encode_frame(self.directory.handle(msg)))

        return on_data, lambda: None


class DirectoryClient:
    def __init__(self, net, owner: Owner, directory_addr: str):
        self.net = net
        self.owner = owner
        self.directory_addr = directory_addr

    def request_async(self, msg: dict, callback: Callable[[dict | None], None]) -> None:
        """Send one request; ``callback`` gets the response, or None if the link failed."""
        reader = FrameReader()
        done = []

        def finish(resp):
            if not done:
                done.append(resp)
                callback(resp)

        def on_data(data: bytes) -> None:
            for resp in reader.feed(data):
                conn.close()
                finish(resp)

        conn = self.net.connect(self.owner, self.directory_addr, on_data, lambda: finish(None))
        conn.send(encode_frame(msg))

    def request(self, msg: dict, timeout: float = 10.0) -> dict:
        box: list = []
        with self.owner.cond:
            try:
                self.request_async(msg, box.append)
            except NetworkError as exc:
                raise DirectoryUnreachable(str(exc)) from exc
            self.net.run_until(self.owner, lambda: bool(box), timeout)
        if not box or box[0] is None:
            raise DirectoryUnreachable(f"no response from directory at {self.directory_addr}")
        return box[0]

    def publish(self, descriptor: RelayDescriptor) -> None:
        resp = self.request({"verb": "publish", "descriptor": descriptor.to_json()})
        _check(resp)

    def heartbeat(self, relay_id: str) -> None:
        _check(self.request({"verb": "heartbeat", "relay_id": relay_id}))

    def fetch_consensus(self) -> Consensus:
        resp = self.request({"verb": "fetch"})
        _check(resp)
        return Consensus.from_json(resp["consensus"])


def _check(resp: dict) -> None:
    if resp.get("status") == "ok":
        return
    err = resp.get("error")
    detail = resp.get("detail", "")
    if err == "not-found":
        raise NotFoundError(detail)
    if err == "invalid":
        raise ValidationError(detail)
    raise DirectoryError(f"{err}: {detail}")


# path selection -----------------------------------------------------------

def _pick(candidates: list[RelayDescriptor], rng: random.Random, weighted: bool) -> RelayDescriptor:
    if not weighted:
        return candidates[rng.randrange(len(candidates))]
    weights = [max(d.bandwidth, 1) for d in candidates]
    return rng.choices(candidates, weights=weights)[0]


def select_path(consensus: Consensus, constraints: PathConstraints, rng: random.Random,
                weighted: bool = False) -> tuple[RelayDescriptor, RelayDescriptor, RelayDescriptor]:
    """Pick (guard, middle, exit), pairwise distinct, with an exit allowing the target port.

    In the default mode every eligible ordered triple is equally likely: each
    eligible exit heads the same number of triples, so the exit is drawn
    uniformly first and the other two uniformly from what remains.
    """
    relays = sorted(consensus.descriptors, key=lambda d: d.relay_id)
    if len(relays) < 3:
        raise InsufficientRelaysError(f"need 3 live relays, consensus has {len(relays)}")
    exits = [d for d in relays if d.allows_exit(constraints.target_port)]
    if not exits:
        raise NoEligibleExitError(f"no relay allows exit to port {constraints.target_port}")
    exit_ = _pick(exits, rng, weighted)
    rest = [d for d in relays if d.relay_id != exit_.relay_id]
    guard = _pick(rest, rng, weighted)
    rest = [d for d in rest if d.relay_id != guard.relay_id]
    middle = _pick(rest, rng, weighted)
    return guard, middle, exit_
