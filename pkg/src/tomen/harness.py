"""Deterministic scenarios, transcripts, and the rule-based linkability adversary.

A scenario wires up a directory, relays, gossip nodes and clients inside a
:class:`~tomen.net.sim.Simulator`, lets every client submit its
transactions (directly or over circuits), and writes down what each vantage
point saw. The transcript is line-delimited JSON and depends only on the
scenario, seed included.

The adversary is a set of exact joins over the coalition's own records:

1. *Direct*: a record carrying a transaction's plaintext whose source is a
   client host.
2. *Chain*: starting from a relay record that carries plaintext, walk the
   circuit back toward the client. A hop is crossed exactly when the relay on
   the other side is in the coalition (its own forward mapping names the
   circuit), or when exactly one coalition relay's forwarded cells toward the
   unobserved neighbour line up tick for tick with the cells arriving from it.
   A single unobserved relay forwards each cell in the tick it arrives, so
   that alignment is a fixed two-tick shift.

Nothing probabilistic is attempted; any ambiguity means no link.
"""

from __future__ import annotations

import hashlib
import json
import random
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from tomen.client import OnionProxy
from tomen.config import ConfigError, as_bool, parse_kv
from tomen.crypto import gen_identity
from tomen.directory import DirectoryServer, PathConstraints
from tomen.echo import EchoService
from tomen.gossip import (
    GossipNode,
    Transaction,
    broadcast_via_circuit,
    submit_direct,
    wire_digest,
)
from tomen.net.base import host_of
from tomen.net.sim import Simulator, VantageRecord
from tomen.relay import Relay, RelayConfig

TRANSCRIPT_VERSION = 1
SUBMIT_PORT = 8333
PEER_PORT = 8334
ECHO_PORT = 7777
RELAY_PORT = 9001
DIRECTORY_ADDR = "10.9.0.1:7000"
ROTATION_GAP = 600.0
FORWARD_SHIFT = 2  # ticks from a cell leaving one relay to it leaving the next


class ScenarioError(ValueError):
    pass


class TranscriptError(ValueError):
    pass


@dataclass
class Scenario:
    seed: int = 0
    n_relays: int = 5
    n_exits: int = -1  # -1: every relay may exit
    n_gossip: int = 3
    topology: str = "ring"
    n_clients: int = 2
    tx_per_client: int = 2
    mode: str = "onion"
    rotation: bool = False
    echo: bool = False

    def validate(self) -> None:
        if self.mode not in ("onion", "direct"):
            raise ScenarioError(f"mode must be onion or direct, got {self.mode!r}")
        if self.mode == "onion" and self.n_relays < 3:
            raise ScenarioError(f"onion mode needs at least 3 relays, got {self.n_relays}")
        if self.n_relays < 0 or self.n_gossip < 1 or self.n_clients < 0 or self.tx_per_client < 0:
            raise ScenarioError("counts must be non-negative and n_gossip >= 1")
        if not 0 <= self.seed < 2**64:
            raise ScenarioError("seed must be a 64-bit unsigned integer")
        edges = gossip_edges(self.topology, self.n_gossip, self.seed)
        if not _connected(self.n_gossip, edges):
            raise ScenarioError(f"gossip topology {self.topology!r} is not connected")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> Scenario:
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


SCENARIO_KEYS = {
    "seed": ("seed", int),
    "relays.count": ("n_relays", int),
    "relays.exits": ("n_exits", int),
    "gossip.count": ("n_gossip", int),
    "gossip.topology": ("topology", str),
    "clients.count": ("n_clients", int),
    "clients.tx_per_client": ("tx_per_client", int),
    "mode": ("mode", str),
    "rotation": ("rotation", as_bool),
    "echo": ("echo", as_bool),
}


def parse_scenario(text: str) -> Scenario:
    kv = parse_kv(text, set(SCENARIO_KEYS))
    values = {}
    for key, raw in kv.items():
        name, conv = SCENARIO_KEYS[key]
        try:
            values[name] = conv(raw)
        except ValueError as exc:
            line = next(i for i, l in enumerate(text.splitlines(), 1) if l.split("#")[0].strip().startswith(key))
            raise ConfigError(f"bad value for {key}: {exc}", line) from None
    return Scenario(**values)


def gossip_edges(topology: str, n: int, seed: int = 0) -> list[tuple[int, int]]:
    """Edges for a named topology: line, ring, star, complete, random, or ``edges:0-1,1-2``."""
    if topology.startswith("edges:"):
        edges = []
        for part in topology[len("edges:"):].split(","):
            a, b = (int(x) for x in part.split("-"))
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise ScenarioError(f"bad edge {part!r}")
            edges.append((min(a, b), max(a, b)))
        return sorted(set(edges))
    if n == 1:
        return []
    if topology == "line":
        return [(i, i + 1) for i in range(n - 1)]
    if topology == "ring":
        edges = [(i, i + 1) for i in range(n - 1)]
        if n > 2:
            edges.append((0, n - 1))
        return edges
    if topology == "star":
        return [(0, i) for i in range(1, n)]
    if topology == "complete":
        return [(i, j) for i in range(n) for j in range(i + 1, n)]
    if topology == "random":
        return random_connected_graph(n, random.Random(f"topology-{seed}"))
    raise ScenarioError(f"unknown topology {topology!r}")


def random_connected_graph(n: int, rng: random.Random, extra: float = 0.3) -> list[tuple[int, int]]:
    """A random spanning tree plus each remaining pair with probability ``extra``."""
    order = list(range(n))
    rng.shuffle(order)
    edges = set()
    for i in range(1, n):
        a, b = order[i], order[rng.randrange(i)]
        edges.add((min(a, b), max(a, b)))
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) not in edges and rng.random() < extra:
                edges.add((i, j))
    return sorted(edges)


def _connected(n: int, edges) -> bool:
    adj = defaultdict(set)
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen, frontier = {0}, [0]
    while frontier:
        for nxt in adj[frontier.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return len(seen) == n


# transcript -------------------------------------------------------------------

@dataclass
class Transcript:
    scenario: Scenario | None
    mode: str = "deterministic"
    entities: list[dict] = field(default_factory=list)
    records: list[VantageRecord] = field(default_factory=list)
    txs: list[dict] = field(default_factory=list)  # ground truth, never read by the linker
    circuits: list[dict] = field(default_factory=list)  # ground truth
    mempools: dict[str, dict[str, str]] = field(default_factory=dict)  # node -> txid -> payload hex
    events: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def to_lines(self) -> list[str]:
        def dump(obj) -> str:
            return json.dumps(obj, sort_keys=True, separators=(",", ":"))

        lines = [dump({"type": "header", "version": TRANSCRIPT_VERSION, "mode": self.mode,
                       "scenario": self.scenario.to_json() if self.scenario else None})]
        lines += [dump({"type": "entity", **e}) for e in self.entities]
        lines += [dump({"type": "record", **r.to_json()}) for r in self.records]
        lines += [dump({"type": "tx", **t}) for t in self.txs]
        lines += [dump({"type": "circuit", **c}) for c in self.circuits]
        lines += [dump({"type": "mempool", "node": node, "txs": pool})
                  for node, pool in sorted(self.mempools.items())]
        lines += [dump({"type": "event", **e}) for e in self.events]
        lines.append(dump({"type": "metrics", **self.metrics}))
        return lines

    def dumps(self) -> str:
        return "\n".join(self.to_lines()) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> Transcript:
        t = cls(scenario=None)
        seen_header = False
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                kind = obj.pop("type")
            except (ValueError, KeyError, AttributeError) as exc:
                raise TranscriptError(f"line {lineno}: not a transcript line ({exc})") from None
            try:
                if kind == "header":
                    if obj.get("version") != TRANSCRIPT_VERSION:
                        raise TranscriptError(f"line {lineno}: unsupported version {obj.get('version')}")
                    t.mode = obj.get("mode", "deterministic")
                    t.scenario = Scenario.from_json(obj["scenario"]) if obj.get("scenario") else None
                    seen_header = True
                elif kind == "entity":
                    t.entities.append(obj)
                elif kind == "record":
                    t.records.append(VantageRecord.from_json(obj))
                elif kind == "tx":
                    t.txs.append(obj)
                elif kind == "circuit":
                    t.circuits.append(obj)
                elif kind == "mempool":
                    t.mempools[obj["node"]] = obj["txs"]
                elif kind == "event":
                    t.events.append(obj)
                elif kind == "metrics":
                    t.metrics = obj
                else:
                    raise TranscriptError(f"line {lineno}: unknown line type {kind!r}")
            except (KeyError, TypeError) as exc:
                raise TranscriptError(f"line {lineno}: malformed {kind} line ({exc})") from None
        if not seen_header:
            raise TranscriptError("missing header line")
        return t

    @classmethod
    def read(cls, path: str | Path) -> Transcript:
        return cls.loads(Path(path).read_text())

    def observers(self) -> list[str]:
        return sorted({r.observer for r in self.records})

    def entity(self, name: str) -> dict | None:
        return next((e for e in self.entities if e["name"] == name), None)


# running ----------------------------------------------------------------------

class World:
    """Every entity of one simulated scenario, before and after the run."""

    def __init__(self, scenario: Scenario, keep_raw: bool = False):
        scenario.validate()
        self.scenario = scenario
        self.sim = Simulator(scenario.seed, keep_raw=keep_raw)
        sim = self.sim
        self.entities: list[dict] = []
        seed = scenario.seed

        self.directory = DirectoryServer(sim, sim.register("directory", host_of(DIRECTORY_ADDR)),
                                         DIRECTORY_ADDR)
        self.entities.append({"name": "directory", "kind": "directory", "host": host_of(DIRECTORY_ADDR),
                              "address": DIRECTORY_ADDR})

        n_exits = scenario.n_relays if scenario.n_exits < 0 else scenario.n_exits
        self.relays: list[Relay] = []
        for i in range(scenario.n_relays):
            host = f"10.0.0.{i + 1}"
            name = f"relay{i}"
            policy = frozenset({SUBMIT_PORT, ECHO_PORT}) if i < n_exits else None
            cfg = RelayConfig(gen_identity(random.Random(f"{seed}-{name}-identity")),
                              f"{host}:{RELAY_PORT}", policy, DIRECTORY_ADDR)
            relay = Relay(sim, sim.register(name, host), cfg, random.Random(f"{seed}-{name}"))
            relay.start()
            self.relays.append(relay)
            self.entities.append({"name": name, "kind": "relay", "host": host,
                                  "address": relay.address, "relay_id": relay.relay_id})

        self.gossip: list[GossipNode] = []
        for i in range(scenario.n_gossip):
            host = f"10.1.0.{i + 1}"
            node = GossipNode(sim, sim.register(f"gossip{i}", host), f"gossip{i}",
                              f"{host}:{SUBMIT_PORT}", f"{host}:{PEER_PORT}")
            node.start()
            self.gossip.append(node)
            self.entities.append({"name": f"gossip{i}", "kind": "gossip", "host": host,
                                  "address": node.submit_addr})
        for a, b in gossip_edges(scenario.topology, scenario.n_gossip, seed):
            self.gossip[a].add_peer(self.gossip[b].peer_addr)
            self.gossip[b].add_peer(self.gossip[a].peer_addr)

        self.echo = None
        if scenario.echo:
            self.echo = EchoService(sim, sim.register("echo", "10.2.0.1"), f"10.2.0.1:{ECHO_PORT}")
            self.echo.start()
            self.entities.append({"name": "echo", "kind": "echo", "host": "10.2.0.1",
                                  "address": self.echo.address})

        self.events: list[dict] = []
        self.clients: list[tuple[str, object, OnionProxy | None]] = []
        for i in range(scenario.n_clients):
            host = f"192.168.0.{i + 1}"
            name = f"client{i}"
            owner = sim.register(name, host, observe=False)
            proxy = None
            if scenario.mode == "onion":
                proxy = OnionProxy(sim, owner, DIRECTORY_ADDR, random.Random(f"{seed}-{name}"),
                                   events=lambda e, n=name: self.events.append({"client": n, **e}))
            self.clients.append((name, owner, proxy))
            self.entities.append({"name": name, "kind": "client", "host": host, "address": host})
        sim.run_until_quiescent()
        self.txs: list[dict] = []
        self.rng = random.Random(f"{seed}-workload")

    def submit(self, client_index: int, tx: Transaction, target: GossipNode) -> dict:
        name, owner, proxy = self.clients[client_index]
        start = self.sim.tick
        circuit_id = None
        if proxy is None:
            ack = submit_direct(self.sim, owner, target.submit_addr, tx)
        else:
            circ = proxy.circuit_for(PathConstraints(SUBMIT_PORT))
            circuit_id = circ.circuit_id
            ack = broadcast_via_circuit(proxy, target.submit_addr, tx, circ)
        self.sim.run_until_quiescent()
        self.txs.append({
            "txid": tx.hex_id,
            "client": name,
            "client_host": owner.host,
            "target": target.node_id,
            "submitted_at": start,
            "circuit_id": circuit_id,
            "ack": ack.get("status"),
        })
        return ack

    def run_workload(self) -> None:
        sc = self.scenario
        for ci in range(sc.n_clients):
            for k in range(sc.tx_per_client):
                if sc.rotation and k > 0:
                    self.sim.advance(ROTATION_GAP)
                payload = f"c{ci}-t{k}-".encode() + self.rng.randbytes(24).hex().encode()
                target = self.gossip[self.rng.randrange(len(self.gossip))]
                self.submit(ci, Transaction.from_payload(payload), target)
        for _, _, proxy in self.clients:
            if proxy is not None:
                proxy.shutdown()
        self.sim.run_until_quiescent()

    def circuits(self) -> list[dict]:
        """Ground truth: each client circuit with its relays by position and link keys."""
        out = []
        by_addr = {r.address: r for r in self.relays}
        for name, owner, proxy in self.clients:
            if proxy is None:
                continue
            for circ in proxy.history:
                relays = [by_addr[d.address] for d in circ.path]
                out.append({
                    "client": name,
                    "circuit_id": circ.circuit_id,
                    "guard": relays[0].owner.name,
                    "middle": relays[1].owner.name,
                    "exit": relays[2].owner.name,
                    "guard_conn": circ.conn.conn_id,
                    "created_at": circ.created_at,
                })
        return out

    def assign_roles(self) -> None:
        """Label every relay record with the position its relay held on that circuit."""
        relay_by_name = {r.owner.name: r for r in self.relays}
        role_of: dict[tuple[str, str, int], str] = {}
        for c in self.circuits():
            key = (c["guard_conn"], c["circuit_id"])
            for pos in ("guard", "middle", "exit"):
                name = c[pos]
                role_of[(name, *key)] = pos
                ext = next((e for e in relay_by_name[name].events if e["event"] == "extend"
                            and (e["in_conn"], e["in_circ"]) == key), None)
                if ext is None:
                    break
                key = (ext["out_conn"], ext["out_circ"])
                role_of[(name, *key)] = pos
        kinds = {e["name"]: e["kind"] for e in self.entities}
        for rec in self.sim.records:
            if rec.role == "tap":
                continue
            kind = kinds.get(rec.observer, "")
            if kind != "relay":
                rec.role = kind
                continue
            circ = rec.extra.get("circ")
            role = role_of.get((rec.observer, rec.conn, circ)) if circ is not None else None
            if role is None and rec.kind == "stream":
                role = "exit"  # replies on an exit stream
            rec.role = role or "relay"

    def transcript(self) -> Transcript:
        self.assign_roles()
        mempools = {
            node.node_id: {txid.hex(): tx.payload.hex() for txid, tx in sorted(node.mempool.items())}
            for node in self.gossip
        }
        t = Transcript(
            scenario=self.scenario,
            entities=self.entities,
            records=list(self.sim.records),
            txs=self.txs,
            circuits=self.circuits(),
            mempools=mempools,
            events=self.events,
        )
        t.metrics = compute_metrics(t, self)
        return t


def run_scenario(scenario: Scenario, keep_raw: bool = False) -> Transcript:
    world = World(scenario, keep_raw=keep_raw)
    world.run_workload()
    return world.transcript()


# metrics ----------------------------------------------------------------------

def compute_metrics(t: Transcript, world: World | None = None) -> dict:
    relay_names = [e["name"] for e in t.entities if e["kind"] == "relay"]
    per_relay = {name: {"bytes_in": 0, "cells_in": 0} for name in relay_names}
    relay_cells = 0
    for r in t.records:
        if r.observer in per_relay:
            per_relay[r.observer]["bytes_in"] += r.n_bytes
            if r.kind == "link":
                per_relay[r.observer]["cells_in"] += 1
                if r.extra.get("command") == "RELAY":
                    relay_cells += 1
    data_at_exit = sum(1 for r in t.records if r.role == "exit" and r.extra.get("relay_command") == "DATA")
    forwarded = sum(1 for r in t.records if r.extra.get("action") == "forward")
    first_seen: dict[str, int] = defaultdict(int)
    for r in t.records:
        txid = r.extra.get("txid")
        if txid is not None and r.role == "gossip":
            first_seen[txid] = max(first_seen[txid], r.time)
    latency = {tx["txid"]: first_seen.get(tx["txid"], tx["submitted_at"]) - tx["submitted_at"]
               for tx in t.txs}
    cells_sent = sum(1 for r in t.records if r.role == "tap" and r.kind == "link")
    forwarded_by_out = {}
    for r in t.records:
        if r.extra.get("action") == "forward":
            forwarded_by_out[(r.extra.get("out_conn"), r.extra.get("out_circ"), r.time)] = r
    data_hops = 0
    for r in t.records:
        if r.role != "exit" or r.extra.get("relay_command") != "DATA":
            continue
        key, when = (r.conn, r.extra.get("circ")), r.time
        data_hops += 1
        while (prev := forwarded_by_out.get((*key, when - 1))) is not None:
            data_hops += 1
            key, when = (prev.conn, prev.extra.get("circ")), prev.time
    out = {
        "cells_sent": cells_sent,
        "relay_cells_received": relay_cells,
        "forwarded_cells": forwarded,
        "data_cells_at_exit": data_at_exit,
        "data_cell_hops": data_hops,
        "latency_ticks": latency,
        "per_relay": per_relay,
        "records": len(t.records),
    }
    return out


def metrics_report(t: Transcript) -> dict:
    m = compute_metrics(t)
    lat = list(m["latency_ticks"].values())
    m["latency_summary"] = {
        "count": len(lat),
        "min": min(lat) if lat else None,
        "max": max(lat) if lat else None,
        "mean": (sum(lat) / len(lat)) if lat else None,
    }
    return m


# validation -------------------------------------------------------------------

PLAINTEXT_ROLES = {"exit", "gossip", "echo"}


def validate(t: Transcript) -> list[str]:
    """Check transcript invariants; returns violation messages, first violated first."""
    problems: list[str] = []
    last = (-1, -1)
    seqs = set()
    for r in t.records:
        key = (r.time, r.seq)
        if key <= last:
            problems.append(f"records out of order at seq {r.seq}")
            break
        if r.seq in seqs:
            problems.append(f"duplicate record seq {r.seq}")
            break
        seqs.add(r.seq)
        last = key
    for r in t.records:
        if r.visible_plaintext_digest is None:
            continue
        if r.role in PLAINTEXT_ROLES:
            continue
        if r.role == "tap" and r.kind == "stream":
            continue
        problems.append(f"plaintext at non-exit observer: {r.observer} ({r.role or 'unknown role'}) seq {r.seq}")
        break
    for node, pool in t.mempools.items():
        for txid, payload in pool.items():
            if hashlib.sha256(bytes.fromhex(payload)).hexdigest() != txid:
                problems.append(f"txid integrity: {node} holds {txid[:16]} with a different payload")
    if t.mode == "deterministic":
        wanted = {tx["txid"] for tx in t.txs if tx.get("ack") == "ack"}
        for node, pool in t.mempools.items():
            missing = wanted - set(pool)
            if missing:
                problems.append(f"flooding incomplete: {node} lacks {len(missing)} transaction(s)")
        sends = Counter()
        for r in t.records:
            if r.role == "gossip" and r.extra.get("action") == "gossip":
                sends[(host_of(r.src_addr), host_of(r.dst_addr), r.extra.get("txid"))] += 1
        for (src, dst, txid), n in sends.items():
            if n > 1:
                problems.append(f"flooding efficiency: {src} sent {txid[:16]} to {dst} {n} times")
                break
    return problems


def replay(path: str | Path, rerun: bool = True) -> tuple[Transcript, list[str]]:
    return replay_text(Path(path).read_text(), rerun)


def replay_text(text: str, rerun: bool = True) -> tuple[Transcript, list[str]]:
    """Validate a transcript and, for deterministic ones, rerun its scenario and compare line by line."""
    t = Transcript.loads(text)
    problems = validate(t)
    if rerun and t.mode == "deterministic" and t.scenario is not None:
        fresh = run_scenario(t.scenario).to_lines()
        old = [line for line in text.splitlines() if line.strip()]
        for i, (a, b) in enumerate(zip(old, fresh), 1):
            if a != b:
                problems.append(f"replay mismatch at line {i}")
                break
        else:
            if len(old) != len(fresh):
                problems.append(f"replay mismatch: {len(old)} lines recorded, {len(fresh)} reproduced")
    return t, problems


# adversary --------------------------------------------------------------------

def adversary_link(t: Transcript, coalition: set[str] | frozenset[str]) -> set[tuple[str, str]]:
    coalition = set(coalition)
    infra_hosts = {e["host"] for e in t.entities if e["kind"] != "client"}
    relay_hosts = {e["host"]: e["name"] for e in t.entities if e["kind"] == "relay"}
    digest_to_txid = {}
    for pool in t.mempools.values():
        for txid, payload in pool.items():
            tx = Transaction(bytes.fromhex(txid), bytes.fromhex(payload))
            digest_to_txid[wire_digest(tx)] = txid

    mine = [r for r in t.records if r.observer in coalition]
    links: set[tuple[str, str]] = set()

    def is_client(addr: str) -> bool:
        return host_of(addr) not in infra_hosts

    # rule 1: plaintext seen together with a client source
    for r in mine:
        txid = digest_to_txid.get(r.visible_plaintext_digest or "")
        if txid and is_client(r.src_addr):
            links.add((host_of(r.src_addr), txid))

    # per-relay circuit views, keyed by the inbound (conn, circ) of each circuit
    views = _circuit_views(mine, coalition)

    for r in mine:
        txid = digest_to_txid.get(r.visible_plaintext_digest or "")
        if not txid or r.observer not in views or r.kind != "link":
            continue
        origin = _trace_back(views, r.observer, (r.conn, r.extra.get("circ")), relay_hosts, is_client)
        if origin is not None:
            links.add((origin, txid))
    return links


@dataclass
class _CircuitView:
    relay: str
    key: tuple[str, int]
    src_addr: str
    fwd_times: list[int] = field(default_factory=list)
    next_hop: str | None = None
    out_key: tuple[str, int] | None = None
    forwarded_times: list[int] = field(default_factory=list)


FORWARD_ACTIONS = {"create", "recognized", "forward", "destroy"}


def _circuit_views(records, coalition) -> dict[str, dict[tuple[str, int], _CircuitView]]:
    views: dict[str, dict[tuple[str, int], _CircuitView]] = defaultdict(dict)
    for r in records:
        if r.kind != "link" or "circ" not in r.extra:
            continue
        action = r.extra.get("action")
        if action not in FORWARD_ACTIONS:
            continue
        key = (r.conn, r.extra["circ"])
        if action == "create":
            views[r.observer][key] = _CircuitView(r.observer, key, r.src_addr)
        view = views[r.observer].get(key)
        if view is None:
            continue
        view.fwd_times.append(r.time)
        if action == "forward":
            view.next_hop = r.extra.get("next_hop")
            view.out_key = (r.extra.get("out_conn"), r.extra.get("out_circ"))
        if action in ("forward", "destroy") and (action == "forward" or view.out_key is not None):
            view.forwarded_times.append(r.time)
    return views


def _trace_back(views, relay: str, key, relay_hosts: dict[str, str], is_client, depth: int = 0):
    view = views.get(relay, {}).get(key)
    if view is None or depth > 8:
        return None
    if is_client(view.src_addr):
        return host_of(view.src_addr)
    prev_host = host_of(view.src_addr)
    prev = relay_hosts.get(prev_host)
    if prev is None:
        return None
    if prev in views:
        # the previous hop is ours: its forward mapping names this circuit
        for pkey, pview in views[prev].items():
            if pview.out_key == key:
                return _trace_back(views, prev, pkey, relay_hosts, is_client, depth + 1)
        return None
    # previous hop unobserved: look one relay further back for cells shifted by the forwarding delay
    shifted_target = sorted(view.fwd_times)
    matches = []
    for name, rv in views.items():
        if name == relay:
            continue
        for pkey, pview in rv.items():
            if pview.next_hop is None or host_of(pview.next_hop) != prev_host:
                continue
            if sorted(t + FORWARD_SHIFT for t in pview.forwarded_times) == shifted_target:
                matches.append((name, pkey))
    if len(matches) != 1:
        return None
    name, pkey = matches[0]
    return _trace_back(views, name, pkey, relay_hosts, is_client, depth + 1)


def single_observer_links(t: Transcript) -> dict[str, set[tuple[str, str]]]:
    return {obs: adversary_link(t, {obs}) for obs in t.observers()}
