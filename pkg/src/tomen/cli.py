"""``tomen``: services, the echo-IP demo, and the simulation harness behind one command."""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
import threading
from pathlib import Path

from tomen.client import ClientError, OnionProxy
from tomen.config import ConfigError, as_bool, as_list, as_ports, load_kv
from tomen.crypto import HandshakeError, gen_identity
from tomen.directory import DirectoryError, DirectoryServer, PathConstraints, PathError
from tomen.echo import EchoService
from tomen.gossip import GossipNode, MalformedTransaction, Transaction, broadcast_via_circuit
from tomen.harness import (
    ScenarioError,
    TranscriptError,
    Transcript,
    adversary_link,
    metrics_report,
    parse_scenario,
    replay_text,
    run_scenario,
    single_observer_links,
    validate,
)
from tomen.net import LiveNetwork, LogicalClock, NetworkError, split_addr
from tomen.relay import Relay, RelayConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_NETWORK = 3
EXIT_PROTOCOL = 4
EXIT_VERDICT = 5


class CliError(Exception):
    def __init__(self, code: int, message: str, cause: str = "error"):
        super().__init__(message)
        self.code = code
        self.cause = cause


class ListenError(CliError):
    def __init__(self, addr: str, exc: Exception):
        super().__init__(EXIT_CONFIG, f"cannot listen on {addr}: {exc}", "address-unavailable")


class Output:
    def __init__(self, as_json: bool, stream=None):
        self.as_json = as_json
        self.stream = stream or sys.stdout

    def emit(self, event: str, text: str | None = None, **fields) -> None:
        stream = sys.stderr if event == "error" and not self.as_json else self.stream
        if self.as_json:
            line = json.dumps({"event": event, **fields}, sort_keys=True, default=str)
        else:
            line = text if text is not None else f"{event}: " + " ".join(
                f"{k}={v}" for k, v in fields.items())
        print(line, file=stream, flush=True)


class Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _listen(fn, addr: str):
    try:
        return fn()
    except NetworkError as exc:
        raise ListenError(addr, exc) from exc


def _wait_forever(run_for: float | None) -> None:
    try:
        threading.Event().wait(run_for)
    except KeyboardInterrupt:
        pass


def _config(path: str | None, allowed: set[str]) -> dict[str, str]:
    if path is None:
        return {}
    try:
        return load_kv(path, allowed)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read {path}: {exc}", "config") from exc


def _require(cfg: dict, key: str, fallback: str | None = None) -> str:
    value = cfg.get(key, fallback)
    if value is None:
        raise ConfigError(f"missing required key {key!r}")
    return value


# services -------------------------------------------------------------------

def cmd_dir(args, out: Output) -> int:
    cfg = _config(args.config, {"directory.address", "directory.liveness_window"})
    addr = args.listen or cfg.get("directory.address", "127.0.0.1:7000")
    net = LiveNetwork()
    host, _ = split_addr(addr)
    server = _listen(lambda: DirectoryServer(net, net.register("directory", host), addr), addr)
    if "directory.liveness_window" in cfg:
        server.directory.liveness_window = float(cfg["directory.liveness_window"])
    out.emit("listening", f"directory listening on {server.address}", service="directory",
             address=server.address)
    _wait_forever(args.run_for)
    net.close()
    return EXIT_OK


RELAY_KEYS = {"directory.address", "relay.address", "relay.identity_seed", "relay.exit_ports",
              "relay.bandwidth", "relay.heartbeat_interval", "relay.name"}


def cmd_relay(args, out: Output) -> int:
    cfg = _config(args.config, RELAY_KEYS)
    addr = _require(cfg, "relay.address", "127.0.0.1:9001")
    seed = cfg.get("relay.identity_seed")
    identity = gen_identity(random.Random(f"relay-identity-{seed}") if seed is not None
                            else random.SystemRandom())
    try:
        config = RelayConfig(
            identity=identity,
            address=addr,
            egress_policy=as_ports(cfg.get("relay.exit_ports", "none")),
            directory=_require(cfg, "directory.address"),
            heartbeat_interval=float(cfg.get("relay.heartbeat_interval", 30)),
            bandwidth=int(cfg.get("relay.bandwidth", 1_000_000)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    net = LiveNetwork()
    relay = Relay(net, net.register(cfg.get("relay.name", "relay"), split_addr(addr)[0]), config)
    try:
        _listen(lambda: relay.start(publish=False), addr)
        relay.publish()
        out.emit("listening", f"relay {relay.relay_id} listening on {relay.address}",
                 service="relay", address=relay.address, relay_id=relay.relay_id)
        _wait_forever(args.run_for)
    finally:
        net.close()
    return EXIT_OK


GOSSIP_KEYS = {"gossip.node_id", "gossip.submit_address", "gossip.peer_address", "gossip.peers"}


def cmd_gossip(args, out: Output) -> int:
    cfg = _config(args.config, GOSSIP_KEYS)
    submit = cfg.get("gossip.submit_address", "127.0.0.1:8333")
    peer = cfg.get("gossip.peer_address", "127.0.0.1:8334")
    net = LiveNetwork()
    node = GossipNode(net, net.register(cfg.get("gossip.node_id", "gossip"), split_addr(submit)[0]),
                      cfg.get("gossip.node_id", "gossip"), submit, peer,
                      as_list(cfg.get("gossip.peers", "")))
    _listen(node.start, f"{submit} / {peer}")
    out.emit("listening", f"gossip node {node.node_id} accepting submissions on {node.submit_addr}",
             service="gossip", submit=node.submit_addr, peer=node.peer_addr)
    _wait_forever(args.run_for)
    net.close()
    return EXIT_OK


CLIENT_KEYS = {"directory.address", "client.deterministic", "client.seed", "client.host",
               "client.gossip_target"}


def _make_proxy(args, cfg, net, out: Output) -> OnionProxy:
    deterministic = args.deterministic or as_bool(cfg.get("client.deterministic", "false"))
    seed = args.seed if args.seed is not None else int(cfg.get("client.seed", 0))
    rng = random.Random(f"client-{seed}") if deterministic else random.SystemRandom()
    directory = args.dir or _require(cfg, "directory.address", "127.0.0.1:7000")
    host = cfg.get("client.host", "127.0.0.1")
    return OnionProxy(net, net.register("client", host), directory, rng,
                      events=lambda e: out.emit(e.pop("event"), **e))


def cmd_client(args, out: Output) -> int:
    cfg = _config(args.config, CLIENT_KEYS)
    net = LiveNetwork()
    try:
        proxy = _make_proxy(args, cfg, net, out)
        if args.verb == "build":
            circ = proxy.build_circuit(PathConstraints(args.port))
            proxy.destroy_circuit(circ)
        elif args.verb == "send-tx":
            try:
                payload = bytes.fromhex(args.payload_hex)
            except ValueError as exc:
                raise CliError(EXIT_USAGE, f"--payload-hex: {exc}", "usage") from exc
            tx = Transaction.from_payload(payload)
            target = args.target or cfg.get("client.gossip_target", "127.0.0.1:8333")
            ack = broadcast_via_circuit(proxy, target, tx)
            if ack.get("status") != "ack":
                out.emit("reject", f"rejected: {ack.get('reason')}", **ack)
                return EXIT_PROTOCOL
            out.emit("ack", f"ack txid={ack['txid']}", txid=ack["txid"], known=ack.get("known", False))
        elif args.verb == "echo":
            stream = proxy.open_stream(args.target)
            proxy.send(stream, b"?\n")
            line = proxy.recv_until(stream, b"\n").decode().strip()
            proxy.close(stream)
            out.emit("echo", f"echoed address: {line}", address=line)
        proxy.shutdown()
    finally:
        net.close()
    return EXIT_OK


# echo-ip demo ------------------------------------------------------------------

def _direct_echo(net, owner, target: str, timeout: float = 5.0) -> str:
    buf = bytearray()
    with owner.cond:
        conn = net.connect(owner, target, buf.extend, lambda: None)
        conn.send(b"?\n")
        net.run_until(owner, lambda: b"\n" in buf or conn.closed, timeout)
        conn.close()
    if b"\n" not in buf:
        raise NetworkError("echo service gave no answer")
    return bytes(buf).split(b"\n", 1)[0].decode()


def _onion_echo(proxy: OnionProxy, target: str, circuit) -> str:
    stream = proxy.open_stream(target, circuit)
    proxy.send(stream, b"?\n")
    line = proxy.recv_until(stream, b"\n")
    proxy.close(stream)
    if not line.endswith(b"\n"):
        raise NetworkError("echo stream ended early")
    return line.decode().strip()


def run_echo_demo(runs: int = 1, seed: int = 0, rotate: bool = False, n_relays: int = 5) -> list[dict]:
    """Ask the bundled echo service for our address, directly and over a circuit, ``runs`` times.

    Every entity binds its own 127.x host so addresses are distinguishable.
    With ``rotate`` one proxy runs on a logical clock advanced past the
    circuit lifetime between runs, so each run uses a fresh circuit.
    """
    net = LiveNetwork()
    results = []
    try:
        server = DirectoryServer(net, net.register("directory", "127.0.0.2"), "127.0.0.2:0")
        echo = EchoService(net, net.register("echo", "127.0.2.1"), "127.0.2.1:0")
        echo.start()
        echo_port = split_addr(echo.address)[1]
        for i in range(n_relays):
            host = f"127.0.1.{i + 1}"
            cfg = RelayConfig(gen_identity(random.Random(f"demo-{seed}-relay{i}")), f"{host}:0",
                              frozenset({echo_port}), server.address)
            Relay(net, net.register(f"relay{i}", host), cfg, random.Random(f"demo-{seed}-r{i}")).start()
        client_owner = net.register("client", "127.0.3.1")
        clock = LogicalClock() if rotate else None
        shared = None
        for run in range(runs):
            if rotate:
                if shared is None:
                    shared = OnionProxy(net, client_owner, server.address,
                                        random.Random(f"demo-{seed}-client"), clock=clock)
                else:
                    clock.advance(600)
                proxy = shared
                circuit = proxy.circuit_for(PathConstraints(echo_port))
            else:
                proxy = OnionProxy(net, client_owner, server.address,
                                   random.Random(f"demo-{seed}-client{run}"))
                circuit = proxy.build_circuit(PathConstraints(echo_port))
            direct = _direct_echo(net, client_owner, echo.address)
            onion = _onion_echo(proxy, echo.address, circuit)
            exit_host = split_addr(circuit.path[-1].address)[0]
            client_host = client_owner.host
            onion_host, direct_host = split_addr(onion)[0], split_addr(direct)[0]
            results.append({
                "run": run,
                "client": client_host,
                "direct": direct,
                "onion": onion,
                "exit": circuit.path[-1].address,
                "circuit_id": circuit.circuit_id,
                "pass": direct_host == client_host and onion_host == exit_host and onion_host != client_host,
            })
            if not rotate:
                proxy.shutdown()
        if shared is not None:
            shared.shutdown()
    finally:
        net.close()
    return results


def cmd_demo(args, out: Output) -> int:
    results = run_echo_demo(args.runs, args.seed, args.rotate, args.relays)
    for r in results:
        out.emit("echo-ip", f"run {r['run']}: client {r['client']}  direct sees {r['direct']}  "
                 f"onion sees {r['onion']}  (exit {r['exit']})", **r)
    ok = all(r["pass"] for r in results)
    passed = sum(r["pass"] for r in results)
    out.emit("verdict", f"verdict: {'PASS' if ok else 'FAIL'} ({passed}/{len(results)} runs "
             "hid the client behind the exit)", passed=passed, runs=len(results), ok=ok)
    return EXIT_OK if ok else EXIT_VERDICT


# simulation ---------------------------------------------------------------------

def _load_scenario(path: str, seed: int | None):
    try:
        scenario = parse_scenario(Path(path).read_text())
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read {path}: {exc}", "config") from exc
    if seed is not None:
        scenario.seed = seed
    scenario.validate()
    return scenario


def linkability_verdict(t: Transcript) -> tuple[bool, int, int]:
    """(expectation met, single-observer links, transactions linked by some single observer)."""
    links = single_observer_links(t)
    total = sum(len(v) for v in links.values())
    linked = {txid for v in links.values() for _, txid in v}
    if t.scenario.mode == "onion":
        return total == 0, total, len(linked)
    wanted = {tx["txid"] for tx in t.txs}
    return wanted <= linked, total, len(linked)


def _summarize(t: Transcript, problems: list[str], out: Output, path: str | None) -> int:
    ok_links, total, linked = linkability_verdict(t)
    sc = t.scenario
    out.emit("summary", "\n".join([
        f"scenario: mode={sc.mode} seed={sc.seed} relays={sc.n_relays} gossip={sc.n_gossip} "
        f"clients={sc.n_clients} tx={len(t.txs)}",
        f"records: {len(t.records)}",
        f"invariants: {'ok' if not problems else problems[0]}",
        f"single-observer links: {total}",
        f"transactions linked by a single observer: {linked}/{len(t.txs)}",
    ] + ([f"transcript: {path}"] if path else [])),
        mode=sc.mode, seed=sc.seed, records=len(t.records), violations=problems,
        single_observer_links=total, txs_linked=linked, txs=len(t.txs), transcript=path)
    ok = not problems and ok_links
    out.emit("verdict", f"verdict: {'PASS' if ok else 'FAIL'}", ok=ok)
    return EXIT_OK if ok else EXIT_VERDICT


def _figure(t: Transcript, path: str | None, out: Output) -> None:
    if not path:
        return
    from tomen.report import render_metrics
    render_metrics(metrics_report(t), path, title=f"{t.scenario.mode} seed {t.scenario.seed}")
    out.emit("figure", f"figure: {path}", path=path)


def cmd_sim_run(args, out: Output) -> int:
    scenario = _load_scenario(args.scenario, args.seed)
    t = run_scenario(scenario)
    if args.out:
        t.write(args.out)
    _figure(t, args.figure, out)
    return _summarize(t, validate(t), out, args.out)


def _read_transcript(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read {path}: {exc}", "config") from exc


def cmd_sim_replay(args, out: Output) -> int:
    t, problems = replay_text(_read_transcript(args.infile), rerun=not args.no_rerun)
    for p in problems:
        out.emit("violation", f"violation: {p}", detail=p)
    _figure(t, args.figure, out)
    if t.scenario is None:
        return EXIT_OK if not problems else EXIT_VERDICT
    return _summarize(t, problems, out, args.infile)


ROLES = {"guard", "middle", "exit"}


def cmd_sim_link(args, out: Output) -> int:
    t = Transcript.loads(_read_transcript(args.infile))
    names = as_list(args.coalition)
    truth = {(tx["client_host"], tx["txid"]) for tx in t.txs}
    if set(names) <= ROLES:
        # one coalition per circuit: the relays holding these positions on it
        circuits = t.circuits
        found = 0
        for c in circuits:
            coalition = {c[r] for r in names}
            links = adversary_link(t, coalition)
            mine = {(h, x) for h, x in links
                    if any(tx["txid"] == x and tx["circuit_id"] == c["circuit_id"] for tx in t.txs)}
            found += bool(mine)
            for host, txid in sorted(links):
                out.emit("link", f"{'+'.join(sorted(coalition))}: {host} -> {txid}",
                         coalition=sorted(coalition), client=host, txid=txid,
                         correct=(host, txid) in truth)
        out.emit("summary", f"linked {found}/{len(circuits)} circuits with coalition {','.join(names)}",
                 linked=found, circuits=len(circuits))
        return EXIT_OK
    unknown = set(names) - set(t.observers())
    if unknown:
        raise CliError(EXIT_USAGE, f"unknown observer(s): {', '.join(sorted(unknown))}", "usage")
    links = adversary_link(t, set(names))
    for host, txid in sorted(links):
        out.emit("link", f"{host} -> {txid}", client=host, txid=txid, correct=(host, txid) in truth)
    out.emit("summary", f"{len(links)} link(s)", links=len(links))
    return EXIT_OK


def cmd_sim_report(args, out: Output) -> int:
    t = Transcript.loads(_read_transcript(args.infile))
    m = metrics_report(t)
    out.emit("metrics", "\n".join([
        f"cells sent: {m['cells_sent']}",
        f"relay cells received: {m['relay_cells_received']}",
        f"data cell hops: {m['data_cell_hops']}",
        f"latency ticks: {m['latency_summary']}",
    ] + [f"{name}: {v['bytes_in']} bytes in, {v['cells_in']} cells"
         for name, v in sorted(m["per_relay"].items())]), **m)
    _figure(t, args.figure, out)
    return EXIT_OK


# wiring -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                        help="line-delimited JSON output")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = Parser(prog="tomen", description="Onion-routed transaction broadcast.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    d = sub.add_parser("dir", parents=[common], help="run the directory server")
    d.add_argument("--listen", help="host:port (default 127.0.0.1:7000)")
    d.add_argument("--config")
    d.add_argument("--run-for", type=float, help="stop after this many seconds")
    d.set_defaults(func=cmd_dir)

    r = sub.add_parser("relay", parents=[common], help="run a relay")
    r.add_argument("--config", required=True)
    r.add_argument("--run-for", type=float, help="stop after this many seconds")
    r.set_defaults(func=cmd_relay)

    g = sub.add_parser("gossip", parents=[common], help="run a gossip node")
    g.add_argument("--config")
    g.add_argument("--run-for", type=float, help="stop after this many seconds")
    g.set_defaults(func=cmd_gossip)

    c = sub.add_parser("client", parents=[common], help="onion proxy operations")
    c.add_argument("--dir", help="directory host:port")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--deterministic", action="store_true", help="seeded path and key choices")
    verbs = c.add_subparsers(dest="verb", required=True, parser_class=Parser)
    b = verbs.add_parser("build", parents=[common], help="build one circuit and tear it down")
    b.add_argument("--port", type=int, default=8333, help="target port the exit must allow")
    s = verbs.add_parser("send-tx", parents=[common], help="broadcast a transaction over a circuit")
    s.add_argument("--payload-hex", required=True)
    s.add_argument("--target", help="gossip submit host:port")
    e = verbs.add_parser("echo", parents=[common], help="ask an echo service for our address")
    e.add_argument("--target", required=True)
    c.set_defaults(func=cmd_client)

    demo = sub.add_parser("demo", parents=[common], help="demonstrations")
    demos = demo.add_subparsers(dest="demo", required=True, parser_class=Parser)
    ei = demos.add_parser("echo-ip", parents=[common],
                          help="compare the address an echo service sees, direct vs onion")
    ei.add_argument("--runs", type=int, default=1)
    ei.add_argument("--seed", type=int, default=0)
    ei.add_argument("--relays", type=int, default=5)
    ei.add_argument("--rotate", action="store_true", help="force circuit rotation between runs")
    ei.set_defaults(func=cmd_demo)

    sim = sub.add_parser("sim", parents=[common], help="deterministic simulation harness")
    sims = sim.add_subparsers(dest="sim", required=True, parser_class=Parser)
    sr = sims.add_parser("run", parents=[common], help="run a scenario and write its transcript")
    sr.add_argument("--scenario", required=True)
    sr.add_argument("--seed", type=int)
    sr.add_argument("--out")
    sr.add_argument("--figure", help="write a metrics figure (PNG) here")
    sr.set_defaults(func=cmd_sim_run)
    sp = sims.add_parser("replay", parents=[common], help="validate and reproduce a transcript")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--no-rerun", action="store_true", help="validate only")
    sp.add_argument("--figure")
    sp.set_defaults(func=cmd_sim_replay)
    sl = sims.add_parser("link", parents=[common], help="run the linker for a coalition")
    sl.add_argument("--in", dest="infile", required=True)
    sl.add_argument("--coalition", required=True,
                    help="observer names, or positions (guard,middle,exit) applied per circuit")
    sl.set_defaults(func=cmd_sim_link)
    sm = sims.add_parser("report", parents=[common], help="metrics for a transcript")
    sm.add_argument("--in", dest="infile", required=True)
    sm.add_argument("--figure")
    sm.set_defaults(func=cmd_sim_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Output(getattr(args, "json", False))
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        stream=sys.stderr)
    try:
        return args.func(args, out)
    except CliError as exc:
        code, cause, msg = exc.code, exc.cause, str(exc)
    except (ConfigError, ScenarioError) as exc:
        code, cause, msg = EXIT_CONFIG, "config", str(exc)
    except TranscriptError as exc:
        code, cause, msg = EXIT_PROTOCOL, "transcript", str(exc)
    except (NetworkError, PathError) as exc:
        code, cause, msg = EXIT_NETWORK, "network", str(exc)
    except (DirectoryError, ClientError, HandshakeError, MalformedTransaction) as exc:
        code, cause, msg = EXIT_PROTOCOL, "protocol", str(exc)
    out.emit("error", f"error: {msg}", cause=cause, detail=msg, exit_code=code)
    return code


if __name__ == "__main__":
    sys.exit(main())
