import dataclasses

import pytest

from tomen.config import ConfigError
from tomen.harness import (
    Scenario,
    ScenarioError,
    Transcript,
    TranscriptError,
    adversary_link,
    gossip_edges,
    metrics_report,
    parse_scenario,
    replay_text,
    run_scenario,
    single_observer_links,
    validate,
)

ONION = Scenario(seed=3, n_relays=5, n_gossip=3, n_clients=2, tx_per_client=2)
DIRECT = dataclasses.replace(ONION, mode="direct")


@pytest.fixture(scope="module")
def onion():
    return run_scenario(ONION)


@pytest.fixture(scope="module")
def direct():
    return run_scenario(DIRECT)


def coalition_for(t, circuit, roles):
    return {circuit[r] for r in roles}


class TestScenario:
    def test_parse(self):
        sc = parse_scenario("seed = 9\nmode = direct\nrelays.count = 4\ngossip.topology = line\nrotation = yes\n")
        assert (sc.seed, sc.mode, sc.n_relays, sc.topology, sc.rotation) == (9, "direct", 4, "line", True)

    def test_unknown_key_names_line(self):
        with pytest.raises(ConfigError) as err:
            parse_scenario("seed = 1\n\nrelay.count = 3\n")
        assert err.value.line == 3

    def test_bad_value_names_line(self):
        with pytest.raises(ConfigError) as err:
            parse_scenario("seed = 1\nrelays.count = three\n")
        assert err.value.line == 2

    @pytest.mark.parametrize("bad", [
        Scenario(n_relays=2),
        Scenario(mode="mixnet"),
        Scenario(n_gossip=0),
        Scenario(seed=2**64),
        Scenario(topology="edges:0-1", n_gossip=3),
    ])
    def test_rejected_before_running(self, bad):
        with pytest.raises(ScenarioError):
            run_scenario(bad)

    def test_direct_mode_needs_no_relays(self):
        t = run_scenario(Scenario(mode="direct", n_relays=0, n_clients=1, tx_per_client=1))
        assert validate(t) == []

    @pytest.mark.parametrize("topology", ["line", "ring", "star", "complete", "random", "edges:0-1,1-2,2-3"])
    def test_topologies_connected(self, topology):
        edges = gossip_edges(topology, 4, 5)
        Scenario(n_gossip=4, topology=topology).validate()
        assert all(0 <= a < 4 and 0 <= b < 4 and a != b for a, b in edges)


class TestTranscript:
    def test_deterministic(self, onion):
        assert run_scenario(ONION).dumps() == onion.dumps()

    def test_other_seed_differs(self, onion):
        assert run_scenario(dataclasses.replace(ONION, seed=4)).dumps() != onion.dumps()

    def test_roundtrip(self, onion):
        again = Transcript.loads(onion.dumps())
        assert again.dumps() == onion.dumps()

    def test_records_totally_ordered(self, onion):
        keys = [(r.time, r.seq) for r in onion.records]
        assert keys == sorted(keys) and len(set(keys)) == len(keys)

    def test_corrupt_line_rejected(self, onion):
        lines = onion.dumps().splitlines()
        lines[3] = lines[3][:-5]
        with pytest.raises(TranscriptError):
            Transcript.loads("\n".join(lines))

    def test_replay_clean(self, onion):
        _, problems = replay_text(onion.dumps())
        assert problems == []

    def test_forged_middle_plaintext(self, onion):
        t = Transcript.loads(onion.dumps())
        middle = next(r for r in t.records if r.role == "middle")
        middle.visible_plaintext_digest = "00" * 32
        _, problems = replay_text(t.dumps(), rerun=False)
        assert problems and problems[0].startswith("plaintext at non-exit observer")

    def test_tampered_record_fails_rerun(self, onion):
        t = Transcript.loads(onion.dumps())
        t.records[10].n_bytes += 1
        _, problems = replay_text(t.dumps())
        assert any("replay mismatch" in p for p in problems)

    def test_mempool_integrity_violation(self, onion):
        t = Transcript.loads(onion.dumps())
        pool = next(iter(t.mempools.values()))
        txid = next(iter(pool))
        pool[txid] = "00"
        assert any(p.startswith("txid integrity") for p in validate(t))


class TestVantage:
    def test_direct_gossip_sees_client_and_plaintext(self):
        t = run_scenario(dataclasses.replace(DIRECT, n_clients=1, tx_per_client=1))
        (tx,) = t.txs
        seen = [r for r in t.records if r.role == "gossip" and r.extra.get("txid") == tx["txid"]
                and r.src_addr.startswith(tx["client_host"] + ":")]
        assert seen and all(r.visible_plaintext_digest for r in seen)

    def test_onion_guard_sees_client_but_no_plaintext(self, onion):
        guards = [r for r in onion.records if r.role == "guard" and r.src_addr.startswith("192.168.")]
        assert guards
        assert all(r.visible_plaintext_digest is None for r in guards)

    def test_onion_exit_sees_plaintext(self, onion):
        exits = [r for r in onion.records if r.role == "exit" and r.visible_plaintext_digest]
        assert len(exits) >= len(onion.txs)

    def test_plaintext_locality(self, onion):
        for r in onion.records:
            if r.visible_plaintext_digest:
                assert r.role in ("exit", "gossip", "echo") or (r.role == "tap" and r.kind == "stream")
                assert not r.src_addr.startswith("192.168.")

    def test_every_tx_propagated(self, onion):
        for pool in onion.mempools.values():
            assert set(pool) == {tx["txid"] for tx in onion.txs}


class TestLinker:
    def test_direct_single_gossip_node_links(self, direct):
        links = single_observer_links(direct)
        linked = set().union(*links.values())
        assert {(tx["client_host"], tx["txid"]) for tx in direct.txs} <= linked

    def test_onion_single_observers_empty(self, onion):
        links = single_observer_links(onion)
        assert set(links) == set(onion.observers())
        assert all(v == set() for v in links.values())

    def test_guard_plus_exit_links(self, onion):
        for circ in onion.circuits:
            txids = {tx["txid"] for tx in onion.txs if tx["circuit_id"] == circ["circuit_id"]}
            client_host = next(e["host"] for e in onion.entities if e["name"] == circ["client"])
            links = adversary_link(onion, coalition_for(onion, circ, ("guard", "exit")))
            assert {(client_host, t) for t in txids} <= links

    def test_full_circuit_links(self, onion):
        circ = onion.circuits[0]
        links = adversary_link(onion, coalition_for(onion, circ, ("guard", "middle", "exit")))
        assert any(tx["txid"] in {t for _, t in links} for tx in onion.txs)

    def test_guard_plus_middle_learns_nothing(self, onion):
        for circ in onion.circuits:
            assert adversary_link(onion, coalition_for(onion, circ, ("guard", "middle"))) == set()

    def test_no_false_links(self, onion):
        truth = {(tx["client_host"], tx["txid"]) for tx in onion.txs}
        everyone = set(onion.observers())
        assert adversary_link(onion, everyone) <= truth


class TestMetrics:
    def test_minimal_run_data_hops(self):
        t = run_scenario(Scenario(seed=1, n_relays=3, n_gossip=1, n_clients=1, tx_per_client=1))
        m = metrics_report(t)
        assert m["data_cell_hops"] >= 3
        assert m["forwarded_cells"] >= 2 * m["data_cells_at_exit"]
        assert m["latency_summary"]["count"] == 1 and m["latency_summary"]["min"] > 0
        assert set(m["per_relay"]) == {"relay0", "relay1", "relay2"}
        assert all(v["bytes_in"] > 0 for v in m["per_relay"].values())

    def test_rotation_builds_new_circuits(self):
        t = run_scenario(Scenario(seed=2, n_relays=5, n_clients=1, tx_per_client=3, rotation=True))
        assert len(t.circuits) == 3
        assert len({c["circuit_id"] for c in t.circuits}) == 3
        assert validate(t) == []
        assert all(v == set() for v in single_observer_links(t).values())
