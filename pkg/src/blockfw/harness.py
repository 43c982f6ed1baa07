"""Deterministic scenario runner for the adversarial experiments.

A scenario describes a roster (clients that seal and run a commander, an
administrator node holding the admin key, an attacker), network
conditions, timed actions and end-of-run assertions. Everything runs on one
virtual clock with seeded randomness, so a (scenario, seed) pair always
produces the same report.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import statistics
import sys
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import yaml

from .commander import Commander, MockBackend
from .consensus import BlockStatus
from .genesis import GenesisConfig
from .identity import KeyPair, generate_keypair
from .ledger import Block, BlockHeader, compute_tx_root, seal_block, validate_chain
from .netsim import BlockGossip, NetworkConditions, SimNetwork, Simulator
from .node import Node, Observer, phase_for
from .rulestate import (
    AddAdmin,
    AddRule,
    FirewallRule,
    Protocol,
    RemoveAdmin,
    RemoveRule,
    Transaction,
    replay,
    state_root,
)

log = logging.getLogger(__name__)

ROLES = ("client", "admin", "attacker")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    id: str
    role: str = "client"
    sealer: bool = True
    start_stopped: bool = False


@dataclass(frozen=True)
class ScenarioAction:
    at: float
    do: str
    node: str
    params: dict = field(default_factory=dict, hash=False)


def default_roster() -> tuple[NodeSpec, ...]:
    """Three sealing clients, one administrator and one attacker."""
    return (
        NodeSpec("client-1"),
        NodeSpec("client-2"),
        NodeSpec("client-3"),
        NodeSpec("admin", role="admin", sealer=False),
        NodeSpec("attacker", role="attacker", sealer=False),
    )


@dataclass
class Scenario:
    name: str
    seed: int = 1
    duration: float = 60.0
    nodes: tuple[NodeSpec, ...] = field(default_factory=default_roster)
    conditions: NetworkConditions = field(default_factory=NetworkConditions)
    period: int = 1
    wiggle: Optional[int] = None
    keepalive: int = 30
    refresh: float = 5.0
    sync_interval: float = 5.0
    actions: tuple[ScenarioAction, ...] = ()
    assertions: tuple[dict, ...] = ()
    description: str = ""

    def __post_init__(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ScenarioError("duplicate node ids")
        for spec in self.nodes:
            if spec.role not in ROLES:
                raise ScenarioError(f"unknown role {spec.role!r}")
        if not any(n.role == "admin" for n in self.nodes):
            raise ScenarioError("scenario needs an admin node")
        if not any(n.sealer for n in self.nodes):
            raise ScenarioError("scenario needs at least one sealer")
        for action in self.actions:
            if action.node not in ids:
                raise ScenarioError(f"action refers to unknown node {action.node!r}")
        self.actions = tuple(sorted(self.actions, key=lambda a: a.at))

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        try:
            nodes = tuple(
                NodeSpec(
                    id=str(n["id"]),
                    role=n.get("role", "client"),
                    sealer=bool(n.get("sealer", n.get("role", "client") == "client")),
                    start_stopped=bool(n.get("stopped", False)),
                )
                for n in data.get("nodes", [])
            ) or default_roster()
            actions = []
            for raw in data.get("actions", []):
                raw = dict(raw)
                at, do, node = float(raw.pop("at")), raw.pop("do"), raw.pop("node")
                repeat, every = int(raw.pop("repeat", 1)), float(raw.pop("every", 0))
                step = int(raw.pop("port_step", 0))
                for i in range(repeat):
                    params = dict(raw)
                    if step and "port" in params:
                        params["port"] = int(params["port"]) + i * step
                    actions.append(ScenarioAction(at + i * every, do, node, params))
            genesis = data.get("genesis", {})
            return cls(
                name=data["name"],
                seed=int(data.get("seed", 1)),
                duration=float(data.get("duration", 60)),
                nodes=nodes,
                conditions=NetworkConditions.from_dict(data.get("conditions")),
                period=int(genesis.get("period", 1)),
                wiggle=genesis.get("wiggle"),
                keepalive=int(genesis.get("keepalive", 30)),
                refresh=float(data.get("refresh", 5)),
                sync_interval=float(data.get("sync_interval", 5)),
                actions=tuple(actions),
                assertions=tuple(data.get("assertions", [])),
                description=data.get("description", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"bad scenario: {exc}") from exc


BUNDLED = ("e1", "e2", "e3", "liveness")


def load_scenario(name_or_path: str) -> Scenario:
    """Load a bundled scenario by name or a YAML file by path."""
    if name_or_path in BUNDLED:
        text = resources.files("blockfw").joinpath("scenarios", f"{name_or_path}.yaml").read_text()
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise ScenarioError(f"no such scenario: {name_or_path}")
        text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"cannot parse scenario: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioError("scenario file must be a mapping")
    return Scenario.from_dict(data)


def scenario_key(node_id: str) -> KeyPair:
    """Fixed per-node key so that genesis identity is stable across seeds."""
    return generate_keypair(hashlib.sha256(f"blockfw-scenario-key:{node_id}".encode()).digest())


# -- report --------------------------------------------------------------------


@dataclass
class MetricsReport:
    scenario: str
    seed: int
    rows: list[tuple[str, Any, str]] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def add(self, metric: str, value: Any, unit: str) -> None:
        self.rows.append((metric, value, unit))

    def values(self, prefix: str) -> list:
        return [value for metric, value, _ in self.rows if metric.startswith(prefix)]

    def get(self, metric: str, default: Any = None) -> Any:
        for name, value, _ in self.rows:
            if name == metric:
                return value
        return default

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["scenario", "seed", "metric", "value", "unit"])
        for metric, value, unit in self.rows:
            writer.writerow([self.scenario, self.seed, metric, _fmt(value), unit])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ScenarioError("empty report")
        report = cls(rows[0]["scenario"], int(rows[0]["seed"]))
        for row in rows:
            report.add(row["metric"], row["value"], row["unit"])
        return report


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return repr(round(value, 9))
    if isinstance(value, bytes):
        return value.hex()
    return str(value)


def compare_runs(a: MetricsReport, b: MetricsReport) -> list[tuple[str, str, str]]:
    """Field-wise differences ``(metric, value_a, value_b)`` between two reports."""
    if a.scenario != b.scenario:
        raise ScenarioError(f"cannot compare {a.scenario!r} with {b.scenario!r}")
    left = {m: (_fmt(v), u) for m, v, u in a.rows}
    right = {m: (_fmt(v), u) for m, v, u in b.rows}
    diff = []
    for metric in list(left) + [m for m in right if m not in left]:
        va, vb = left.get(metric), right.get(metric)
        if va != vb:
            diff.append((metric, va[0] if va else "", vb[0] if vb else ""))
    return diff


# -- runner ----------------------------------------------------------------------


class _Metrics(Observer):
    def __init__(self) -> None:
        self.seal_times: dict[bytes, float] = {}
        self.statuses: dict[str, int] = {}
        self.corruption_events: list[tuple[str, Optional[int], Optional[int], float]] = []
        self.resyncs: list[tuple[str, float]] = []
        self.sync_requests = 0

    def sealed(self, node, block, now):
        self.seal_times.setdefault(block.hash, now)

    def block_result(self, node, block, status, now):
        self.statuses[status.value] = self.statuses.get(status.value, 0) + 1

    def corruption(self, node, offset, height, now):
        self.corruption_events.append((node.node_id, offset, height, now))

    def resynced(self, node, duration, now):
        self.resyncs.append((node.node_id, duration))

    def sync_request(self, node, peer, from_height, now):
        self.sync_requests += 1


class ScenarioRun:
    """One execution of a scenario; keeps nodes and commanders for inspection."""

    def __init__(self, scenario: Scenario, seed: Optional[int] = None, workdir: Optional[str] = None,
                 conditions: Optional[NetworkConditions] = None, strip_roles: tuple[str, ...] = ()) -> None:
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.conditions = scenario.conditions if conditions is None else conditions
        self._tmp = None
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix=f"blockfw-{scenario.name}-")
            workdir = self._tmp.name
        self.workdir = Path(workdir)
        self.specs = {spec.id: spec for spec in scenario.nodes if spec.role not in strip_roles}
        self.keys = {node_id: scenario_key(node_id) for node_id in self.specs}
        sealers = [self.keys[s.id].public_key for s in self.specs.values() if s.sealer]
        admins = [self.keys[s.id].address for s in self.specs.values() if s.role == "admin"]
        self.genesis = GenesisConfig(
            chain_id=f"blockfw-{scenario.name}",
            sealers=tuple(sealers),
            admins=tuple(admins),
            period=scenario.period,
            wiggle=scenario.wiggle,
            keepalive=scenario.keepalive,
        )
        self.sim = Simulator()
        self.network = SimNetwork(self.sim, self.conditions, seed=self.seed, record_transmissions=True)
        self.metrics = _Metrics()
        self.nodes: dict[str, Node] = {}
        self.commanders: dict[str, Commander] = {}
        self.backends: dict[str, MockBackend] = {}
        self.submitted: dict[bytes, tuple[str, float]] = {}
        self.deployments: dict[tuple[str, bytes], float] = {}
        ids = tuple(self.specs)
        for node_id, spec in self.specs.items():
            node = Node(
                node_id,
                self.genesis,
                self.network.runtime(node_id),
                keypair=self.keys[node_id],
                peers=ids,
                datadir=self.workdir / node_id,
                sync_interval=scenario.sync_interval,
                sync_phase=phase_for(node_id, scenario.sync_interval, f"sync:{self.seed}"),
                observer=self.metrics,
            )
            self.nodes[node_id] = node
            if spec.role == "client":
                backend = MockBackend()
                self.backends[node_id] = backend
                self.commanders[node_id] = Commander(node, backend, refresh=scenario.refresh, on_deploy=self._deployed)
        self._actions = [a for a in scenario.actions if a.node in self.specs]

    def _deployed(self, node_id: str, rule: FirewallRule, now: float) -> None:
        self.deployments[(node_id, rule.rule_id)] = now

    def close(self) -> None:
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None

    # -- actions -------------------------------------------------------------

    def start_node(self, node_id: str) -> None:
        node = self.nodes[node_id]
        self.network.attach(node_id, node.on_message)
        node.start()
        commander = self.commanders.get(node_id)
        if commander is not None:
            commander.start(phase_for(node_id, self.scenario.refresh, f"commander:{self.seed}"))

    def stop_node(self, node_id: str) -> None:
        self.nodes[node_id].stop()
        self.network.attach(node_id, None)

    def corrupt_ledger(self, node_id: str) -> None:
        """Blank the ledger file in place: same length, every byte zero."""
        path = self.nodes[node_id].ledger_path
        size = path.stat().st_size
        path.write_bytes(bytes(size))

    def _submit(self, node_id: str, kind) -> Transaction:
        node = self.nodes[node_id]
        keypair = self.keys[node_id]
        tx = Transaction.create(kind, keypair, node.next_nonce(keypair.address))
        self.submitted[tx.tx_hash] = (node_id, self.sim.now)
        node.submit(tx)
        return tx

    def _rule(self, params: dict) -> FirewallRule:
        proto = Protocol[str(params.get("proto", "tcp")).upper()]
        port = params.get("port")
        return FirewallRule.deny(None if port in (None, "any") else int(port), proto, params.get("source"))

    def _execute(self, action: ScenarioAction) -> None:
        node_id, p = action.node, action.params
        log.debug("t=%.3f %s %s %s", self.sim.now, node_id, action.do, p)
        if action.do == "block":
            self._submit(node_id, AddRule(self._rule(p)))
        elif action.do == "unblock":
            target = self._rule(p).rule_id
            state = self.nodes[node_id].chain_state.state
            rule_id = target if state.find_rule(target) is None else state.find_rule(target).rule_id
            self._submit(node_id, RemoveRule(rule_id))
        elif action.do in ("admin_add", "admin_remove"):
            address = self.keys[p["target"]].address
            self._submit(node_id, AddAdmin(address) if action.do == "admin_add" else RemoveAdmin(address))
        elif action.do == "stop":
            self.stop_node(node_id)
        elif action.do == "start":
            self.start_node(node_id)
        elif action.do == "restart":
            self.stop_node(node_id)
            if p.get("corrupt"):
                self.corrupt_ledger(node_id)
            self.start_node(node_id)
        elif action.do == "corrupt":
            self.corrupt_ledger(node_id)
        elif action.do == "forge_block":
            self._forge_block(node_id)
        else:
            raise ScenarioError(f"unknown action {action.do!r}")

    def _forge_block(self, node_id: str) -> None:
        """Seal a block with a key outside the sealer set and gossip it."""
        node = self.nodes[node_id]
        head = node.chain.head
        keypair = self.keys[node_id]
        header = BlockHeader(
            height=head.height + 1,
            parent_hash=head.hash,
            state_root=state_root(node.chain_state.state),
            tx_root=compute_tx_root(()),
            timestamp=head.header.timestamp + self.genesis.period,
            sealer=keypair.address,
            in_turn=False,
        )
        node.broadcast(BlockGossip(seal_block(header, (), keypair)))

    # -- execution -------------------------------------------------------------

    def run(self) -> MetricsReport:
        for node_id, spec in self.specs.items():
            if not spec.start_stopped:
                self.start_node(node_id)
        for action in self._actions:
            self.sim.call_at(action.at, self._execute, action)
        self.sim.run(self.scenario.duration)
        report = self._report()
        report.failures = self._check(report)
        return report

    def honest_running(self) -> list[Node]:
        return [n for nid, n in self.nodes.items() if n.running and self.specs[nid].role != "attacker"]

    def canonical_chain(self):
        nodes = self.honest_running() or list(self.nodes.values())
        return max((n.chain for n in nodes), key=lambda c: (c.weight, c.height, bytes(255 - b for b in c.head_hash)))

    def rule_seal_times(self) -> dict[bytes, float]:
        """Header timestamp of the canonical block that added each rule.

        The header timestamp is the sealing time every node agrees on, so it
        is the reference point for deployment latency and block intervals.
        """
        times = {}
        for block in self.canonical_chain().blocks[1:]:
            for tx in block.transactions:
                if isinstance(tx.kind, AddRule):
                    times.setdefault(tx.kind.rule.rule_id, float(block.header.timestamp))
        return times

    def _report(self) -> MetricsReport:
        report = MetricsReport(self.scenario.name, self.seed)
        chain = self.canonical_chain()
        seal_times = self.rule_seal_times()
        rules = {r.rule_id: r for b in chain.blocks[1:] for t in b.transactions
                 if isinstance(t.kind, AddRule) for r in [t.kind.rule]}

        latencies = []
        for client in self.commanders:
            for rule_id, sealed_at in seal_times.items():
                deployed = self.deployments.get((client, rule_id))
                if deployed is None:
                    continue
                latency = round(deployed - sealed_at, 6)
                latencies.append(latency)
                report.add(f"deployment_latency[{client}][{rules[rule_id].describe()}]", latency, "s")
        if latencies:
            report.add("median_deployment_latency", statistics.median(latencies), "s")

        intervals = []
        for prev, cur in zip(chain.blocks[1:], chain.blocks[2:]):
            interval = cur.header.timestamp - prev.header.timestamp
            intervals.append(interval)
            report.add(f"block_interval[{cur.height}]", interval, "s")
        if intervals:
            report.add("mean_block_interval", statistics.fmean(intervals), "s")

        inclusion = []
        for block in chain.blocks[1:]:
            sealed_at = self.metrics.seal_times.get(block.hash)
            for tx in block.transactions:
                if tx.tx_hash in self.submitted and sealed_at is not None:
                    inclusion.append(sealed_at - self.submitted[tx.tx_hash][1])
        if inclusion:
            report.add("max_inclusion_delay", max(inclusion), "s")

        report.add("chain_height", chain.height, "blocks")
        report.add("messages_sent", self.network.messages_sent, "messages")
        report.add("messages_dropped", self.network.messages_dropped, "messages")
        report.add("sync_requests", self.metrics.sync_requests, "messages")
        report.add("reorgs", sum(n.chain_state.reorgs for n in self.nodes.values()), "events")
        for status in sorted(self.metrics.statuses):
            report.add(f"block_status[{status}]", self.metrics.statuses[status], "blocks")
        for node_id, offset, height, at in self.metrics.corruption_events:
            report.add(f"corruption_detected[{node_id}]", "none" if offset is None else offset, "offset")
        for node_id, duration in self.metrics.resyncs:
            report.add(f"resync_duration[{node_id}]", duration, "s")
        for node_id, node in self.nodes.items():
            report.add(f"final_head[{node_id}]", node.chain.head_hash, "hash")
            report.add(f"final_height[{node_id}]", node.chain.height, "blocks")
            report.add(f"final_state_root[{node_id}]", state_root(node.chain_state.state), "hash")
        report.add("events", self.sim.events_run, "events")
        return report

    # -- assertions --------------------------------------------------------------

    def _check(self, report: MetricsReport) -> list[str]:
        failures = []
        for assertion in self.scenario.assertions:
            name = assertion["check"]
            checker = getattr(self, f"_assert_{name}", None)
            if checker is None:
                failures.append(f"unknown assertion {name!r}")
                continue
            problem = checker(report, **{k: v for k, v in assertion.items() if k != "check"})
            if problem:
                failures.append(f"{name}: {problem}")
        return failures

    def _assert_deployed_within(self, report, within: float):
        for rule_id, sealed_at in self.rule_seal_times().items():
            for client in self.commanders:
                deployed = self.deployments.get((client, rule_id))
                if deployed is None:
                    return f"{client} never deployed {rule_id.hex()[:12]}"
                if deployed - sealed_at > within:
                    return f"{client} deployed {rule_id.hex()[:12]} after {deployed - sealed_at:.3f}s"
        return None

    def _assert_all_deployed(self, report):
        return self._assert_deployed_within(report, float("inf"))

    def _assert_rules(self, report, ports: list):
        chain = self.canonical_chain()
        state = replay(chain, self.genesis)
        found = [r.port for r in state.rules]
        if found != list(ports):
            return f"rule ports {found} != {list(ports)}"
        return None

    def _assert_attacker_rejected(self, report):
        attackers = {self.keys[n].address for n, s in self.specs.items() if s.role == "attacker"}
        for node in self.honest_running():
            for block in node.chain.blocks:
                if block.header.sealer in attackers:
                    return f"{node.node_id} holds a block sealed by the attacker"
                for tx in block.transactions:
                    if tx.sender in attackers:
                        return f"{node.node_id} holds an attacker transaction"
            if attackers & node.chain_state.state.admins:
                return f"attacker is an admin on {node.node_id}"
        return None

    def _assert_converged(self, report, settle: float = 5.0):
        """Honest chains agree, apart from blocks sealed in the last ``settle`` seconds.

        A block sealed just before the end may still be in flight; a node
        missing it is behind, not diverged. Any other difference is a fork.
        """
        canonical = self.canonical_chain()
        cutoff = self.scenario.duration - settle
        for node in self.honest_running():
            common = node.chain.height
            if common > canonical.height or node.chain.blocks[common].hash != canonical.blocks[common].hash:
                return f"{node.node_id} is on a different branch at height {common}"
            for block in canonical.blocks[common + 1:]:
                sealed_at = self.metrics.seal_times.get(block.hash, float(block.header.timestamp))
                if sealed_at < cutoff:
                    return f"{node.node_id} is missing block {block.height} sealed at {sealed_at:.3f}"
        return None

    def _assert_backends_match(self, report):
        for node_id, backend in self.backends.items():
            node = self.nodes[node_id]
            if not node.running:
                continue
            expected = [r.rule_id for r in replay(node.chain, self.genesis).rules if r.action.name == "DENY"]
            if [r.rule_id for r in backend.rules] != expected:
                return f"{node_id} backend differs from its chain"
        return None

    def _assert_authorized_only(self, report):
        for node in self.nodes.values():
            verdict = validate_chain(node.chain, self.genesis)
            if not verdict:
                return f"{node.node_id} chain invalid at {verdict.first_bad_height}: {verdict.reason.value}"
        return None

    def _assert_no_stall(self, report, factor: float = 10):
        delay = report.get("max_inclusion_delay")
        limit = factor * self.genesis.period
        if delay is not None and delay > limit:
            return f"a transaction waited {delay:.3f}s for inclusion (limit {limit}s)"
        return None

    def _assert_resynced(self, report, node: str, max_duration: float = 60, offset: int = 0):
        events = [e for e in self.metrics.corruption_events if e[0] == node]
        if not events:
            return f"{node} never reported corruption"
        if events[0][1] != offset:
            return f"{node} reported corruption at offset {events[0][1]}, expected {offset}"
        durations = [d for n, d in self.metrics.resyncs if n == node]
        if not durations:
            return f"{node} never completed resync"
        if not 0 < durations[0] < max_duration:
            return f"{node} resync took {durations[0]:.3f}s"
        return None

    def _assert_min_height(self, report, blocks: int):
        if self.canonical_chain().height < blocks:
            return f"chain height {self.canonical_chain().height} < {blocks}"
        return None


def run_scenario(scenario: Scenario, seed: Optional[int] = None, **kwargs) -> MetricsReport:
    run = ScenarioRun(scenario, seed=seed, **kwargs)
    try:
        return run.run()
    finally:
        run.close()


# -- blockfw-sim CLI ---------------------------------------------------------------


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="blockfw-sim", description="Run BlockFW scenarios on a virtual clock")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run a scenario file or bundled scenario (e1, e2, e3, liveness)")
    run_p.add_argument("scenario")
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--report", help="write the CSV report here instead of stdout")
    cmp_p = sub.add_parser("compare", help="diff two CSV reports")
    cmp_p.add_argument("report_a")
    cmp_p.add_argument("report_b")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "compare":
        diff = compare_runs(
            MetricsReport.from_csv(Path(args.report_a).read_text()),
            MetricsReport.from_csv(Path(args.report_b).read_text()),
        )
        for metric, a, b in diff:
            print(f"{metric}: {a} != {b}")
        return 1 if diff else 0

    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"blockfw-sim: {exc}", file=sys.stderr)
        return 2
    report = run_scenario(scenario, seed=args.seed)
    if args.report:
        Path(args.report).write_text(report.to_csv())
    else:
        sys.stdout.write(report.to_csv())
    for failure in report.failures:
        print(f"ASSERTION FAILED: {failure}", file=sys.stderr)
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
