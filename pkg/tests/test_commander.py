import pytest

from blockfw.commander import (
    BackendError,
    Commander,
    MockBackend,
    ScriptBackend,
    format_rule_command,
    parse_rule_command,
    reconcile,
)
from blockfw.consensus import NodeState
from blockfw.netsim import Simulator
from blockfw.rulestate import Action, AddRule, FirewallRule, Protocol, RemoveRule

from chainkit import GENESIS, admin_txs, build_chain, rule

R22, R23, R80 = rule(22), rule(23), rule(80)


class StubNode:
    """Just enough of a node for the commander loop."""

    node_id = "stub"

    def __init__(self, chain, states):
        self.sim = Simulator()
        self.genesis = GENESIS
        self.chain_state = NodeState(GENESIS)
        self.chain_state.reset(chain, states)
        self.needs_sync = False
        self.valid = True
        self.full_checks = 0

    def revalidate(self, full=False):
        self.full_checks += full
        return self.valid

    def call_later(self, delay, fn, *args):
        return self.sim.call_later(delay, fn, *args)

    def now(self):
        return self.sim.now


# -- reconcile ----------------------------------------------------------------------


def test_adds_missing_rules():
    backend = MockBackend()
    report = reconcile([R22, R23], backend)
    assert (report.added, report.removed, report.unchanged) == (2, 0, 0)
    assert backend.rules == [R22, R23]


def test_second_pass_is_idempotent():
    backend = MockBackend()
    reconcile([R22, R23], backend)
    report = reconcile([R22, R23], backend)
    assert (report.added, report.removed, report.unchanged) == (0, 0, 2)


def test_out_of_band_rules_are_removed():
    backend = MockBackend()
    backend.inject(rule(1), rule(2), rule(3))
    report = reconcile([], backend)
    assert (report.added, report.removed) == (0, 3)
    assert backend.rules == []


def test_set_difference_oracle_on_mixed_backend():
    backend = MockBackend()
    backend.inject(R22, rule(9999), R23)
    reconcile([R22, R23, R80], backend)
    assert backend.rules == [R22, R23, R80]


def test_fail_next_then_recover():
    backend = MockBackend()
    backend.fail_next(1)
    first = reconcile([R22, R23], backend)
    assert not first.complete and first.error
    second = reconcile([R22, R23], backend)
    assert second.complete
    assert backend.rules == [R22, R23]


def test_partial_failure_mid_pass():
    backend = MockBackend()
    reconcile([R22], backend)
    backend.fail_next(0)
    calls = []
    original = backend.add_rule

    def flaky(r):
        calls.append(r)
        if len(calls) == 2:
            raise BackendError("disk full")
        original(r)

    backend.add_rule = flaky
    report = reconcile([R22, R23, R80], backend)
    assert not report.complete and report.added == 1
    backend.add_rule = original
    reconcile([R22, R23, R80], backend)
    assert backend.rules == [R22, R23, R80]


# -- script backend -------------------------------------------------------------------


def test_rule_command_round_trip():
    for r in (R22, rule(None, Protocol.ANY), rule(53, Protocol.UDP, "10.1.0.0/16")):
        assert parse_rule_command(format_rule_command(r)) == r
    assert format_rule_command(R22) == "deny proto tcp port 22 from any"


@pytest.mark.parametrize("text", ["deny 22", "block proto tcp port 22 from any", "deny proto xyz port 1 from any"])
def test_bad_rule_command(text):
    with pytest.raises(ValueError):
        parse_rule_command(text)


def test_script_backend_writes_deny_lines_in_order(tmp_path):
    path = tmp_path / "fw.txt"
    backend = ScriptBackend(path)
    reconcile([R22, R23], backend)
    assert path.read_text() == "deny proto tcp port 22 from any\ndeny proto tcp port 23 from any\n"
    reconcile([R22, R23], backend)
    assert path.read_text().count("\n") == 2
    # R22 leads the backend but not the desired list, so both go and R23
    # is re-added at the front.
    reconcile([R23], backend)
    assert path.read_text().splitlines()[2:] == [
        "delete deny proto tcp port 22 from any",
        "delete deny proto tcp port 23 from any",
        "deny proto tcp port 23 from any",
    ]
    assert backend.list_rules() == [R23]


def test_script_backend_unwritable_path(tmp_path):
    backend = ScriptBackend(tmp_path / "missing-dir" / "fw.txt")
    report = reconcile([R22], backend)
    assert not report.complete and report.error


def test_script_backend_sees_hand_edits(tmp_path):
    path = tmp_path / "fw.txt"
    backend = ScriptBackend(path)
    reconcile([R22], backend)
    with open(path, "a") as fh:
        fh.write("deny proto tcp port 4444 from any\n")
    reconcile([R22], backend)
    assert backend.list_rules() == [R22]


# -- commander loop -----------------------------------------------------------------------


def test_tick_deploys_deny_rules_only():
    chain, states = build_chain([admin_txs([AddRule(R22), AddRule(FirewallRule(Action.ALLOW, Protocol.TCP, 443)), AddRule(R23)])])
    node = StubNode(chain, states)
    backend = MockBackend()
    report = Commander(node, backend).tick()
    assert report.added == 2 and backend.rules == [R22, R23]


def test_invalid_chain_skips_reconcile():
    chain, states = build_chain([admin_txs([AddRule(R22)])])
    node = StubNode(chain, states)
    node.valid = False
    backend = MockBackend()
    commander = Commander(node, backend)
    assert commander.tick() is None and backend.rules == []
    node.valid, node.needs_sync = True, True
    assert commander.tick() is None and backend.rules == []
    node.needs_sync = False
    commander.tick()
    assert backend.rules == [R22]
    assert commander.skipped_ticks == 2


def test_incremental_updates_agree_with_full_replay():
    txs = admin_txs([AddRule(R22), AddRule(R23), RemoveRule(R22.rule_id), AddRule(R80)])
    chain, states = build_chain([[tx] for tx in txs])
    node = StubNode(chain.prefix(1), states[:2])
    backend = MockBackend()
    commander = Commander(node, backend, audit_every=2)
    for height in range(1, 5):
        node.chain_state.reset(chain.prefix(height), states[: height + 1])
        commander.tick()
    assert node.full_checks == 2
    assert commander.audit_mismatches == 0
    assert backend.rules == [R23, R80]


def test_reorg_falls_back_to_replay():
    a, a_states = build_chain([admin_txs([AddRule(R22)])])
    b, b_states = build_chain([[], admin_txs([AddRule(R80)])])
    node = StubNode(a, a_states)
    backend = MockBackend()
    commander = Commander(node, backend)
    commander.tick()
    node.chain_state.reset(b, b_states)
    commander.tick()
    assert backend.rules == [R80]


def test_loop_runs_on_refresh_period_and_reverts_tampering():
    chain, states = build_chain([admin_txs([AddRule(R22)])])
    node = StubNode(chain, states)
    backend = MockBackend()
    deployed = []
    commander = Commander(node, backend, refresh=5, on_deploy=lambda nid, r, t: deployed.append((r, t)))
    commander.start(phase=1.0)
    node.sim.run(1.0)
    assert backend.rules == [R22] and deployed == [(R22, 1.0)]
    backend.inject(rule(31337))
    node.sim.run(6.0)
    assert backend.rules == [R22]
    assert commander.ticks == 2


def test_refresh_below_one_second_rejected():
    chain, states = build_chain([])
    with pytest.raises(ValueError):
        Commander(StubNode(chain, states), MockBackend(), refresh=0.5)
