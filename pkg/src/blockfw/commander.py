"""Firewall-Commander: keep a local firewall in step with the chain.

Each refresh tick re-checks the local ledger, brings the rule state up to
the current head, and reconciles the backend against it. Out-of-band edits
to the backend are reverted on the next tick.
"""

from __future__ import annotations

import ipaddress
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from .rulestate import (
    Action,
    ChainState,
    FirewallRule,
    Protocol,
    apply_block_transactions,
    replay,
    state_root,
)

log = logging.getLogger(__name__)

DEFAULT_REFRESH = 5.0
AUDIT_EVERY = 12


class BackendError(Exception):
    pass


@dataclass(frozen=True)
class Capabilities:
    protocols: tuple[Protocol, ...] = (Protocol.TCP, Protocol.UDP, Protocol.ANY)
    max_rules: Optional[int] = None


class FirewallBackend:
    """Interface every backend implements: list, add, remove."""

    capabilities = Capabilities()

    def list_rules(self) -> list[FirewallRule]:
        raise NotImplementedError

    def add_rule(self, rule: FirewallRule) -> None:
        raise NotImplementedError

    def remove_rule(self, rule: FirewallRule) -> None:
        raise NotImplementedError


class MockBackend(FirewallBackend):
    """In-memory backend with fault injection and an add log."""

    def __init__(self) -> None:
        self.rules: list[FirewallRule] = []
        self.added: list[bytes] = []
        self._failures = 0

    def fail_next(self, n: int = 1) -> None:
        self._failures = n

    def inject(self, *rules: FirewallRule) -> None:
        """Out-of-band edit: rules appear without the commander's involvement."""
        self.rules.extend(rules)

    def _maybe_fail(self, verb: str) -> None:
        if self._failures > 0:
            self._failures -= 1
            raise BackendError(f"injected failure during {verb}")

    def list_rules(self) -> list[FirewallRule]:
        self._maybe_fail("list")
        return list(self.rules)

    def add_rule(self, rule: FirewallRule) -> None:
        self._maybe_fail("add")
        self.rules.append(rule)
        self.added.append(rule.rule_id)

    def remove_rule(self, rule: FirewallRule) -> None:
        self._maybe_fail("remove")
        self.rules = [r for r in self.rules if r.rule_id != rule.rule_id]


def format_rule_command(rule: FirewallRule) -> str:
    return rule.describe()


def parse_rule_command(text: str) -> FirewallRule:
    parts = text.split()
    if len(parts) != 7 or parts[1] != "proto" or parts[3] != "port" or parts[5] != "from":
        raise ValueError(f"unrecognised firewall command: {text!r}")
    try:
        action = Action[parts[0].upper()]
        protocol = Protocol[parts[2].upper()]
    except KeyError:
        raise ValueError(f"unrecognised firewall command: {text!r}") from None
    port = None if parts[4] == "any" else int(parts[4])
    source = None if parts[6] == "any" else ipaddress.IPv4Network(parts[6])
    return FirewallRule(action, protocol, port, source)


class ScriptBackend(FirewallBackend):
    """Appends firewall commands to a text file an operator can apply.

    Lines are ``deny proto <p> port <n> from <prefix>`` to install a rule and
    ``delete deny proto ...`` to remove one. The installed rule list is
    whatever replaying the file yields, so hand edits to the file are seen.
    """

    def __init__(self, path: str | os.PathLike) -> None:
        self.path = Path(path)

    def list_rules(self) -> list[FirewallRule]:
        try:
            lines = self.path.read_text().splitlines()
        except FileNotFoundError:
            return []
        except OSError as exc:
            raise BackendError(str(exc)) from exc
        rules: dict[bytes, FirewallRule] = {}
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                if line.startswith("delete "):
                    rules.pop(parse_rule_command(line[len("delete "):]).rule_id, None)
                else:
                    rule = parse_rule_command(line)
                    rules.setdefault(rule.rule_id, rule)
            except ValueError as exc:
                raise BackendError(str(exc)) from exc
        return list(rules.values())

    def _append(self, line: str) -> None:
        try:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
        except OSError as exc:
            raise BackendError(str(exc)) from exc

    def add_rule(self, rule: FirewallRule) -> None:
        self._append(format_rule_command(rule))

    def remove_rule(self, rule: FirewallRule) -> None:
        self._append("delete " + format_rule_command(rule))


@dataclass
class ReconcileReport:
    added: int = 0
    removed: int = 0
    unchanged: int = 0
    complete: bool = True
    error: Optional[str] = None


def reconcile(desired: Sequence[FirewallRule], backend: FirewallBackend) -> ReconcileReport:
    """Make the backend hold exactly ``desired``, in order.

    Backend rules matching the longest in-order prefix of ``desired`` are
    left alone; everything else is removed, then the rest of ``desired`` is
    added in order. A backend error stops the pass and the report says how
    far it got; the next pass picks up from there.
    """
    report = ReconcileReport()
    try:
        current = backend.list_rules()
        keep = 0
        for rule in current:
            if keep < len(desired) and rule.rule_id == desired[keep].rule_id:
                keep += 1
            else:
                break
        report.unchanged = keep
        for rule in current[keep:]:
            backend.remove_rule(rule)
            report.removed += 1
        for rule in desired[keep:]:
            backend.add_rule(rule)
            report.added += 1
    except BackendError as exc:
        report.complete = False
        report.error = str(exc)
    return report


class Commander:
    """Per-node reconciliation loop driven by the node's runtime timers."""

    def __init__(
        self,
        node,
        backend: FirewallBackend,
        refresh: float = DEFAULT_REFRESH,
        audit_every: int = AUDIT_EVERY,
        on_deploy: Optional[Callable[[str, FirewallRule, float], None]] = None,
    ) -> None:
        if refresh < 1:
            raise ValueError("refresh period must be at least 1 second")
        self.node = node
        self.backend = backend
        self.refresh = refresh
        self.audit_every = audit_every
        self.on_deploy = on_deploy
        self.ticks = 0
        self.state: Optional[ChainState] = None
        self._height: Optional[int] = None
        self._hash: Optional[bytes] = None
        self.audit_mismatches = 0
        self.skipped_ticks = 0
        self.reports: list[ReconcileReport] = []
        self.deployed_at: dict[bytes, float] = {}
        self.desired_history: set[bytes] = set()

    def start(self, phase: float = 0.0) -> None:
        self.node.call_later(phase, self._tick_and_reschedule)

    def _tick_and_reschedule(self) -> None:
        self.tick()
        self.node.call_later(self.refresh, self._tick_and_reschedule)

    def _update_state(self, full: bool) -> ChainState:
        chain = self.node.chain_state.chain
        genesis = self.node.genesis
        incremental = None
        if (
            self.state is not None
            and self._height is not None
            and self._height <= chain.height
            and chain.blocks[self._height].hash == self._hash
        ):
            incremental = self.state
            for block in chain.blocks[self._height + 1:]:
                incremental = apply_block_transactions(incremental, block.transactions, block.height)
        if incremental is None or full:
            audited = replay(chain, genesis)
            if incremental is not None and (
                state_root(audited) != state_root(incremental) or audited.rules != incremental.rules
            ):
                self.audit_mismatches += 1
                log.error("%s: incremental rule state diverged from full replay", self.node.node_id)
            incremental = audited
        self.state = incremental
        self._height, self._hash = chain.height, chain.head_hash
        return incremental

    def tick(self) -> Optional[ReconcileReport]:
        self.ticks += 1
        full = self.ticks % self.audit_every == 0
        if not self.node.revalidate(full=full) or self.node.needs_sync:
            self.skipped_ticks += 1
            return None
        state = self._update_state(full)
        desired = [rule for rule in state.rules if rule.action is Action.DENY]
        self.desired_history.update(rule.rule_id for rule in desired)
        report = reconcile(desired, self.backend)
        self.reports.append(report)
        if report.added or report.removed:
            log.info(
                "%s: reconciled firewall (+%d -%d =%d)",
                self.node.node_id, report.added, report.removed, report.unchanged,
            )
        if report.complete:
            now = self.node.now()
            for rule in desired:
                if rule.rule_id not in self.deployed_at:
                    self.deployed_at[rule.rule_id] = now
                    if self.on_deploy:
                        self.on_deploy(self.node.node_id, rule, now)
        return report
