"""Firewall rules, signed transactions, and the state machine they drive.

The state machine plays the role of the on-chain contract: it only lets
addresses on the administrator ACL change rules or the ACL itself, and it
tracks a per-sender nonce so old signed transactions cannot be replayed.
"""

from __future__ import annotations

import enum
import hashlib
import ipaddress
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Optional, Union

from . import identity
from ._codec import DecodeError, Reader, Writer


class Action(enum.IntEnum):
    DENY = 0
    ALLOW = 1


class Protocol(enum.IntEnum):
    ANY = 0
    TCP = 1
    UDP = 2


@dataclass(frozen=True)
class FirewallRule:
    action: Action
    protocol: Protocol = Protocol.TCP
    port: Optional[int] = None  # None means any port
    source: Optional[ipaddress.IPv4Network] = None  # None means any source

    def __post_init__(self) -> None:
        object.__setattr__(self, "action", Action(self.action))
        object.__setattr__(self, "protocol", Protocol(self.protocol))
        if self.port is not None and not 0 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")
        if self.source is not None and not isinstance(self.source, ipaddress.IPv4Network):
            object.__setattr__(self, "source", ipaddress.IPv4Network(self.source))

    @classmethod
    def deny(cls, port: Optional[int], protocol: Protocol = Protocol.TCP, source=None) -> "FirewallRule":
        return cls(Action.DENY, protocol, port, source)

    def encode(self) -> bytes:
        w = Writer().u8(self.action).u8(self.protocol)
        w.boolean(self.port is None).u16(self.port or 0)
        if self.source is None:
            w.boolean(True).raw(bytes(4)).u8(0)
        else:
            w.boolean(False).raw(self.source.network_address.packed).u8(self.source.prefixlen)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "FirewallRule":
        try:
            action = Action(r.u8())
            protocol = Protocol(r.u8())
        except ValueError as exc:
            raise DecodeError(str(exc)) from None
        any_port, port = r.boolean(), r.u16()
        any_source, addr, prefix = r.boolean(), r.raw(4), r.u8()
        if any_port and port:
            raise DecodeError("port set on an any-port rule")
        if any_source:
            if addr != bytes(4) or prefix:
                raise DecodeError("address set on an any-source rule")
            source = None
        else:
            if prefix > 32:
                raise DecodeError(f"prefix length {prefix}")
            try:
                source = ipaddress.IPv4Network((addr, prefix))
            except ValueError as exc:
                raise DecodeError(str(exc)) from None
        return cls(action, protocol, None if any_port else port, source)

    @cached_property
    def rule_id(self) -> bytes:
        return hashlib.sha256(self.encode()).digest()

    def describe(self) -> str:
        port = "any" if self.port is None else str(self.port)
        src = "any" if self.source is None else str(self.source)
        return f"{self.action.name.lower()} proto {self.protocol.name.lower()} port {port} from {src}"

    def __str__(self) -> str:
        return self.describe()


# -- transaction kinds ---------------------------------------------------------


@dataclass(frozen=True)
class AddRule:
    rule: FirewallRule
    TAG = 0


@dataclass(frozen=True)
class RemoveRule:
    rule_id: bytes
    TAG = 1


@dataclass(frozen=True)
class AddAdmin:
    address: bytes
    TAG = 2


@dataclass(frozen=True)
class RemoveAdmin:
    address: bytes
    TAG = 3


TxKind = Union[AddRule, RemoveRule, AddAdmin, RemoveAdmin]


def _write_kind(w: Writer, kind: TxKind) -> None:
    w.u8(kind.TAG)
    if isinstance(kind, AddRule):
        w.raw(kind.rule.encode())
    elif isinstance(kind, RemoveRule):
        w.raw(kind.rule_id)
    else:
        w.raw(kind.address)


def _read_kind(r: Reader) -> TxKind:
    tag = r.u8()
    if tag == AddRule.TAG:
        return AddRule(FirewallRule.read(r))
    if tag == RemoveRule.TAG:
        return RemoveRule(r.raw(32))
    if tag == AddAdmin.TAG:
        return AddAdmin(r.raw(identity.ADDRESS_SIZE))
    if tag == RemoveAdmin.TAG:
        return RemoveAdmin(r.raw(identity.ADDRESS_SIZE))
    raise DecodeError(f"unknown transaction kind {tag}")


@dataclass(frozen=True)
class Transaction:
    """A signed ACL or rule mutation.

    The signature covers ``(kind, sender, nonce)``. The signer's public key
    travels alongside so that verifiers can check it hashes to ``sender``.
    """

    kind: TxKind
    sender: bytes
    nonce: int
    public_key: bytes
    signature: bytes

    @classmethod
    def create(cls, kind: TxKind, keypair: identity.KeyPair, nonce: int) -> "Transaction":
        payload = signing_payload(kind, keypair.address, nonce)
        return cls(kind, keypair.address, nonce, keypair.public_key, keypair.sign(payload))

    def signing_bytes(self) -> bytes:
        return signing_payload(self.kind, self.sender, self.nonce)

    def encode(self) -> bytes:
        return self._encoded

    @cached_property
    def _encoded(self) -> bytes:
        return self.signing_bytes() + self.public_key + self.signature

    @classmethod
    def read(cls, r: Reader) -> "Transaction":
        kind = _read_kind(r)
        sender = r.raw(identity.ADDRESS_SIZE)
        nonce = r.u64()
        public_key = r.raw(identity.PUBLIC_KEY_SIZE)
        signature = r.raw(identity.SIGNATURE_SIZE)
        return cls(kind, sender, nonce, public_key, signature)

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        r = Reader(data)
        tx = cls.read(r)
        r.finish()
        return tx

    @cached_property
    def tx_hash(self) -> bytes:
        return hashlib.sha256(self.encode()).digest()

    @cached_property
    def signature_ok(self) -> bool:
        try:
            if identity.derive_address(self.public_key) != self.sender:
                return False
        except identity.InvalidKey:
            return False
        return identity.verify(self.signing_bytes(), self.signature, self.public_key)


def signing_payload(kind: TxKind, sender: bytes, nonce: int) -> bytes:
    w = Writer()
    _write_kind(w, kind)
    return w.raw(sender).u64(nonce).getvalue()


# -- state -----------------------------------------------------------------------


class RejectReason(enum.Enum):
    BAD_SIGNATURE = "BadSignature"
    BAD_NONCE = "BadNonce"
    NOT_ADMIN = "NotAdmin"
    UNKNOWN_RULE = "UnknownRule"
    UNKNOWN_ADMIN = "UnknownAdmin"
    LAST_ADMIN = "LastAdmin"


class Rejected(Exception):
    def __init__(self, reason: RejectReason, detail: str = "") -> None:
        super().__init__(f"{reason.value}{': ' + detail if detail else ''}")
        self.reason = reason


class StateDivergence(Exception):
    """A sealed block contained a transaction the state machine rejects."""

    def __init__(self, height: int, index: int, reason: RejectReason) -> None:
        super().__init__(f"transaction {index} at height {height} rejected: {reason.value}")
        self.height = height
        self.index = index
        self.reason = reason


@dataclass(frozen=True)
class ChainState:
    rules: tuple[FirewallRule, ...] = ()
    admins: frozenset = frozenset()
    nonces: Mapping[bytes, int] = field(default_factory=dict)

    def next_nonce(self, address: bytes) -> int:
        return self.nonces.get(address, 0)

    def rule_ids(self) -> list[bytes]:
        return [rule.rule_id for rule in self.rules]

    def find_rule(self, rule_id: bytes) -> Optional[FirewallRule]:
        for rule in self.rules:
            if rule.rule_id == rule_id:
                return rule
        return None

    def encode(self) -> bytes:
        """Full encoding with rules in insertion order (used on the wire)."""
        w = Writer().u32(len(self.rules))
        for rule in self.rules:
            w.raw(rule.encode())
        w.u32(len(self.admins))
        for admin in sorted(self.admins):
            w.raw(admin)
        w.u32(len(self.nonces))
        for address in sorted(self.nonces):
            w.raw(address).u64(self.nonces[address])
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "ChainState":
        rules = tuple(FirewallRule.read(r) for _ in range(r.u32()))
        admins = frozenset(r.raw(identity.ADDRESS_SIZE) for _ in range(r.u32()))
        nonces = {}
        for _ in range(r.u32()):
            address = r.raw(identity.ADDRESS_SIZE)
            nonces[address] = r.u64()
        return cls(rules, admins, nonces)


def genesis_state(admins: Iterable[bytes]) -> ChainState:
    admins = frozenset(admins)
    if not admins:
        raise ValueError("at least one administrator is required")
    return ChainState(admins=admins)


def apply_transaction(state: ChainState, tx: Transaction) -> ChainState:
    """Return the state after ``tx`` or raise :class:`Rejected`."""
    if not tx.signature_ok:
        raise Rejected(RejectReason.BAD_SIGNATURE)
    expected = state.next_nonce(tx.sender)
    if tx.nonce != expected:
        raise Rejected(RejectReason.BAD_NONCE, f"expected {expected}, got {tx.nonce}")
    if tx.sender not in state.admins:
        raise Rejected(RejectReason.NOT_ADMIN, tx.sender.hex())

    rules, admins = state.rules, state.admins
    kind = tx.kind
    if isinstance(kind, AddRule):
        if state.find_rule(kind.rule.rule_id) is None:
            rules = rules + (kind.rule,)
    elif isinstance(kind, RemoveRule):
        if state.find_rule(kind.rule_id) is None:
            raise Rejected(RejectReason.UNKNOWN_RULE, kind.rule_id.hex())
        rules = tuple(r for r in rules if r.rule_id != kind.rule_id)
    elif isinstance(kind, AddAdmin):
        admins = admins | {kind.address}
    elif isinstance(kind, RemoveAdmin):
        if kind.address not in admins:
            raise Rejected(RejectReason.UNKNOWN_ADMIN, kind.address.hex())
        if len(admins) == 1:
            raise Rejected(RejectReason.LAST_ADMIN)
        admins = admins - {kind.address}
    else:
        raise TypeError(f"unknown transaction kind {kind!r}")

    nonces = dict(state.nonces)
    nonces[tx.sender] = expected + 1
    return ChainState(rules, admins, nonces)


def apply_block_transactions(state: ChainState, transactions: Iterable[Transaction], height: int) -> ChainState:
    for index, tx in enumerate(transactions):
        try:
            state = apply_transaction(state, tx)
        except Rejected as exc:
            raise StateDivergence(height, index, exc.reason) from None
    return state


def replay(chain, genesis) -> ChainState:
    """Fold every transaction of ``chain`` (genesis first) into a state."""
    state = genesis_state(genesis.admins)
    for block in chain.blocks[1:]:
        state = apply_block_transactions(state, block.transactions, block.header.height)
    return state


def state_root(state: ChainState) -> bytes:
    """Order-independent commitment to rules, ACL and nonces."""
    h = hashlib.sha256()
    rules = sorted(state.rules, key=lambda r: r.rule_id)
    h.update(len(rules).to_bytes(4, "big"))
    for rule in rules:
        h.update(rule.rule_id + rule.encode())
    admins = sorted(state.admins)
    h.update(len(admins).to_bytes(4, "big"))
    for admin in admins:
        h.update(admin)
    nonces = sorted((a, n) for a, n in state.nonces.items() if n)
    h.update(len(nonces).to_bytes(4, "big"))
    for address, nonce in nonces:
        h.update(address + nonce.to_bytes(8, "big"))
    return h.digest()
