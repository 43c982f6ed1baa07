"""Chain builders and independent oracles shared by the test modules.

The oracles re-derive encodings, roots and state folds with struct, hashlib
and the raw cryptography API only. They must not import the code under
test, so that a shared bug cannot make both sides agree.
"""

from __future__ import annotations

import hashlib
import random
import struct

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey
from cryptography.exceptions import InvalidSignature

from blockfw.genesis import GenesisConfig
from blockfw.identity import generate_keypair
from blockfw.ledger import BlockHeader, Chain, compute_tx_root, genesis_block, seal_block
from blockfw.rulestate import (
    AddAdmin,
    AddRule,
    FirewallRule,
    Protocol,
    Rejected,
    RemoveAdmin,
    RemoveRule,
    Transaction,
    apply_transaction,
    genesis_state,
    state_root,
)

SEALERS = [generate_keypair(bytes([0x51 + i]) * 32) for i in range(3)]
ADMIN = generate_keypair(bytes([0xA1]) * 32)
OUTSIDERS = [generate_keypair(bytes([0xE1 + i]) * 32) for i in range(4)]

GENESIS = GenesisConfig(
    chain_id="test-chain",
    sealers=tuple(k.public_key for k in SEALERS),
    admins=(ADMIN.address,),
    period=1,
)


def rule(port, proto=Protocol.TCP, source=None) -> FirewallRule:
    return FirewallRule.deny(port, proto, source)


def make_block(parent, parent_state, txs, sealer=None, timestamp=None, genesis=GENESIS):
    """Seal ``txs`` on ``parent``; defaults to the in-turn sealer."""
    height = parent.height + 1
    if sealer is None:
        sealer = SEALERS[height % len(SEALERS)]
    state = parent_state
    for tx in txs:
        state = apply_transaction(state, tx)
    header = BlockHeader(
        height=height,
        parent_hash=parent.hash,
        state_root=state_root(state),
        tx_root=compute_tx_root(txs),
        timestamp=parent.header.timestamp + genesis.period if timestamp is None else timestamp,
        sealer=sealer.address,
        in_turn=genesis.in_turn_sealer(height) == sealer.address,
    )
    return seal_block(header, txs, sealer), state


def build_chain(tx_batches, genesis=GENESIS, sealer_for=None):
    """Chain with one block per batch. Returns ``(chain, states)``."""
    blocks = [genesis_block(genesis)]
    states = [genesis_state(genesis.admins)]
    for i, txs in enumerate(tx_batches):
        sealer = sealer_for(i + 1) if sealer_for else None
        block, state = make_block(blocks[-1], states[-1], list(txs), sealer=sealer, genesis=genesis)
        blocks.append(block)
        states.append(state)
    return Chain(tuple(blocks)), states


def admin_txs(kinds, keypair=ADMIN, start_nonce=0):
    return [Transaction.create(kind, keypair, start_nonce + i) for i, kind in enumerate(kinds)]


def random_valid_batches(rng: random.Random, n_blocks: int, max_txs: int = 50):
    """Blocks of admin transactions that the state machine accepts.

    Includes rule adds and removes and a second admin that gets promoted and
    acts on its own nonce sequence.
    """
    second = OUTSIDERS[0]
    nonces = {ADMIN.address: 0, second.address: 0}
    admins = {ADMIN.address}
    rules: list[FirewallRule] = []
    batches = []
    budget = max_txs
    for _ in range(n_blocks):
        batch = []
        for _ in range(rng.randint(0, min(4, budget))):
            signer = ADMIN if second.address not in admins or rng.random() < 0.5 else second
            choice = rng.random()
            if choice < 0.55 or not rules:
                r = rule(rng.randint(1, 65535), rng.choice(list(Protocol)))
                kind = AddRule(r)
                if r not in rules:
                    rules.append(r)
            elif choice < 0.8:
                r = rules.pop(rng.randrange(len(rules)))
                kind = RemoveRule(r.rule_id)
            elif second.address not in admins:
                kind = AddAdmin(second.address)
                admins.add(second.address)
            else:
                kind = RemoveAdmin(second.address)
                admins.discard(second.address)
                signer = ADMIN
            batch.append(Transaction.create(kind, signer, nonces[signer.address]))
            nonces[signer.address] += 1
        budget -= len(batch)
        batches.append(batch)
    return batches


# -- independent oracles ---------------------------------------------------------


def oracle_header_bytes(height, parent, state_root_, tx_root, timestamp, sealer, in_turn) -> bytes:
    return struct.pack(">Q32s32s32sQ20s?", height, parent, state_root_, tx_root, timestamp, sealer, in_turn)


def oracle_rule_bytes(action, proto, port, source) -> bytes:
    """``source`` is ``None`` or ``(4 address bytes, prefix)``."""
    if source is None:
        src = struct.pack(">?4sB", True, bytes(4), 0)
    else:
        src = struct.pack(">?4sB", False, source[0], source[1])
    return struct.pack(">BB?H", action, proto, port is None, port or 0) + src


def oracle_verify(message: bytes, signature: bytes, public_key: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


def oracle_address(public_key: bytes) -> bytes:
    return hashlib.sha256(public_key).digest()[-20:]


def oracle_rule_of(r: FirewallRule) -> tuple:
    source = None if r.source is None else (r.source.network_address.packed, r.source.prefixlen)
    return (int(r.action), int(r.protocol), r.port, source)


def oracle_fold(admins, transactions):
    """Brute-force state fold over plain tuples, sets and dicts.

    Returns ``(rules, admins, nonces, accepted_flags)`` where rules are
    oracle tuples in insertion order.
    """
    rules: list[tuple] = []
    admins = set(admins)
    nonces: dict[bytes, int] = {}
    accepted = []
    for tx in transactions:
        payload_ok = oracle_address(tx.public_key) == tx.sender and oracle_verify(
            tx.signing_bytes(), tx.signature, tx.public_key
        )
        ok = payload_ok and tx.nonce == nonces.get(tx.sender, 0) and tx.sender in admins
        kind = tx.kind
        if ok and isinstance(kind, AddRule):
            t = oracle_rule_of(kind.rule)
            if t not in rules:
                rules.append(t)
        elif ok and isinstance(kind, RemoveRule):
            match = [t for t in rules if hashlib.sha256(oracle_rule_bytes(*t)).digest() == kind.rule_id]
            if match:
                rules.remove(match[0])
            else:
                ok = False
        elif ok and isinstance(kind, AddAdmin):
            admins.add(kind.address)
        elif ok and isinstance(kind, RemoveAdmin):
            if kind.address not in admins or len(admins) == 1:
                ok = False
            else:
                admins.discard(kind.address)
        if ok:
            nonces[tx.sender] = nonces.get(tx.sender, 0) + 1
        accepted.append(ok)
    return rules, admins, nonces, accepted


def oracle_state_root(rules, admins, nonces) -> bytes:
    h = hashlib.sha256()
    encoded = sorted((hashlib.sha256(oracle_rule_bytes(*t)).digest(), oracle_rule_bytes(*t)) for t in rules)
    h.update(struct.pack(">I", len(encoded)))
    for rule_id, body in encoded:
        h.update(rule_id + body)
    h.update(struct.pack(">I", len(admins)))
    for admin in sorted(admins):
        h.update(admin)
    live = sorted((a, n) for a, n in nonces.items() if n)
    h.update(struct.pack(">I", len(live)))
    for address, nonce in live:
        h.update(address + struct.pack(">Q", nonce))
    return h.digest()


def try_apply(state, tx):
    try:
        return apply_transaction(state, tx), None
    except Rejected as exc:
        return state, exc.reason
