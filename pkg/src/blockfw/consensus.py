"""Round-robin proof-of-authority sealing.

Heights rotate through the genesis sealer list. The in-turn sealer may seal
``period`` seconds after its parent; everyone else waits an extra ``wiggle``
plus a per-(address, height) jitter, so a stopped sealer's turn is covered
without a thundering herd.
"""

from __future__ import annotations

import enum
import hashlib
import logging
from dataclasses import dataclass
from typing import Iterable, Optional

from .genesis import GenesisConfig
from .identity import KeyPair
from .ledger import (
    Block,
    BlockHeader,
    Chain,
    InvalidBlock,
    InvalidReason,
    check_block,
    compute_tx_root,
    fork_choice,
    genesis_block,
    seal_block,
    validate_blocks,
)
from .rulestate import ChainState, Rejected, Transaction, apply_transaction, genesis_state, state_root

log = logging.getLogger(__name__)

FUTURE_TOLERANCE = 5.0
MAX_BLOCK_TXS = 256
MAX_MEMPOOL = 4096


@dataclass(frozen=True)
class SealerSchedule:
    sealers: tuple[bytes, ...]
    period: int = 1
    wiggle: int = 2
    keepalive: int = 30

    @classmethod
    def from_genesis(cls, config: GenesisConfig) -> "SealerSchedule":
        return cls(config.sealer_addresses, config.period, config.wiggle, config.keepalive)


def in_turn_sealer(height: int, schedule: SealerSchedule) -> bytes:
    return schedule.sealers[height % len(schedule.sealers)]


def jitter(address: bytes, height: int, period: float) -> float:
    """Deterministic out-of-turn delay in ``[0, period)``."""
    digest = hashlib.sha256(address + height.to_bytes(8, "big")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64 * period


class BlockStatus(enum.Enum):
    ACCEPTED = "Accepted"
    REORGED = "Reorged"
    KNOWN = "Known"
    BAD_SEAL = "BadSeal"
    UNAUTHORIZED_SEALER = "UnauthorizedSealer"
    BAD_PARENT = "BadParent"
    BAD_STATE_ROOT = "BadStateRoot"
    INVALID = "Invalid"
    STALE_HEIGHT = "StaleHeight"
    TOO_EARLY = "TooEarly"

    @property
    def accepted(self) -> bool:
        return self in (BlockStatus.ACCEPTED, BlockStatus.REORGED)


_REASON_STATUS = {
    InvalidReason.BAD_SEAL: BlockStatus.BAD_SEAL,
    InvalidReason.UNAUTHORIZED_SEALER: BlockStatus.UNAUTHORIZED_SEALER,
    InvalidReason.BROKEN_LINK: BlockStatus.BAD_PARENT,
    InvalidReason.TX_ROOT_MISMATCH: BlockStatus.BAD_STATE_ROOT,
    InvalidReason.STATE_DIVERGENCE: BlockStatus.BAD_STATE_ROOT,
    InvalidReason.BAD_STATE_ROOT: BlockStatus.BAD_STATE_ROOT,
}


class NodeState:
    """A node's view of the chain: blocks, per-height states and mempool.

    Only the owning node loop mutates this object.
    """

    def __init__(self, genesis: GenesisConfig, keypair: Optional[KeyPair] = None) -> None:
        self.genesis = genesis
        self.schedule = SealerSchedule.from_genesis(genesis)
        self.keypair = keypair
        self.mempool: dict[bytes, Transaction] = {}
        self.reorgs = 0
        self.reset()

    def reset(self, chain: Optional[Chain] = None, states: Optional[list[ChainState]] = None) -> None:
        if chain is None:
            chain = Chain((genesis_block(self.genesis),))
            states = [genesis_state(self.genesis.admins)]
        self.chain = chain
        self.states = list(states)
        self._index = {block.hash: block.height for block in chain.blocks}

    @property
    def state(self) -> ChainState:
        return self.states[-1]

    @property
    def head(self) -> Block:
        return self.chain.head

    @property
    def address(self) -> Optional[bytes]:
        return self.keypair.address if self.keypair else None

    @property
    def is_sealer(self) -> bool:
        return self.address is not None and self.address in self.schedule.sealers

    def has_block(self, block_hash: bytes) -> bool:
        return block_hash in self._index

    def height_of(self, block_hash: bytes) -> Optional[int]:
        return self._index.get(block_hash)

    # -- mempool ---------------------------------------------------------------

    def add_transaction(self, tx: Transaction) -> bool:
        """Admit a gossiped transaction; False if it is stale, invalid or known."""
        if tx.tx_hash in self.mempool or len(self.mempool) >= MAX_MEMPOOL:
            return False
        if not tx.signature_ok or tx.nonce < self.state.next_nonce(tx.sender):
            return False
        self.mempool[tx.tx_hash] = tx
        return True

    def _prune_mempool(self) -> None:
        state = self.state
        for tx_hash, tx in list(self.mempool.items()):
            if tx.nonce < state.next_nonce(tx.sender):
                del self.mempool[tx_hash]

    def select_transactions(self, limit: int = MAX_BLOCK_TXS) -> tuple[list[Transaction], ChainState]:
        """Greedy mempool selection in arrival order, retried until no progress.

        Retrying lets a later AddAdmin unlock an earlier-arriving transaction
        from the new admin, and keeps each sender's nonces in sequence.
        """
        state = self.state
        chosen: list[Transaction] = []
        remaining = list(self.mempool.values())
        progress = True
        while progress and remaining and len(chosen) < limit:
            progress = False
            deferred = []
            for tx in remaining:
                if len(chosen) >= limit:
                    break
                try:
                    state = apply_transaction(state, tx)
                except Rejected:
                    deferred.append(tx)
                    continue
                chosen.append(tx)
                progress = True
            remaining = deferred
        return chosen, state

    # -- chain updates -----------------------------------------------------------

    def adopt(self, candidate: Chain, fork_height: int, new_states: list[ChainState]) -> None:
        """Switch to ``candidate``, which shares blocks ``0..fork_height`` with us.

        ``new_states`` are the post-states of candidate blocks above the fork.
        """
        orphaned = [tx for block in self.chain.blocks[fork_height + 1:] for tx in block.transactions]
        if fork_height < self.chain.height:
            self.reorgs += 1
        states = self.states[: fork_height + 1] + list(new_states)
        for block in self.chain.blocks[fork_height + 1:]:
            self._index.pop(block.hash, None)
        self.chain = candidate
        self.states = states
        for block in candidate.blocks[fork_height + 1:]:
            self._index[block.hash] = block.height
            for tx in block.transactions:
                self.mempool.pop(tx.tx_hash, None)
        for tx in orphaned:
            self.mempool.setdefault(tx.tx_hash, tx)
        self._prune_mempool()


def seal_due_time(node: NodeState) -> Optional[float]:
    """Virtual time at which this node may seal on the current head."""
    if not node.is_sealer:
        return None
    schedule = node.schedule
    head = node.head.header
    height = head.height + 1
    txs, _ = node.select_transactions(limit=1)
    due = head.timestamp + (schedule.period if txs else schedule.keepalive)
    if in_turn_sealer(height, schedule) != node.address:
        due += schedule.wiggle + jitter(node.address, height, schedule.period)
    return float(due)


def try_seal(node: NodeState, now: float) -> Optional[Block]:
    """Seal a block on the current head if this node is due; else None (not yet)."""
    due = seal_due_time(node)
    if due is None or now < due:
        return None
    head = node.head.header
    height = head.height + 1
    txs, post_state = node.select_transactions()
    header = BlockHeader(
        height=height,
        parent_hash=node.head.hash,
        state_root=state_root(post_state),
        tx_root=compute_tx_root(txs),
        timestamp=max(head.timestamp + node.schedule.period, int(now)),
        sealer=node.address,
        in_turn=in_turn_sealer(height, node.schedule) == node.address,
    )
    return seal_block(header, txs, node.keypair)


def accept_block(node: NodeState, block: Block, now: float) -> BlockStatus:
    """Validate ``block`` and append it, or switch forks if it wins fork choice."""
    if node.has_block(block.hash):
        return BlockStatus.KNOWN
    h = block.header
    if h.timestamp > now + FUTURE_TOLERANCE:
        return BlockStatus.TOO_EARLY
    if h.sealer not in node.schedule.sealers:
        return BlockStatus.UNAUTHORIZED_SEALER
    parent_height = node.height_of(h.parent_hash)
    if parent_height is None or h.height != parent_height + 1:
        return BlockStatus.BAD_PARENT
    try:
        post_state = check_block(block, node.chain.blocks[parent_height], node.states[parent_height], node.genesis)
    except InvalidBlock as exc:
        log.debug("rejecting block %s: %s", block.hash.hex()[:12], exc)
        return _REASON_STATUS.get(exc.reason, BlockStatus.INVALID)

    if parent_height == node.chain.height:
        node.adopt(node.chain.extend(block), parent_height, [post_state])
        return BlockStatus.ACCEPTED
    candidate = node.chain.prefix(parent_height).extend(block)
    if fork_choice(node.chain, candidate) is candidate:
        node.adopt(candidate, parent_height, [post_state])
        return BlockStatus.REORGED
    return BlockStatus.STALE_HEIGHT


def try_adopt_blocks(node: NodeState, blocks: list[Block], pending: Optional[tuple[Chain, list[ChainState], int]] = None):
    """Validate a contiguous run of blocks from a peer and fork-choose.

    ``blocks`` must attach either to our chain or to the tip of ``pending``
    (a partially downloaded candidate). Returns ``(adopted, candidate)``
    where ``candidate`` is ``(chain, states_above_fork, fork_height)`` for the
    longest valid candidate seen, or None if the blocks do not attach.
    """
    first = blocks[0].header
    if pending is not None:
        fork = pending[2]
        if fork > node.chain.height or node.chain.blocks[fork].hash != pending[0].blocks[fork].hash:
            pending = None  # our chain moved under the partial download
    if pending is not None and first.parent_hash == pending[0].head_hash:
        base_chain, base_states, fork_height = pending
        parent_state = base_states[-1] if base_states else node.states[fork_height]
    elif first.height == 0:
        if blocks[0].hash != node.chain.blocks[0].hash:
            return False, None
        blocks = blocks[1:]
        base_chain, base_states, fork_height = node.chain.prefix(0), [], 0
        parent_state = node.states[0]
        if not blocks:
            return False, (base_chain, base_states, fork_height)
    else:
        parent_height = node.height_of(first.parent_hash)
        if parent_height is None:
            return False, None
        base_chain, base_states, fork_height = node.chain.prefix(parent_height), [], parent_height
        parent_state = node.states[parent_height]

    # Skip blocks we already hold on the same branch.
    while blocks and not base_states and node.height_of(blocks[0].hash) == base_chain.height + 1:
        base_chain = base_chain.extend(blocks[0])
        fork_height += 1
        parent_state = node.states[fork_height]
        blocks = blocks[1:]

    states, _failure = validate_blocks(blocks, base_chain.head, parent_state, node.genesis)
    good = blocks[: len(states)]
    candidate_chain = base_chain.extend(*good)
    candidate = (candidate_chain, base_states + states, fork_height)
    if not good and not base_states:
        return False, candidate
    if fork_choice(node.chain, candidate_chain) is candidate_chain and candidate_chain.head_hash != node.chain.head_hash:
        node.adopt(candidate_chain, fork_height, base_states + states)
        return True, candidate
    return False, candidate


def chain_key(height: int, weight: int, head_hash: bytes) -> tuple:
    """Sort key matching :func:`fork_choice` (bigger is preferred)."""
    return (weight, height, bytes(255 - b for b in head_hash))
