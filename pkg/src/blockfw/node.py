"""A chain node: gossip, head announcements, chain sync and sealing timers.

The node is transport-agnostic. It talks to the world through a runtime
object providing ``now()``, ``call_later(delay, fn, *args)`` and
``send(dst, msg)``; the simulator and the socket daemon both provide one.
All callbacks for a node run on one logical thread.
"""

from __future__ import annotations

import hashlib
import logging
import os
from pathlib import Path
from typing import Optional

from .consensus import (
    BlockStatus,
    NodeState,
    accept_block,
    chain_key,
    seal_due_time,
    try_adopt_blocks,
    try_seal,
)
from .genesis import GenesisConfig
from .identity import KeyPair
from .ledger import (
    MAGIC,
    Chain,
    CorruptLedger,
    genesis_block,
    load_chain,
    persist_chain,
    validate_blocks,
)
from .netsim import (
    CHAIN_RESPONSE_CAP,
    PEER_MESSAGES,
    BlockGossip,
    ChainResponse,
    GetChain,
    GetNonce,
    GetState,
    HeadAnnounce,
    Message,
    NonceReply,
    StateReply,
    TxGossip,
)
from .rulestate import Transaction, genesis_state

log = logging.getLogger(__name__)

LEDGER_FILE = "ledger.bfw"
DEFAULT_SYNC_INTERVAL = 5.0
SYNC_BACKOFF_START = 16


class Observer:
    """Hooks the harness uses to collect metrics. All no-ops by default."""

    def sealed(self, node: "Node", block, now: float) -> None: ...
    def block_result(self, node: "Node", block, status: BlockStatus, now: float) -> None: ...
    def corruption(self, node: "Node", offset: Optional[int], height: Optional[int], now: float) -> None: ...
    def resynced(self, node: "Node", duration: float, now: float) -> None: ...
    def sync_request(self, node: "Node", peer: str, from_height: int, now: float) -> None: ...


class Node:
    def __init__(
        self,
        node_id: str,
        genesis: GenesisConfig,
        runtime,
        *,
        keypair: Optional[KeyPair] = None,
        peers: tuple[str, ...] = (),
        datadir: Optional[str | os.PathLike] = None,
        sync_interval: float = DEFAULT_SYNC_INTERVAL,
        sync_phase: float = 0.0,
        observer: Optional[Observer] = None,
    ) -> None:
        self.node_id = node_id
        self.genesis = genesis
        self.runtime = runtime
        self.peers = tuple(p for p in peers if p != node_id)
        self.datadir = Path(datadir) if datadir is not None else None
        self.sync_interval = sync_interval
        self.sync_phase = sync_phase
        self.observer = observer or Observer()
        self.chain_state = NodeState(genesis, keypair)
        self.running = False
        self.needs_sync = False
        self._epoch = 0
        self._seen: set[tuple[str, bytes]] = set()
        self._own: dict[bytes, Transaction] = {}
        self._seal_timer = None
        self._backoff: dict[str, int] = {}
        self._pending_sync = None
        self._sync_peer = 0
        self._corrupt_since: Optional[float] = None
        self._persisted: Optional[tuple[int, bytes]] = None  # (size, head encoding)
        self.corruptions: list[tuple[Optional[int], Optional[int]]] = []
        self.resync_durations: list[float] = []

    # -- runtime helpers -------------------------------------------------------

    def now(self) -> float:
        return self.runtime.now()

    def call_later(self, delay: float, fn, *args):
        """Timer that silently expires if the node is stopped meanwhile."""
        epoch = self._epoch

        def fire() -> None:
            if self.running and self._epoch == epoch:
                fn(*args)

        return self.runtime.call_later(delay, fire)

    def send(self, dst: str, msg: Message) -> None:
        self.runtime.send(dst, msg)

    def broadcast(self, msg: Message, exclude: Optional[str] = None) -> None:
        for peer in self.peers:
            if peer != exclude:
                self.send(peer, msg)

    @property
    def ledger_path(self) -> Optional[Path]:
        return self.datadir / LEDGER_FILE if self.datadir is not None else None

    @property
    def chain(self) -> Chain:
        return self.chain_state.chain

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> None:
        self._epoch += 1
        self.running = True
        self._seen.clear()
        self._pending_sync = None
        if self.datadir is not None:
            # A restarted process only keeps what is on disk.
            self.chain_state.mempool.clear()
            self._own.clear()
        self._load_ledger()
        self.call_later(self.sync_phase, self._sync_tick)
        if self.needs_sync:
            self._request_resync()
        self._schedule_seal()

    def stop(self) -> None:
        self.running = False
        self._epoch += 1
        self._seal_timer = None

    def _load_ledger(self) -> None:
        path = self.ledger_path
        if path is None:
            return
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            self.chain_state.reset()
            self._persist()
            return
        try:
            chain, offset = load_chain(path), None
        except CorruptLedger as exc:
            chain, offset = exc.chain, exc.offset
            log.warning("%s: ledger corrupt at offset %d", self.node_id, offset)
        self._install_salvaged(chain, offset)

    def _install_salvaged(self, chain: Chain, offset: Optional[int]) -> None:
        """Keep the longest valid prefix of ``chain``; flag NeedsSync if anything was lost."""
        genesis = genesis_block(self.genesis)
        bad_height = None
        if not chain.blocks or chain.blocks[0].hash != genesis.hash or chain.blocks[0].transactions:
            kept, states, bad_height = Chain((genesis,)), [], 0
        else:
            states, failure = validate_blocks(
                chain.blocks[1:], chain.blocks[0], genesis_state(self.genesis.admins), self.genesis
            )
            kept = chain.prefix(len(states))
            if failure is not None:
                bad_height = failure.height
        self.chain_state.reset(kept, [genesis_state(self.genesis.admins)] + states)
        if offset is not None or bad_height is not None:
            self._mark_corrupt(offset, bad_height)
        self._persist()

    def _mark_corrupt(self, offset: Optional[int], height: Optional[int]) -> None:
        self.needs_sync = True
        self._pending_sync = None
        if self._corrupt_since is None:
            self._corrupt_since = self.now()
        self.corruptions.append((offset, height))
        self.observer.corruption(self, offset, height, self.now())

    def _persist(self) -> None:
        path = self.ledger_path
        if path is None:
            return
        size = persist_chain(self.chain, path)
        self._persisted = (size, self.chain.head.encode())

    def revalidate(self, full: bool = False) -> bool:
        """Check the ledger file still matches what this node wrote.

        The cheap check compares size, magic and the last record; the full
        check decodes the whole file. On mismatch the node salvages what it
        can from disk and enters NeedsSync. Returns False if corruption was
        found.
        """
        path = self.ledger_path
        if path is None or self._persisted is None:
            return True
        size, tail = self._persisted
        try:
            if full:
                ok = load_chain(path) == self.chain
            else:
                with open(path, "rb") as fh:
                    magic = fh.read(4)
                    fh.seek(max(0, size - len(tail)))
                    ok = magic == MAGIC and os.fstat(fh.fileno()).st_size == size and fh.read() == tail
        except (OSError, CorruptLedger):
            ok = False
        if ok:
            return True
        log.warning("%s: ledger file no longer matches chain, resyncing", self.node_id)
        try:
            chain, offset = load_chain(path), None
        except CorruptLedger as exc:
            chain, offset = exc.chain, exc.offset
        except OSError:
            chain, offset = Chain(), 0
        self._install_salvaged(chain, offset)
        if not self.needs_sync:
            self._mark_corrupt(offset, None)
        self._request_resync()
        return False

    # -- transactions ----------------------------------------------------------

    def submit(self, tx: Transaction) -> bool:
        """Inject a locally originated transaction and gossip it."""
        self._seen.add(("tx", tx.tx_hash))
        admitted = self.chain_state.add_transaction(tx)
        if admitted:
            self._own[tx.tx_hash] = tx
            self.broadcast(TxGossip(tx))
            self._schedule_seal()
        return admitted

    def next_nonce(self, address: bytes) -> int:
        """Next nonce for ``address`` once its includable pending transactions land.

        Pending transactions the state machine would reject do not count, so
        a rejected command does not block the sender's next one.
        """
        _, state = self.chain_state.select_transactions()
        return state.next_nonce(address)

    def _on_tx(self, sender: str, tx: Transaction) -> None:
        key = ("tx", tx.tx_hash)
        if key in self._seen:
            return
        self._seen.add(key)
        if self.chain_state.add_transaction(tx):
            self.broadcast(TxGossip(tx), exclude=sender)
            self._schedule_seal()

    # -- blocks ----------------------------------------------------------------

    def _after_chain_change(self) -> None:
        self._persist()
        for tx_hash in [h for h in self._own if h not in self.chain_state.mempool]:
            del self._own[tx_hash]
        self._schedule_seal()

    def _on_block(self, sender: str, block) -> None:
        key = ("block", block.hash)
        if key in self._seen:
            return
        self._seen.add(key)
        status = accept_block(self.chain_state, block, self.now())
        self.observer.block_result(self, block, status, self.now())
        if status.accepted:
            self._after_chain_change()
            self.broadcast(BlockGossip(block), exclude=sender)
        elif status is BlockStatus.BAD_PARENT and block.height > self.chain.height:
            self._seen.discard(key)
            self._request_chain(sender)

    def _schedule_seal(self) -> None:
        if not self.running or self.needs_sync:
            return
        due = seal_due_time(self.chain_state)
        if due is None:
            return
        if self._seal_timer is not None:
            self._seal_timer.cancel()
        self._seal_timer = self.call_later(max(0.0, due - self.now()), self._seal)

    def _seal(self) -> None:
        self._seal_timer = None
        if self.needs_sync:
            return
        block = try_seal(self.chain_state, self.now())
        if block is None:
            self._schedule_seal()
            return
        self._seen.add(("block", block.hash))
        status = accept_block(self.chain_state, block, self.now())
        if status.accepted:
            self.observer.sealed(self, block, self.now())
            self._after_chain_change()
            self.broadcast(BlockGossip(block))
        else:
            log.error("%s: own block rejected: %s", self.node_id, status.value)
            self._schedule_seal()

    # -- sync protocol ---------------------------------------------------------

    def _sync_tick(self) -> None:
        chain = self.chain
        self.broadcast(HeadAnnounce(chain.height, chain.weight, chain.head_hash))
        for tx in list(self._own.values()):
            if tx.tx_hash in self.chain_state.mempool:
                self.broadcast(TxGossip(tx))
        if self.needs_sync:
            self._request_resync()
        self.call_later(self.sync_interval, self._sync_tick)

    def _request_resync(self) -> None:
        if not self.peers:
            return
        peer = self.peers[self._sync_peer % len(self.peers)]
        self._sync_peer += 1
        self._send_get_chain(peer, 0)

    def _send_get_chain(self, peer: str, from_height: int) -> None:
        self.observer.sync_request(self, peer, from_height, self.now())
        self.send(peer, GetChain(from_height))

    def _request_chain(self, peer: str) -> None:
        if self.needs_sync:
            self._send_get_chain(peer, 0)
            return
        k = self._backoff.setdefault(peer, SYNC_BACKOFF_START)
        self._send_get_chain(peer, max(0, self.chain.height - k))

    def _on_announce(self, sender: str, msg: HeadAnnounce) -> None:
        chain = self.chain
        if chain_key(msg.height, msg.weight, msg.head_hash) > chain_key(chain.height, chain.weight, chain.head_hash):
            self._request_chain(sender)

    def _on_get_chain(self, sender: str, msg: GetChain) -> None:
        blocks = self.chain.blocks[msg.from_height: msg.from_height + CHAIN_RESPONSE_CAP]
        self.send(sender, ChainResponse(tuple(blocks)))

    def _on_chain_response(self, sender: str, msg: ChainResponse) -> None:
        blocks = list(msg.blocks)
        if not blocks:
            return
        pending = self._pending_sync if self._pending_sync and self._pending_sync[0] == sender else None
        adopted, candidate = try_adopt_blocks(self.chain_state, blocks, pending[1] if pending else None)
        if candidate is None:
            k = self._backoff.get(sender, SYNC_BACKOFF_START)
            if blocks[0].height == 0 or k > self.chain.height:
                return
            self._backoff[sender] = k * 2
            self._request_chain(sender)
            return
        if adopted:
            self._after_chain_change()
        if len(blocks) == CHAIN_RESPONSE_CAP:
            self._pending_sync = None if adopted else (sender, candidate)
            self._send_get_chain(sender, blocks[-1].height + 1)
            return
        self._pending_sync = None
        self._backoff[sender] = SYNC_BACKOFF_START
        if self.needs_sync:
            self._finish_resync()

    def _finish_resync(self) -> None:
        self.needs_sync = False
        duration = self.now() - (self._corrupt_since if self._corrupt_since is not None else self.now())
        self._corrupt_since = None
        self.resync_durations.append(duration)
        log.info("%s: resync complete at height %d after %.3fs", self.node_id, self.chain.height, duration)
        self.observer.resynced(self, duration, self.now())
        self._persist()
        self._schedule_seal()

    # -- console requests ------------------------------------------------------

    def state_reply(self) -> StateReply:
        head = self.chain.head
        return StateReply(
            head.height, head.hash, head.header.sealer, self.genesis.period,
            self.needs_sync, self.chain_state.state,
        )

    # -- dispatch --------------------------------------------------------------

    def on_message(self, sender: str, msg: Message) -> Optional[Message]:
        """Handle one inbound message; returns a direct reply for console requests."""
        if not self.running:
            return None
        if isinstance(msg, PEER_MESSAGES) and sender not in self.peers:
            log.debug("%s: ignoring %s from unknown node %r", self.node_id, type(msg).__name__, sender)
            return None
        if isinstance(msg, TxGossip):
            if sender in self.peers:
                self._on_tx(sender, msg.tx)
            else:
                self.submit(msg.tx)
        elif isinstance(msg, BlockGossip):
            self._on_block(sender, msg.block)
        elif isinstance(msg, HeadAnnounce):
            self._on_announce(sender, msg)
        elif isinstance(msg, GetChain):
            self._on_get_chain(sender, msg)
        elif isinstance(msg, ChainResponse):
            self._on_chain_response(sender, msg)
        elif isinstance(msg, GetNonce):
            return NonceReply(msg.address, self.next_nonce(msg.address))
        elif isinstance(msg, GetState):
            return self.state_reply()
        return None


def phase_for(node_id: str, interval: float, salt: str = "") -> float:
    """Stable per-node offset in ``[0, interval)`` for periodic loops."""
    digest = hashlib.sha256(f"{salt}:{node_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2**64 * interval
