"""Wire messages, lossy links and the virtual-time event scheduler.

Every link is a one-way store-and-forward FIFO: a message starts
transmitting once the previous one on that link has finished, takes
``size / bandwidth`` seconds on the wire, then ``latency`` more to arrive.
Each message is independently dropped with the link's loss probability.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import math
import random
from dataclasses import dataclass
from typing import Any, Callable, Optional, Union

from . import identity
from ._codec import DecodeError, Reader, Writer
from .ledger import Block
from .rulestate import ChainState, Transaction

CHAIN_RESPONSE_CAP = 256


# -- messages ------------------------------------------------------------------


@dataclass(frozen=True)
class TxGossip:
    tx: Transaction
    TAG = 0


@dataclass(frozen=True)
class BlockGossip:
    block: Block
    TAG = 1


@dataclass(frozen=True)
class HeadAnnounce:
    height: int
    weight: int
    head_hash: bytes
    TAG = 2


@dataclass(frozen=True)
class GetChain:
    from_height: int
    TAG = 3


@dataclass(frozen=True)
class ChainResponse:
    blocks: tuple[Block, ...]
    TAG = 4


@dataclass(frozen=True)
class GetNonce:
    address: bytes
    TAG = 5


@dataclass(frozen=True)
class NonceReply:
    address: bytes
    nonce: int
    TAG = 6


@dataclass(frozen=True)
class GetState:
    TAG = 7


@dataclass(frozen=True)
class StateReply:
    height: int
    head_hash: bytes
    head_sealer: bytes
    period: int
    needs_sync: bool
    state: ChainState
    TAG = 8


Message = Union[
    TxGossip, BlockGossip, HeadAnnounce, GetChain, ChainResponse,
    GetNonce, NonceReply, GetState, StateReply,
]

PEER_MESSAGES = (BlockGossip, HeadAnnounce, GetChain, ChainResponse)


def encode_message(sender: str, msg: Message) -> bytes:
    w = Writer().u8(msg.TAG).text(sender)
    if isinstance(msg, TxGossip):
        w.raw(msg.tx.encode())
    elif isinstance(msg, BlockGossip):
        w.raw(msg.block.encode())
    elif isinstance(msg, HeadAnnounce):
        w.u64(msg.height).u64(msg.weight).raw(msg.head_hash)
    elif isinstance(msg, GetChain):
        w.u64(msg.from_height)
    elif isinstance(msg, ChainResponse):
        w.u32(len(msg.blocks))
        for block in msg.blocks:
            w.blob(block.encode())
    elif isinstance(msg, GetNonce):
        w.raw(msg.address)
    elif isinstance(msg, NonceReply):
        w.raw(msg.address).u64(msg.nonce)
    elif isinstance(msg, GetState):
        pass
    elif isinstance(msg, StateReply):
        w.u64(msg.height).raw(msg.head_hash).raw(msg.head_sealer).u32(msg.period)
        w.boolean(msg.needs_sync).raw(msg.state.encode())
    else:
        raise TypeError(f"not a message: {msg!r}")
    return w.getvalue()


def decode_message(data: bytes) -> tuple[str, Message]:
    r = Reader(data)
    tag = r.u8()
    sender = r.text()
    if tag == TxGossip.TAG:
        msg: Message = TxGossip(Transaction.read(r))
    elif tag == BlockGossip.TAG:
        msg = BlockGossip(Block.read(r))
    elif tag == HeadAnnounce.TAG:
        msg = HeadAnnounce(r.u64(), r.u64(), r.raw(32))
    elif tag == GetChain.TAG:
        msg = GetChain(r.u64())
    elif tag == ChainResponse.TAG:
        blocks = tuple(Block.decode(r.blob()) for _ in range(r.u32()))
        for prev, nxt in zip(blocks, blocks[1:]):
            if nxt.height != prev.height + 1:
                raise DecodeError("chain response blocks are not contiguous")
        msg = ChainResponse(blocks)
    elif tag == GetNonce.TAG:
        msg = GetNonce(r.raw(identity.ADDRESS_SIZE))
    elif tag == NonceReply.TAG:
        msg = NonceReply(r.raw(identity.ADDRESS_SIZE), r.u64())
    elif tag == GetState.TAG:
        msg = GetState()
    elif tag == StateReply.TAG:
        msg = StateReply(
            r.u64(), r.raw(32), r.raw(identity.ADDRESS_SIZE), r.u32(), r.boolean(), ChainState.read(r)
        )
    else:
        raise DecodeError(f"unknown message tag {tag}")
    r.finish()
    return sender, msg


def message_size(sender: str, msg: Message) -> int:
    return len(encode_message(sender, msg))


# -- links ---------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkConditions:
    bandwidth_kbps: float = math.inf
    loss_probability: float = 0.0
    latency_ms: float = 0.0

    def __post_init__(self) -> None:
        if not self.bandwidth_kbps > 0:
            raise ValueError("bandwidth must be positive")
        if not 0.0 <= self.loss_probability < 1.0:
            raise ValueError("loss probability must be in [0, 1)")
        if self.latency_ms < 0:
            raise ValueError("latency must be non-negative")

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "NetworkConditions":
        data = data or {}
        bandwidth = data.get("bandwidth_kbps")
        return cls(
            bandwidth_kbps=math.inf if bandwidth is None else float(bandwidth),
            loss_probability=float(data.get("loss_probability", 0.0)),
            latency_ms=float(data.get("latency_ms", 0.0)),
        )

    def transmission_time(self, size_bytes: int) -> float:
        return size_bytes * 8 / (self.bandwidth_kbps * 1000)


HEALTHY = NetworkConditions()


@dataclass
class Link:
    """One direction of a point-to-point link."""

    conditions: NetworkConditions
    rng: random.Random
    busy_until: float = 0.0
    sent: int = 0
    dropped: int = 0
    bits_delivered: int = 0
    log: Optional[list] = None  # (start, finish, bits) per delivered message

    def deliver(self, size_bytes: int, now: float) -> Optional[float]:
        """Schedule a message; return its arrival delay, or None if dropped."""
        self.sent += 1
        # Always draw, so the same seed gives the same stream regardless of loss rate.
        if self.rng.random() < self.conditions.loss_probability:
            self.dropped += 1
            return None
        start = max(now, self.busy_until)
        finish = start + self.conditions.transmission_time(size_bytes)
        self.busy_until = finish
        self.bits_delivered += size_bytes * 8
        if self.log is not None:
            self.log.append((start, finish, size_bytes * 8))
        return finish + self.conditions.latency_ms / 1000.0 - now


def deliver(conditions: NetworkConditions, size_bytes: int, rng: random.Random) -> Optional[float]:
    """Arrival delay for a single message on an idle link, or None if dropped."""
    return Link(conditions, rng).deliver(size_bytes, 0.0)


# -- scheduler -------------------------------------------------------------------


class Timer:
    __slots__ = ("when", "cancelled")

    def __init__(self, when: float) -> None:
        self.when = when
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Simulator:
    """Single-threaded discrete-event loop over a virtual clock.

    Ties at the same instant run in scheduling order, which keeps replays
    deterministic.
    """

    def __init__(self) -> None:
        self.now = 0.0
        self._queue: list[tuple[float, int, Timer, Callable, tuple]] = []
        self._seq = itertools.count()
        self.events_run = 0

    def call_at(self, when: float, fn: Callable, *args: Any) -> Timer:
        when = max(when, self.now)
        timer = Timer(when)
        heapq.heappush(self._queue, (when, next(self._seq), timer, fn, args))
        return timer

    def call_later(self, delay: float, fn: Callable, *args: Any) -> Timer:
        return self.call_at(self.now + delay, fn, *args)

    def run(self, until: float) -> None:
        while self._queue and self._queue[0][0] <= until:
            when, _, timer, fn, args = heapq.heappop(self._queue)
            if timer.cancelled:
                continue
            self.now = when
            self.events_run += 1
            fn(*args)
        self.now = max(self.now, until)


class SimNetwork:
    """Full-mesh network of nodes on one simulator.

    ``overrides`` maps ``(src, dst)`` to per-direction conditions.
    """

    def __init__(
        self,
        sim: Simulator,
        conditions: NetworkConditions = HEALTHY,
        seed: int = 0,
        overrides: Optional[dict] = None,
        record_transmissions: bool = False,
    ) -> None:
        self.sim = sim
        self.conditions = conditions
        self.seed = seed
        self.overrides = dict(overrides or {})
        self.record = record_transmissions
        self.links: dict[tuple[str, str], Link] = {}
        self.handlers: dict[str, Callable[[str, Message], None]] = {}

    def link(self, src: str, dst: str) -> Link:
        key = (src, dst)
        if key not in self.links:
            conditions = self.overrides.get(key, self.conditions)
            rng = random.Random(f"{self.seed}:{src}->{dst}")
            self.links[key] = Link(conditions, rng, log=[] if self.record else None)
        return self.links[key]

    def attach(self, node_id: str, handler: Optional[Callable[[str, Message], None]]) -> None:
        if handler is None:
            self.handlers.pop(node_id, None)
        else:
            self.handlers[node_id] = handler

    def send(self, src: str, dst: str, msg: Message) -> bool:
        delay = self.link(src, dst).deliver(message_size(src, msg), self.sim.now)
        if delay is None:
            return False
        self.sim.call_later(delay, self._arrive, src, dst, msg)
        return True

    def _arrive(self, src: str, dst: str, msg: Message) -> None:
        handler = self.handlers.get(dst)
        if handler is not None:
            handler(src, msg)

    def runtime(self, node_id: str) -> "SimRuntime":
        return SimRuntime(self, node_id)

    @property
    def messages_sent(self) -> int:
        return sum(link.sent for link in self.links.values())

    @property
    def messages_dropped(self) -> int:
        return sum(link.dropped for link in self.links.values())


@dataclass
class SimRuntime:
    """The clock, timers and outbound channel a node sees inside a simulation."""

    network: SimNetwork
    node_id: str

    def now(self) -> float:
        return self.network.sim.now

    def call_later(self, delay: float, fn: Callable, *args: Any) -> Timer:
        return self.network.sim.call_later(delay, fn, *args)

    def send(self, dst: str, msg: Message) -> None:
        self.network.send(self.node_id, dst, msg)
