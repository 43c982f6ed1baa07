"""Hash-chained block storage.

Block hashes cover the header fields in a fixed order (the seal is a
signature over those same bytes and is not itself hashed). The on-disk
ledger is ``b"BFW1"`` followed by ``[u32 length | block bytes]`` records.
"""

from __future__ import annotations

import enum
import hashlib
import os
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

from . import identity
from ._codec import DecodeError, Reader, Writer
from .genesis import GenesisConfig
from .rulestate import (
    ChainState,
    StateDivergence,
    Transaction,
    apply_block_transactions,
    genesis_state,
    state_root,
)

MAGIC = b"BFW1"
ZERO_HASH = bytes(32)
ZERO_ADDRESS = bytes(identity.ADDRESS_SIZE)
ZERO_SEAL = bytes(identity.SIGNATURE_SIZE)
HEADER_SIZE = 8 + 32 + 32 + 32 + 8 + 20 + 1


@dataclass(frozen=True)
class BlockHeader:
    height: int
    parent_hash: bytes
    state_root: bytes
    tx_root: bytes
    timestamp: int
    sealer: bytes
    in_turn: bool
    seal: bytes = ZERO_SEAL


def encode_header(header: BlockHeader) -> bytes:
    """Canonical bytes of every header field except the seal."""
    return (
        Writer()
        .u64(header.height)
        .raw(header.parent_hash)
        .raw(header.state_root)
        .raw(header.tx_root)
        .u64(header.timestamp)
        .raw(header.sealer)
        .boolean(header.in_turn)
        .getvalue()
    )


def compute_tx_root(transactions: Iterable[Transaction]) -> bytes:
    return hashlib.sha256(b"".join(tx.encode() for tx in transactions)).digest()


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...] = ()

    @cached_property
    def hash(self) -> bytes:
        return hashlib.sha256(encode_header(self.header)).digest()

    @property
    def height(self) -> int:
        return self.header.height

    def encode(self) -> bytes:
        return self._encoded

    @cached_property
    def _encoded(self) -> bytes:
        w = Writer().raw(encode_header(self.header)).raw(self.header.seal)
        w.u32(len(self.transactions))
        for tx in self.transactions:
            w.blob(tx.encode())
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "Block":
        header = BlockHeader(
            height=r.u64(),
            parent_hash=r.raw(32),
            state_root=r.raw(32),
            tx_root=r.raw(32),
            timestamp=r.u64(),
            sealer=r.raw(identity.ADDRESS_SIZE),
            in_turn=r.boolean(),
            seal=r.raw(identity.SIGNATURE_SIZE),
        )
        transactions = tuple(Transaction.decode(r.blob()) for _ in range(r.u32()))
        return cls(header, transactions)

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        r = Reader(data)
        block = cls.read(r)
        r.finish()
        return block

    def weight(self) -> int:
        return 2 if self.header.in_turn else 1


def hash_block(block: Block) -> bytes:
    return block.hash


def seal_block(header: BlockHeader, transactions: Sequence[Transaction], keypair: identity.KeyPair) -> Block:
    """Sign ``header`` (seal field ignored) with the sealer key."""
    seal = keypair.sign(encode_header(header))
    return Block(replace(header, seal=seal), tuple(transactions))


def genesis_block(config: GenesisConfig) -> Block:
    """The deterministic block 0; its tx_root commits to the genesis config."""
    header = BlockHeader(
        height=0,
        parent_hash=ZERO_HASH,
        state_root=state_root(genesis_state(config.admins)),
        tx_root=config.config_hash,
        timestamp=config.timestamp,
        sealer=ZERO_ADDRESS,
        in_turn=False,
    )
    return Block(header)


@dataclass(frozen=True)
class Chain:
    blocks: tuple[Block, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    @property
    def head_hash(self) -> bytes:
        return self.blocks[-1].hash

    @cached_property
    def weight(self) -> int:
        return sum(block.weight() for block in self.blocks)

    def extend(self, *blocks: Block) -> "Chain":
        return Chain(self.blocks + tuple(blocks))

    def prefix(self, height: int) -> "Chain":
        """Blocks 0..height inclusive."""
        return Chain(self.blocks[: height + 1])

    def __len__(self) -> int:
        return len(self.blocks)


# -- validation ----------------------------------------------------------------


class InvalidReason(enum.Enum):
    DECODE_ERROR = "DecodeError"
    GENESIS_MISMATCH = "GenesisMismatch"
    BAD_HEIGHT = "BadHeight"
    BROKEN_LINK = "BrokenLink"
    UNAUTHORIZED_SEALER = "UnauthorizedSealer"
    WRONG_TURN = "WrongTurnFlag"
    BAD_SEAL = "BadSeal"
    TX_ROOT_MISMATCH = "TxRootMismatch"
    TIMESTAMP_REGRESSION = "TimestampRegression"
    STATE_DIVERGENCE = "StateDivergence"
    BAD_STATE_ROOT = "BadStateRoot"


class InvalidBlock(Exception):
    def __init__(self, height: int, reason: InvalidReason, detail: str = "") -> None:
        super().__init__(f"height {height}: {reason.value}{' (' + detail + ')' if detail else ''}")
        self.height = height
        self.reason = reason


@dataclass(frozen=True)
class Verdict:
    valid: bool
    first_bad_height: Optional[int] = None
    reason: Optional[InvalidReason] = None

    def __bool__(self) -> bool:
        return self.valid


VALID = Verdict(True)


def check_header(block: Block, parent: Block, config: GenesisConfig) -> None:
    """Link, authority and seal checks that need no state."""
    h = block.header
    height = parent.header.height + 1
    if h.height != height:
        raise InvalidBlock(height, InvalidReason.BAD_HEIGHT, f"block claims height {h.height}")
    if h.parent_hash != parent.hash:
        raise InvalidBlock(height, InvalidReason.BROKEN_LINK)
    public_key = config.sealer_keys.get(h.sealer)
    if public_key is None:
        raise InvalidBlock(height, InvalidReason.UNAUTHORIZED_SEALER, h.sealer.hex())
    if h.in_turn != (config.in_turn_sealer(height) == h.sealer):
        raise InvalidBlock(height, InvalidReason.WRONG_TURN)
    if not identity.verify(encode_header(h), h.seal, public_key):
        raise InvalidBlock(height, InvalidReason.BAD_SEAL)


def check_block(block: Block, parent: Block, parent_state: ChainState, config: GenesisConfig) -> ChainState:
    """Fully validate ``block`` on top of ``parent``; return the post-state."""
    check_header(block, parent, config)
    h = block.header
    if compute_tx_root(block.transactions) != h.tx_root:
        raise InvalidBlock(h.height, InvalidReason.TX_ROOT_MISMATCH)
    if h.timestamp < parent.header.timestamp:
        raise InvalidBlock(h.height, InvalidReason.TIMESTAMP_REGRESSION)
    try:
        state = apply_block_transactions(parent_state, block.transactions, h.height)
    except StateDivergence as exc:
        raise InvalidBlock(h.height, InvalidReason.STATE_DIVERGENCE, str(exc)) from None
    if state_root(state) != h.state_root:
        raise InvalidBlock(h.height, InvalidReason.BAD_STATE_ROOT)
    return state


def validate_blocks(
    blocks: Sequence[Block], parent: Block, parent_state: ChainState, config: GenesisConfig
) -> tuple[list[ChainState], Optional[InvalidBlock]]:
    """Validate a run of blocks on top of ``parent``.

    Returns the post-states of the valid leading blocks, and the failure
    that stopped validation (if any).
    """
    states = []
    for block in blocks:
        try:
            parent_state = check_block(block, parent, parent_state, config)
        except InvalidBlock as exc:
            return states, exc
        except (AttributeError, TypeError) as exc:
            return states, InvalidBlock(parent.header.height + 1, InvalidReason.DECODE_ERROR, str(exc))
        states.append(parent_state)
        parent = block
    return states, None


def validate_chain(chain: Chain, config: GenesisConfig) -> Verdict:
    try:
        blocks = list(chain.blocks)
        genesis = blocks[0]
        genesis_ok = (
            isinstance(genesis, Block)
            and genesis.hash == genesis_block(config).hash
            and genesis.header.seal == ZERO_SEAL
            and not genesis.transactions
        )
    except (AttributeError, TypeError, IndexError):
        return Verdict(False, 0, InvalidReason.DECODE_ERROR)
    if not genesis_ok:
        return Verdict(False, 0, InvalidReason.GENESIS_MISMATCH)
    _, failure = validate_blocks(blocks[1:], genesis, genesis_state(config.admins), config)
    if failure is not None:
        return Verdict(False, failure.height, failure.reason)
    return VALID


# -- fork choice -----------------------------------------------------------------


class IncompatibleGenesis(ValueError):
    pass


def fork_choice(local: Chain, candidate: Chain) -> Chain:
    """Pick the heavier chain (in-turn blocks weigh 2, others 1).

    Ties go to the taller chain, then to the lexicographically smaller head
    hash. Identical chains keep ``local``.
    """
    if local.blocks[0].hash != candidate.blocks[0].hash:
        raise IncompatibleGenesis("chains have different genesis blocks")
    if local.head_hash == candidate.head_hash:
        return local
    if candidate.weight != local.weight:
        return candidate if candidate.weight > local.weight else local
    if candidate.height != local.height:
        return candidate if candidate.height > local.height else local
    return candidate if candidate.head_hash < local.head_hash else local


# -- persistence -----------------------------------------------------------------


class CorruptLedger(Exception):
    """The ledger file stops decoding at ``offset``; ``chain`` is the salvaged prefix."""

    def __init__(self, offset: int, chain: Chain, detail: str = "") -> None:
        super().__init__(f"ledger corrupt at offset {offset}{': ' + detail if detail else ''}")
        self.offset = offset
        self.chain = chain


def encode_ledger(chain: Chain) -> bytes:
    w = Writer().raw(MAGIC)
    for block in chain.blocks:
        w.blob(block.encode())
    return w.getvalue()


def decode_ledger(data: bytes) -> Chain:
    if data[:4] != MAGIC:
        raise CorruptLedger(0, Chain(), "bad magic")
    blocks = []
    offset = 4
    while offset < len(data):
        record_start = offset
        if len(data) - offset < 4:
            raise CorruptLedger(record_start, Chain(blocks), "truncated length prefix")
        length = int.from_bytes(data[offset:offset + 4], "big")
        offset += 4
        if length > len(data) - offset:
            raise CorruptLedger(record_start, Chain(blocks), "truncated record")
        try:
            blocks.append(Block.decode(data[offset:offset + length]))
        except DecodeError as exc:
            raise CorruptLedger(record_start, Chain(blocks), str(exc)) from None
        offset += length
    return Chain(blocks)


def persist_chain(chain: Chain, path: str | os.PathLike) -> int:
    """Atomically write the ledger file; returns its size in bytes."""
    path = Path(path)
    data = encode_ledger(chain)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return len(data)


def load_chain(path: str | os.PathLike) -> Chain:
    """Read a ledger file. I/O errors propagate as ``OSError``;
    undecodable content raises :class:`CorruptLedger`."""
    return decode_ledger(Path(path).read_bytes())
