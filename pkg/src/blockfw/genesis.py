"""Genesis configuration: chain identity, sealer set, initial administrators."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

from . import identity
from ._codec import Writer


@dataclass(frozen=True)
class GenesisConfig:
    chain_id: str
    sealers: tuple[bytes, ...]  # sealer public keys, rotation order
    admins: tuple[bytes, ...]  # administrator addresses
    period: int = 1
    wiggle: int | None = None  # defaults to 2 * period
    keepalive: int = 30
    timestamp: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "sealers", tuple(bytes(k) for k in self.sealers))
        object.__setattr__(self, "admins", tuple(bytes(a) for a in self.admins))
        if self.wiggle is None:
            object.__setattr__(self, "wiggle", 2 * self.period)
        if not self.sealers:
            raise ValueError("genesis needs at least one sealer")
        if not self.admins:
            raise ValueError("genesis needs at least one administrator")
        if self.period < 1:
            raise ValueError("period must be at least 1 second")
        for admin in self.admins:
            if len(admin) != identity.ADDRESS_SIZE:
                raise ValueError("administrator addresses are 20 bytes")
        for key in self.sealers:
            identity.derive_address(key)

    @cached_property
    def sealer_addresses(self) -> tuple[bytes, ...]:
        return tuple(identity.derive_address(k) for k in self.sealers)

    @cached_property
    def sealer_keys(self) -> dict[bytes, bytes]:
        return dict(zip(self.sealer_addresses, self.sealers))

    def in_turn_sealer(self, height: int) -> bytes:
        return self.sealer_addresses[height % len(self.sealer_addresses)]

    def encode(self) -> bytes:
        w = Writer().text(self.chain_id).u32(len(self.sealers))
        for key in self.sealers:
            w.raw(key)
        w.u32(len(self.admins))
        for admin in self.admins:
            w.raw(admin)
        w.u32(self.period).u32(self.wiggle).u32(self.keepalive).u64(self.timestamp)
        return w.getvalue()

    @cached_property
    def config_hash(self) -> bytes:
        return hashlib.sha256(self.encode()).digest()

    def to_dict(self) -> dict:
        return {
            "chain_id": self.chain_id,
            "sealers": [k.hex() for k in self.sealers],
            "admins": [a.hex() for a in self.admins],
            "period": self.period,
            "wiggle": self.wiggle,
            "keepalive": self.keepalive,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GenesisConfig":
        return cls(
            chain_id=data["chain_id"],
            sealers=tuple(bytes.fromhex(k) for k in data["sealers"]),
            admins=tuple(identity.parse_address(a) for a in data["admins"]),
            period=int(data.get("period", 1)),
            wiggle=data.get("wiggle"),
            keepalive=int(data.get("keepalive", 30)),
            timestamp=int(data.get("timestamp", 0)),
        )


def load_genesis(path: str | os.PathLike) -> GenesisConfig:
    return GenesisConfig.from_dict(json.loads(Path(path).read_text()))


def save_genesis(config: GenesisConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")
