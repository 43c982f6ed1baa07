"""Administrator and sealer identities.

A key pair is an Ed25519 key derived from 32 bytes of seed material; the
seed itself is the secret and is what the key file stores. Addresses are
the trailing 20 bytes of SHA-256 over the raw public key.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

SEED_SIZE = 32
PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64
ADDRESS_SIZE = 20

# Curve25519 field prime and the Edwards d constant.
_P = 2**255 - 19
_D = (-121665 * pow(121666, _P - 2, _P)) % _P


class InvalidSeed(ValueError):
    pass


class InvalidKey(ValueError):
    pass


def _is_point_encoding(data: bytes) -> bool:
    """True if ``data`` decodes to a point on the Edwards curve."""
    if len(data) != PUBLIC_KEY_SIZE:
        return False
    n = int.from_bytes(data, "little")
    sign = n >> 255
    y = n & ((1 << 255) - 1)
    if y >= _P:
        return False
    y2 = y * y % _P
    x2 = (y2 - 1) * pow(_D * y2 + 1, _P - 2, _P) % _P
    if x2 == 0:
        return sign == 0
    return pow(x2, (_P - 1) // 2, _P) == 1


@dataclass(frozen=True)
class KeyPair:
    secret_key: bytes = field(repr=False)
    public_key: bytes

    @property
    def address(self) -> bytes:
        return derive_address(self.public_key)

    def sign(self, message: bytes) -> bytes:
        return sign(message, self.secret_key)


def generate_keypair(seed: bytes) -> KeyPair:
    """Deterministically derive a key pair from 32 bytes of entropy."""
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != SEED_SIZE:
        raise InvalidSeed(f"seed must be {SEED_SIZE} bytes")
    private = Ed25519PrivateKey.from_private_bytes(bytes(seed))
    public = private.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return KeyPair(secret_key=bytes(seed), public_key=public)


def derive_address(public_key: bytes) -> bytes:
    if not _is_point_encoding(bytes(public_key)):
        raise InvalidKey("public key is not a valid Ed25519 point encoding")
    return hashlib.sha256(public_key).digest()[-ADDRESS_SIZE:]


@lru_cache(maxsize=256)
def _signer(secret_key: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(secret_key)


@lru_cache(maxsize=1024)
def _verifier(public_key: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public_key)


def sign(message: bytes, secret_key: bytes) -> bytes:
    return _signer(bytes(secret_key)).sign(bytes(message))


def verify(message: bytes, signature: bytes, public_key: bytes) -> bool:
    """Check a detached signature. Never raises on bad input."""
    if len(signature) != SIGNATURE_SIZE or not _is_point_encoding(bytes(public_key)):
        return False
    try:
        _verifier(bytes(public_key)).verify(bytes(signature), bytes(message))
    except (InvalidSignature, ValueError):
        return False
    return True


def parse_address(text: str) -> bytes:
    text = text.strip().lower()
    if text.startswith("0x"):
        text = text[2:]
    raw = bytes.fromhex(text)
    if len(raw) != ADDRESS_SIZE:
        raise ValueError(f"address must be {ADDRESS_SIZE} bytes, got {len(raw)}")
    return raw


# -- key files ---------------------------------------------------------------


def write_key_file(path: str | os.PathLike, keypair: KeyPair) -> None:
    """Write the secret as 64 hex chars plus newline, readable by owner only."""
    path = Path(path)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(keypair.secret_key.hex() + "\n")
    os.chmod(path, 0o600)


def read_key_file(path: str | os.PathLike) -> KeyPair:
    text = Path(path).read_text().strip()
    try:
        seed = bytes.fromhex(text)
    except ValueError:
        raise InvalidSeed(f"{path}: key file is not hex") from None
    return generate_keypair(seed)


# -- blockfw-key CLI ---------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="blockfw-key", description="Manage administrator key files")
    sub = parser.add_subparsers(dest="verb", required=True)
    gen = sub.add_parser("gen", help="create a key file")
    gen.add_argument("--seed-hex", help="64 hex chars of seed; random if omitted")
    gen.add_argument("--out", required=True)
    addr = sub.add_parser("addr", help="print the address of a key file")
    addr.add_argument("--key", required=True)
    pub = sub.add_parser("pub", help="print the public key of a key file")
    pub.add_argument("--key", required=True)
    args = parser.parse_args(argv)

    try:
        if args.verb == "gen":
            seed = bytes.fromhex(args.seed_hex) if args.seed_hex else os.urandom(SEED_SIZE)
            keypair = generate_keypair(seed)
            write_key_file(args.out, keypair)
            print(keypair.address.hex())
        else:
            keypair = read_key_file(args.key)
            print(keypair.address.hex() if args.verb == "addr" else keypair.public_key.hex())
    except FileNotFoundError as exc:
        print(f"blockfw-key: {exc}", file=sys.stderr)
        return 2
    except (InvalidSeed, ValueError) as exc:
        print(f"blockfw-key: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
