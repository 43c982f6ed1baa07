import os
import stat

import pytest
from hypothesis import given, settings, strategies as st

from blockfw import identity
from blockfw.identity import (
    InvalidKey,
    InvalidSeed,
    derive_address,
    generate_keypair,
    read_key_file,
    sign,
    verify,
    write_key_file,
)

from chainkit import oracle_address, oracle_verify

# Produced with openssl (raw seed wrapped as PKCS#8, public key exported as
# DER) and sha256sum over the 32 public key bytes; not by this package.
GOLDEN_SEED = bytes(range(32))
GOLDEN_PUBLIC = bytes.fromhex("03a107bff3ce10be1d70dd18e74bc09967e4d6309ba50d5f1ddc8664125531b8")
GOLDEN_ADDRESS = bytes.fromhex("bf2bcab73da651358839e9b77481b2eab107708c")
GOLDEN_SIGNATURE = bytes.fromhex(
    "c30c0212c2a124bdf22c988659e3dfee16f3e6f1160b8468a2da818a94182f72"
    "cfaeb993dbb6d404ffa30f4d63e045dbb7ed8c1570b2d34393437eed4a38010b"
)


def test_golden_keypair_matches_openssl():
    kp = generate_keypair(GOLDEN_SEED)
    assert kp.public_key == GOLDEN_PUBLIC
    assert kp.address == GOLDEN_ADDRESS
    assert derive_address(kp.public_key) == GOLDEN_ADDRESS
    assert kp.address.hex() == "bf2bcab73da651358839e9b77481b2eab107708c"


def test_golden_signature_matches_openssl():
    assert sign(b"blockfw", GOLDEN_SEED) == GOLDEN_SIGNATURE


def test_generation_is_deterministic():
    assert generate_keypair(GOLDEN_SEED) == generate_keypair(GOLDEN_SEED)


def test_zero_and_one_seeds_differ():
    assert generate_keypair(bytes(32)).address != generate_keypair(b"\x01" * 32).address


@pytest.mark.parametrize("size", [0, 31, 33, 64])
def test_wrong_seed_length(size):
    with pytest.raises(InvalidSeed):
        generate_keypair(bytes(size))


@pytest.mark.parametrize("key", [b"", bytes(31), b"\xff" * 32])
def test_malformed_public_key(key):
    with pytest.raises(InvalidKey):
        derive_address(key)


def test_address_is_tail_of_hash():
    kp = generate_keypair(b"\x07" * 32)
    assert derive_address(kp.public_key) == oracle_address(kp.public_key)


@settings(max_examples=1000, deadline=None)
@given(seed=st.binary(min_size=32, max_size=32), message=st.binary(max_size=256))
def test_sign_verify_round_trip(seed, message):
    kp = generate_keypair(seed)
    signature = kp.sign(message)
    assert len(signature) == identity.SIGNATURE_SIZE
    assert verify(message, signature, kp.public_key)
    assert oracle_verify(message, signature, kp.public_key)


@settings(max_examples=200, deadline=None)
@given(seed=st.binary(min_size=32, max_size=32), message=st.binary(min_size=1, max_size=64), data=st.data())
def test_single_bit_changes_break_verification(seed, message, data):
    kp = generate_keypair(seed)
    signature = kp.sign(message)
    bit = data.draw(st.integers(0, len(message) * 8 - 1))
    flipped = bytearray(message)
    flipped[bit // 8] ^= 1 << (bit % 8)
    assert not verify(bytes(flipped), signature, kp.public_key)
    sbit = data.draw(st.integers(0, 511))
    bad_sig = bytearray(signature)
    bad_sig[sbit // 8] ^= 1 << (sbit % 8)
    assert not verify(message, bytes(bad_sig), kp.public_key)


def test_signature_from_other_key_fails():
    a, b = generate_keypair(b"\x0a" * 32), generate_keypair(b"\x0b" * 32)
    assert not verify(b"msg", a.sign(b"msg"), b.public_key)


def test_verify_never_raises_on_garbage():
    assert not verify(b"m", b"short", GOLDEN_PUBLIC)
    assert not verify(b"m", bytes(64), b"\xff" * 32)
    assert not verify(b"m", bytes(64), b"")


def test_ten_thousand_distinct_addresses():
    addresses = {derive_address(generate_keypair(os.urandom(32)).public_key) for _ in range(10_000)}
    assert len(addresses) == 10_000


def test_key_file_round_trip(tmp_path):
    kp = generate_keypair(GOLDEN_SEED)
    path = tmp_path / "admin.key"
    write_key_file(path, kp)
    assert path.read_text() == GOLDEN_SEED.hex() + "\n"
    assert stat.S_IMODE(path.stat().st_mode) == 0o600
    assert read_key_file(path) == kp


def test_cli_gen_and_addr(tmp_path, capsys):
    path = tmp_path / "k"
    assert identity.main(["gen", "--seed-hex", GOLDEN_SEED.hex(), "--out", str(path)]) == 0
    assert capsys.readouterr().out.strip() == GOLDEN_ADDRESS.hex()
    assert identity.main(["addr", "--key", str(path)]) == 0
    assert capsys.readouterr().out.strip() == GOLDEN_ADDRESS.hex()
    assert identity.main(["pub", "--key", str(path)]) == 0
    assert capsys.readouterr().out.strip() == GOLDEN_PUBLIC.hex()


def test_cli_errors(tmp_path):
    assert identity.main(["addr", "--key", str(tmp_path / "missing")]) == 2
    assert identity.main(["gen", "--seed-hex", "zz", "--out", str(tmp_path / "k")]) == 1
    assert identity.main(["gen", "--seed-hex", "00" * 31, "--out", str(tmp_path / "k")]) == 1
