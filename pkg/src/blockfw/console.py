"""Management console: sign rule and ACL changes and hand them to a node.

Every command is a single short-lived process. Mutating commands ask the
node for the next nonce, sign, gossip, then watch the node until the
sender's nonce moves past the transaction. If that does not happen within
three block periods the transaction is reported as rejected.

Exit codes: 0 success, 1 bad usage or input, 2 key file missing,
3 node unreachable, 4 transaction rejected.
"""

from __future__ import annotations

import argparse
import ipaddress
import json
import socket
import struct
import sys
import time
from typing import Optional

from . import identity
from ._codec import DecodeError
from .daemon import DEFAULT_PORT, MAX_FRAME, parse_endpoint
from .netsim import GetNonce, GetState, Message, NonceReply, StateReply, TxGossip, decode_message, encode_message
from .rulestate import (
    AddAdmin,
    AddRule,
    FirewallRule,
    Protocol,
    Rejected,
    RemoveAdmin,
    RemoveRule,
    Transaction,
    apply_transaction,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NO_KEY = 2
EXIT_UNREACHABLE = 3
EXIT_REJECTED = 4

CONSOLE_ID = "console"
POLL_INTERVAL = 0.2
_LEN = struct.Struct(">I")


class Unreachable(Exception):
    pass


class NodeClient:
    """Blocking request/response connection to one node."""

    def __init__(self, host: str, port: int, timeout: float = 5.0) -> None:
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise Unreachable(f"cannot reach node at {host}:{port}: {exc}") from exc

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> "NodeClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def send(self, msg: Message) -> None:
        body = encode_message(CONSOLE_ID, msg)
        try:
            self.sock.sendall(_LEN.pack(len(body)) + body)
        except OSError as exc:
            raise Unreachable(str(exc)) from exc

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            try:
                chunk = self.sock.recv(n)
            except OSError as exc:
                raise Unreachable(str(exc)) from exc
            if not chunk:
                raise Unreachable("node closed the connection")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def request(self, msg: Message) -> Message:
        self.send(msg)
        (size,) = _LEN.unpack(self._recv_exact(_LEN.size))
        if size > MAX_FRAME:
            raise Unreachable("oversized reply")
        try:
            _, reply = decode_message(self._recv_exact(size))
        except DecodeError as exc:
            raise Unreachable(f"malformed reply: {exc}") from exc
        return reply

    def nonce(self, address: bytes) -> int:
        reply = self.request(GetNonce(address))
        if not isinstance(reply, NonceReply):
            raise Unreachable(f"unexpected reply {type(reply).__name__}")
        return reply.nonce

    def state(self) -> StateReply:
        reply = self.request(GetState())
        if not isinstance(reply, StateReply):
            raise Unreachable(f"unexpected reply {type(reply).__name__}")
        return reply


def _parse_rule(args: argparse.Namespace) -> FirewallRule:
    return FirewallRule.deny(args.port, Protocol[args.proto.upper()], args.source)


def _resolve_rule_id(target: str, proto: str, source: Optional[str], state: StateReply) -> bytes:
    """``target`` is a port number or a (possibly abbreviated) hex rule id."""
    if target.isdigit() and len(target) <= 5:
        return FirewallRule.deny(int(target), Protocol[proto.upper()], source).rule_id
    target = target.lower()
    matches = [r.rule_id for r in state.state.rules if r.rule_id.hex().startswith(target)]
    if len(matches) == 1:
        return matches[0]
    if len(target) == 64:
        return bytes.fromhex(target)
    raise ValueError(f"{target!r} matches {len(matches)} rules")


def submit(client: NodeClient, keypair: identity.KeyPair, kind, timeout: float, out) -> int:
    """Sign and gossip ``kind``; wait for inclusion or report rejection."""
    nonce = client.nonce(keypair.address)
    tx = Transaction.create(kind, keypair, nonce)
    print(tx.tx_hash.hex(), file=out)
    client.send(TxGossip(tx))
    deadline = time.monotonic() + timeout
    while True:
        reply = client.state()
        if reply.state.next_nonce(keypair.address) > nonce:
            return EXIT_OK
        if time.monotonic() >= deadline:
            break
        time.sleep(POLL_INTERVAL)
    try:
        apply_transaction(reply.state, tx)
        reason = "not included"
    except Rejected as exc:
        reason = exc.reason.value
    print(f"Rejected: {reason}", file=sys.stderr)
    return EXIT_REJECTED


def _status_dict(reply: StateReply) -> dict:
    return {
        "height": reply.height,
        "head_hash": reply.head_hash.hex(),
        "sealer": reply.head_sealer.hex(),
        "needs_sync": reply.needs_sync,
        "admins": sorted(a.hex() for a in reply.state.admins),
        "rules": [{"rule_id": r.rule_id.hex(), "rule": r.describe()} for r in reply.state.rules],
    }


def _print_status(reply: StateReply, as_json: bool, rules_only: bool, out) -> None:
    info = _status_dict(reply)
    if as_json:
        json.dump(info["rules"] if rules_only else info, out, indent=2)
        out.write("\n")
        return
    if not rules_only:
        print(f"height     {info['height']}", file=out)
        print(f"head       {info['head_hash']}", file=out)
        print(f"sealer     {info['sealer']}", file=out)
        print(f"admins     {len(info['admins'])}", file=out)
        if reply.needs_sync:
            print("node is resyncing", file=out)
    for rule in info["rules"]:
        print(f"{rule['rule_id']}  {rule['rule']}", file=out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockfw", description="BlockFW management console")
    parser.add_argument("--key", help="administrator key file")
    parser.add_argument("--node", default=f"127.0.0.1:{DEFAULT_PORT}", help="node endpoint host:port")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("--timeout", type=float, help="seconds to wait for inclusion (default 3 block periods)")
    sub = parser.add_subparsers(dest="command", required=True)

    block = sub.add_parser("block", help="deny traffic to a port")
    block.add_argument("port", type=int)
    block.add_argument("--proto", choices=("tcp", "udp", "any"), default="tcp")
    block.add_argument("--from", dest="source", type=ipaddress.IPv4Network, help="source prefix")

    unblock = sub.add_parser("unblock", help="remove a rule by port or rule id")
    unblock.add_argument("target")
    unblock.add_argument("--proto", choices=("tcp", "udp", "any"), default="tcp")
    unblock.add_argument("--from", dest="source", type=ipaddress.IPv4Network)

    admin = sub.add_parser("admin", help="change the administrator list")
    admin.add_argument("action", choices=("add", "remove"))
    admin.add_argument("address")

    sub.add_parser("rules", help="list the rules on the chain")
    sub.add_parser("status", help="show the chain head and rules")
    return parser


def main(argv: Optional[list[str]] = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)

    keypair = None
    if args.command in ("block", "unblock", "admin"):
        if not args.key:
            print("blockfw: --key is required for this command", file=sys.stderr)
            return EXIT_NO_KEY
        try:
            keypair = identity.read_key_file(args.key)
        except FileNotFoundError:
            print(f"blockfw: key file not found: {args.key}", file=sys.stderr)
            return EXIT_NO_KEY
        except (identity.InvalidSeed, ValueError) as exc:
            print(f"blockfw: {exc}", file=sys.stderr)
            return EXIT_USAGE

    try:
        host, port = parse_endpoint(args.node)
    except ValueError:
        print(f"blockfw: bad node address {args.node!r}", file=sys.stderr)
        return EXIT_USAGE

    try:
        with NodeClient(host, port) as client:
            if args.command in ("rules", "status"):
                _print_status(client.state(), args.json, args.command == "rules", out)
                return EXIT_OK
            state = client.state()
            try:
                if args.command == "block":
                    kind = AddRule(_parse_rule(args))
                elif args.command == "unblock":
                    kind = RemoveRule(_resolve_rule_id(args.target, args.proto, args.source, state))
                else:
                    address = identity.parse_address(args.address)
                    kind = AddAdmin(address) if args.action == "add" else RemoveAdmin(address)
            except ValueError as exc:
                print(f"blockfw: {exc}", file=sys.stderr)
                return EXIT_USAGE
            timeout = args.timeout if args.timeout is not None else 3 * state.period
            return submit(client, keypair, kind, timeout, out)
    except Unreachable as exc:
        print(f"blockfw: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE


if __name__ == "__main__":
    sys.exit(main())
