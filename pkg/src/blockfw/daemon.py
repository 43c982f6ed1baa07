"""Real-time node process: the chain node, its commander and a TCP endpoint.

Peers and consoles talk to a node over TCP with length-prefixed frames,
each carrying one message in the same binary encoding the simulator
measures. Outbound peer connections are opened lazily and dropped on error;
the periodic head announcements and chain sync repair whatever a dropped
frame loses.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import signal
import struct
import sys
import time
from pathlib import Path
from typing import Optional

from . import identity
from ._codec import DecodeError
from .commander import DEFAULT_REFRESH, Commander, MockBackend, ScriptBackend
from .genesis import GenesisConfig, load_genesis, save_genesis
from .netsim import Message, decode_message, encode_message
from .node import DEFAULT_SYNC_INTERVAL, Node, phase_for

log = logging.getLogger(__name__)

MAX_FRAME = 64 * 1024 * 1024
DEFAULT_PORT = 7700
_LEN = struct.Struct(">I")


def frame(sender: str, msg: Message) -> bytes:
    body = encode_message(sender, msg)
    return _LEN.pack(len(body)) + body


async def read_frame(reader: asyncio.StreamReader) -> tuple[str, Message]:
    (size,) = _LEN.unpack(await reader.readexactly(_LEN.size))
    if size > MAX_FRAME:
        raise DecodeError(f"frame of {size} bytes exceeds limit")
    return decode_message(await reader.readexactly(size))


def parse_endpoint(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return default_host, int(text)
    return host or default_host, int(port)


def parse_peer(text: str) -> tuple[str, tuple[str, int]]:
    """``id@host:port`` to ``(id, (host, port))``."""
    node_id, sep, endpoint = text.partition("@")
    if not sep or not node_id:
        raise ValueError(f"peer must look like id@host:port, got {text!r}")
    return node_id, parse_endpoint(endpoint)


class AsyncRuntime:
    """Wall-clock runtime for :class:`Node` on an asyncio loop."""

    def __init__(self, node_id: str, peers: dict[str, tuple[str, int]]) -> None:
        self.node_id = node_id
        self.peers = peers
        self.loop = asyncio.get_running_loop()
        self._queues: dict[str, asyncio.Queue] = {}
        self._tasks: list[asyncio.Task] = []

    def now(self) -> float:
        return time.time()

    def call_later(self, delay: float, fn, *args):
        return self.loop.call_later(delay, fn, *args)

    def send(self, dst: str, msg: Message) -> None:
        if dst not in self.peers:
            return
        queue = self._queues.get(dst)
        if queue is None:
            queue = self._queues[dst] = asyncio.Queue(maxsize=1024)
            self._tasks.append(self.loop.create_task(self._sender(dst, queue)))
        try:
            queue.put_nowait(frame(self.node_id, msg))
        except asyncio.QueueFull:
            log.debug("outbound queue to %s full, dropping message", dst)

    async def _sender(self, dst: str, queue: asyncio.Queue) -> None:
        host, port = self.peers[dst]
        writer = None
        while True:
            data = await queue.get()
            try:
                if writer is None:
                    _, writer = await asyncio.open_connection(host, port)
                writer.write(data)
                await writer.drain()
            except OSError as exc:
                log.debug("send to %s failed: %s", dst, exc)
                if writer is not None:
                    writer.close()
                writer = None

    def close(self) -> None:
        for task in self._tasks:
            task.cancel()


async def serve(node: Node, host: str, port: int) -> asyncio.base_events.Server:
    async def handle(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                sender, msg = await read_frame(reader)
                reply = node.on_message(sender, msg)
                if reply is not None:
                    writer.write(frame(node.node_id, reply))
                    await writer.drain()
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        except DecodeError as exc:
            log.warning("dropping connection after bad frame: %s", exc)
        finally:
            writer.close()

    return await asyncio.start_server(handle, host, port)


async def run_node(args: argparse.Namespace, ready=None, stop: Optional[asyncio.Event] = None) -> None:
    """Run until ``stop`` is set or the process is signalled.

    ``ready`` (anything with ``set()``) is set once the endpoint is listening.
    """
    genesis = load_genesis(args.genesis)
    keypair = identity.read_key_file(args.key) if args.key else None
    peers = dict(parse_peer(p) for p in args.peer)
    node_id = args.id
    runtime = AsyncRuntime(node_id, peers)
    node = Node(
        node_id,
        genesis,
        runtime,
        keypair=keypair,
        peers=tuple(peers),
        datadir=args.datadir,
        sync_interval=args.sync_interval,
        sync_phase=phase_for(node_id, args.sync_interval),
    )
    host, port = parse_endpoint(args.listen)
    server = await serve(node, host, port)
    node.start()
    if args.backend == "script":
        backend = ScriptBackend(args.script_out)
    else:
        backend = MockBackend()
    if args.backend != "none":
        Commander(node, backend, refresh=args.refresh).start()
    log.info("%s listening on %s:%d at height %d", node_id, host, port, node.chain.height)

    stop = stop or asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError):
            pass
    if ready is not None:
        ready.set()
    try:
        await stop.wait()
    finally:
        node.stop()
        server.close()
        runtime.close()


def _cmd_genesis(args: argparse.Namespace) -> int:
    try:
        sealers = [identity.read_key_file(p).public_key for p in args.sealer_key]
        sealers += [bytes.fromhex(k) for k in args.sealer]
        admins = [identity.read_key_file(p).address for p in args.admin_key]
        admins += [identity.parse_address(a) for a in args.admin]
        config = GenesisConfig(
            chain_id=args.chain_id,
            sealers=tuple(sealers),
            admins=tuple(admins),
            period=args.period,
            wiggle=args.wiggle,
            keepalive=args.keepalive,
        )
    except FileNotFoundError as exc:
        print(f"blockfw-node: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"blockfw-node: {exc}", file=sys.stderr)
        return 1
    save_genesis(config, args.out)
    print(config.config_hash.hex())
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="blockfw-node", description="Run a BlockFW chain node")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("genesis", help="write a genesis config file")
    gen.add_argument("--chain-id", required=True)
    gen.add_argument("--sealer-key", action="append", default=[], help="key file of a sealer")
    gen.add_argument("--sealer", action="append", default=[], help="sealer public key (hex)")
    gen.add_argument("--admin-key", action="append", default=[], help="key file of an administrator")
    gen.add_argument("--admin", action="append", default=[], help="administrator address (hex)")
    gen.add_argument("--period", type=int, default=1)
    gen.add_argument("--wiggle", type=int)
    gen.add_argument("--keepalive", type=int, default=30)
    gen.add_argument("--out", required=True)

    run = sub.add_parser("run", help="run a node until interrupted")
    run.add_argument("--id", required=True, help="node name used by peers")
    run.add_argument("--genesis", required=True)
    run.add_argument("--key", help="key file; sealers need one")
    run.add_argument("--datadir", required=True)
    run.add_argument("--listen", default=f"127.0.0.1:{DEFAULT_PORT}")
    run.add_argument("--peer", action="append", default=[], help="id@host:port, repeatable")
    run.add_argument("--refresh", type=float, default=DEFAULT_REFRESH)
    run.add_argument("--backend", choices=("mock", "script", "none"), default="mock")
    run.add_argument("--script-out", help="command file for --backend script")
    run.add_argument("--sync-interval", type=float, default=DEFAULT_SYNC_INTERVAL)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "genesis":
        return _cmd_genesis(args)
    if args.backend == "script" and not args.script_out:
        parser.error("--backend script needs --script-out")
    for path in (args.genesis, args.key):
        if path and not Path(path).exists():
            print(f"blockfw-node: no such file: {path}", file=sys.stderr)
            return 2
    try:
        asyncio.run(run_node(args))
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
