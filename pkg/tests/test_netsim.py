import math
import random

import pytest

from blockfw.ledger import Block
from blockfw.netsim import (
    CHAIN_RESPONSE_CAP,
    BlockGossip,
    ChainResponse,
    GetChain,
    GetNonce,
    GetState,
    HeadAnnounce,
    Link,
    NetworkConditions,
    NonceReply,
    SimNetwork,
    Simulator,
    StateReply,
    TxGossip,
    decode_message,
    deliver,
    encode_message,
    message_size,
)
from blockfw.node import Node, Observer
from blockfw.rulestate import AddRule, genesis_state
from blockfw._codec import DecodeError

from chainkit import ADMIN, GENESIS, SEALERS, admin_txs, build_chain, rule

STRESSED = NetworkConditions(bandwidth_kbps=128, loss_probability=0.15, latency_ms=200)


# -- link model -----------------------------------------------------------------------


def test_healthy_link_is_instant():
    assert deliver(NetworkConditions(), 10_000, random.Random(1)) == 0.0


def test_block_delay_arithmetic():
    # 0.2 s latency + 1600 * 8 bits / 128 000 bit/s = 0.3 s
    delay = deliver(NetworkConditions(128, 0.0, 200), 1600, random.Random(1))
    assert delay == pytest.approx(0.3, abs=1e-12)


def test_loss_rate_within_three_sigma():
    link = Link(NetworkConditions(loss_probability=0.15), random.Random("loss-check"))
    dropped = sum(link.deliver(100, 0.0) is None for _ in range(10_000))
    sigma = math.sqrt(10_000 * 0.15 * 0.85)
    assert abs(dropped - 1500) <= 3 * sigma


@pytest.mark.parametrize(
    "kwargs", [{"loss_probability": 1.0}, {"loss_probability": -0.1}, {"bandwidth_kbps": 0}, {"latency_ms": -1}]
)
def test_conditions_validation(kwargs):
    with pytest.raises(ValueError):
        NetworkConditions(**kwargs)


def test_fifo_serialisation_on_a_link():
    link = Link(NetworkConditions(128, 0.0, 200), random.Random(0))
    first = link.deliver(1600, 0.0)
    second = link.deliver(1600, 0.0)
    assert first == pytest.approx(0.3)
    assert second == pytest.approx(0.4)  # waits for the first to finish transmitting


def test_drops_consume_no_bandwidth():
    link = Link(NetworkConditions(128, 0.5, 0), random.Random(5), log=[])
    for _ in range(200):
        link.deliver(1000, 0.0)
    assert link.bits_delivered == 8000 * (link.sent - link.dropped)
    assert len(link.log) == link.sent - link.dropped


def test_bandwidth_conservation_on_busy_link():
    sim = Simulator()
    net = SimNetwork(sim, NetworkConditions(64, 0.1, 50), seed=3, record_transmissions=True)
    rng = random.Random(9)
    for i in range(300):
        sim.call_at(rng.uniform(0, 20), net.send, "a", "b", GetChain(i))
    sim.run(100)
    log = net.link("a", "b").log
    capacity = 64 * 1000
    for (s1, f1, bits), (s2, _, _) in zip(log, log[1:]):
        assert s2 >= f1 - 1e-12
        assert bits / (f1 - s1) <= capacity * (1 + 1e-9)
    for second in range(0, 30):
        busy = sum(bits * max(0.0, min(f, second + 1) - max(s, second)) / (f - s) for s, f, bits in log)
        assert busy <= capacity * (1 + 1e-9)


def test_same_seed_same_schedule():
    def run(seed):
        sim = Simulator()
        net = SimNetwork(sim, STRESSED, seed=seed, record_transmissions=True)
        for i in range(100):
            sim.call_at(i * 0.05, net.send, "a", "b", GetChain(i))
        sim.run(60)
        return net.link("a", "b").log

    assert run(4) == run(4)
    assert run(4) != run(5)


# -- wire format ----------------------------------------------------------------------


def sample_messages():
    chain = build_chain([admin_txs([AddRule(rule(22))]), []])[0]
    return [
        TxGossip(chain.blocks[1].transactions[0]),
        BlockGossip(chain.blocks[2]),
        HeadAnnounce(2, 5, chain.head_hash),
        GetChain(0),
        ChainResponse(chain.blocks),
        GetNonce(ADMIN.address),
        NonceReply(ADMIN.address, 3),
        GetState(),
        StateReply(2, chain.head_hash, SEALERS[2].address, 1, False, genesis_state([ADMIN.address])),
    ]


def test_message_round_trip():
    for msg in sample_messages():
        sender, decoded = decode_message(encode_message("node-7", msg))
        assert sender == "node-7"
        assert decoded == msg
        assert message_size("node-7", msg) == len(encode_message("node-7", msg))


def test_non_contiguous_chain_response_rejected():
    chain = build_chain([[], []])[0]
    data = encode_message("x", ChainResponse((chain.blocks[0], chain.blocks[2])))
    with pytest.raises(DecodeError):
        decode_message(data)


def test_trailing_bytes_rejected():
    with pytest.raises(DecodeError):
        decode_message(encode_message("x", GetChain(1)) + b"\x00")


# -- gossip and sync between nodes ---------------------------------------------------------


class Requests(Observer):
    def __init__(self):
        self.get_chain = []

    def sync_request(self, node, peer, from_height, now):
        self.get_chain.append((node.node_id, peer, from_height, now))


def network(n=4, conditions=None, seed=1, keyed=False, phase=0.0):
    sim = Simulator()
    net = SimNetwork(sim, conditions or NetworkConditions(), seed=seed)
    ids = [f"n{i}" for i in range(n)]
    obs = Requests()
    nodes = {}
    for i, node_id in enumerate(ids):
        node = Node(node_id, GENESIS, net.runtime(node_id), keypair=SEALERS[i] if keyed and i < 3 else None,
                    peers=tuple(ids), sync_phase=phase + 0.1 * i, observer=obs)
        net.attach(node_id, node.on_message)
        nodes[node_id] = node
    return sim, net, nodes, obs


class Counting:
    def __init__(self, node):
        self.node = node
        self.tx_msgs = 0

    def __call__(self, sender, msg):
        if isinstance(msg, TxGossip):
            self.tx_msgs += 1
        return self.node.on_message(sender, msg)


def test_tx_reaches_every_mempool_once():
    sim, net, nodes, _ = network(phase=10)
    counters = {}
    for node_id, node in nodes.items():
        counters[node_id] = Counting(node)
        net.attach(node_id, counters[node_id])
        node.start()
    tx = admin_txs([AddRule(rule(22))])[0]
    nodes["n0"].submit(tx)
    sim.run(1)
    for node in nodes.values():
        assert list(node.chain_state.mempool) == [tx.tx_hash]
    # Each relay is suppressed after the first copy: n0 sends 3, each of
    # the 3 others relays to the 2 it did not hear from.
    assert net.messages_sent == 3 + 3 * 2
    assert sum(c.tx_msgs for c in counters.values()) == 9
    before = net.messages_sent
    for peer in ("n1", "n2", "n3"):
        nodes[peer].on_message("n0", TxGossip(tx))
    sim.run(2)
    assert net.messages_sent == before


def test_equal_heads_cause_no_chain_requests():
    sim, _, nodes, obs = network()
    for node in nodes.values():
        node.start()
    sim.run(60)
    assert obs.get_chain == []


@pytest.mark.parametrize("behind,round_trips", [(30, 1), (300, 2)])
def test_catch_up_round_trips(behind, round_trips):
    chain, states = build_chain([[]] * behind)
    sim, _, nodes, obs = network(2)
    nodes["n0"].chain_state.reset(chain, states)
    for node in nodes.values():
        node.start()
    sim.run(20)
    assert nodes["n1"].chain == chain
    assert len([r for r in obs.get_chain if r[0] == "n1"]) == round_trips


def test_messages_from_unknown_nodes_are_ignored():
    chain, _ = build_chain([[]])
    sim, _, nodes, _ = network(2)
    node = nodes["n1"]
    node.start()
    assert node.on_message("stranger", BlockGossip(chain.blocks[1])) is None
    assert node.chain.height == 0
    node.on_message("n0", BlockGossip(chain.blocks[1]))
    assert node.chain.height == 1


def test_console_requests_are_answered():
    sim, _, nodes, _ = network(2)
    node = nodes["n0"]
    node.start()
    assert node.on_message("console", GetNonce(ADMIN.address)) == NonceReply(ADMIN.address, 0)
    reply = node.on_message("console", GetState())
    assert isinstance(reply, StateReply) and reply.height == 0


def test_stressed_network_converges_after_quiet_period():
    sim, _, nodes, _ = network(4, STRESSED, seed=11, keyed=True)
    for node in nodes.values():
        node.start()
    for i in range(6):
        sim.call_at(5 + 10 * i, nodes["n3"].submit, admin_txs([AddRule(rule(100 + i))], start_nonce=i)[0])
    sim.run(60)
    for node in nodes.values():
        for tx in list(node.chain_state.mempool.values()):
            assert tx.sender == ADMIN.address
    sim.run(120)
    heads = {node.chain.head_hash for node in nodes.values()}
    assert len(heads) == 1
    assert len(nodes["n0"].chain_state.state.rules) == 6
