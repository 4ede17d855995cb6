import threading
import time

import pytest

from spinemu.apps import icmp_echo_handler, icmp_echo_ruleset
from spinemu.engine import HandlerSet
from spinemu.hostif import (ContextDescriptor, ContextLimit, DuplicateContext, HostDmaRegion,
                            SmartNic, UnknownContext)
from spinemu.match import RULE_FALSE, RULE_TRUE, InvalidRuleset, MatchRule, Mode, Ruleset
from spinemu.packets import build_arp_request, build_icmp_echo, build_udp_frame, ip, mac
from spinemu.runtime import CommandStatus, Direction

A, B = mac("02:00:00:00:00:01"), mac("02:00:00:00:00:02")
IA, IB = ip("10.0.0.1"), ip("10.0.0.2")
ALL = Ruleset(Mode.AND, (RULE_TRUE,) * 3, RULE_FALSE)


def udp(payload=b"data"):
    return build_udp_frame(A, B, IA, IB, 1, 2, payload)


@pytest.fixture
def nic():
    sent = []
    n = SmartNic(egress=sent.append)
    n.sent = sent
    n.start()
    yield n
    n.stop()


def test_region_defaults_and_bounds():
    r = HostDmaRegion()
    assert r.size == 32 * 4096
    assert r.read(0, 0) == b""
    r.write(4095, b"ab")
    assert r.read(4095, 2) == b"ab"
    with pytest.raises(IndexError):
        r.read(r.size - 1, 2)
    with pytest.raises(IndexError):
        r.write(-1, b"x")
    assert HostDmaRegion(1).phys_addr != HostDmaRegion(1).phys_addr
    with pytest.raises(ValueError):
        HostDmaRegion(0)


def test_icmp_context_answers_on_nic(nic):
    h = nic.ctx_init(ContextDescriptor(0, icmp_echo_ruleset(),
                                       HandlerSet(packet=icmp_echo_handler)))
    assert nic.receive(build_icmp_echo(A, B, IA, IB, 1, 1, b"hi"))
    assert nic.engine.wait_idle(5)
    assert len(nic.sent) == 1 and nic.sent[0][34] == 0
    # ARP goes to the host path
    arp = build_arp_request(A, IA, IB)
    assert not nic.receive(arp)
    assert nic.host_recv(1) == arp
    assert nic.forwarded == 1
    nic.ctx_exit(h)


def test_first_installed_context_wins(nic):
    hits = []
    nic.ctx_init(ContextDescriptor(0, ALL, HandlerSet(packet=lambda a: hits.append(a.ctx_id))))
    nic.ctx_init(ContextDescriptor(1, ALL, HandlerSet(packet=lambda a: hits.append(a.ctx_id))))
    for _ in range(5):
        nic.receive(udp())
    assert nic.engine.wait_idle(5)
    assert hits == [0] * 5
    assert nic.contexts() == [0, 1]


def test_duplicate_and_limits(nic):
    nic.ctx_init(ContextDescriptor(0, ALL, HandlerSet(packet=lambda a: None)))
    with pytest.raises(DuplicateContext):
        nic.ctx_init(ContextDescriptor(0, ALL, HandlerSet(packet=lambda a: None)))
    for i in range(1, 4):
        nic.ctx_init(ContextDescriptor(i, ALL, HandlerSet(packet=lambda a: None)))
    with pytest.raises(ContextLimit):
        nic.ctx_init(ContextDescriptor(9, ALL, HandlerSet(packet=lambda a: None)))


def test_invalid_ruleset_rejected(nic):
    bad = Ruleset(Mode.AND, (MatchRule(0, 0, 5, 1), RULE_TRUE, RULE_TRUE), RULE_FALSE)
    with pytest.raises(InvalidRuleset):
        nic.ctx_init(ContextDescriptor(0, bad, HandlerSet(packet=lambda a: None)))
    with pytest.raises(InvalidRuleset):
        nic.ctx_init(ContextDescriptor(0, "mode=and", HandlerSet(packet=lambda a: None)))
    assert nic.contexts() == []


def test_exit_idle_and_double_exit(nic):
    h = nic.ctx_init(ContextDescriptor(0, ALL, HandlerSet(packet=lambda a: None)))
    t0 = time.monotonic()
    nic.ctx_exit(h)
    assert time.monotonic() - t0 < 0.5
    with pytest.raises(UnknownContext):
        nic.ctx_exit(h)
    # the id can be reused afterwards
    nic.ctx_init(ContextDescriptor(0, ALL, HandlerSet(packet=lambda a: None)))


def test_no_handler_after_exit():
    nic = SmartNic(egress=lambda f: None).start()
    h = nic.ctx_init(ContextDescriptor(0, ALL, HandlerSet(packet=lambda a: time.sleep(5e-4))))
    stop = threading.Event()

    def blast():
        while not stop.is_set():
            nic.receive(udp())

    t = threading.Thread(target=blast)
    t.start()
    time.sleep(0.05)
    nic.ctx_exit(h)
    t_exit = time.perf_counter() - nic.engine._t0
    time.sleep(0.05)
    stop.set()
    t.join()
    events = nic.engine.events()
    nic.stop()
    assert events and all(e.end <= t_exit for e in events if e.ctx_id == 0)
    assert nic.allocator.allocated_slots() == []


def test_table_swap_is_atomic():
    """Every packet sees either the old or the new table."""
    nic = SmartNic(egress=lambda f: None).start()
    seen = []
    nic.ctx_init(ContextDescriptor(0, ALL, HandlerSet(packet=lambda a: seen.append(a.ctx_id))))
    stop = threading.Event()

    def churn():
        i = 1
        while not stop.is_set():
            h = nic.ctx_init(ContextDescriptor(i, ALL, HandlerSet(packet=lambda a: None)))
            nic.ctx_exit(h)
            i += 1

    t = threading.Thread(target=churn)
    t.start()
    for _ in range(300):
        assert nic.receive(udp())
    stop.set()
    t.join()
    assert nic.engine.wait_idle(5)
    nic.stop()
    # context 0 is first in every snapshot, so it takes every packet
    assert seen == [0] * 300


def test_host_memory_round_trips(nic):
    def packet(args):
        args.spin.dma(args.task.pkt_mem[42:46], 100, 4, Direction.TO_HOST)
        buf = bytearray(4)
        assert args.spin.dma(200, buf, 4, Direction.FROM_HOST).status is CommandStatus.DONE
        args.spin.dma(bytes(buf), 300, 4, Direction.TO_HOST)

    h = nic.ctx_init(ContextDescriptor(0, ALL, HandlerSet(packet=packet)))
    nic.host_write(h, 200, b"host")
    nic.receive(udp(b"wire"))
    assert nic.engine.wait_idle(5)
    assert nic.host_read(h, 100, 4) == b"wire"
    assert nic.host_read(h, 300, 4) == b"host"
    assert nic.host_read(h, 0, 0) == b""


def test_counters_and_debug(nic):
    def packet(args):
        args.spin.push_counter(2, 7)
        args.spin.log("seen")

    nic.ctx_init(ContextDescriptor(0, ALL, HandlerSet(packet=packet), counter_queues=(2,)))
    nic.receive(udp())
    assert nic.engine.wait_idle(5)
    assert nic.pop_counter(2) == 7 and nic.pop_counter(2) is None
    lines = nic.drain_debug()
    assert len(lines) == 1 and lines[0][1] == "seen" and 0 <= lines[0][0] < 16


def test_host_send_and_queue_overflow():
    sent = []
    nic = SmartNic(egress=sent.append, host_queue_depth=2)
    for _ in range(3):
        nic.receive(udp())
    assert nic.host_drops == 1
    nic.host_send(b"x" * 60)
    assert sent == [b"x" * 60]
    assert nic.host_recv(0.01) is not None


def test_context_manager_with_port():
    from spinemu.netsim import SimLink
    link, a, b = SimLink.pair()
    with SmartNic(b) as nic:
        nic.ctx_init(ContextDescriptor(0, icmp_echo_ruleset(),
                                       HandlerSet(packet=icmp_echo_handler)))
        a.send(build_icmp_echo(A, B, IA, IB, 1, 1, b"x" * 56))
        reply = a.recv(2)
    link.close()
    assert reply is not None and reply[34] == 0
