import os
import threading
import time
from collections import Counter

import pytest

from spinemu.hostif import HostDmaRegion
from spinemu.runtime import (Command, CommandKind, CommandStatus, CounterQueues, DebugStream,
                             Direction, DmaError, Lock, Runtime, RwLock, Spin, UnknownCommand)


def make_spin(pages=1, egress=None, **kw):
    rt = Runtime(egress, **kw)
    region = HostDmaRegion(pages)
    return rt, region, Spin(rt, region, 0, 3)


def test_send_delivers_frame():
    sent = []
    rt, _, spin = make_spin(egress=sent.append)
    buf = bytearray(b"\xaa" * 100)
    cmd = spin.send_packet(buf, 60)
    assert spin.cmd_wait(cmd) is CommandStatus.DONE
    assert sent == [b"\xaa" * 60]


def test_send_through_egress_thread_keeps_order():
    sent = []
    rt, _, spin = make_spin(egress=sent.append)
    rt.start()
    try:
        cmds = [spin.send_packet(bytes([i]) * 64, 64) for i in range(50)]
        assert all(spin.cmd_wait(c) is CommandStatus.DONE for c in cmds)
    finally:
        rt.stop()
    assert [f[0] for f in sent] == list(range(50))


@pytest.mark.parametrize("length", [0, -1, 1515, 200])
def test_send_rejects_bad_lengths(length):
    rt, _, spin = make_spin(egress=lambda f: None)
    buf = bytearray(1600) if length != 200 else bytearray(100)
    assert spin.send_packet(buf, length).status is CommandStatus.FAILED


def test_send_frame_bound_follows_mtu():
    rt, _, spin = make_spin(egress=lambda f: None, mtu=9000)
    assert spin.send_packet(bytearray(9014), 9014).status is CommandStatus.DONE


def test_egress_failure_fails_command():
    def reject(frame):
        raise OSError("link down")
    rt, _, spin = make_spin(egress=reject)
    cmd = spin.send_packet(bytearray(64), 64)
    assert cmd.status is CommandStatus.FAILED and "link down" in cmd.error


def test_unaligned_dma_touches_only_target_bytes():
    rt, region, spin = make_spin()
    region.buf[:] = b"\x11" * region.size
    cmd = spin.dma(b"ABCDEFG", 3, 7, Direction.TO_HOST)
    assert cmd.status is CommandStatus.DONE
    assert region.read(0, 12) == b"\x11\x11\x11ABCDEFG\x11\x11"
    assert region.read(12, region.size - 12) == b"\x11" * (region.size - 12)


def test_zero_length_dma():
    rt, region, spin = make_spin()
    assert spin.dma(b"", 5, 0, Direction.TO_HOST).status is CommandStatus.DONE
    assert region.read(0, 16) == bytes(16)


def test_dma_round_trip_random():
    rt, region, spin = make_spin(pages=4)
    for _ in range(50):
        data = os.urandom(int.from_bytes(os.urandom(2), "big") % 4000 + 1)
        off = int.from_bytes(os.urandom(2), "big") % (region.size - len(data))
        assert spin.dma(data, off, len(data), Direction.TO_HOST).status is CommandStatus.DONE
        back = bytearray(len(data))
        assert spin.dma(off, back, len(data), Direction.FROM_HOST).status is CommandStatus.DONE
        assert bytes(back) == data
    assert rt.dma_counts[Direction.TO_HOST] == 50 and rt.dma_counts[Direction.FROM_HOST] == 50


@pytest.mark.parametrize("src,dst,length,direction", [
    (b"x" * 8, 4093, 8, Direction.TO_HOST),
    (b"x" * 8, -1, 8, Direction.TO_HOST),
    (b"x" * 4, 0, 8, Direction.TO_HOST),
    (4090, bytearray(8), 8, Direction.FROM_HOST),
    (0, bytearray(4), 8, Direction.FROM_HOST),
])
def test_dma_out_of_bounds_fails_and_logs(src, dst, length, direction):
    rt, region, spin = make_spin()
    cmd = spin.dma(src, dst, length, direction)
    assert cmd.status is CommandStatus.FAILED
    assert rt.debug.drain()[0][0] == 3
    assert region.read(0, region.size) == bytes(region.size)


def test_dma_without_region_fails():
    rt = Runtime()
    spin = Spin(rt, None, 0, 0)
    assert spin.dma(b"x", 0, 1, Direction.TO_HOST).status is CommandStatus.FAILED


def test_write_to_host():
    rt, region, spin = make_spin()
    spin.write_to_host(0, 0)
    assert region.read(0, 8) == bytes(8)
    spin.write_to_host(8, 0xDEADBEEF)
    assert int.from_bytes(region.read(8, 8), "little") == 0xDEADBEEF
    spin.write_to_host(region.size - 8, 1)
    with pytest.raises(DmaError):
        spin.write_to_host(region.size - 4, 1)


def test_wait_test_idempotent_and_unknown():
    rt, _, spin = make_spin(egress=lambda f: None)
    cmd = spin.send_packet(bytearray(64), 64)
    assert spin.cmd_wait(cmd) is CommandStatus.DONE
    assert spin.dma_wait(cmd) is CommandStatus.DONE
    assert spin.dma_test(cmd) is CommandStatus.DONE
    assert rt.lookup(cmd.id) is cmd
    with pytest.raises(UnknownCommand):
        rt.test(10**9)
    with pytest.raises(UnknownCommand):
        rt.wait(Command(10**9, CommandKind.DMA))


def test_command_finishes_once():
    cmd = Command(1, CommandKind.SEND)
    cmd._finish(CommandStatus.DONE)
    with pytest.raises(RuntimeError):
        cmd._finish(CommandStatus.FAILED)


def test_pending_commands_fail_on_stop():
    gate = threading.Event()
    rt = Runtime(lambda f: gate.wait(2))
    rt.start()
    spin = Spin(rt, None, 0, 0)
    first = spin.send_packet(bytearray(64), 64)
    second = spin.send_packet(bytearray(64), 64)
    time.sleep(0.05)
    assert spin.dma_test(second) is CommandStatus.PENDING
    gate.set()
    rt.stop()
    assert first.status is CommandStatus.DONE
    assert second.status in (CommandStatus.DONE, CommandStatus.FAILED)


def test_lock_counting_oracle():
    lck = Spin.lock_init()
    box = {"n": 0}

    def work():
        for _ in range(1000):
            Spin.lock_lock(lck)
            v = box["n"]
            if v % 97 == 0:
                time.sleep(0)  # yield inside the critical section
            box["n"] = v + 1
            Spin.lock_unlock(lck)

    threads = [threading.Thread(target=work) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert box["n"] == 16000


def test_try_lock():
    lck = Lock()
    assert Spin.lock_try_lock(lck)
    assert not lck.try_lock()
    lck.unlock()
    with lck:
        assert not lck.try_lock()


def test_rwlock_readers_overlap():
    rw = Spin.rw_lock_init()
    inside = []
    peak = []
    lock = threading.Lock()
    barrier = threading.Barrier(2, timeout=5)

    def reader():
        rw.read_lock()
        with lock:
            inside.append(1)
            peak.append(len(inside))
        barrier.wait()
        with lock:
            inside.pop()
        rw.read_unlock()

    ts = [threading.Thread(target=reader) for _ in range(2)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert max(peak) == 2


def test_rwlock_writer_excludes():
    rw = RwLock()
    rw.write_lock()
    assert not rw.try_read_lock() and not rw.try_write_lock()
    rw.write_unlock()
    assert rw.try_read_lock() and rw.try_read_lock()
    assert not rw.try_write_lock()
    rw.read_unlock()
    rw.read_unlock()
    assert rw.try_write_lock()
    rw.write_unlock()
    with pytest.raises(RuntimeError):
        rw.write_unlock()
    with pytest.raises(RuntimeError):
        rw.read_unlock()


def test_rwlock_mixed_counter():
    rw = RwLock()
    box = {"n": 0, "bad": 0}

    def writer():
        for _ in range(300):
            rw.write_lock()
            v = box["n"]
            box["n"] = v + 1
            rw.write_unlock()

    def reader():
        for _ in range(300):
            rw.read_lock()
            a = box["n"]
            b = box["n"]
            box["bad"] += a != b
            rw.read_unlock()

    ts = [threading.Thread(target=f) for f in (writer, writer, reader, reader)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert box["n"] == 600 and box["bad"] == 0


def test_cycles_monotone_and_scaled():
    rt = Runtime()
    spin = Spin(rt, None, 0, 0)
    t1 = spin.cycles()
    t2 = spin.cycles()
    assert t2 >= t1
    samples = []
    for _ in range(5):
        a = time.monotonic_ns()
        c1 = spin.cycles()
        time.sleep(1e-3)
        c2 = spin.cycles()
        b = time.monotonic_ns()
        # wall-clock oracle over the same interval
        samples.append((c2 - c1) / ((b - a) * 40e6 / 1e9))
    assert any(0.8 <= s <= 1.2 for s in samples)
    slow = Runtime(hpu_hz=1.0)
    assert slow.cycles() <= 1
    with pytest.raises(ValueError):
        Runtime(hpu_hz=0)


def test_counter_queues():
    q = CounterQueues()
    for v in (1, 2, 3):
        q.push(0, v)
    assert [q.pop(0), q.pop(0), q.pop(0), q.pop(0)] == [1, 2, 3, None]
    q.push(1, 1 << 32 | 5)
    assert q.pop(1) == 5
    assert q.pop(99) is None


def test_counter_queue_concurrent_multiset():
    q = CounterQueues()

    def push(base):
        for i in range(1000):
            q.push(0, base + i)

    ts = [threading.Thread(target=push, args=(k * 10000,)) for k in range(8)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    got = []
    while (v := q.pop(0)) is not None:
        got.append(v)
    assert Counter(got) == Counter(k * 10000 + i for k in range(8) for i in range(1000))


def test_debug_stream():
    rt = Runtime()
    Spin(rt, None, 0, 5).log("hello")
    Spin(rt, None, 0, 6).log("")
    assert rt.debug.drain() == [(5, "hello"), (6, "")]
    assert rt.debug.drain() == []

    d = DebugStream()

    def log(h):
        for i in range(100):
            d.write(h, f"{h}:{i}")

    ts = [threading.Thread(target=log, args=(h,)) for h in range(16)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    lines = d.drain()
    assert Counter(lines) == Counter((h, f"{h}:{i}") for h in range(16) for i in range(100))
