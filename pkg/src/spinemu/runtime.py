"""Handler-facing runtime: packet send, host DMA, locks, timestamps, counters.

Handlers receive a :class:`HandlerArgs`; ``args.spin`` exposes the runtime
services bound to the calling HPU and to the context's host DMA region.
Commands returned by the non-blocking calls are plain values that can be
waited on or tested.
"""
from __future__ import annotations

import enum
import itertools
import logging
import queue
import threading
import time
import weakref
from collections import Counter, deque
from dataclasses import dataclass
from typing import Callable, Optional

log = logging.getLogger(__name__)

ETH_HEADER = 14
DEFAULT_MTU = 1500


class CommandKind(enum.Enum):
    SEND = "send"
    DMA = "dma"


class CommandStatus(enum.Enum):
    PENDING = "pending"
    DONE = "done"
    FAILED = "failed"


class Direction(enum.Enum):
    TO_HOST = "to_host"
    FROM_HOST = "from_host"


class UnknownCommand(KeyError):
    pass


class DmaError(ValueError):
    pass


class Command:
    __slots__ = ("id", "kind", "status", "error", "_done", "__weakref__")

    def __init__(self, cmd_id: int, kind: CommandKind):
        self.id = cmd_id
        self.kind = kind
        self.status = CommandStatus.PENDING
        self.error: Optional[str] = None
        self._done = threading.Event()

    def _finish(self, status: CommandStatus, error: str | None = None) -> None:
        if self.status is not CommandStatus.PENDING:
            raise RuntimeError(f"command {self.id} already {self.status.value}")
        self.status = status
        self.error = error
        self._done.set()

    def __repr__(self):
        return f"Command({self.id}, {self.kind.value}, {self.status.value})"


class Lock:
    """Mutual-exclusion lock shared between handlers on any HPU."""

    def __init__(self):
        self._lock = threading.Lock()

    def lock(self) -> None:
        self._lock.acquire()

    def unlock(self) -> None:
        self._lock.release()

    def try_lock(self) -> bool:
        return self._lock.acquire(blocking=False)

    def __enter__(self):
        self.lock()
        return self

    def __exit__(self, *exc):
        self.unlock()


class RwLock:
    """Many readers or one writer. Waiting writers block new readers."""

    def __init__(self):
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False
        self._writers_waiting = 0

    def read_lock(self) -> None:
        with self._cond:
            while self._writer or self._writers_waiting:
                self._cond.wait()
            self._readers += 1

    def read_unlock(self) -> None:
        with self._cond:
            if self._readers == 0:
                raise RuntimeError("read_unlock without a reader")
            self._readers -= 1
            if self._readers == 0:
                self._cond.notify_all()

    def try_read_lock(self) -> bool:
        with self._cond:
            if self._writer or self._writers_waiting:
                return False
            self._readers += 1
            return True

    def write_lock(self) -> None:
        with self._cond:
            self._writers_waiting += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._writers_waiting -= 1
            self._writer = True

    def write_unlock(self) -> None:
        with self._cond:
            if not self._writer:
                raise RuntimeError("write_unlock without the writer")
            self._writer = False
            self._cond.notify_all()

    def try_write_lock(self) -> bool:
        with self._cond:
            if self._writer or self._readers:
                return False
            self._writer = True
            return True


class CounterQueues:
    """Host-readable FIFOs of 32-bit values, keyed by queue id."""

    def __init__(self):
        self._queues: dict[int, deque] = {}
        self._lock = threading.Lock()

    def _queue(self, qid: int) -> deque:
        q = self._queues.get(qid)
        if q is None:
            with self._lock:
                q = self._queues.setdefault(qid, deque())
        return q

    def push(self, qid: int, value: int) -> None:
        self._queue(qid).append(value & 0xFFFFFFFF)

    def pop(self, qid: int) -> Optional[int]:
        try:
            return self._queue(qid).popleft()
        except IndexError:
            return None


class DebugStream:
    """Lines logged by handlers, multiplexed over all HPUs."""

    def __init__(self, maxlen: int = 100_000):
        self._lines: deque = deque(maxlen=maxlen)

    def write(self, hpu_id: int, text: str) -> None:
        self._lines.append((hpu_id, text))

    def drain(self) -> list[tuple[int, str]]:
        out = []
        while True:
            try:
                out.append(self._lines.popleft())
            except IndexError:
                return out


class Runtime:
    """NIC-wide runtime services shared by all HPUs.

    ``egress`` is called with each outgoing frame from a dedicated egress
    thread; a send command completes once egress has accepted the frame.
    """

    def __init__(self, egress: Callable[[bytes], None] | None = None,
                 hpu_hz: float = 40e6, mtu: int = DEFAULT_MTU):
        if hpu_hz <= 0:
            raise ValueError("hpu_hz must be positive")
        self.egress = egress
        self.hpu_hz = hpu_hz
        self.max_frame = mtu + ETH_HEADER
        self.counters = CounterQueues()
        self.debug = DebugStream()
        self._ids = itertools.count(1)
        self._commands: weakref.WeakValueDictionary = weakref.WeakValueDictionary()
        self._pending: set[Command] = set()
        self._pending_lock = threading.Lock()
        self._egress_q: queue.SimpleQueue = queue.SimpleQueue()
        self._egress_thread: threading.Thread | None = None
        self._t0 = time.monotonic_ns()
        self.sent_frames = 0
        self.dma_counts: Counter = Counter()

    # lifecycle

    def start(self) -> None:
        if self._egress_thread is None:
            self._egress_thread = threading.Thread(target=self._egress_loop, name="egress",
                                                   daemon=True)
            self._egress_thread.start()

    def stop(self) -> None:
        if self._egress_thread is not None:
            self._egress_q.put(None)
            self._egress_thread.join()
            self._egress_thread = None
        with self._pending_lock:
            leftover = list(self._pending)
            self._pending.clear()
        for cmd in leftover:
            cmd._finish(CommandStatus.FAILED, "runtime stopped")

    def _egress_loop(self) -> None:
        while True:
            item = self._egress_q.get()
            if item is None:
                return
            frame, cmd = item
            try:
                if self.egress is not None:
                    self.egress(frame)
                self.sent_frames += 1
                self._complete(cmd, CommandStatus.DONE)
            except Exception as exc:  # egress rejected the frame
                self._complete(cmd, CommandStatus.FAILED, str(exc))

    # commands

    def _new_command(self, kind: CommandKind) -> Command:
        cmd = Command(next(self._ids), kind)
        self._commands[cmd.id] = cmd
        return cmd

    def _complete(self, cmd: Command, status: CommandStatus, error: str | None = None) -> None:
        with self._pending_lock:
            self._pending.discard(cmd)
        cmd._finish(status, error)

    def lookup(self, cmd) -> Command:
        if isinstance(cmd, Command):
            if self._commands.get(cmd.id) is not cmd:
                raise UnknownCommand(cmd.id)
            return cmd
        found = self._commands.get(cmd)
        if found is None:
            raise UnknownCommand(cmd)
        return found

    def wait(self, cmd, timeout: float | None = None) -> CommandStatus:
        cmd = self.lookup(cmd)
        cmd._done.wait(timeout)
        return cmd.status

    def test(self, cmd) -> CommandStatus:
        return self.lookup(cmd).status

    # data movement

    def send_packet(self, buf, length: int) -> Command:
        cmd = self._new_command(CommandKind.SEND)
        if length <= 0 or length > len(buf) or length > self.max_frame:
            cmd._finish(CommandStatus.FAILED, f"bad frame length {length}")
            return cmd
        frame = bytes(buf[:length])
        if self._egress_thread is None:
            # no egress worker: hand over synchronously
            try:
                if self.egress is not None:
                    self.egress(frame)
                self.sent_frames += 1
                cmd._finish(CommandStatus.DONE)
            except Exception as exc:
                cmd._finish(CommandStatus.FAILED, str(exc))
            return cmd
        with self._pending_lock:
            self._pending.add(cmd)
        self._egress_q.put((frame, cmd))
        return cmd

    def dma(self, region, src, dst, length: int, direction: Direction) -> Command:
        cmd = self._new_command(CommandKind.DMA)
        if length == 0:
            cmd._finish(CommandStatus.DONE)
            return cmd
        try:
            if direction is Direction.TO_HOST:
                _check_host(region, dst, length)
                if length < 0 or length > len(src):
                    raise DmaError(f"source holds {len(src)} bytes, asked for {length}")
                region.buf[dst:dst + length] = src[:length]
            elif direction is Direction.FROM_HOST:
                _check_host(region, src, length)
                if length < 0 or length > len(dst):
                    raise DmaError(f"destination holds {len(dst)} bytes, asked for {length}")
                dst[:length] = region.buf[src:src + length]
            else:
                raise DmaError(f"unknown direction {direction!r}")
        except (DmaError, TypeError) as exc:
            cmd._finish(CommandStatus.FAILED, str(exc))
            return cmd
        self.dma_counts[direction] += 1
        cmd._finish(CommandStatus.DONE)
        return cmd

    def cycles(self) -> int:
        return (time.monotonic_ns() - self._t0) * int(self.hpu_hz) // 1_000_000_000


def _check_host(region, offset: int, length: int) -> None:
    if region is None:
        raise DmaError("context has no host DMA region")
    if not isinstance(offset, int) or offset < 0 or length < 0 or offset + length > region.size:
        raise DmaError(f"host range [{offset}, {offset}+{length}) outside region of {region.size} bytes")


@dataclass
class TaskView:
    pkt_mem: memoryview
    pkt_mem_size: int
    msg_id: int
    is_eom: bool


class Spin:
    """Runtime services as seen by one handler invocation."""

    def __init__(self, runtime: Runtime, region, ctx_id: int, hpu_id: int):
        self.runtime = runtime
        self.region = region
        self.ctx_id = ctx_id
        self.hpu_id = hpu_id

    def send_packet(self, buf, length: int) -> Command:
        return self.runtime.send_packet(buf, length)

    def dma(self, src, dst, length: int, direction: Direction, opts: int = 0) -> Command:
        """Copy between NIC memory and the host region.

        TO_HOST: ``src`` is a NIC-side buffer, ``dst`` a host offset.
        FROM_HOST: ``src`` is a host offset, ``dst`` a writable NIC buffer.
        ``opts`` is accepted for interface parity and ignored.
        """
        cmd = self.runtime.dma(self.region, src, dst, length, direction)
        if cmd.status is CommandStatus.FAILED:
            self.log(f"dma failed: {cmd.error}")
        return cmd

    def write_to_host(self, addr: int, value: int) -> None:
        _check_host(self.region, addr, 8)
        self.region.buf[addr:addr + 8] = (value & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")

    def cmd_wait(self, cmd) -> CommandStatus:
        return self.runtime.wait(cmd)

    dma_wait = cmd_wait

    def dma_test(self, cmd) -> CommandStatus:
        return self.runtime.test(cmd)

    # Table-style lock API; handlers may equally use the Lock objects directly.
    @staticmethod
    def lock_init() -> Lock:
        return Lock()

    @staticmethod
    def lock_lock(lck: Lock) -> None:
        lck.lock()

    @staticmethod
    def lock_unlock(lck: Lock) -> None:
        lck.unlock()

    @staticmethod
    def lock_try_lock(lck: Lock) -> bool:
        return lck.try_lock()

    @staticmethod
    def rw_lock_init() -> RwLock:
        return RwLock()

    def cycles(self) -> int:
        return self.runtime.cycles()

    def push_counter(self, qid: int, value: int) -> None:
        self.runtime.counters.push(qid, value)

    def log(self, text: str) -> None:
        self.runtime.debug.write(self.hpu_id, text)


@dataclass
class HandlerArgs:
    task: TaskView
    ctx_id: int
    hpu_id: int
    spin: Spin
    state: object = None
