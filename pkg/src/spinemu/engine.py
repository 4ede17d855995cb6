"""Handler execution core.

Matched packets are copied into a packet-memory slot and turned into tasks
(header, packet, tail). A coordinator tracks one :class:`MessageState` per
live message and releases tasks only when the ordering rules allow:

* the header handler runs on the first packet, before any packet handler
  of that message;
* packet handlers run on every packet, in parallel unless the context asks
  for serialization;
* the tail handler runs on the end-of-message packet once every packet
  handler of the message has finished.

Ready tasks go to per-cluster queues; a message sticks to one cluster.
HPU worker threads run the handlers and report completions, which free the
slot when its last task is done.
"""
from __future__ import annotations

import csv
import enum
import itertools
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .match import MatchVerdict
from .pktbuf import AllocError, BufferSlot, PacketAllocator
from .runtime import HandlerArgs, Runtime, Spin, TaskView

log = logging.getLogger(__name__)


class Role(enum.Enum):
    HEADER = "header"
    PACKET = "packet"
    TAIL = "tail"


class Phase(enum.Enum):
    AWAIT_HEADER = "await_header"
    FLOWING = "flowing"
    DRAINING = "draining"
    DONE = "done"


@dataclass(frozen=True)
class EngineConfig:
    clusters: int = 2
    hpus_per_cluster: int = 8
    mpq_entries: int = 16
    hpu_hz: float = 40e6
    defer_depth: int = 64
    # idle messages (no packet, nothing in flight) older than this are reaped
    # when the MPQ is full; None disables reaping
    message_idle_timeout: Optional[float] = 2.0
    record_events: bool = True

    def __post_init__(self):
        for name in ("clusters", "hpus_per_cluster", "mpq_entries"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.defer_depth < 0:
            raise ValueError("defer_depth must be >= 0")

    @property
    def hpus(self) -> int:
        return self.clusters * self.hpus_per_cluster


@dataclass
class HandlerSet:
    header: Optional[Callable[[HandlerArgs], None]] = None
    packet: Optional[Callable[[HandlerArgs], None]] = None
    tail: Optional[Callable[[HandlerArgs], None]] = None

    def __post_init__(self):
        if self.header is None and self.packet is None and self.tail is None:
            raise ValueError("a handler set needs at least one handler")

    def get(self, role: Role):
        return getattr(self, role.value)


@dataclass
class ContextBinding:
    """What the engine needs to know about an installed context."""
    ctx_id: int
    handlers: HandlerSet
    region: object = None
    state: object = None
    msg_id_extractor: Optional[Callable[[bytes], int]] = None
    serialize_packets: bool = False
    # default message tracking: id of the message currently being received
    next_msg_id: int = 0
    closing: bool = False
    running: int = 0


@dataclass
class Packet:
    slot: BufferSlot
    length: int
    is_eom: bool
    generation: int
    seq: int


@dataclass
class Task:
    ctx_id: int
    msg_id: int
    pkt: Packet
    role: Role

    @property
    def slot(self) -> BufferSlot:
        return self.pkt.slot

    @property
    def pkt_len(self) -> int:
        return self.pkt.length

    @property
    def is_eom(self) -> bool:
        return self.pkt.is_eom


@dataclass
class MessageState:
    ctx_id: int
    msg_id: int
    cluster: int
    phase: Phase = Phase.AWAIT_HEADER
    inflight: int = 0
    pending: deque = field(default_factory=deque)
    eom_seen: bool = False
    tail_task: Optional[Task] = None
    tail_running: bool = False
    successors: list = field(default_factory=list)
    last_activity: float = 0.0


@dataclass(frozen=True)
class Event:
    start: float
    end: float
    ctx_id: int
    msg_id: int
    role: Role
    hpu_id: int
    pkt_seq: int
    ok: bool

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class EngineCounters:
    ingested: int = 0
    alloc_drops: int = 0
    mpq_drops: int = 0
    deferred: int = 0
    reaped: int = 0
    failed_tasks: int = 0
    cancelled_tasks: int = 0
    completed_tasks: int = 0
    slot_violations: int = 0


class _Cluster:
    def __init__(self):
        self.ready: deque = deque()
        self.cond = threading.Condition(threading.Lock())


class Engine:
    def __init__(self, config: EngineConfig | None = None,
                 allocator: PacketAllocator | None = None,
                 runtime: Runtime | None = None):
        self.config = config or EngineConfig()
        self.allocator = allocator or PacketAllocator()
        self.runtime = runtime or Runtime(hpu_hz=self.config.hpu_hz)
        self.counters = EngineCounters()
        self._contexts: dict[int, ContextBinding] = {}
        self._messages: dict[tuple[int, int], MessageState] = {}
        self._deferred: deque = deque()
        self._refs: dict[int, int] = {}
        self._lock = threading.RLock()
        self._idle = threading.Condition(self._lock)
        self._clusters = [_Cluster() for _ in range(self.config.clusters)]
        self._rr = itertools.cycle(range(self.config.clusters))
        self._seq = itertools.count()
        self._workers: list[threading.Thread] = []
        self._running = False
        self._events: list[Event] = []
        self._events_lock = threading.Lock()
        self._t0 = time.perf_counter()
        self._outstanding = 0

    # lifecycle

    def start(self) -> None:
        if self._running:
            return
        self._running = True
        for c, cluster in enumerate(self._clusters):
            for h in range(self.config.hpus_per_cluster):
                hpu_id = c * self.config.hpus_per_cluster + h
                t = threading.Thread(target=self._worker, args=(cluster, hpu_id),
                                     name=f"hpu{hpu_id}", daemon=True)
                t.start()
                self._workers.append(t)

    def stop(self) -> None:
        if not self._running:
            return
        self._running = False
        for cluster in self._clusters:
            with cluster.cond:
                cluster.cond.notify_all()
        for t in self._workers:
            t.join()
        self._workers.clear()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    # contexts

    def register(self, binding: ContextBinding) -> None:
        with self._lock:
            if binding.ctx_id in self._contexts:
                raise ValueError(f"context {binding.ctx_id} already registered")
            self._contexts[binding.ctx_id] = binding

    def unregister(self, ctx_id: int, timeout: float | None = None) -> None:
        """Stop scheduling work for ``ctx_id`` and wait for running handlers.

        Tasks that have not started yet are cancelled and their slots freed.
        """
        with self._lock:
            ctx = self._contexts.get(ctx_id)
            if ctx is None:
                raise KeyError(ctx_id)
            ctx.closing = True
            for key in [k for k in self._messages if k[0] == ctx_id]:
                st = self._messages.pop(key)
                for task in st.pending:
                    self._release(task.pkt)
                    self.counters.cancelled_tasks += 1
                if st.tail_task is not None:
                    self._release(st.tail_task.pkt)
                    self.counters.cancelled_tasks += 1
                for pkt in st.successors:
                    self._release(pkt)
            keep = deque()
            for item in self._deferred:
                if item[0] is ctx:
                    self._release(item[2])
                else:
                    keep.append(item)
            self._deferred = keep
        for cluster in self._clusters:
            with cluster.cond:
                dropped = [t for t in cluster.ready if t.ctx_id == ctx_id]
                cluster.ready = deque(t for t in cluster.ready if t.ctx_id != ctx_id)
            with self._lock:
                for task in dropped:
                    self._release(task.pkt)
                    self.counters.cancelled_tasks += 1
                    self._outstanding -= 1
                    ctx.running -= 1
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._idle:
            while ctx.running > 0:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError(f"context {ctx_id} did not drain")
                self._idle.wait(remaining)
            del self._contexts[ctx_id]

    # ingress

    def message_id_for(self, ctx: ContextBinding, packet, is_eom: bool) -> int:
        if ctx.msg_id_extractor is not None:
            return ctx.msg_id_extractor(packet)
        msg_id = ctx.next_msg_id
        if is_eom:
            ctx.next_msg_id += 1
        return msg_id

    def ingest(self, packet, verdict: MatchVerdict) -> bool:
        """Buffer a matched packet and schedule its tasks. False if dropped."""
        if verdict.matched_context is None:
            raise ValueError("ingest needs a matched verdict")
        ctx = self._contexts.get(verdict.matched_context)
        if ctx is None or ctx.closing:
            return False
        try:
            slot = self.allocator.store(packet)
        except AllocError:
            with self._lock:
                self.counters.alloc_drops += 1
            return False
        with self._lock:
            if ctx.closing:
                self.allocator.free(slot)
                return False
            self.counters.ingested += 1
            pkt = Packet(slot, len(packet), verdict.is_eom,
                         self.allocator.generation(slot), next(self._seq))
            self._refs[slot.index] = 0
            msg_id = self.message_id_for(ctx, packet, verdict.is_eom)
            return self._admit(ctx, msg_id, pkt, time.monotonic())

    def _admit(self, ctx: ContextBinding, msg_id: int, pkt: Packet, now: float) -> bool:
        key = (ctx.ctx_id, msg_id)
        st = self._messages.get(key)
        if st is not None and st.eom_seen:
            # same id again after its end-of-message: next instance
            st.successors.append(pkt)
            return True
        if st is None:
            if len(self._messages) >= self.config.mpq_entries:
                self._reap(now)
            if len(self._messages) >= self.config.mpq_entries:
                if len(self._deferred) < self.config.defer_depth:
                    self._deferred.append((ctx, msg_id, pkt))
                    self.counters.deferred += 1
                    return True
                self.counters.mpq_drops += 1
                self._release(pkt)
                return False
            st = MessageState(ctx.ctx_id, msg_id, next(self._rr))
            self._messages[key] = st
            if ctx.handlers.header is not None:
                self._dispatch(st, Task(ctx.ctx_id, msg_id, pkt, Role.HEADER))
            else:
                st.phase = Phase.FLOWING
        st.last_activity = now
        if ctx.handlers.packet is not None:
            task = Task(ctx.ctx_id, msg_id, pkt, Role.PACKET)
            if st.phase is Phase.AWAIT_HEADER or (ctx.serialize_packets and (st.inflight or st.pending)):
                self._hold(st, task)
            else:
                st.inflight += 1
                self._dispatch(st, task)
        if pkt.is_eom:
            st.eom_seen = True
            if ctx.handlers.tail is not None:
                self._refs[pkt.slot.index] += 1
                st.tail_task = Task(ctx.ctx_id, msg_id, pkt, Role.TAIL)
        if self._refs[pkt.slot.index] == 0:
            self._free_slot(pkt)
        self._advance(st)
        return True

    def _hold(self, st: MessageState, task: Task) -> None:
        self._refs[task.pkt.slot.index] += 1
        st.pending.append(task)

    def _dispatch(self, st: MessageState, task: Task) -> None:
        self._refs[task.pkt.slot.index] += 1
        self._enqueue_held(st, task)

    def _advance(self, st: MessageState) -> None:
        """Release held work and the tail when ordering permits."""
        if st.phase is Phase.AWAIT_HEADER:
            return
        ctx = self._contexts[st.ctx_id]
        while st.pending and not (ctx.serialize_packets and st.inflight):
            task = st.pending.popleft()
            st.inflight += 1
            self._enqueue_held(st, task)
        if st.eom_seen and st.inflight == 0 and not st.pending and not st.tail_running:
            st.phase = Phase.DRAINING
            if st.tail_task is not None:
                task, st.tail_task = st.tail_task, None
                st.tail_running = True
                self._enqueue_held(st, task)
            else:
                self._finish(st)

    def _enqueue_held(self, st: MessageState, task: Task) -> None:
        # the slot reference was taken when the task was held
        ctx = self._contexts[task.ctx_id]
        ctx.running += 1
        self._outstanding += 1
        cluster = self._clusters[st.cluster]
        with cluster.cond:
            cluster.ready.append(task)
            cluster.cond.notify()

    def _finish(self, st: MessageState) -> None:
        st.phase = Phase.DONE
        key = (st.ctx_id, st.msg_id)
        if self._messages.get(key) is st:
            del self._messages[key]
        ctx = self._contexts.get(st.ctx_id)
        now = time.monotonic()
        if ctx is not None and not ctx.closing:
            for pkt in st.successors:
                self._admit(ctx, st.msg_id, pkt, now)
        else:
            for pkt in st.successors:
                self._release(pkt)
        self._drain_deferred(now)

    def _drain_deferred(self, now: float) -> None:
        if not self._deferred:
            return
        waiting, self._deferred = self._deferred, deque()
        for item in waiting:
            ctx, msg_id, pkt = item
            if (ctx.ctx_id, msg_id) in self._messages or len(self._messages) < self.config.mpq_entries:
                self._admit(ctx, msg_id, pkt, now)
            else:
                self._deferred.append(item)

    def _reap(self, now: float) -> None:
        limit = self.config.message_idle_timeout
        if limit is None:
            return
        for key, st in list(self._messages.items()):
            if (now - st.last_activity > limit and st.inflight == 0 and not st.pending
                    and not st.tail_running and st.phase is not Phase.AWAIT_HEADER):
                del self._messages[key]
                for pkt in st.successors:
                    self._release(pkt)
                self.counters.reaped += 1

    # slot references

    def _release(self, pkt: Packet) -> None:
        idx = pkt.slot.index
        refs = self._refs.get(idx, 0) - 1
        if refs <= 0:
            self._free_slot(pkt)
        else:
            self._refs[idx] = refs

    def _free_slot(self, pkt: Packet) -> None:
        self._refs.pop(pkt.slot.index, None)
        self.allocator.free(pkt.slot)

    # HPU side

    def _worker(self, cluster: _Cluster, hpu_id: int) -> None:
        while True:
            with cluster.cond:
                while not cluster.ready and self._running:
                    cluster.cond.wait()
                if not cluster.ready:
                    return
                task = cluster.ready.popleft()
            self._run(task, hpu_id)

    def _run(self, task: Task, hpu_id: int) -> None:
        ctx = self._contexts.get(task.ctx_id)
        pkt = task.pkt
        if not self.allocator.is_allocated(pkt.slot) or self.allocator.generation(pkt.slot) != pkt.generation:
            # never expected; counted so tests can assert it stays zero
            with self._lock:
                self.counters.slot_violations += 1
                ctx.running -= 1
                self._outstanding -= 1
                self._idle.notify_all()
            self.runtime.debug.write(hpu_id, f"task on recycled slot {pkt.slot.index} skipped")
            return
        handler = ctx.handlers.get(task.role)
        view = self.allocator.view(pkt.slot, pkt.length)
        args = HandlerArgs(TaskView(view, pkt.length, task.msg_id, pkt.is_eom),
                           task.ctx_id, hpu_id,
                           Spin(self.runtime, ctx.region, task.ctx_id, hpu_id), ctx.state)
        start = time.perf_counter()
        ok = True
        try:
            handler(args)
        except Exception as exc:
            ok = False
            self.runtime.debug.write(hpu_id, f"{task.role.value} handler of ctx {task.ctx_id} "
                                             f"msg {task.msg_id} failed: {exc!r}")
            log.debug("handler failure", exc_info=True)
        end = time.perf_counter()
        if self.config.record_events:
            ev = Event(start - self._t0, end - self._t0, task.ctx_id, task.msg_id, task.role,
                       hpu_id, pkt.seq, ok)
            with self._events_lock:
                self._events.append(ev)
        self._complete(task, ok)

    def _complete(self, task: Task, ok: bool) -> None:
        with self._lock:
            if ok:
                self.counters.completed_tasks += 1
            else:
                self.counters.failed_tasks += 1
            self._release(task.pkt)
            ctx = self._contexts[task.ctx_id]
            ctx.running -= 1
            self._outstanding -= 1
            st = self._messages.get((task.ctx_id, task.msg_id))
            if st is not None and not ctx.closing:
                if task.role is Role.HEADER:
                    st.phase = Phase.FLOWING
                elif task.role is Role.PACKET:
                    st.inflight -= 1
                else:
                    st.tail_running = False
                    self._finish(st)
                    st = None
                if st is not None:
                    self._advance(st)
            self._idle.notify_all()

    # introspection

    def wait_idle(self, timeout: float = 10.0) -> bool:
        """Block until no task is queued or running."""
        deadline = time.monotonic() + timeout
        with self._idle:
            while self._outstanding > 0:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._idle.wait(remaining)
        return True

    def live_messages(self) -> int:
        with self._lock:
            return len(self._messages)

    def events(self) -> list[Event]:
        with self._events_lock:
            return list(self._events)

    def clear_events(self) -> None:
        with self._events_lock:
            self._events.clear()

    def write_events_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["start_s", "end_s", "ctx_id", "msg_id", "role", "hpu_id", "pkt_seq",
                        "duration_s", "ok"])
            for ev in self.events():
                w.writerow([f"{ev.start:.9f}", f"{ev.end:.9f}", ev.ctx_id, ev.msg_id,
                            ev.role.value, ev.hpu_id, ev.pkt_seq, f"{ev.duration:.9f}", int(ev.ok)])


def ordering_violations(events: list[Event]) -> list[str]:
    """Check header-before-packets and packets-before-tail per message instance.

    Instances are separated by tail events: packet events of a message that
    start after that message's tail ended belong to a later instance.
    """
    by_msg: dict[tuple[int, int], list[Event]] = {}
    for ev in events:
        by_msg.setdefault((ev.ctx_id, ev.msg_id), []).append(ev)
    problems = []
    for key, evs in by_msg.items():
        evs.sort(key=lambda e: e.start)
        instance: list[Event] = []
        for ev in evs:
            instance.append(ev)
            if ev.role is Role.TAIL:
                problems += _check_instance(key, instance)
                instance = []
        if instance:
            problems += _check_instance(key, instance)
    return problems


def _check_instance(key, evs: list[Event]) -> list[str]:
    headers = [e for e in evs if e.role is Role.HEADER]
    packets = [e for e in evs if e.role is Role.PACKET]
    tails = [e for e in evs if e.role is Role.TAIL]
    out = []
    if len(headers) > 1:
        out.append(f"{key}: {len(headers)} header handlers in one instance")
    if headers and packets and max(h.end for h in headers) > min(p.start for p in packets):
        out.append(f"{key}: packet handler started before header finished")
    if tails and packets and max(p.end for p in packets) > min(t.start for t in tails):
        out.append(f"{key}: tail started before packet handlers finished")
    if tails and headers and max(h.end for h in headers) > min(t.start for t in tails):
        out.append(f"{key}: tail started before header finished")
    return out
