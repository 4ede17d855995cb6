"""Host side of the emulated NIC.

:class:`SmartNic` wires the matcher, packet allocator, engine and runtime
to a network port and gives the host controller an in-process API:
installing and removing execution contexts, reading and writing each
context's host DMA region, draining counter queues and HPU debug output,
and sending or receiving frames on the ordinary (non-offloaded) host path.
"""
from __future__ import annotations

import itertools
import logging
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .engine import ContextBinding, Engine, EngineConfig, HandlerSet
from .match import InvalidRuleset, Ruleset, match_packet
from .pktbuf import AllocatorConfig, PacketAllocator
from .runtime import DEFAULT_MTU, Runtime

log = logging.getLogger(__name__)

PAGE_SIZE = 4096
HOSTDMA_PAGES_DEFAULT = 32


class DuplicateContext(ValueError):
    pass


class ContextLimit(RuntimeError):
    pass


class UnknownContext(KeyError):
    pass


_phys = itertools.count(0x1_0000_0000, 0x1000_0000)


class HostDmaRegion:
    """Host memory shared with a context's handlers; any offset, any length."""

    def __init__(self, pages: int = HOSTDMA_PAGES_DEFAULT, page_size: int = PAGE_SIZE):
        if pages < 1:
            raise ValueError("region needs at least one page")
        self.size = pages * page_size
        self.buf = bytearray(self.size)
        # opaque stand-in for the physical address the driver would report
        self.phys_addr = next(_phys)

    def read(self, offset: int, length: int) -> bytes:
        if offset < 0 or length < 0 or offset + length > self.size:
            raise IndexError(f"[{offset}, {offset}+{length}) outside {self.size}-byte region")
        return bytes(self.buf[offset:offset + length])

    def write(self, offset: int, data) -> None:
        if offset < 0 or offset + len(data) > self.size:
            raise IndexError(f"[{offset}, {offset}+{len(data)}) outside {self.size}-byte region")
        self.buf[offset:offset + len(data)] = data

    def clear(self) -> None:
        self.buf[:] = bytes(self.size)


@dataclass
class ContextDescriptor:
    ctx_id: int
    ruleset: Ruleset
    handlers: HandlerSet
    host_pages: int = HOSTDMA_PAGES_DEFAULT
    counter_queues: tuple = (0,)
    state: object = None
    msg_id_extractor: Optional[Callable[[bytes], int]] = None
    serialize_packets: bool = False


@dataclass
class ContextHandle:
    ctx_id: int
    region: HostDmaRegion
    descriptor: ContextDescriptor = field(repr=False)
    active: bool = True


class SmartNic:
    """An emulated sPIN NIC attached to one network port.

    ``port`` needs ``send(frame)`` and ``recv(timeout)``; without a port,
    frames can be fed with :meth:`receive` and egress goes to ``egress``.
    """

    def __init__(self, port=None, engine_config: EngineConfig | None = None,
                 alloc_config: AllocatorConfig | None = None, max_contexts: int = 4,
                 mtu: int = DEFAULT_MTU, egress: Callable[[bytes], None] | None = None,
                 host_queue_depth: int = 4096):
        self.port = port
        self.engine_config = engine_config or EngineConfig()
        self.allocator = PacketAllocator(alloc_config)
        out = egress if egress is not None else (port.send if port is not None else None)
        self.runtime = Runtime(out, hpu_hz=self.engine_config.hpu_hz, mtu=mtu)
        self.engine = Engine(self.engine_config, self.allocator, self.runtime)
        self.max_contexts = max_contexts
        self._table: tuple = ()
        self._handles: dict[int, ContextHandle] = {}
        self._table_lock = threading.Lock()
        self._host_rx: queue.Queue = queue.Queue(maxsize=host_queue_depth)
        self.host_drops = 0
        self.forwarded = 0
        self._rx_thread: threading.Thread | None = None
        self._running = False

    # lifecycle

    def start(self) -> "SmartNic":
        self.runtime.start()
        self.engine.start()
        self._running = True
        if self.port is not None and self._rx_thread is None:
            self._rx_thread = threading.Thread(target=self._rx_loop, name="nic-rx", daemon=True)
            self._rx_thread.start()
        return self

    def stop(self) -> None:
        self._running = False
        if self._rx_thread is not None:
            self._rx_thread.join()
            self._rx_thread = None
        for ctx_id in list(self._handles):
            self.ctx_exit(self._handles[ctx_id])
        self.engine.stop()
        self.runtime.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _rx_loop(self) -> None:
        while self._running:
            frame = self.port.recv(0.05)
            if frame is not None:
                self.receive(frame)

    # ingress

    def receive(self, frame) -> bool:
        """Ingress path for one frame. True if the NIC handled it."""
        table = self._table  # one consistent snapshot per packet
        verdict = match_packet(table, frame)
        if verdict.matched_context is not None:
            self.engine.ingest(frame, verdict)
            return True
        self.forwarded += 1
        try:
            self._host_rx.put_nowait(bytes(frame))
        except queue.Full:
            self.host_drops += 1
        return False

    # contexts

    def ctx_init(self, desc: ContextDescriptor) -> ContextHandle:
        if not isinstance(desc.ruleset, Ruleset):
            raise InvalidRuleset(f"not a ruleset: {desc.ruleset!r}")
        desc.ruleset.validate()
        with self._table_lock:
            if desc.ctx_id in self._handles:
                raise DuplicateContext(f"context {desc.ctx_id} already installed")
            if len(self._handles) >= self.max_contexts:
                raise ContextLimit(f"at most {self.max_contexts} contexts")
            region = HostDmaRegion(desc.host_pages)
            self.engine.register(ContextBinding(
                desc.ctx_id, desc.handlers, region, desc.state,
                desc.msg_id_extractor, desc.serialize_packets))
            handle = ContextHandle(desc.ctx_id, region, desc)
            self._handles[desc.ctx_id] = handle
            self._table = self._table + ((desc.ctx_id, desc.ruleset),)
        return handle

    def ctx_exit(self, handle: ContextHandle, timeout: float | None = 10.0) -> None:
        with self._table_lock:
            if not handle.active or self._handles.get(handle.ctx_id) is not handle:
                raise UnknownContext(handle.ctx_id)
            handle.active = False
            self._table = tuple(e for e in self._table if e[0] != handle.ctx_id)
            del self._handles[handle.ctx_id]
        self.engine.unregister(handle.ctx_id, timeout)

    def contexts(self) -> list[int]:
        return [ctx_id for ctx_id, _ in self._table]

    # host memory and queues

    def host_read(self, handle: ContextHandle, offset: int, length: int) -> bytes:
        return handle.region.read(offset, length)

    def host_write(self, handle: ContextHandle, offset: int, data) -> None:
        handle.region.write(offset, data)

    def pop_counter(self, qid: int) -> Optional[int]:
        return self.runtime.counters.pop(qid)

    def drain_debug(self) -> list[tuple[int, str]]:
        return self.runtime.debug.drain()

    # host network path

    def host_recv(self, timeout: float | None = None) -> Optional[bytes]:
        try:
            return self._host_rx.get(timeout=timeout)
        except queue.Empty:
            return None

    def host_send(self, frame) -> None:
        if self.port is not None:
            self.port.send(bytes(frame))
        elif self.runtime.egress is not None:
            self.runtime.egress(bytes(frame))
