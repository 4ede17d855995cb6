"""Transports between two emulated endpoints.

:class:`SimLink` is an in-memory point-to-point link with seeded Bernoulli
loss, fixed one-way latency and an optional rate limit. It never reorders.
:func:`udp_transport` carries frames as datagrams between local sockets.

Loss is decided per frame from ``(seed, direction, frame digest, n)``
where ``n`` counts earlier transmissions of identical bytes in the same
direction. The drop pattern therefore depends only on what is sent, not on
how sender threads happen to interleave.
"""
from __future__ import annotations

import csv
import hashlib
import heapq
import itertools
import queue
import random
import socket
import threading
import time
from collections import Counter
from dataclasses import dataclass
from typing import Optional

ETH_HEADER = 14
MIN_FRAME = 14


class FrameTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class LinkConfig:
    loss: float = 0.0
    latency: float = 0.0
    rate: float = 0.0  # bytes per second, 0 = unlimited
    mtu: int = 1500
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.loss <= 1.0:
            raise ValueError("loss must be within [0, 1]")
        if self.latency < 0 or self.rate < 0:
            raise ValueError("latency and rate must be non-negative")


@dataclass(frozen=True)
class Frame:
    data: bytes
    timestamp: float


@dataclass(frozen=True)
class DeliveryRecord:
    time: float
    direction: int
    length: int
    dropped: bool


def loss_draw(seed: int, direction: int, data: bytes, occurrence: int) -> float:
    """Uniform [0, 1) draw used to decide whether a frame is lost."""
    digest = hashlib.blake2b(data, digest_size=16).hexdigest()
    return random.Random(f"{seed}/{direction}/{digest}/{occurrence}").random()


class SimPort:
    def __init__(self, link: "SimLink", index: int):
        self.link = link
        self.index = index
        self._rx: queue.SimpleQueue = queue.SimpleQueue()
        self.sent = 0
        self.received = 0

    def send(self, frame) -> None:
        self.link._transmit(self.index, bytes(frame))
        self.sent += 1

    def recv_frame(self, timeout: float | None = None) -> Optional[Frame]:
        try:
            fr = self._rx.get(timeout=timeout) if timeout != 0 else self._rx.get_nowait()
        except queue.Empty:
            return None
        self.received += 1
        return fr

    def recv(self, timeout: float | None = None) -> Optional[bytes]:
        fr = self.recv_frame(timeout)
        return None if fr is None else fr.data

    def close(self) -> None:
        pass


class SimLink:
    """Two-port simulated link. Direction 0 is port 0 -> port 1."""

    def __init__(self, config: LinkConfig | None = None, keep_log: bool = True):
        self.config = config or LinkConfig()
        self.ports: list[SimPort] = []
        self.keep_log = keep_log
        self.log: list[DeliveryRecord] = []
        self._occurrences: list[Counter] = [Counter(), Counter()]
        self._lock = threading.Lock()
        self._t0 = time.monotonic()
        self._next_free = [0.0, 0.0]
        self._heap: list = []
        self._seq = itertools.count()
        self._cond = threading.Condition(self._lock)
        self._thread: threading.Thread | None = None
        self._closed = False
        self.drops = [0, 0]
        self.delivered = [0, 0]

    def attach(self, endpoint=None) -> SimPort:
        if len(self.ports) >= 2:
            raise RuntimeError("a point-to-point link has two ports")
        port = SimPort(self, len(self.ports))
        self.ports.append(port)
        return port

    @classmethod
    def pair(cls, config: LinkConfig | None = None, **kw) -> tuple["SimLink", SimPort, SimPort]:
        link = cls(config, **kw)
        return link, link.attach(), link.attach()

    def _delayed(self) -> bool:
        return self.config.latency > 0 or self.config.rate > 0

    def _transmit(self, src: int, data: bytes) -> None:
        cfg = self.config
        if not MIN_FRAME <= len(data) <= cfg.mtu + ETH_HEADER:
            raise FrameTooLarge(f"frame of {len(data)} bytes outside [{MIN_FRAME}, {cfg.mtu + ETH_HEADER}]")
        if len(self.ports) < 2:
            raise RuntimeError("link has no peer attached")
        dst = 1 - src
        with self._lock:
            now = time.monotonic()
            dropped = False
            if cfg.loss >= 1.0:
                dropped = True
            elif cfg.loss > 0.0:
                key = hashlib.blake2b(data, digest_size=16).digest()
                n = self._occurrences[src][key]
                self._occurrences[src][key] = n + 1
                dropped = loss_draw(cfg.seed, src, data, n) < cfg.loss
            if self.keep_log:
                self.log.append(DeliveryRecord(now - self._t0, src, len(data), dropped))
            if dropped:
                self.drops[src] += 1
                return
            self.delivered[src] += 1
            if not self._delayed():
                self.ports[dst]._rx.put(Frame(data, now))
                return
            depart = now
            if cfg.rate > 0:
                # token bucket holding one frame: serialize at the configured rate
                depart = max(now, self._next_free[src])
                self._next_free[src] = depart + len(data) / cfg.rate
            heapq.heappush(self._heap, (depart + cfg.latency, next(self._seq), dst, data))
            if self._thread is None:
                self._thread = threading.Thread(target=self._deliver_loop, name="simlink",
                                                daemon=True)
                self._thread.start()
            self._cond.notify()

    def _deliver_loop(self) -> None:
        with self._cond:
            while not self._closed:
                if not self._heap:
                    self._cond.wait()
                    continue
                due = self._heap[0][0]
                now = time.monotonic()
                if due > now:
                    self._cond.wait(due - now)
                    continue
                _, _, dst, data = heapq.heappop(self._heap)
                self.ports[dst]._rx.put(Frame(data, now))

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        if self._thread is not None:
            self._thread.join()

    def write_log_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["time_s", "direction", "length", "dropped"])
            for rec in list(self.log):
                w.writerow([f"{rec.time:.9f}", rec.direction, rec.length, int(rec.dropped)])


class UdpPort:
    """Frames carried as UDP datagrams between two local sockets."""

    def __init__(self, bind: tuple[str, int], peer: tuple[str, int] | None = None,
                 mtu: int = 1500):
        self.mtu = mtu
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 << 20)
        except OSError:
            pass
        self.sock.bind(bind)
        self.peer = peer
        self.sent = 0
        self.received = 0
        self._timeout: object = object()

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def send(self, frame) -> None:
        if not MIN_FRAME <= len(frame) <= self.mtu + ETH_HEADER:
            raise FrameTooLarge(f"frame of {len(frame)} bytes")
        if self.peer is None:
            raise RuntimeError("UDP port has no peer")
        self.sock.sendto(bytes(frame), self.peer)
        self.sent += 1

    def recv(self, timeout: float | None = None) -> Optional[bytes]:
        if timeout != self._timeout:
            self.sock.settimeout(timeout)
            self._timeout = timeout
        try:
            data, _ = self.sock.recvfrom(65535)
        except (socket.timeout, BlockingIOError):
            return None
        except OSError:
            return None
        self.received += 1
        return data

    def close(self) -> None:
        self.sock.close()


def udp_transport(bind: tuple[str, int], peer: tuple[str, int] | None = None,
                  mtu: int = 1500) -> UdpPort:
    return UdpPort(bind, peer, mtu)


def udp_pair(host: str = "127.0.0.1", mtu: int = 1500) -> tuple[UdpPort, UdpPort]:
    a = UdpPort((host, 0), mtu=mtu)
    b = UdpPort((host, 0), a.address, mtu=mtu)
    a.peer = b.address
    return a, b
