"""Sender-controlled lightweight message protocol (SLMP) over UDP.

Wire header, 10 bytes at the start of the UDP payload, big-endian::

    flags:u16  (SYN=0x1, ACK=0x2, EOM=0x4)
    msg_id:u32
    offset:u32 (byte offset of the first payload byte in the message)

The receiver runs as header/packet/tail handlers on the NIC and writes
payload bytes straight to host memory. A segment carrying SYN is
acknowledged by echoing its header with ACK set and no payload, once every
byte of the message up to the end of that segment has arrived. The sender
picks the reliability level by where it places SYN bits.
"""
from __future__ import annotations

import enum
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

from .engine import HandlerSet
from .hostif import ContextDescriptor, PAGE_SIZE
from .match import RULE_IP, RULE_IP_PROTO, RULE_UDP_DST_PORT, MatchRule, Mode, Ruleset
from .packets import (IP_LEN, PROTO_UDP, UDP_LEN, UDP_PAYLOAD_OFF, build_udp_frame,
                      inet_checksum, swap_l2_l3, swap_udp_ports)
from .runtime import CommandStatus, Direction, HandlerArgs

SYN = 0x0001
ACK = 0x0002
EOM = 0x0004

HEADER_LEN = 10
_HDR = struct.Struct("!HII")
SLMP_PORT = 9331
PAYLOAD_OFF = UDP_PAYLOAD_OFF + HEADER_LEN   # 52


@dataclass(frozen=True)
class SlmpHeader:
    flags: int
    msg_id: int
    offset: int

    @property
    def syn(self) -> bool:
        return bool(self.flags & SYN)

    @property
    def ack(self) -> bool:
        return bool(self.flags & ACK)

    @property
    def eom(self) -> bool:
        return bool(self.flags & EOM)


def encode_header(h: SlmpHeader) -> bytes:
    return _HDR.pack(h.flags, h.msg_id, h.offset)


def decode_header(data) -> SlmpHeader:
    if len(data) < HEADER_LEN:
        raise ValueError(f"SLMP header needs {HEADER_LEN} bytes, got {len(data)}")
    return SlmpHeader(*_HDR.unpack_from(data, 0))


def slmp_ruleset(port: int = SLMP_PORT) -> Ruleset:
    # word 10 = bytes 40..43: UDP checksum, then the SLMP flags word
    return Ruleset(Mode.AND, (RULE_IP, RULE_IP_PROTO(PROTO_UDP), RULE_UDP_DST_PORT(port)),
                   MatchRule(10, EOM, EOM, EOM))


def msg_id_of(frame) -> int:
    """Engine message-id hook: the SLMP Message ID field."""
    if len(frame) < PAYLOAD_OFF:
        return 0
    return int.from_bytes(frame[UDP_PAYLOAD_OFF + 2:UDP_PAYLOAD_OFF + 6], "big")


class ReliabilityMode(enum.Enum):
    NONE = "none"
    MESSAGE = "message"
    PER_WINDOW = "window"


@dataclass(frozen=True)
class SenderConfig:
    mode: ReliabilityMode = ReliabilityMode.PER_WINDOW
    window: int = 16
    inter_packet_gap: float = 0.0
    mtu: int = 1500
    rto: float = 0.05
    max_retries: int = 10

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.segment_payload < 1:
            raise ValueError(f"mtu {self.mtu} leaves no room for payload")

    @property
    def segment_payload(self) -> int:
        return self.mtu - IP_LEN - UDP_LEN - HEADER_LEN


class TransferFailed(Exception):
    reason = "failed"


class SlmpTimeout(TransferFailed):
    reason = "timeout"


class SlmpRejected(TransferFailed):
    reason = "rejected"


@dataclass
class SendStats:
    msg_id: int
    size: int
    segments: int
    frames_sent: int = 0
    retransmits: int = 0
    elapsed: float = 0.0


@dataclass(frozen=True)
class Endpoint:
    mac: bytes
    ip: bytes
    port: int


class _AckBox:
    def __init__(self, expected: set[int]):
        self.expected = expected
        self.acked: set[int] = set()
        self.foreign = 0
        self.cond = threading.Condition()

    def add(self, offset: int) -> None:
        with self.cond:
            if offset in self.expected:
                self.acked.add(offset)
                self.cond.notify_all()
            else:
                self.foreign += 1

    def wait(self, offset: int, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        with self.cond:
            while offset not in self.acked:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self.cond.wait(remaining)
            return True


class SlmpSender:
    """Host-side SLMP sender on a plain port; ACKs are demultiplexed by msg id.

    Several threads may call :meth:`send_message` at once for distinct ids.
    """

    def __init__(self, port, local: Endpoint, remote: Endpoint):
        self.port = port
        self.local = local
        self.remote = remote
        self._boxes: dict[int, _AckBox] = {}
        self._lock = threading.Lock()
        self.unknown_acks = 0
        self._running = True
        self._thread = threading.Thread(target=self._rx_loop, name="slmp-sender-rx", daemon=True)
        self._thread.start()

    def close(self) -> None:
        self._running = False
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _rx_loop(self) -> None:
        while self._running:
            frame = self.port.recv(0.05)
            if frame is None or len(frame) < PAYLOAD_OFF:
                continue
            hdr = decode_header(frame[UDP_PAYLOAD_OFF:PAYLOAD_OFF])
            if not hdr.ack:
                continue
            with self._lock:
                box = self._boxes.get(hdr.msg_id)
            if box is None:
                self.unknown_acks += 1
            else:
                box.add(hdr.offset)

    def _frame(self, flags: int, msg_id: int, offset: int, chunk: bytes) -> bytes:
        payload = encode_header(SlmpHeader(flags, msg_id, offset)) + chunk
        return build_udp_frame(self.local.mac, self.remote.mac, self.local.ip, self.remote.ip,
                               self.local.port, self.remote.port, payload, ident=offset)

    def send_message(self, cfg: SenderConfig, msg_id: int, payload: bytes) -> SendStats:
        if not payload:
            raise ValueError("SLMP messages carry at least one byte")
        seg = cfg.segment_payload
        offsets = list(range(0, len(payload), seg))
        n = len(offsets)
        last = n - 1
        if cfg.mode is ReliabilityMode.NONE:
            syn = set()
        elif cfg.mode is ReliabilityMode.MESSAGE:
            syn = {0, last}
        else:
            syn = {i for i in range(n) if i % cfg.window == cfg.window - 1} | {last}
        frames = []
        for i, off in enumerate(offsets):
            flags = (SYN if i in syn else 0) | (EOM if i == last else 0)
            frames.append(self._frame(flags, msg_id, off, payload[off:off + seg]))

        stats = SendStats(msg_id, len(payload), n)
        box = _AckBox({offsets[i] for i in syn})
        with self._lock:
            if msg_id in self._boxes:
                raise ValueError(f"message {msg_id} already in flight")
            self._boxes[msg_id] = box
        t0 = time.perf_counter()
        try:
            if cfg.mode is ReliabilityMode.PER_WINDOW:
                self._send_windows(cfg, frames, offsets, box, stats)
            else:
                self._burst(cfg, frames, range(n), stats)
                for i in sorted(syn):
                    self._await(cfg, box, offsets[i], [frames[i]], stats)
        finally:
            with self._lock:
                del self._boxes[msg_id]
        stats.elapsed = time.perf_counter() - t0
        return stats

    def _burst(self, cfg: SenderConfig, frames, indices, stats: SendStats) -> None:
        gap = cfg.inter_packet_gap
        for k, i in enumerate(indices):
            if gap and k:
                _pause(gap)
            self.port.send(frames[i])
            stats.frames_sent += 1

    def _send_windows(self, cfg, frames, offsets, box, stats) -> None:
        start = 0
        n = len(frames)
        while start < n:
            end = min(start + cfg.window, n)
            self._burst(cfg, frames, range(start, end), stats)
            self._await(cfg, box, offsets[end - 1], frames[start:end], stats)
            start = end

    def _await(self, cfg, box: _AckBox, offset: int, resend: list, stats: SendStats) -> None:
        """Wait for the ACK of ``offset``; go back and resend ``resend`` on timeout."""
        tries = 0
        while not box.wait(offset, cfg.rto):
            tries += 1
            if tries > cfg.max_retries:
                if box.foreign >= cfg.max_retries:
                    raise SlmpRejected(f"msg {stats.msg_id}: ACKs for unexpected offsets")
                raise SlmpTimeout(f"msg {stats.msg_id}: offset {offset} not acknowledged "
                                  f"after {cfg.max_retries} retries")
            self._burst(cfg, resend, range(len(resend)), stats)
            stats.retransmits += len(resend)


def _pause(seconds: float) -> None:
    if seconds >= 1e-3:
        time.sleep(seconds)
        return
    end = time.perf_counter() + seconds
    while time.perf_counter() < end:
        pass


def ack_frame(frame, hdr: SlmpHeader) -> bytearray:
    """Reply frame acknowledging ``hdr``: addresses swapped, header only."""
    out = bytearray(frame[:UDP_PAYLOAD_OFF])
    swap_l2_l3(out)
    swap_udp_ports(out)
    out[16:18] = (IP_LEN + UDP_LEN + HEADER_LEN).to_bytes(2, "big")
    out[24:26] = b"\x00\x00"
    out[24:26] = inet_checksum(out[14:34]).to_bytes(2, "big")
    out[38:40] = (UDP_LEN + HEADER_LEN).to_bytes(2, "big")
    out[40:42] = b"\x00\x00"
    out += encode_header(SlmpHeader(hdr.flags | ACK, hdr.msg_id, hdr.offset))
    return out


@dataclass
class ReceiverMsgState:
    msg_id: int
    base: int
    capacity: int
    segments: dict = field(default_factory=dict)
    watermark: int = 0
    total: Optional[int] = None
    pending_acks: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)
    extra: object = None


class SlmpReceiver:
    """NIC-side SLMP receiver writing each message to host memory.

    The host announces where message ``msg_id`` lands with :meth:`expect`;
    unannounced messages go to offset 0 of the region. Completed messages
    are reported on counter queue ``completion_queue`` as two values,
    ``msg_id`` then the received length.
    """

    def __init__(self, completion_queue: int = 1, remember: int = 4096):
        self.completion_queue = completion_queue
        self._remember = remember
        self._expected: dict[int, tuple] = {}
        self._states: dict[int, ReceiverMsgState] = {}
        self._completed: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.dropped = 0
        self.acks_sent = 0
        self.processing_log: list[tuple[int, int]] = []
        self._done: dict[int, int] = {}
        self.completed_at: dict[int, float] = {}

    # host-side setup

    def expect(self, msg_id: int, base: int, capacity: int) -> None:
        with self._lock:
            self._expected[msg_id] = (base, capacity)

    def forget(self, msg_id: int) -> None:
        with self._lock:
            self._expected.pop(msg_id, None)
            self._states.pop(msg_id, None)
            self._completed.pop(msg_id, None)
            self._done.pop(msg_id, None)
            self.completed_at.pop(msg_id, None)

    def handlers(self) -> HandlerSet:
        return HandlerSet(self.header_handler, self.packet_handler, self.tail_handler)

    def descriptor(self, ctx_id: int = 0, port: int = SLMP_PORT, host_bytes: int = 0,
                   **kw) -> ContextDescriptor:
        pages = max(1, -(-host_bytes // PAGE_SIZE)) if host_bytes else 32
        return ContextDescriptor(ctx_id, slmp_ruleset(port), self.handlers(), host_pages=pages,
                                 counter_queues=(self.completion_queue,), state=self,
                                 msg_id_extractor=msg_id_of, **kw)

    def wait_completion(self, nic, msg_id: int, timeout: float) -> Optional[int]:
        """Poll the completion queue until ``msg_id`` is reported; its length or None."""
        deadline = time.monotonic() + timeout
        while True:
            with self._lock:
                if msg_id in self._done:
                    return self._done.pop(msg_id)
                while True:
                    mid = nic.pop_counter(self.completion_queue)
                    if mid is None:
                        break
                    length = nic.pop_counter(self.completion_queue)
                    self._done[mid] = length
                if msg_id in self._done:
                    return self._done.pop(msg_id)
            if time.monotonic() > deadline:
                return None
            time.sleep(100e-6)

    def incomplete(self) -> list[int]:
        with self._lock:
            return sorted(self._states)

    # message state

    def _open(self, msg_id: int, region_size: int) -> Optional[ReceiverMsgState]:
        if msg_id in self._completed:
            return None
        st = self._states.get(msg_id)
        if st is None:
            base, cap = self._expected.get(msg_id, (0, region_size))
            st = ReceiverMsgState(msg_id, base, cap)
            self._setup(st)
            self._states[msg_id] = st
        return st

    def _setup(self, st: ReceiverMsgState) -> None:
        pass

    def _deliver(self, spin, st: ReceiverMsgState, hdr: SlmpHeader, payload) -> bool:
        """Place one segment's payload; False means "not accepted, do not ACK"."""
        if not payload:
            return True
        cmd = spin.dma(payload, st.base + hdr.offset, len(payload), Direction.TO_HOST)
        return spin.dma_wait(cmd) is CommandStatus.DONE

    # handlers

    def header_handler(self, args: HandlerArgs) -> None:
        pkt = args.task.pkt_mem
        hdr = decode_header(pkt[UDP_PAYLOAD_OFF:PAYLOAD_OFF])
        with self._lock:
            self._open(hdr.msg_id, args.spin.region.size)

    def packet_handler(self, args: HandlerArgs) -> None:
        spin = args.spin
        pkt = args.task.pkt_mem
        n = args.task.pkt_mem_size
        if n < PAYLOAD_OFF:
            return
        hdr = decode_header(pkt[UDP_PAYLOAD_OFF:PAYLOAD_OFF])
        if hdr.ack:
            return
        payload = pkt[PAYLOAD_OFF:n]
        with self._lock:
            st = self._states.get(hdr.msg_id)
            if st is None:
                done = hdr.msg_id in self._completed
                if not done:
                    self.dropped += 1
        if st is None:
            if done and hdr.syn:
                self._send_ack(spin, pkt, hdr)
            else:
                spin.log(f"slmp: no state for msg {hdr.msg_id}, dropped offset {hdr.offset}")
            return
        if hdr.offset + len(payload) > st.capacity:
            spin.log(f"slmp: msg {hdr.msg_id} offset {hdr.offset} overflows host buffer")
            with self._lock:
                self.dropped += 1
            return
        if not self._deliver(spin, st, hdr, payload):
            return
        ready = []
        with self._lock:
            self.processing_log.append((hdr.msg_id, hdr.offset))
            if hdr.offset not in st.segments:
                st.segments[hdr.offset] = len(payload)
                while st.watermark in st.segments and st.segments[st.watermark]:
                    st.watermark += st.segments[st.watermark]
            if hdr.syn:
                st.pending_acks.append((hdr.offset + len(payload), hdr, bytes(pkt[:UDP_PAYLOAD_OFF])))
            keep = []
            for item in st.pending_acks:
                (ready if item[0] <= st.watermark else keep).append(item)
            st.pending_acks = keep
            if st.total is not None and st.watermark >= st.total:
                self._finish(spin, st)
        for _, h, frame in ready:
            self._send_ack(spin, frame, h)

    def tail_handler(self, args: HandlerArgs) -> None:
        pkt = args.task.pkt_mem
        n = args.task.pkt_mem_size
        if n < PAYLOAD_OFF:
            return
        hdr = decode_header(pkt[UDP_PAYLOAD_OFF:PAYLOAD_OFF])
        total = hdr.offset + (n - PAYLOAD_OFF)
        with self._lock:
            st = self._states.get(hdr.msg_id)
            if st is None:
                return
            st.total = total
            # with gaps left, the packet that fills the last one finishes the message
            if st.watermark >= total:
                self._finish(args.spin, st)

    def _finish(self, spin, st: ReceiverMsgState) -> None:
        # caller holds self._lock
        if self._states.get(st.msg_id) is not st:
            return
        del self._states[st.msg_id]
        self.completed_at[st.msg_id] = time.perf_counter()
        self._completed[st.msg_id] = st.total
        while len(self._completed) > self._remember:
            self._completed.popitem(last=False)
        spin.push_counter(self.completion_queue, st.msg_id)
        spin.push_counter(self.completion_queue, st.total)

    def _send_ack(self, spin, frame, hdr: SlmpHeader) -> None:
        out = ack_frame(frame, hdr)
        if spin.cmd_wait(spin.send_packet(out, len(out))) is CommandStatus.DONE:
            with self._lock:
                self.acks_sent += 1
