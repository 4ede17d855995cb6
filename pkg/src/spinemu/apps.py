"""Ping-pong demonstration handlers.

* :func:`udp_ping_handler` bounces UDP datagrams back to their sender.
* :func:`icmp_echo_handler` answers ICMP echo requests, recomputing the
  ICMP checksum over the whole message.
* :class:`HostRelay` is the split variant: the NIC ships the data to host
  memory, the host does the work and the NIC sends the result.
"""
from __future__ import annotations

import threading
import time

from .engine import HandlerSet
from .match import (RULE_FALSE, RULE_IP, RULE_IP_PROTO, RULE_UDP_DST_PORT, MatchRule, Mode,
                    Ruleset)
from .packets import (ICMP_ECHO_REPLY, L4_OFF, PROTO_ICMP, PROTO_UDP, UDP_PAYLOAD_OFF,
                      icmp_region, inet_checksum, swap_l2_l3, swap_udp_ports)
from .runtime import CommandStatus, Direction, HandlerArgs, Lock

PING_PORT = 9330


def icmp_echo_ruleset() -> Ruleset:
    return Ruleset(Mode.AND, (
        RULE_IP,
        RULE_IP_PROTO(PROTO_ICMP),
        MatchRule(8, 0xFF00, 0x0800, 0x0800),  # ICMP type 8 at byte 34
    ), RULE_FALSE)


def udp_ping_ruleset(port: int = PING_PORT) -> Ruleset:
    return Ruleset(Mode.AND, (RULE_IP, RULE_IP_PROTO(PROTO_UDP), RULE_UDP_DST_PORT(port)),
                   RULE_FALSE)


def _make_udp_reply(buf) -> None:
    swap_l2_l3(buf)
    swap_udp_ports(buf)
    buf[40:42] = b"\x00\x00"  # UDP checksum omitted


def _make_icmp_reply(buf, end: int) -> None:
    swap_l2_l3(buf)
    buf[L4_OFF] = ICMP_ECHO_REPLY
    buf[L4_OFF + 2:L4_OFF + 4] = b"\x00\x00"
    buf[L4_OFF + 2:L4_OFF + 4] = inet_checksum(buf[L4_OFF:end]).to_bytes(2, "big")


def udp_ping_handler(args: HandlerArgs) -> None:
    pkt = args.task.pkt_mem
    n = args.task.pkt_mem_size
    if n < UDP_PAYLOAD_OFF:
        args.spin.log(f"runt UDP frame of {n} bytes")
        return
    _make_udp_reply(pkt)
    cmd = args.spin.send_packet(pkt, n)
    args.spin.cmd_wait(cmd)


def icmp_echo_handler(args: HandlerArgs) -> None:
    pkt = args.task.pkt_mem
    n = args.task.pkt_mem_size
    region = icmp_region(pkt)
    if region is None:
        args.spin.log(f"malformed ICMP frame of {n} bytes")
        return
    _make_icmp_reply(pkt, region[1])
    cmd = args.spin.send_packet(pkt, n)
    args.spin.cmd_wait(cmd)


def host_reply(frame) -> bytes | None:
    """The reply a host network stack would produce (host-only mode)."""
    buf = bytearray(frame)
    if len(buf) < L4_OFF:
        return None
    proto = buf[23]
    if proto == PROTO_UDP and len(buf) >= UDP_PAYLOAD_OFF:
        _make_udp_reply(buf)
        return bytes(buf)
    if proto == PROTO_ICMP:
        region = icmp_region(buf)
        if region is None or buf[L4_OFF] != 8:
            return None
        _make_icmp_reply(buf, region[1])
        return bytes(buf)
    return None


class HostRelay:
    """NIC handler plus host poller that split ping-pong work across the two.

    Host region layout, one 2 KiB slot per request in flight::

        +0   u64 done flag (written by host, cleared by NIC)
        +8   u64 result (ICMP checksum)
        +16  data (ICMP message, or UDP payload)

    The NIC announces a request by pushing ``(length << 8) | slot`` onto
    counter queue ``queue``.
    """

    SLOT = 2048
    DATA = 16

    def __init__(self, proto: str, queue: int = 0, timeout: float = 0.1):
        if proto not in ("udp", "icmp"):
            raise ValueError(f"unknown protocol {proto!r}")
        self.proto = proto
        self.queue = queue
        self.timeout = timeout
        self.timeouts = 0
        self._slot_lock = Lock()
        self._next = 0
        self._nic = None
        self._handle = None
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()

    def handlers(self) -> HandlerSet:
        return HandlerSet(packet=self.packet_handler)

    def ruleset(self, port: int = PING_PORT) -> Ruleset:
        return icmp_echo_ruleset() if self.proto == "icmp" else udp_ping_ruleset(port)

    def _take_slot(self, region_size: int) -> int:
        with self._slot_lock:
            slot = self._next
            self._next = (self._next + 1) % min(256, region_size // self.SLOT)
        return slot

    # NIC side

    def packet_handler(self, args: HandlerArgs) -> None:
        spin = args.spin
        pkt = args.task.pkt_mem
        n = args.task.pkt_mem_size
        if self.proto == "icmp":
            region = icmp_region(pkt)
            if region is None:
                spin.log("malformed ICMP frame")
                return
            start, end = region
            swap_l2_l3(pkt)
            pkt[L4_OFF] = ICMP_ECHO_REPLY
            pkt[L4_OFF + 2:L4_OFF + 4] = b"\x00\x00"
        else:
            if n < UDP_PAYLOAD_OFF:
                spin.log("runt UDP frame")
                return
            start, end = UDP_PAYLOAD_OFF, n
            swap_l2_l3(pkt)
            swap_udp_ports(pkt)
            pkt[40:42] = b"\x00\x00"
        length = end - start
        base = self._take_slot(spin.region.size) * self.SLOT
        spin.write_to_host(base, 0)
        cmd = spin.dma(pkt[start:end], base + self.DATA, length, Direction.TO_HOST)
        if spin.dma_wait(cmd) is not CommandStatus.DONE:
            return
        spin.push_counter(self.queue, (length << 8) | (base // self.SLOT))

        flag = bytearray(8)
        deadline = time.monotonic() + self.timeout
        while True:
            spin.dma_wait(spin.dma(base, flag, 8, Direction.FROM_HOST))
            if int.from_bytes(flag, "little") == 1:
                break
            if time.monotonic() > deadline:
                self.timeouts += 1
                spin.log(f"host did not answer slot {base // self.SLOT}, dropping")
                return
            time.sleep(50e-6)

        if self.proto == "icmp":
            result = bytearray(8)
            spin.dma_wait(spin.dma(base + 8, result, 8, Direction.FROM_HOST))
            pkt[L4_OFF + 2:L4_OFF + 4] = (int.from_bytes(result, "little") & 0xFFFF).to_bytes(2, "big")
        else:
            spin.dma_wait(spin.dma(base + self.DATA, pkt[start:end], length, Direction.FROM_HOST))
        spin.cmd_wait(spin.send_packet(pkt, n))

    # host side

    def serve_one(self, nic, handle) -> bool:
        value = nic.pop_counter(self.queue)
        if value is None:
            return False
        slot, length = value & 0xFF, value >> 8
        base = slot * self.SLOT
        data = nic.host_read(handle, base + self.DATA, length)
        if self.proto == "icmp":
            nic.host_write(handle, base + 8, inet_checksum(data).to_bytes(8, "little"))
        else:
            # the host's reply payload is the echoed request payload
            nic.host_write(handle, base + self.DATA, data)
        nic.host_write(handle, base, (1).to_bytes(8, "little"))
        return True

    def start_host(self, nic, handle) -> None:
        self._nic, self._handle = nic, handle
        self._stop.clear()
        self._thread = threading.Thread(target=self._poll, name="relay-host", daemon=True)
        self._thread.start()

    def stop_host(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def _poll(self) -> None:
        while not self._stop.is_set():
            if not self.serve_one(self._nic, self._handle):
                time.sleep(50e-6)
