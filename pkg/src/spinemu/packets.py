"""Ethernet II / IPv4 / UDP / ICMP header layout, builders and parsers.

Offsets assume IPv4 without options (IHL = 5).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

ETH_LEN = 14
IP_OFF = 14
IP_LEN = 20
L4_OFF = IP_OFF + IP_LEN            # 34
UDP_LEN = 8
UDP_PAYLOAD_OFF = L4_OFF + UDP_LEN  # 42
ICMP_HDR_LEN = 8

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_ARP = 0x0806
PROTO_ICMP = 1
PROTO_UDP = 17
ICMP_ECHO_REPLY = 0
ICMP_ECHO_REQUEST = 8

MAX_UDP_PAYLOAD = 1500 - IP_LEN - UDP_LEN   # 1472
MAX_ICMP_PAYLOAD = 1500 - IP_LEN - ICMP_HDR_LEN


def inet_sum(data) -> int:
    """Folded 16-bit one's-complement sum (big-endian words, zero pad)."""
    if len(data) % 2:
        data = bytes(data) + b"\x00"
    n = len(data) // 2
    s = sum(struct.unpack(f"!{n}H", data)) if n else 0
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return s


def inet_checksum(data) -> int:
    return ~inet_sum(data) & 0xFFFF


def mac(text: str) -> bytes:
    return bytes(int(x, 16) for x in text.split(":"))


def ip(text: str) -> bytes:
    return bytes(int(x) for x in text.split("."))


def ipv4_header(src: bytes, dst: bytes, proto: int, payload_len: int, ident: int = 0,
                ttl: int = 64) -> bytes:
    hdr = bytearray(struct.pack("!BBHHHBBH4s4s", 0x45, 0, IP_LEN + payload_len, ident & 0xFFFF,
                                0x4000, ttl, proto, 0, src, dst))
    hdr[10:12] = inet_checksum(hdr).to_bytes(2, "big")
    return bytes(hdr)


def eth_header(dst: bytes, src: bytes, ethertype: int = ETHERTYPE_IPV4) -> bytes:
    return dst + src + ethertype.to_bytes(2, "big")


def build_udp_frame(src_mac: bytes, dst_mac: bytes, src_ip: bytes, dst_ip: bytes,
                    sport: int, dport: int, payload: bytes = b"", ident: int = 0) -> bytes:
    udp = struct.pack("!HHHH", sport, dport, UDP_LEN + len(payload), 0)
    return (eth_header(dst_mac, src_mac)
            + ipv4_header(src_ip, dst_ip, PROTO_UDP, UDP_LEN + len(payload), ident)
            + udp + payload)


def build_icmp_echo(src_mac: bytes, dst_mac: bytes, src_ip: bytes, dst_ip: bytes,
                    ident: int, seq: int, payload: bytes = b"",
                    icmp_type: int = ICMP_ECHO_REQUEST) -> bytes:
    icmp = bytearray(struct.pack("!BBHHH", icmp_type, 0, 0, ident, seq) + payload)
    icmp[2:4] = inet_checksum(icmp).to_bytes(2, "big")
    return (eth_header(dst_mac, src_mac)
            + ipv4_header(src_ip, dst_ip, PROTO_ICMP, len(icmp), ident=1)
            + bytes(icmp))


def build_arp_request(src_mac: bytes, src_ip: bytes, target_ip: bytes) -> bytes:
    arp = struct.pack("!HHBBH6s4s6s4s", 1, ETHERTYPE_IPV4, 6, 4, 1,
                      src_mac, src_ip, b"\x00" * 6, target_ip)
    return eth_header(b"\xff" * 6, src_mac, ETHERTYPE_ARP) + arp


@dataclass(frozen=True)
class PacketHeaders:
    dst_mac: bytes
    src_mac: bytes
    ethertype: int
    ihl: int = 0
    total_length: int = 0
    ident: int = 0
    protocol: int = 0
    ip_checksum: int = 0
    src_ip: bytes = b""
    dst_ip: bytes = b""
    sport: int = 0
    dport: int = 0
    udp_length: int = 0
    udp_checksum: int = 0
    icmp_type: int = 0
    icmp_code: int = 0
    icmp_checksum: int = 0

    @classmethod
    def parse(cls, frame) -> "PacketHeaders":
        """Parse a frame; raises ValueError for IPv4 options or truncation."""
        if len(frame) < ETH_LEN:
            raise ValueError("truncated Ethernet header")
        dst, src, etype = bytes(frame[0:6]), bytes(frame[6:12]), int.from_bytes(frame[12:14], "big")
        if etype != ETHERTYPE_IPV4:
            return cls(dst, src, etype)
        if len(frame) < L4_OFF:
            raise ValueError("truncated IPv4 header")
        vihl = frame[IP_OFF]
        ihl = vihl & 0x0F
        if ihl != 5:
            raise ValueError(f"IPv4 header with options (ihl={ihl}) not supported")
        _, _, total, ident, _, _, proto, csum, sip, dip = struct.unpack(
            "!BBHHHBBH4s4s", frame[IP_OFF:L4_OFF])
        fields = dict(ihl=ihl, total_length=total, ident=ident, protocol=proto,
                      ip_checksum=csum, src_ip=sip, dst_ip=dip)
        if proto == PROTO_UDP and len(frame) >= UDP_PAYLOAD_OFF:
            sp, dp, ulen, ucs = struct.unpack("!HHHH", frame[L4_OFF:UDP_PAYLOAD_OFF])
            fields.update(sport=sp, dport=dp, udp_length=ulen, udp_checksum=ucs)
        elif proto == PROTO_ICMP and len(frame) >= L4_OFF + 4:
            t, c, cs = struct.unpack("!BBH", frame[L4_OFF:L4_OFF + 4])
            fields.update(icmp_type=t, icmp_code=c, icmp_checksum=cs)
        return cls(dst, src, etype, **fields)


def swap_l2_l3(buf) -> None:
    """Swap MAC and IPv4 address pairs in place."""
    buf[0:6], buf[6:12] = bytes(buf[6:12]), bytes(buf[0:6])
    buf[26:30], buf[30:34] = bytes(buf[30:34]), bytes(buf[26:30])


def swap_udp_ports(buf) -> None:
    buf[34:36], buf[36:38] = bytes(buf[36:38]), bytes(buf[34:36])


def icmp_region(frame) -> Optional[tuple[int, int]]:
    """(start, end) of the ICMP message inside ``frame`` per the IP total length."""
    total = int.from_bytes(frame[16:18], "big")
    end = IP_OFF + total
    if end > len(frame) or total < IP_LEN + ICMP_HDR_LEN:
        return None
    return L4_OFF, end
