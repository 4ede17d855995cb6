"""Desk-scale versions of the ping-pong, file-transfer and datatype experiments.

Each ``run_*`` function builds a client endpoint and an emulated NIC joined
by a transport, runs the experiment and returns result rows whose fields
match the CSV columns written by the command line.
"""
from __future__ import annotations

import hashlib
import logging
import math
import random
import statistics
import threading
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Optional

import numpy as np

from . import apps, ddt, slmp
from .engine import EngineConfig, HandlerSet
from .hostif import ContextDescriptor, SmartNic
from .match import never_match_ruleset
from .netsim import LinkConfig, SimLink, udp_pair
from .packets import (L4_OFF, PROTO_ICMP, UDP_PAYLOAD_OFF, PacketHeaders, build_icmp_echo,
                      build_udp_frame, inet_sum, ip, mac)
from .pktbuf import AllocatorConfig

log = logging.getLogger(__name__)

CLIENT = slmp.Endpoint(mac("02:00:00:00:00:01"), ip("10.0.0.1"), 40000)
SERVER = slmp.Endpoint(mac("02:00:00:00:00:02"), ip("10.0.0.2"), slmp.SLMP_PORT)


# statistics

def median_ci95(samples: list[float]) -> tuple[float, float, float]:
    """Median with a distribution-free 95% confidence interval.

    Uses the order-statistic ranks floor(n/2 - 0.98 sqrt(n)) and
    ceil(1 + n/2 + 0.98 sqrt(n)); for n < 6 the interval is [min, max].
    """
    if not samples:
        return math.nan, math.nan, math.nan
    xs = sorted(samples)
    n = len(xs)
    med = statistics.median(xs)
    if n < 6:
        return med, xs[0], xs[-1]
    lo = math.floor(n / 2 - 0.98 * math.sqrt(n))
    hi = math.ceil(1 + n / 2 + 0.98 * math.sqrt(n))
    return med, xs[max(lo, 1) - 1], xs[min(hi, n) - 1]


def row_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]


# transports

@contextmanager
def transport(kind: str = "sim", link: LinkConfig | None = None) -> Iterator[tuple]:
    """Yield (client_port, nic_port, simlink_or_None)."""
    if kind == "sim":
        sim, a, b = SimLink.pair(link or LinkConfig(), keep_log=False)
        try:
            yield a, b, sim
        finally:
            sim.close()
    elif kind == "udp":
        mtu = (link or LinkConfig()).mtu
        a, b = udp_pair(mtu=mtu)
        try:
            yield a, b, None
        finally:
            a.close()
            b.close()
    else:
        raise ValueError(f"unknown transport {kind!r}")


def _nic(port, engine: EngineConfig | None, alloc: AllocatorConfig | None,
         mtu: int = 1500) -> SmartNic:
    return SmartNic(port, engine_config=engine, alloc_config=alloc, mtu=mtu).start()


# ping-pong

PING_MODES = ("host", "nic", "host-nic")
PING_PROTOS = ("udp", "icmp")


@dataclass
class PingRow:
    proto: str
    mode: str
    size: int
    iters: int
    verified: int
    lost: int
    median_rtt_us: float
    ci95_low_us: float
    ci95_high_us: float
    digest: str = ""


def _verify_reply(proto: str, request: bytes, reply: bytes) -> bool:
    try:
        req = PacketHeaders.parse(request)
        rep = PacketHeaders.parse(reply)
    except ValueError:
        return False
    if (rep.dst_mac, rep.src_mac, rep.dst_ip, rep.src_ip) != (req.src_mac, req.dst_mac,
                                                              req.src_ip, req.dst_ip):
        return False
    if len(reply) != len(request):
        return False
    if proto == "udp":
        return ((rep.sport, rep.dport) == (req.dport, req.sport)
                and reply[UDP_PAYLOAD_OFF:] == request[UDP_PAYLOAD_OFF:])
    end = 14 + rep.total_length
    return (rep.icmp_type == 0 and inet_sum(reply[L4_OFF:end]) == 0xFFFF
            and reply[L4_OFF + 4:] == request[L4_OFF + 4:])


def _request(proto: str, seq: int, payload: bytes, port: int) -> bytes:
    if proto == "udp":
        return build_udp_frame(CLIENT.mac, SERVER.mac, CLIENT.ip, SERVER.ip, CLIENT.port, port,
                               payload, ident=seq)
    return build_icmp_echo(CLIENT.mac, SERVER.mac, CLIENT.ip, SERVER.ip, 0x1234, seq, payload)


def _seq_of(proto: str, frame: bytes) -> Optional[int]:
    if len(frame) < L4_OFF + 8:
        return None
    if proto == "udp":
        return int.from_bytes(frame[18:20], "big")
    if frame[23] != PROTO_ICMP:
        return None
    return int.from_bytes(frame[L4_OFF + 6:L4_OFF + 8], "big")


@contextmanager
def ping_server(nic: SmartNic, proto: str, mode: str, port: int = apps.PING_PORT):
    if mode not in PING_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if proto not in PING_PROTOS:
        raise ValueError(f"unknown protocol {proto!r}")
    stop = threading.Event()
    threads = []
    relay = None
    if mode == "host":
        # the context never matches, so every frame takes the host path
        handle = nic.ctx_init(ContextDescriptor(0, never_match_ruleset(),
                                                HandlerSet(packet=apps.udp_ping_handler)))

        def serve():
            while not stop.is_set():
                frame = nic.host_recv(0.05)
                if frame is not None:
                    reply = apps.host_reply(frame)
                    if reply is not None:
                        nic.host_send(reply)
        threads.append(threading.Thread(target=serve, name="host-stack", daemon=True))
    elif mode == "nic":
        if proto == "udp":
            desc = ContextDescriptor(0, apps.udp_ping_ruleset(port),
                                     HandlerSet(packet=apps.udp_ping_handler))
        else:
            desc = ContextDescriptor(0, apps.icmp_echo_ruleset(),
                                     HandlerSet(packet=apps.icmp_echo_handler))
        handle = nic.ctx_init(desc)
    else:
        relay = apps.HostRelay(proto)
        handle = nic.ctx_init(ContextDescriptor(0, relay.ruleset(port), relay.handlers()))
        relay.start_host(nic, handle)
    for t in threads:
        t.start()
    try:
        yield handle
    finally:
        stop.set()
        for t in threads:
            t.join()
        if relay is not None:
            relay.stop_host()
        nic.ctx_exit(handle)


def run_pingpong(proto: str, mode: str, sizes=(64,), iters: int = 20, kind: str = "sim",
                 seed: int = 0, link: LinkConfig | None = None, timeout: float = 1.0,
                 engine: EngineConfig | None = None) -> list[PingRow]:
    rows = []
    rng = random.Random(seed)
    with transport(kind, link) as (client, server, _):
        nic = _nic(server, engine, None)
        try:
            with ping_server(nic, proto, mode):
                for size in sizes:
                    rtts, verified, lost = [], 0, 0
                    digest = hashlib.sha256()
                    for i in range(iters):
                        seq = (i + 1) & 0xFFFF
                        request = _request(proto, seq, rng.randbytes(size), apps.PING_PORT)
                        t0 = time.perf_counter()
                        client.send(request)
                        reply = None
                        deadline = t0 + timeout
                        while time.perf_counter() < deadline:
                            frame = client.recv(max(0.0, deadline - time.perf_counter()))
                            if frame is not None and _seq_of(proto, frame) == seq:
                                reply = frame
                                break
                        if reply is None:
                            lost += 1
                            continue
                        rtts.append(time.perf_counter() - t0)
                        if _verify_reply(proto, request, reply):
                            verified += 1
                            digest.update(reply)
                    med, lo, hi = median_ci95(rtts)
                    rows.append(PingRow(proto, mode, size, iters, verified, lost,
                                        med * 1e6, lo * 1e6, hi * 1e6, digest.hexdigest()[:16]))
        finally:
            nic.stop()
    return rows


# SLMP file transfer

@dataclass
class SendfileRow:
    window: int
    size: int
    mode: str
    loss: float
    streams: int
    successes: int
    failed: int
    median_mbps: float
    ci95_low_mbps: float
    ci95_high_mbps: float
    retransmits: int
    skipped: bool = False
    digest: str = ""
    offsets_increasing: bool = True
    failures: list = field(default_factory=list, repr=False)


def _make_payload(seed: int, attempt: int, size: int) -> bytes:
    return random.Random(f"{seed}/{attempt}").randbytes(size)


def run_sendfile(size: int = 1 << 20, window: int = 16, mode: str = "window", loss: float = 0.0,
                 trials: int = 20, streams: int = 1, mtu: int = 1500, seed: int = 0,
                 kind: str = "sim", latency: float = 0.0, rto: float = 0.05,
                 max_retries: int = 10, gap: float = 0.0, max_attempts: int | None = None,
                 engine: EngineConfig | None = None,
                 completion_timeout: float = 1.0) -> SendfileRow:
    rmode = slmp.ReliabilityMode(mode)
    cfg = slmp.SenderConfig(rmode, window, gap, mtu, rto, max_retries)
    row = SendfileRow(window, size, mode, loss, streams, 0, 0, math.nan, math.nan, math.nan, 0)
    if mtu * window * streams > size:
        row.skipped = True
        return row
    max_attempts = max_attempts or 3 * trials
    link = LinkConfig(loss=loss, latency=latency, mtu=mtu, seed=seed)
    receiver = slmp.SlmpReceiver()
    chunk = -(-size // streams)
    tputs = []
    digest = hashlib.sha256()
    with transport(kind, link) as (client, server, _):
        nic = _nic(server, engine, None, mtu)
        handle = nic.ctx_init(receiver.descriptor(0, host_bytes=size))
        sender = slmp.SlmpSender(client, CLIENT, SERVER)
        try:
            attempt = 0
            while row.successes < trials and attempt < max_attempts:
                payload = _make_payload(seed, attempt, size)
                nic.host_write(handle, 0, bytes(size))
                ids = [attempt * streams + s + 1 for s in range(streams)]
                parts = [(ids[s], s * chunk, payload[s * chunk:(s + 1) * chunk])
                         for s in range(streams)]
                for mid, base, part in parts:
                    receiver.expect(mid, base, len(part))
                errors: list = []
                stats: list = []

                def send(mid, part):
                    try:
                        stats.append(sender.send_message(cfg, mid, part))
                    except slmp.TransferFailed as exc:
                        errors.append(exc)

                t0 = time.perf_counter()
                workers = [threading.Thread(target=send, args=(mid, part))
                           for mid, _, part in parts]
                for w in workers:
                    w.start()
                for w in workers:
                    w.join()
                ok = not errors
                lengths = [receiver.wait_completion(nic, mid, completion_timeout if ok else 0.05)
                           for mid, _, _ in parts]
                elapsed = time.perf_counter() - t0
                got = nic.host_read(handle, 0, size)
                ok = ok and all(n == len(p) for n, (_, _, p) in zip(lengths, parts)) and got == payload
                row.retransmits += sum(s.retransmits for s in stats)
                if window == 1 and streams == 1:
                    offs = [o for m, o in receiver.processing_log if m == ids[0]]
                    row.offsets_increasing &= all(a < b for a, b in zip(offs, offs[1:]))
                receiver.processing_log.clear()
                for mid in ids:
                    receiver.forget(mid)
                if ok:
                    row.successes += 1
                    tputs.append(size * 8 / elapsed / 1e6)
                    digest.update(hashlib.sha256(got).digest())
                else:
                    row.failed += 1
                    row.failures.append(errors[0].reason if errors else "corrupt")
                    digest.update(b"F")
                attempt += 1
        finally:
            sender.close()
            nic.stop()
    row.median_mbps, row.ci95_low_mbps, row.ci95_high_mbps = median_ci95(tputs)
    row.digest = digest.hexdigest()[:16]
    return row


# MPI datatype unpack with host-compute overlap

@dataclass
class DdtRow:
    type: str
    count: int
    messages: int
    size: int
    throughput_mbps: float
    R: Optional[float]
    verified: int
    t_compute_s: Optional[float] = None
    t_poll_s: Optional[float] = None
    digest: str = ""


def scatter_oracle(t: ddt.Datatype, count: int, stream: bytes) -> bytearray:
    """Destination image of ``stream`` computed from the flattened layout."""
    ext = ddt.type_extent(t)
    out = bytearray(count * ext)
    pos = 0
    for r in range(count):
        for off, n in ddt.flatten(t):
            out[r * ext + off:r * ext + off + n] = stream[pos:pos + n]
            pos += n
    return out


_MM = 64


def host_compute(iterations: int) -> float:
    """Busy host work standing in for a matrix multiply; returns a checksum."""
    a = np.full((_MM, _MM), 1.0 / _MM)
    b = np.eye(_MM)
    acc = 0.0
    for _ in range(iterations):
        b = a @ b
        acc += b[0, 0]
    return acc


def compute_rate(probe: float = 0.05) -> float:
    """Iterations of :func:`host_compute` per second on this machine."""
    n = 16
    while True:
        t0 = time.perf_counter()
        host_compute(n)
        dt = time.perf_counter() - t0
        if dt >= probe:
            return n / dt
        n *= 2


def run_ddt(dtype: ddt.Datatype | str = ddt.SIMPLE, count: int = 64, messages: int = 16,
            overlap: bool = False, kind: str = "sim", seed: int = 0, mtu: int = 1500,
            rto: float = 0.2, engine: EngineConfig | None = None,
            compute_margin: float = 1.3, calibration_rounds: int = 4,
            timeout: float = 30.0) -> DdtRow:
    t = ddt.parse_type(dtype) if isinstance(dtype, str) else dtype
    ext, size = ddt.type_extent(t), ddt.type_size(t)
    region = messages * count * ext
    receiver = ddt.DdtReceiver()
    cfg = slmp.SenderConfig(slmp.ReliabilityMode.PER_WINDOW, 1, 0.0, mtu, rto, 10)
    rng = random.Random(seed)
    sources = [rng.randbytes(count * ext) for _ in range(messages)]
    streams = [ddt.pack(t, count, src) for src in sources]
    expected = [scatter_oracle(t, count, s) for s in streams]
    row = DdtRow(ddt.format_type(t), count, messages, count * size, math.nan, None, 0)

    with transport(kind, LinkConfig(mtu=mtu, seed=seed)) as (client, server, _):
        nic = _nic(server, engine, AllocatorConfig(), mtu)
        handle = nic.ctx_init(receiver.descriptor(0, host_bytes=region))
        sender = slmp.SlmpSender(client, CLIENT, SERVER)
        round_no = 0

        def transfer(iterations: int | None):
            nonlocal round_no
            ids = [round_no * messages + m + 1 for m in range(messages)]
            round_no += 1
            t_setup = time.perf_counter()
            nic.host_write(handle, 0, bytes(region))
            for m, mid in enumerate(ids):
                receiver.expect_type(mid, t, count, m * count * ext)
            errors: list = []

            def send(mid, stream):
                try:
                    sender.send_message(cfg, mid, stream)
                except slmp.TransferFailed as exc:
                    errors.append(exc)

            workers = [threading.Thread(target=send, args=(mid, s), daemon=True)
                       for mid, s in zip(ids, streams)]
            for w in workers:
                w.start()
            t1 = time.perf_counter()
            if iterations:
                host_compute(iterations)
            t2 = time.perf_counter()
            lengths = [receiver.wait_completion(nic, mid, timeout) for mid in ids]
            t3 = time.perf_counter()
            for w in workers:
                w.join()
            finished = [receiver.completed_at.get(mid, t3) for mid in ids]
            verified = sum(
                1 for m, n in enumerate(lengths)
                if n == len(streams[m])
                and nic.host_read(handle, m * count * ext, count * ext) == expected[m])
            digest = hashlib.sha256(nic.host_read(handle, 0, region)).hexdigest()[:16]
            for mid in ids:
                receiver.forget(mid)
            return dict(t_transfer=max(finished) - t_setup, t_compute=t2 - t1,
                        t_poll=(t1 - t_setup) + (t3 - t2), verified=verified,
                        errors=errors, digest=digest)

        try:
            base = transfer(None)
            row.verified = base["verified"]
            row.digest = base["digest"]
            row.throughput_mbps = messages * count * size * 8 / base["t_transfer"] / 1e6
            if overlap:
                rate = compute_rate()
                target = base["t_transfer"] * compute_margin
                for _ in range(calibration_rounds):
                    res = transfer(max(1, int(target * rate)))
                    r = res["t_compute"] / (res["t_compute"] + res["t_poll"])
                    row.R, row.t_compute_s, row.t_poll_s = r, res["t_compute"], res["t_poll"]
                    row.verified = min(row.verified, res["verified"])
                    # transfer outlasted the compute: lengthen it and retry
                    if r >= 0.95:
                        break
                    target = max(target, res["t_transfer"]) * compute_margin
        finally:
            sender.close()
            nic.stop()
    return row


def rows_as_dicts(rows) -> list[dict]:
    return [{k: v for k, v in asdict(r).items() if k != "failures"} for r in rows]
