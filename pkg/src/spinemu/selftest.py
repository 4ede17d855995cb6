"""End-to-end checks of the emulator, one per acceptance criterion.

Each ``criterion_N`` returns a :class:`CriterionResult`. ``digest`` covers
only outcomes that must repeat exactly for a fixed seed: verdicts, counts
and hashes of delivered bytes, never timings or retransmission counts.
"""
from __future__ import annotations

import hashlib
import random
import threading
import time
from dataclasses import dataclass, field

from . import apps, ddt, harness
from .engine import EngineConfig, HandlerSet, ordering_violations
from .hostif import ContextDescriptor, SmartNic
from .match import (RULE_FALSE, RULE_IP, RULE_IP_PROTO, RULE_UDP_DST_PORT, MatchRule, Mode,
                    Ruleset, match_packet)
from .packets import (ICMP_ECHO_REPLY, L4_OFF, PROTO_UDP, build_arp_request, build_icmp_echo,
                      build_udp_frame, inet_sum, ip, mac)
from .pktbuf import AllocatorConfig, OutOfSlots, PacketAllocator, SlotClass, TooLarge
from .runtime import Direction


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    elapsed: float = 0.0
    limit: float = 0.0
    digest: str = ""
    data: dict = field(default_factory=dict, repr=False)

    @property
    def ok(self) -> bool:
        return self.passed and (not self.limit or self.elapsed < self.limit)

    def line(self) -> str:
        verdict = "PASS" if self.ok else "FAIL"
        return (f"[{verdict}] criterion {self.number} {self.name}: {self.detail} "
                f"({self.elapsed:.1f}s, " + (f"limit {self.limit:.0f}s)" if self.limit else "no limit)"))


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode())
    return h.hexdigest()[:16]


def _timed(number: int, name: str, limit: float):
    def wrap(fn):
        def run(*args, **kw) -> CriterionResult:
            t0 = time.perf_counter()
            res = fn(*args, **kw)
            res.number, res.name, res.limit = number, name, limit
            res.elapsed = time.perf_counter() - t0
            return res
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return wrap


# 1. matcher

def oracle_word(packet: bytes, index: int) -> int | None:
    """Big-endian word ``index`` assembled bit by bit, None if past the end."""
    if len(packet) < 4 * index + 4:
        return None
    word = 0
    for b in range(32):
        byte = packet[4 * index + b // 8]
        word = (word << 1) | ((byte >> (7 - b % 8)) & 1)
    return word


def oracle_rule(rule: MatchRule, packet: bytes) -> bool:
    word = oracle_word(packet, rule.word_index)
    if word is None:
        return False
    masked = 0
    for b in range(32):
        if (rule.mask >> b) & 1 and (word >> b) & 1:
            masked |= 1 << b
    return rule.start <= masked <= rule.end


def oracle_ruleset(rs: Ruleset, packet: bytes) -> tuple[bool, bool]:
    hits = [oracle_rule(r, packet) for r in rs.rules]
    ok = all(hits) if rs.mode is Mode.AND else any(hits)
    return ok, oracle_rule(rs.eom, packet)


def random_rule(rng: random.Random, packet: bytes, max_index: int = 20) -> MatchRule:
    idx = rng.randrange(max_index)
    mask = rng.choice([0, 0xFFFFFFFF, 0xFFFF0000, 0x0000FFFF, 0xFF00, 0xFF,
                       rng.getrandbits(32)])
    word = oracle_word(packet, idx)
    if word is not None and rng.random() < 0.5:
        # centre the range on the packet's own value so matches are common
        v = word & mask
        lo = max(0, v - rng.choice([0, 0, 1, 100]))
        hi = min(0xFFFFFFFF, v + rng.choice([0, 0, 1, 100]))
        if rng.random() < 0.2:
            lo = hi = (v + 1) & 0xFFFFFFFF
    else:
        a, b = rng.getrandbits(32), rng.getrandbits(32)
        lo, hi = min(a, b), max(a, b)
    return MatchRule(idx, mask, lo, hi)


def random_frame(rng: random.Random) -> bytes:
    kind = rng.randrange(4)
    cm, sm = mac("02:00:00:00:00:01"), mac("02:00:00:00:00:02")
    ci, si = ip("10.0.0.1"), ip("10.0.0.2")
    if kind == 0:
        return build_icmp_echo(cm, sm, ci, si, rng.getrandbits(16), rng.getrandbits(16),
                               rng.randbytes(rng.randrange(0, 64)),
                               icmp_type=rng.choice([0, 8]))
    if kind == 1:
        return build_udp_frame(cm, sm, ci, si, rng.getrandbits(16), rng.getrandbits(16),
                               rng.randbytes(rng.randrange(0, 64)))
    if kind == 2:
        return build_arp_request(cm, ci, si)
    return rng.randbytes(rng.randrange(0, 90))


@_timed(1, "matcher", 5.0)
def criterion_1(seed: int = 0, trials: int = 1000) -> CriterionResult:
    rs = apps.icmp_echo_ruleset()
    echo_rs = Ruleset(Mode.AND, (RULE_IP, RULE_IP_PROTO(1), MatchRule(8, 0xFF00, 0x0800, 0x0800)),
                      RULE_FALSE)
    cm, sm = mac("02:00:00:00:00:01"), mac("02:00:00:00:00:02")
    ci, si = ip("10.0.0.1"), ip("10.0.0.2")
    crafted = {
        "echo_request": (build_icmp_echo(cm, sm, ci, si, 1, 1, b"ping"), True),
        "echo_reply": (build_icmp_echo(cm, sm, ci, si, 1, 1, b"ping", icmp_type=0), False),
        "arp": (build_arp_request(cm, ci, si), False),
        "udp": (build_udp_frame(cm, sm, ci, si, 1000, 2000, b"\x08\x00" * 8), False),
    }
    fixed = {name: rs.matches(frame) for name, (frame, _) in crafted.items()}
    fixed_ok = rs == echo_rs and all(fixed[n] == want for n, (_, want) in crafted.items())

    rng = random.Random(seed)
    mismatches = 0
    accepted = 0
    for _ in range(trials):
        frame = random_frame(rng)
        rules = tuple(random_rule(rng, frame) for _ in range(3))
        cand = Ruleset(rng.choice([Mode.AND, Mode.OR]), rules, random_rule(rng, frame))
        want = oracle_ruleset(cand, frame)
        verdict = match_packet([(7, cand)], frame)
        wrong = (verdict.handled != want[0] or cand.is_eom(frame) != want[1]
                 or (verdict.handled and verdict.is_eom != want[1]))
        mismatches += wrong
        accepted += want[0]
    passed = fixed_ok and mismatches == 0
    detail = (f"echo ruleset verdicts {fixed}, {mismatches} mismatches in {trials} "
              f"oracle trials ({accepted} accepted)")
    return CriterionResult(1, "", passed, detail,
                           digest=_digest(sorted(fixed.items()), mismatches, accepted))


# 2. allocator

@_timed(2, "allocator", 5.0)
def criterion_2(seed: int = 0, steps: int = 10_000) -> CriterionResult:
    problems = []
    cfg = AllocatorConfig()
    alloc = PacketAllocator(cfg)
    n_small = cfg.packet_memory_bytes // 2 // cfg.small_slot
    n_large = cfg.packet_memory_bytes // 2 // cfg.large_slot
    if (n_small, n_large) != (2048, 170):
        problems.append(f"slot counts {n_small}/{n_large}")

    # boundaries
    for length, cls in ((1, SlotClass.SMALL), (128, SlotClass.SMALL), (129, SlotClass.LARGE),
                        (1536, SlotClass.LARGE)):
        s = alloc.alloc(length)
        if s.cls is not cls:
            problems.append(f"{length} B went to {s.cls}")
        alloc.free(s)
    try:
        alloc.alloc(1537)
        problems.append("1537 B accepted")
    except TooLarge:
        pass
    held = [alloc.alloc(64) for _ in range(2048)]
    try:
        alloc.alloc(64)
        problems.append("2049th small alloc succeeded")
    except OutOfSlots:
        pass
    for s in held:
        alloc.free(s)

    # random walk with an interval oracle
    rng = random.Random(seed)
    live: dict[int, tuple] = {}
    total_in_use = 0
    for step in range(steps):
        if live and (rng.random() < 0.45 or total_in_use >= n_small + n_large):
            key = rng.choice(list(live))
            slot, _ = live.pop(key)
            alloc.free(slot)
        else:
            length = rng.choice([rng.randint(1, 128), rng.randint(129, 1536)])
            try:
                slot = alloc.alloc(length)
            except OutOfSlots:
                continue
            if slot.capacity < length:
                problems.append(f"step {step}: {length} B in a {slot.capacity} B slot")
            live[slot.index] = (slot, length)
        total_in_use = len(live)
        st = alloc.stats()
        for cls, cap in ((SlotClass.SMALL, n_small), (SlotClass.LARGE, n_large)):
            in_use = sum(1 for s, _ in live.values() if s.cls is cls)
            if st[cls].in_use != in_use or alloc.free_count(cls) + in_use != cap:
                problems.append(f"step {step}: conservation broken for {cls.value}")
        if step % 97 == 0:
            spans = sorted((s.offset, s.offset + s.capacity) for s, _ in live.values())
            if any(a[1] > b[0] for a, b in zip(spans, spans[1:])):
                problems.append(f"step {step}: overlapping slots")
            if spans and spans[-1][1] > cfg.packet_memory_bytes:
                problems.append(f"step {step}: slot past packet memory")
        if len(problems) > 5:
            break
    st = alloc.stats()
    passed = not problems
    detail = "conservation, non-overlap and boundaries hold" if passed else "; ".join(problems)
    return CriterionResult(2, "", passed, detail,
                           digest=_digest(problems, st[SlotClass.SMALL].high_watermark,
                                          st[SlotClass.LARGE].high_watermark, len(live)))


# 3. ordering

def _ordering_frames(rng: random.Random, messages: int, concurrent: int) -> list[bytes]:
    """Interleaved frames of ``messages`` messages; id in bytes 42..45, EOM flag in byte 46.

    Payloads are padded past byte 47 so the EOM word is always present.
    """
    cm, sm = mac("02:00:00:00:00:01"), mac("02:00:00:00:00:02")
    ci, si = ip("10.0.0.1"), ip("10.0.0.2")
    pending = []
    for mid in range(1, messages + 1):
        n = rng.randint(2, 12)
        pending.append([build_udp_frame(cm, sm, ci, si, 5000, 7000,
                                        mid.to_bytes(4, "big") + bytes([i == n - 1])
                                        + rng.randbytes(rng.randrange(3, 200)))
                        for i in range(n)])
    frames = []
    active: list = []
    while pending or active:
        while pending and len(active) < concurrent:
            active.append(pending.pop(0))
        msg = rng.choice(active)
        frames.append(msg.pop(0))
        if not msg:
            active.remove(msg)
    return frames


@_timed(3, "ordering", 30.0)
def criterion_3(seed: int = 0, messages: int = 500) -> CriterionResult:
    rng = random.Random(seed)
    frames = _ordering_frames(rng, messages, concurrent=8)
    # EOM flag is byte 46, the third byte of word 11
    ruleset = Ruleset(Mode.AND, (RULE_IP, RULE_IP_PROTO(PROTO_UDP), RULE_UDP_DST_PORT(7000)),
                      MatchRule(11, 0xFF00, 0x0100, 0x0100))
    seen: dict[int, list] = {}
    lock = threading.Lock()

    def record(role):
        def handler(args):
            # vary handler cost so parallel HPUs genuinely race
            time.sleep(rng_h.random() * 2e-4)
            with lock:
                seen.setdefault(args.task.msg_id, []).append(role)
        return handler

    rng_h = random.Random(seed + 1)
    cfg = EngineConfig(clusters=2, hpus_per_cluster=8)
    nic = SmartNic(engine_config=cfg, egress=lambda f: None).start()
    try:
        nic.ctx_init(ContextDescriptor(
            0, ruleset, HandlerSet(record("h"), record("p"), record("t")),
            msg_id_extractor=lambda f: int.from_bytes(bytes(f[42:46]), "big")))
        for i, frame in enumerate(frames):
            # keep the live-message count within the MPQ
            while nic.engine.live_messages() >= cfg.mpq_entries - 2:
                time.sleep(1e-4)
            nic.receive(frame)
        idle = nic.engine.wait_idle(20.0)
        events = nic.engine.events()
        counters = nic.engine.counters
    finally:
        nic.stop()
    violations = ordering_violations(events)
    hpus = len({e.hpu_id for e in events})
    complete = sum(1 for roles in seen.values()
                   if roles.count("h") == 1 and roles.count("t") == 1)
    drops = counters.alloc_drops + counters.mpq_drops
    passed = idle and not violations and complete == messages and drops == 0
    detail = (f"{complete}/{messages} messages complete, {len(violations)} violations, "
              f"{len(events)} handler runs on {hpus} HPUs, {drops} drops")
    return CriterionResult(3, "", passed, detail,
                           digest=_digest(complete, len(violations), len(events), drops),
                           data={"violations": violations[:10]})


# 4. ping-pong

@_timed(4, "pingpong", 30.0)
def criterion_4(seed: int = 0, iters: int = 32, kind: str = "sim") -> CriterionResult:
    rows = []
    dma_ok = True
    for proto in harness.PING_PROTOS:
        for mode in harness.PING_MODES:
            rows += harness.run_pingpong(proto, mode, sizes=(64,), iters=iters, kind=kind,
                                         seed=seed)
    # host+NIC mode must move data both ways across the host interface
    counts = {}
    for proto in harness.PING_PROTOS:
        with harness.transport(kind) as (client, server, _):
            nic = harness._nic(server, None, None)
            try:
                with harness.ping_server(nic, proto, "host-nic"):
                    req = harness._request(proto, 1, b"x" * 32, apps.PING_PORT)
                    client.send(req)
                    reply = client.recv(1.0)
                    dma_ok &= reply is not None and harness._verify_reply(proto, req, reply)
                counts[proto] = {d.value: nic.runtime.dma_counts[d] for d in Direction}
            finally:
                nic.stop()
    both = all(c["to_host"] > 0 and c["from_host"] > 0 for c in counts.values())
    bad = [f"{r.proto}/{r.mode}: {r.verified}/{r.iters}" for r in rows if r.verified != r.iters]
    passed = not bad and dma_ok and both
    detail = (f"{len(rows)} configurations x {iters} iterations verified"
              if not bad else "unverified " + ", ".join(bad))
    detail += f", host-nic DMA per request {counts}"
    return CriterionResult(4, "", passed, detail,
                           digest=_digest([(r.proto, r.mode, r.verified, r.lost, r.digest)
                                           for r in rows], dma_ok, both),
                           data={"rows": rows})


def icmp_reply_verifies(reply: bytes) -> bool:
    """RFC 1071: the ones' complement sum over a message holding its checksum is 0xFFFF."""
    end = 14 + int.from_bytes(reply[16:18], "big")
    return reply[L4_OFF] == ICMP_ECHO_REPLY and inet_sum(reply[L4_OFF:end]) == 0xFFFF


# 5. SLMP

SLMP_WINDOWS = (1, 2, 4, 8, 16, 32)


@_timed(5, "slmp", 120.0)
def criterion_5(seed: int = 0, size: int = 1 << 20, trials: int = 20, loss: float = 0.01,
                latency: float = 2e-4, kind: str = "sim") -> CriterionResult:
    rows = {}
    for w in SLMP_WINDOWS:
        rows[w] = harness.run_sendfile(size=size, window=w, mode="window", trials=trials,
                                       seed=seed, kind=kind, latency=latency,
                                       max_attempts=trials)
    a_ok = all(r.successes == trials and r.failed == 0 for r in rows.values() if not r.skipped)
    b_ok = rows[1].offsets_increasing
    lossy = harness.run_sendfile(size=size, window=16, mode="window", loss=loss, trials=trials,
                                 seed=seed, kind="sim", latency=latency, rto=0.03,
                                 max_retries=10, max_attempts=trials)
    c_ok = lossy.successes >= trials - 1
    passing = [w for w in SLMP_WINDOWS if not rows[w].skipped and rows[w].successes == trials]
    medians = [rows[w].median_mbps for w in passing]
    d_ok = bool(passing) and all(a <= b for a, b in zip(medians, medians[1:]))
    passed = a_ok and b_ok and c_ok and d_ok
    detail = (f"(a) lossless {'ok' if a_ok else 'FAILED'} "
              f"[{', '.join(f'w{w}:{rows[w].successes}/{trials}' for w in SLMP_WINDOWS)}]; "
              f"(b) in-order offsets {'ok' if b_ok else 'FAILED'}; "
              f"(c) p={loss}: {lossy.successes}/{trials} complete; "
              f"(d) medians Mb/s {[round(m, 1) for m in medians]} "
              f"{'non-decreasing' if d_ok else 'NOT monotone'}")
    return CriterionResult(5, "", passed, detail,
                           digest=_digest([(w, r.successes, r.failed, r.digest,
                                            r.offsets_increasing) for w, r in rows.items()],
                                          lossy.successes, lossy.digest),
                           data={"rows": rows, "lossy": lossy})


# 6. DDT

def random_datatype(rng: random.Random, depth: int = 3) -> ddt.Datatype:
    if depth == 0 or rng.random() < 0.25:
        return rng.choice([ddt.U8, ddt.I32, ddt.F32, ddt.I64])
    child = random_datatype(rng, depth - 1)
    kind = rng.randrange(3)
    count = rng.randint(1, 4)
    if kind == 0:
        return ddt.Contiguous(count, child)
    blocklen = rng.randint(1, 3)
    # about one stride in five is shorter than its block, so blocks overlap
    overlap = rng.random() < 0.2
    if kind == 1:
        stride = rng.randint(0, blocklen - 1) if overlap else rng.randint(blocklen, blocklen + 3)
        return ddt.Vector(count, blocklen, stride, child)
    span = blocklen * ddt.type_extent(child)
    stride = rng.randint(0, span - 1) if overlap else rng.randint(span, span + 16)
    return ddt.Hvector(count, blocklen, stride, child)


CHUNK_SIZES = (1, 7, 64, 1460)


def check_unpack(t: ddt.Datatype, count: int, rng: random.Random) -> bool:
    ext = ddt.type_extent(t)
    src = rng.randbytes(count * ext)
    stream = ddt.pack(t, count, src)
    want = harness.scatter_oracle(t, count, stream)
    for chunk in CHUNK_SIZES:
        dest = bytearray(len(want))
        cur = ddt.UnpackCursor(t, count)
        for i in range(0, len(stream), chunk):
            cur.feed(stream[i:i + chunk], dest)
        if not cur.done or dest != want:
            return False
    return True


@_timed(6, "ddt", 60.0)
def criterion_6(seed: int = 0, trees: int = 200, kind: str = "sim") -> CriterionResult:
    rng = random.Random(seed)
    bad = 0
    for _ in range(trees):
        t = random_datatype(rng)
        bad += not check_unpack(t, rng.randint(1, 3), rng)
    named_ok = all(check_unpack(t, 5, rng) for t in (ddt.SIMPLE, ddt.COMPLEX))
    rows = [harness.run_ddt(t, count=32, messages=16, kind=kind, seed=seed)
            for t in (ddt.SIMPLE, ddt.COMPLEX)]
    parallel_ok = all(r.verified == r.messages for r in rows)
    passed = bad == 0 and named_ok and parallel_ok
    detail = (f"{trees - bad}/{trees} random trees match the scatter oracle at chunk sizes "
              f"{list(CHUNK_SIZES)}, simple/complex {'ok' if named_ok else 'FAILED'}, "
              f"parallel buffers verified {[f'{r.verified}/{r.messages}' for r in rows]}")
    return CriterionResult(6, "", passed, detail,
                           digest=_digest(bad, named_ok, [(r.verified, r.digest) for r in rows]))


# 7. overlap

@_timed(7, "overlap", 60.0)
def criterion_7(seed: int = 0, total: int = 1 << 20, messages: int = 16,
                threshold: float = 0.9, kind: str = "sim") -> CriterionResult:
    t = ddt.SIMPLE
    count = -(-total // (messages * ddt.type_size(t)))
    row = harness.run_ddt(t, count=count, messages=messages, overlap=True, kind=kind, seed=seed)
    r = row.R if row.R is not None else 0.0
    passed = r >= threshold and row.verified == messages
    detail = (f"R = {r:.3f} over {messages * count * ddt.type_size(t)} bytes "
              f"(compute {row.t_compute_s:.2f}s, poll {row.t_poll_s:.3f}s), "
              f"{row.verified}/{messages} buffers verified")
    return CriterionResult(7, "", passed, detail, data={"row": row})


DETERMINISTIC = (criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6)
ALL = DETERMINISTIC + (criterion_7,)


# 8. determinism

def criterion_8(first: list[CriterionResult], seed: int = 0) -> CriterionResult:
    """Rerun criteria 1-6 with the same seed and compare against ``first``."""
    t0 = time.perf_counter()
    second = [fn(seed=seed) for fn in DETERMINISTIC]
    diffs = [a.number for a, b in zip(first, second)
             if a.digest != b.digest or a.passed != b.passed]
    both = all(r.passed for r in first + second)
    res = CriterionResult(8, "determinism", not diffs and both,
                          f"criteria 1-6 {'identical' if not diffs else f'differ in {diffs}'} "
                          f"across two runs with seed {seed}",
                          limit=0.0)
    res.elapsed = time.perf_counter() - t0
    res.data = {"second": second}
    return res


def run_all(seed: int = 0, determinism: bool = True, only=None, out=print) -> list[CriterionResult]:
    results = []
    for fn in ALL:
        if only and int(fn.__name__.rsplit("_", 1)[1]) not in only:
            continue
        res = fn(seed=seed)
        out(res.line())
        results.append(res)
    first = [r for r in results if r.number <= 6]
    if determinism and len(first) == 6 and (not only or 8 in only):
        res = criterion_8(first, seed)
        out(res.line())
        results.append(res)
    return results
