"""Command line: ``spinemu pingpong|sendfile|ddt|selftest``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys

from . import harness, selftest
from .engine import EngineConfig
from .netsim import LinkConfig
from .pktbuf import AllocatorConfig

PING_COLUMNS = ["proto", "mode", "size", "iters", "verified", "lost", "median_rtt_us",
                "ci95_low_us", "ci95_high_us", "digest"]
SENDFILE_COLUMNS = ["window", "size", "mode", "loss", "streams", "successes", "failed",
                    "median_mbps", "ci95_low_mbps", "ci95_high_mbps", "retransmits", "skipped",
                    "digest"]
DDT_COLUMNS = ["type", "count", "messages", "size", "throughput_mbps", "R", "verified",
               "t_compute_s", "t_poll_s", "digest"]


def load_config(path: str | None) -> tuple[EngineConfig, AllocatorConfig]:
    """Read ``key=value`` lines naming EngineConfig or AllocatorConfig fields."""
    engine, alloc = {}, {}
    if path:
        e_fields = {f.name: f for f in dataclasses.fields(EngineConfig)}
        a_fields = {f.name: f for f in dataclasses.fields(AllocatorConfig)}
        with open(path) as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = (s.strip() for s in line.partition("="))
                if not sep:
                    raise ValueError(f"{path}:{lineno}: expected key=value")
                if key in e_fields:
                    engine[key] = _coerce(value, EngineConfig.__dataclass_fields__[key].default)
                elif key in a_fields:
                    alloc[key] = int(value, 0)
                else:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    return EngineConfig(**engine), AllocatorConfig(**alloc)


def _coerce(value: str, default):
    if value.lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value, 0)
    return float(value)


def _sizes(text: str) -> list[int]:
    return [int(s, 0) for s in text.split(",") if s]


def _write(rows: list[dict], columns: list[str], path: str | None) -> None:
    out = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    finally:
        if path:
            out.close()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if v is None:
        return ""
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--transport", choices=["sim", "udp"], default="sim")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--loss", type=float, default=0.0, help="frame loss probability (sim only)")
    common.add_argument("--latency", type=float, default=0.0, help="one-way link latency, seconds")
    common.add_argument("--mtu", type=int, default=1500)
    common.add_argument("--window", type=int, default=16)
    common.add_argument("--streams", type=int, default=1)
    common.add_argument("--csv", metavar="PATH", help="write rows here instead of stdout")
    common.add_argument("--config", metavar="PATH", help="key=value engine/allocator settings")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="spinemu", description="sPIN smart-NIC emulator harness")
    sub = p.add_subparsers(dest="command", required=True)

    pp = sub.add_parser("pingpong", parents=[common], help="UDP/ICMP round-trip latency")
    pp.add_argument("--proto", choices=harness.PING_PROTOS, default="udp")
    pp.add_argument("--mode", choices=harness.PING_MODES, default="nic")
    pp.add_argument("--sizes", type=_sizes, default=[64])
    pp.add_argument("--iters", type=int, default=20)

    sf = sub.add_parser("sendfile", parents=[common], help="SLMP file transfer throughput")
    sf.add_argument("--size", type=int, default=1 << 20)
    sf.add_argument("--windows", type=_sizes, help="sweep these windows instead of --window")
    sf.add_argument("--mode", choices=[m.value for m in harness.slmp.ReliabilityMode],
                    default="window")
    sf.add_argument("--trials", type=int, default=20)
    sf.add_argument("--rto", type=float, default=0.05)
    sf.add_argument("--max-retries", type=int, default=10)
    sf.add_argument("--gap", type=float, default=0.0, help="inter-packet gap, seconds")

    dd = sub.add_parser("ddt", parents=[common], help="datatype unpack throughput and overlap")
    dd.add_argument("--type", default="simple",
                    help="descriptor such as vec(8,2,4,f32), or simple/complex")
    dd.add_argument("--count", type=int, default=64, help="type repetitions per message")
    dd.add_argument("--messages", type=int, default=16)
    dd.add_argument("--overlap", choices=["on", "off"], default="off")

    st = sub.add_parser("selftest", parents=[common], help="run the acceptance checks")
    st.add_argument("--only", type=_sizes, help="criterion numbers to run")
    st.add_argument("--no-determinism", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        engine, alloc = load_config(args.config)
    except (OSError, ValueError, TypeError) as exc:
        print(f"spinemu: bad config: {exc}", file=sys.stderr)
        return 2
    try:
        link = LinkConfig(loss=args.loss, latency=args.latency, mtu=args.mtu, seed=args.seed)
    except ValueError as exc:
        print(f"spinemu: {exc}", file=sys.stderr)
        return 2

    if args.command == "pingpong":
        rows = harness.run_pingpong(args.proto, args.mode, args.sizes, args.iters,
                                    args.transport, args.seed, link, engine=engine)
        _write(harness.rows_as_dicts(rows), PING_COLUMNS, args.csv)
        return 0 if all(r.verified == r.iters for r in rows) else 1

    if args.command == "sendfile":
        rows = []
        for w in args.windows or [args.window]:
            rows.append(harness.run_sendfile(
                args.size, w, args.mode, args.loss, args.trials, args.streams, args.mtu,
                args.seed, args.transport, args.latency, args.rto, args.max_retries, args.gap,
                engine=engine))
        _write(harness.rows_as_dicts(rows), SENDFILE_COLUMNS, args.csv)
        return 0

    if args.command == "ddt":
        name = args.type.lower()
        dtype = {"simple": harness.ddt.SIMPLE, "complex": harness.ddt.COMPLEX}.get(name, args.type)
        try:
            row = harness.run_ddt(dtype, args.count, args.messages, args.overlap == "on",
                                  args.transport, args.seed, args.mtu, engine=engine)
        except harness.ddt.DdtError as exc:
            print(f"spinemu: {exc}", file=sys.stderr)
            return 2
        _write(harness.rows_as_dicts([row]), DDT_COLUMNS, args.csv)
        return 0 if row.verified == row.messages else 1

    results = selftest.run_all(args.seed, determinism=not args.no_determinism, only=args.only)
    failed = [r.number for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
