"""Command line: ``rimbus bench|bridge|monitor|stats|clean|config``."""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
import time

from rimbus.core import RimbusError, SystemConfig, load_config, parse_size

log = logging.getLogger("rimbus")


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="system config JSON (default: $RIMBUS_CONFIG or built-in defaults)")


# ---------------------------------------------------------------------------
# bench

def cmd_bench(args) -> int:
    from rimbus.bench.scenarios import (DEFAULT_SHAPING, BenchOptions, run_all, run_callback_diff_scenario,
                                        run_latency_matrix, run_redundancy_scenario)
    from rimbus.bench.report import LatencyReport, emit_report
    from rimbus.link import parse_shaping

    base = load_config(args.config) if args.config else None
    shaping = dict(DEFAULT_SHAPING)
    if args.shape_mbps:
        shaping = {}
        for entry in args.shape_mbps:
            shaping.update(parse_shaping(entry))
    opts = BenchOptions(
        sizes=[parse_size(s) for s in args.sizes.split(",")] if args.sizes else BenchOptions().sizes,
        samples=args.samples, loss_rate=args.loss_rate, seed=args.seed, load=args.load,
        shaping=shaping, deterministic=args.deterministic, base=base,
        subscribers=[int(n) for n in args.subscribers.split(",")],
        transports=args.transports.split(","),
    )
    if args.size:
        opts.redundancy_size = parse_size(args.size)
    t0 = time.monotonic()
    if args.scenario == "matrix":
        report = run_latency_matrix(opts)
    elif args.scenario == "redundancy":
        report = LatencyReport()
        for n in opts.subscribers:
            report.extend(run_redundancy_scenario(opts, n)[1])
    elif args.scenario == "callback-diff":
        report = run_callback_diff_scenario(opts)
    else:
        report = run_all(opts)
    stem = args.scenario.replace("-", "_")
    paths = emit_report(report, args.out, args.format, stem=stem)
    for c in report.checks:
        print(c.line())
    for p in paths:
        print(f"wrote {p}")
    print(f"{args.scenario}: {'PASS' if report.passed else 'FAIL'} in {time.monotonic() - t0:.1f}s")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# bridge daemon

def cmd_bridge(args) -> int:
    from rimbus.bridge import Bridge, load_bridge_config, pid_path

    cfg = load_config(args.config, args.chip)
    if args.routes:
        cfg.bridge_config = args.routes
    routes = cfg.routes() if not args.routes else load_bridge_config(args.routes)
    bridge = Bridge(cfg, routes)
    pid_file = pid_path(cfg.chip_id)
    pid_file.write_text(f"{os.getpid()}\n")
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    print(f"bridge {cfg.chip_id}: {len(bridge.egress)} egress, {len(bridge.ingress)} ingress workers", flush=True)
    try:
        while not stop.wait(args.stats_interval):
            bridge.dump_stats()
    finally:
        bridge.dump_stats()
        bridge.close()
        pid_file.unlink(missing_ok=True)
    return 0


def cmd_stats(args) -> int:
    from rimbus.bridge import run_dir, stats_path

    paths = [stats_path(args.chip)] if args.chip else sorted(run_dir().glob("bridge-*.stats.csv"))
    found = False
    for p in paths:
        if p.exists():
            found = True
            print(f"# {p.name}")
            sys.stdout.write(p.read_text())
    if not found:
        print("no bridge stats found", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# monitor

def monitor_rows(view, cfg: SystemConfig) -> list[tuple]:
    """(chip, node, topic, role, transport) for every live entity in the view."""
    from rimbus.bridge import is_bridged
    from rimbus.core import SizeClass
    from rimbus.discovery import Role, select_transport

    routes = cfg.routes()
    entries = view.entries()
    rows = []
    for a in entries:
        if a.role in (Role.PUBLISHER, Role.SUBSCRIBER):
            peers = view.entries(a.topic, Role.SUBSCRIBER if a.role is Role.PUBLISHER else Role.PUBLISHER)
            used = set()
            for b in peers:
                pub, sub = (a, b) if a.role is Role.PUBLISHER else (b, a)
                bridged = is_bridged(routes, a.topic, pub.chip, sub.chip)
                for size in SizeClass:
                    used.add(select_transport((pub.chip, pub.pid), (sub.chip, sub.pid), size, bridged).transport.value)
            transport = "+".join(sorted(used)) or "-"
        else:
            transport = "-"
        rows.append((a.chip, a.node, str(a.topic), a.role.value, transport))
    return sorted(set(rows))


def cmd_monitor(args) -> int:
    from rimbus.discovery import listen_only

    cfg = load_config(args.config)
    p = listen_only(cfg)
    try:
        end = time.monotonic() + args.duration
        while True:
            time.sleep(min(args.interval, max(0.0, end - time.monotonic())))
            rows = monitor_rows(p.view, cfg)
            print(f"{'chip':<6} {'node':<20} {'topic':<32} {'role':<5} transport")
            for r in rows:
                print(f"{r[0]:<6} {r[1]:<20} {r[2]:<32} {r[3]:<5} {r[4]}")
            print(flush=True)
            if args.once or time.monotonic() >= end:
                break
    except KeyboardInterrupt:
        pass
    finally:
        p.close()
    return 0


# ---------------------------------------------------------------------------
# housekeeping

def cmd_clean(args) -> int:
    from rimbus.bridge import run_dir
    from rimbus.shm import shm_clean

    cfg = load_config(args.config)
    removed = shm_clean(cfg.shm_dir)
    for f in run_dir().glob("bridge-*"):
        f.unlink(missing_ok=True)
        removed.append(f.name)
    print(f"removed {len(removed)} file(s)")
    for name in removed:
        print(f"  {name}")
    return 0


def cmd_config(args) -> int:
    cfg = load_config(args.config, args.chip)
    if args.write:
        cfg.save(args.write)
        print(f"wrote {args.write}")
    else:
        import json
        print(json.dumps(cfg.to_dict(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rimbus", description="multi-chip pub/sub middleware and testbed")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="run benchmark scenarios on a single-host testbed")
    b.add_argument("scenario", choices=["matrix", "redundancy", "callback-diff", "all"])
    _add_config(b)
    b.add_argument("--sizes", help="comma list, e.g. 1KB,100KB,6MB (binary units)")
    b.add_argument("--samples", type=int, help="messages per cell (default 500; redundancy 100)")
    b.add_argument("--loss-rate", type=float, default=0.0, help="per-datagram drop probability")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--load", action="store_true", help="run CPU spinners and UDP noise on both chips")
    b.add_argument("--shape-mbps", action="append", metavar="LANE=RATE",
                   help="link rate per lane, e.g. ethernet=1000,pcie=4000; 'none' disables shaping")
    b.add_argument("--out", default="bench-out")
    b.add_argument("--format", choices=["csv", "md", "both"], default="csv")
    b.add_argument("--deterministic", action="store_true",
                   help="fixed seeds and row order: repeated runs match except timing columns")
    b.add_argument("--subscribers", default="2", help="redundancy: comma list of subscriber counts")
    b.add_argument("--size", help="redundancy: payload size (default 6MB)")
    b.add_argument("--transports", default="shm,datagram,stream", help="matrix: transports to measure")
    b.set_defaults(func=cmd_bench)

    br = sub.add_parser("bridge", help="run the message bridge for one chip")
    _add_config(br)
    br.add_argument("--chip", required=True)
    br.add_argument("--routes", help="bridge route file (overrides the config)")
    br.add_argument("--stats-interval", type=float, default=1.0)
    br.set_defaults(func=cmd_bridge)

    m = sub.add_parser("monitor", help="list live participants from discovery")
    _add_config(m)
    m.add_argument("--interval", type=float, default=1.0)
    m.add_argument("--duration", type=float, default=float("inf"))
    m.add_argument("--once", action="store_true")
    m.set_defaults(func=cmd_monitor)

    s = sub.add_parser("stats", help="print bridge statistics CSV")
    s.add_argument("--chip")
    s.set_defaults(func=cmd_stats)

    c = sub.add_parser("clean", help="remove shared-memory segments and run files")
    _add_config(c)
    c.set_defaults(func=cmd_clean)

    cf = sub.add_parser("config", help="print or write the effective config")
    _add_config(cf)
    cf.add_argument("--chip")
    cf.add_argument("--write", metavar="PATH")
    cf.set_defaults(func=cmd_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except RimbusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
