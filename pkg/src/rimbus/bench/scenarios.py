"""The benchmark scenarios: latency matrix, redundancy, callback difference."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from rimbus.bench.formulas import (InvalidAdjustment, adjusted_stream_latency, callback_diff_reduction,
                                   latency_reduction, ratio_to_opt)
from rimbus.bench.report import Check, LatencyReport, ReportRow, summarize
from rimbus.bench.testbed import BenchError, ChipProcessSpec, Testbed, bench_config
from rimbus.bridge import BridgeRoute
from rimbus.core import SystemConfig, TopicKey, format_size, header_len, parse_size
from rimbus.dgram import fragment_count
from rimbus.link import Lane

log = logging.getLogger(__name__)

DEFAULT_SIZES = ["1KB", "10KB", "100KB", "1MB", "2MB", "6MB"]
DEFAULT_SHAPING = {"Ethernet": 1000.0, "PcieVirtual": 4000.0}
TRANSPORTS = ("shm", "datagram", "stream")
PUB_CHIP, SUB_CHIP = "A1", "B1"


@dataclass
class BenchOptions:
    sizes: list[int] = field(default_factory=lambda: [parse_size(s) for s in DEFAULT_SIZES])
    samples: int | None = None
    loss_rate: float = 0.0
    seed: int = 0
    load: bool = False
    shaping: dict = field(default_factory=lambda: dict(DEFAULT_SHAPING))
    subscribers: list[int] = field(default_factory=lambda: [2])
    transports: list[str] = field(default_factory=lambda: list(TRANSPORTS))
    deterministic: bool = False
    base: SystemConfig | None = None
    redundancy_size: int = parse_size("6MB")
    min_period_small: float = 0.01
    min_period_large: float = 0.1

    def samples_for(self, default: int) -> int:
        return self.samples if self.samples else default


# ---------------------------------------------------------------------------
# helpers

@dataclass(frozen=True)
class TopicPlan:
    name: str
    scope: str
    bridged: bool
    subs: tuple[str, ...]
    sub_proc: str
    via: str = "auto"

    @property
    def key(self) -> TopicKey:
        return TopicKey(self.scope, self.name)

    def kw(self) -> dict:
        return {"topic": self.name, "scope": self.scope}


def _build(opts: BenchOptions, plans: list[TopicPlan]) -> Testbed:
    routes = [BridgeRoute(p.key, PUB_CHIP, (SUB_CHIP,), Lane.ETHERNET) for p in plans if p.bridged]
    cfg = bench_config(opts.base, shaping=opts.shaping, loss_rate=opts.loss_rate, seed=opts.seed,
                       routes=routes)
    by_proc: dict[str, list] = {}
    for p in plans:
        for node in p.subs:
            by_proc.setdefault(p.sub_proc, []).append({"node": node, "via": p.via, **p.kw()})
    specs = [ChipProcessSpec(f"pub-{PUB_CHIP}", PUB_CHIP, "chip",
                             {"pubs": [{"node": f"pub_{i}", **p.kw()} for i, p in enumerate(plans)]})]
    for proc, subs in by_proc.items():
        chip = proc.split("-", 1)[1]
        specs.append(ChipProcessSpec(proc, chip, "chip", {"subs": subs}))
    if routes:
        specs += [ChipProcessSpec(f"bridge-{c}", c, "bridge") for c in (PUB_CHIP, SUB_CHIP)]
    if opts.load:
        specs += [ChipProcessSpec(f"load-{c}", c, "load", {"spinners": 2, "noise_mbytes_s": 50.0})
                  for c in (PUB_CHIP, SUB_CHIP)]
    return Testbed(cfg, specs)


def _converge(tb: Testbed, plans: list[TopicPlan], timeout: float = 10.0) -> None:
    """Bridges connected and every publisher sees all its subscribers, or abort."""
    if f"bridge-{PUB_CHIP}" in tb.channels:
        r = tb.request(f"bridge-{PUB_CHIP}", "wait_connected", timeout=timeout + 5, wait=timeout)
        if not r["connected"]:
            raise BenchError("bridge channels did not connect within the timeout")
    for p in plans:
        want = len(p.subs) + (1 if p.bridged else 0)
        r = tb.request(f"pub-{PUB_CHIP}", "wait_routes", timeout=timeout + 5, count=want, wait=timeout, **p.kw())
        if not r["converged"]:
            raise BenchError(f"discovery not converged for {p.name}: expected {want} subscribers, "
                             f"publisher sees {r['routes']}")


def _period(opts: BenchOptions, size: int, topic: TopicKey, copies: int) -> float:
    """Nominal rate (10 Hz for >=2MB, 100 Hz below) slowed to 1.25x the shaped link occupancy."""
    base = opts.min_period_large if size >= parse_size("2MB") else opts.min_period_small
    rate = opts.shaping.get(Lane.ETHERNET.value)
    if not rate or copies == 0:
        return base
    occupancy = copies * (encoded_len_for(topic, size) + 64) * 8 / (rate * 1e6)
    return max(base, 1.25 * occupancy)


def encoded_len_for(topic: TopicKey, size: int) -> int:
    return header_len(topic) + size


def _run_cell(tb: Testbed, p: TopicPlan, size: int, samples: int, period: float, seed: int,
              reseed: str | None = None) -> tuple[dict, dict]:
    before = tb.request(p.sub_proc, "counts")["counts"]
    pub = tb.request(f"pub-{PUB_CHIP}", "publish", timeout=samples * period + 120, size=size,
                     samples=samples, period=period, seed=seed, reseed=reseed, **p.kw())
    want = {n: before.get(n, 0) + samples for n in p.subs}
    last, last_change = None, time.monotonic()
    hard = time.monotonic() + 30.0
    while time.monotonic() < hard:
        counts = tb.request(p.sub_proc, "counts")["counts"]
        if all(counts.get(n, 0) >= w for n, w in want.items()):
            break
        if counts != last:
            last, last_change = counts, time.monotonic()
        elif time.monotonic() - last_change > 1.5:
            break
        time.sleep(0.1)
    got = tb.request(p.sub_proc, "collect")
    lo, hi = pub["first_seq"], pub["first_seq"] + samples
    recs = {n: [r for r in got["records"].get(n, []) if lo <= r[0] < hi] for n in p.subs}
    return pub, recs


def _reseed(opts: BenchOptions, size: int) -> str | None:
    """Per-cell loss seed in deterministic mode, so a cell's drops do not depend on earlier cells."""
    return f"cell:{size}" if opts.deterministic else None


def _latencies(rows: list) -> np.ndarray:
    return np.array([r[2] - r[1] for r in rows], dtype=np.float64)


def _fill(row: ReportRow, values) -> ReportRow:
    s = summarize(values)
    row.p50_ns, row.p99_ns, row.mean_ns = s.p50, s.p99, s.mean
    return row


def analytic_delivery(size: int, topic: TopicKey, cap: int, loss: float) -> float:
    """P(every fragment of one message survives independent per-datagram loss)."""
    return (1.0 - loss) ** fragment_count(encoded_len_for(topic, size), cap)


# ---------------------------------------------------------------------------
# scenarios

def run_latency_matrix(opts: BenchOptions) -> LatencyReport:
    samples = opts.samples_for(500)
    plans = {
        "shm": TopicPlan("bench/lat-shm", "ChipLocal", False, ("lat_shm",), f"sub-{PUB_CHIP}"),
        "datagram": TopicPlan("bench/lat-dgram", "VehicleArea", False, ("lat_dgram",), f"sub-{SUB_CHIP}", "datagram"),
        "stream": TopicPlan("bench/lat-stream", "VehicleArea", True, ("lat_stream",), f"sub-{SUB_CHIP}", "bridge"),
    }
    order = [t for t in TRANSPORTS if t in opts.transports]  # shm first: the adjustment needs it
    active = [plans[t] for t in order]
    report = LatencyReport()
    with _build(opts, active) as tb:
        _converge(tb, active)
        for size in opts.sizes:
            for t in order:
                p = plans[t]
                copies = 0 if t == "shm" else 1
                period = _period(opts, size, p.key, copies)
                pub, recs = _run_cell(tb, p, size, samples, period, opts.seed, _reseed(opts, size))
                rows = recs[p.subs[0]]
                row = ReportRow("matrix", t, size, 1, samples, len(rows), samples - len(rows))
                if t == "datagram":
                    row.wire_bytes = pub["wire_bytes"]
                _fill(row, _latencies(rows))
                report.add(row)
                log.info("matrix %s %s: %d/%d, mean %.1f us", t, format_size(size), len(rows), samples,
                         row.mean_ns / 1e3)
    for size in opts.sizes:
        shm, st = report.find("matrix", "shm", size), report.find("matrix", "stream", size)
        if shm and st:
            try:
                st.adjusted_ns = adjusted_stream_latency(st.mean_ns, shm.mean_ns)
            except InvalidAdjustment:
                st.status = "InvalidAdjustment"
        dg = report.find("matrix", "datagram", size)
        if st:
            report.checks.append(Check(f"matrix stream {format_size(size)} delivers all",
                                       st.drops == 0, f"{st.received}/{st.samples} delivered"))
        if dg and opts.loss_rate > 0:
            expect = analytic_delivery(size, plans["datagram"].key, _cap(opts), opts.loss_rate)
            rate = dg.received / dg.samples
            report.checks.append(Check(f"matrix datagram {format_size(size)} delivery vs analytic",
                                       abs(rate - expect) <= 0.05,
                                       f"measured {rate:.3f}, analytic {expect:.3f} (tolerance 0.05)"))
    report.notes.append("stream adjusted = stream mean - 2 x shm mean (two shared-memory hops removed)")
    return report


def _cap(opts: BenchOptions) -> int:
    return (opts.base or SystemConfig()).datagram_cap_bytes


@dataclass
class RedundancyResult:
    subscribers: int
    size: int
    samples: int
    bytes_unicast: int
    bytes_bridged: int
    latency_unicast_ns: float
    latency_bridge_ns: float
    delta_l: float
    received_unicast: int
    received_bridge: int

    @property
    def ratio(self) -> float:
        return self.bytes_unicast / self.bytes_bridged if self.bytes_bridged else math.nan


RATIO_TOLERANCE = {1: 0.01, 2: 0.02, 4: 0.05}


def run_redundancy_scenario(opts: BenchOptions, subscribers: int, size: int | None = None,
                            samples: int | None = None) -> tuple[RedundancyResult, LatencyReport]:
    size = size or opts.redundancy_size
    samples = samples or opts.samples_for(100)
    uni = TopicPlan("bench/red-uni", "VehicleArea", False, tuple(f"uni_{i}" for i in range(1, subscribers + 1)),
                    f"sub-{SUB_CHIP}", "datagram")
    br = TopicPlan("bench/red-br", "VehicleArea", True, tuple(f"br_{i}" for i in range(1, subscribers + 1)),
                   f"sub-{SUB_CHIP}", "bridge")
    with _build(opts, [uni, br]) as tb:
        _converge(tb, [uni, br])
        pub_u, recs_u = _run_cell(tb, uni, size, samples, _period(opts, size, uni.key, subscribers), opts.seed,
                                  _reseed(opts, size))
        stats0 = _bridge_bytes(tb, br)
        _, recs_b = _run_cell(tb, br, size, samples, _period(opts, size, br.key, 1), opts.seed)
        bytes_b = _bridge_bytes(tb, br) - stats0
    lat_u = np.concatenate([_latencies(r) for r in recs_u.values()]) if recs_u else np.array([])
    lat_b = np.concatenate([_latencies(r) for r in recs_b.values()]) if recs_b else np.array([])
    mu, mb = summarize(lat_u).mean, summarize(lat_b).mean
    res = RedundancyResult(subscribers, size, samples, pub_u["wire_bytes"], bytes_b, mu, mb,
                           latency_reduction(mu, mb), len(lat_u), len(lat_b))
    report = LatencyReport()
    ru = _fill(ReportRow("redundancy", "unicast", size, subscribers, samples * subscribers, res.received_unicast,
                         samples * subscribers - res.received_unicast, res.bytes_unicast), lat_u)
    rb = _fill(ReportRow("redundancy", "bridge", size, subscribers, samples * subscribers, res.received_bridge,
                         samples * subscribers - res.received_bridge, res.bytes_bridged), lat_b)
    rb.delta_pct = res.delta_l
    report.add(ru)
    report.add(rb)
    report.checks += redundancy_checks(res)
    return res, report


def _bridge_bytes(tb: Testbed, p: TopicPlan) -> int:
    rows = tb.request(f"bridge-{PUB_CHIP}", "stats")["rows"]
    return sum(r["wire_bytes"] for r in rows if r["topic"] == p.name and r["dest"] == SUB_CHIP)


def redundancy_checks(res: RedundancyResult) -> list[Check]:
    n = res.subscribers
    ideal = res.size * res.samples
    over_b = res.bytes_bridged / ideal - 1 if ideal else math.nan
    over_u = res.bytes_unicast / (n * ideal) - 1 if ideal else math.nan
    tol = RATIO_TOLERANCE.get(n, 0.05)
    checks = [
        Check(f"redundancy n={n} bridged bytes = 1x payload x samples", 0 <= over_b <= 0.01,
              f"{res.bytes_bridged} bytes, framing overhead {over_b * 100:.3f}%"),
        Check(f"redundancy n={n} unicast bytes = {n}x payload x samples", 0 <= over_u <= 0.01,
              f"{res.bytes_unicast} bytes, framing overhead {over_u * 100:.3f}%"),
        Check(f"redundancy n={n} byte ratio {n}.00 +/- {tol}", abs(res.ratio - n) <= tol,
              f"ratio {res.ratio:.4f}"),
    ]
    if n >= 2:
        checks.append(Check(f"redundancy n={n} {format_size(res.size)} latency reduction >= 30%",
                            res.delta_l >= 30.0,
                            f"dL = {res.delta_l:.2f}% (unicast mean {res.latency_unicast_ns / 1e3:.0f} us, "
                            f"bridge mean {res.latency_bridge_ns / 1e3:.0f} us)"))
    return checks


def _pair_diffs(recs: dict, a: str, b: str) -> np.ndarray:
    ta = {r[0]: r[2] for r in recs.get(a, [])}
    tb_ = {r[0]: r[2] for r in recs.get(b, [])}
    common = sorted(ta.keys() & tb_.keys())
    return np.array([abs(ta[s] - tb_[s]) for s in common], dtype=np.float64)


def run_callback_diff_scenario(opts: BenchOptions) -> LatencyReport:
    samples = opts.samples_for(500)
    uni = TopicPlan("bench/cbd-uni", "VehicleArea", False, ("sub1", "sub2"), f"sub-{SUB_CHIP}", "datagram")
    br = TopicPlan("bench/cbd-br", "VehicleArea", True, ("sub3", "sub4"), f"sub-{SUB_CHIP}", "bridge")
    report = LatencyReport()
    with _build(opts, [uni, br]) as tb:
        _converge(tb, [uni, br])
        for size in opts.sizes:
            cells = {}
            for label, p, copies in (("unicast-pair", uni, 2), ("bridge-pair", br, 1)):
                _, recs = _run_cell(tb, p, size, samples, _period(opts, size, p.key, copies), opts.seed,
                                    _reseed(opts, size))
                diffs = _pair_diffs(recs, *p.subs)
                row = _fill(ReportRow("callback-diff", label, size, 2, samples, len(diffs), samples - len(diffs)),
                            diffs)
                if len(diffs) < 0.9 * samples:
                    row.status = "degraded"
                cells[label] = report.add(row)
            u, b = cells["unicast-pair"], cells["bridge-pair"]
            b.delta_pct = callback_diff_reduction(u.mean_ns, b.mean_ns)
            report.notes.append(f"{format_size(size)}: dT formula {_pct(b.delta_pct)}, "
                                f"ratio-to-bridge reading {_pct(ratio_to_opt(u.mean_ns, b.mean_ns))}")
    report.checks += callback_checks(report, opts.sizes)
    report.notes.insert(0, "dT = (unicast - bridge) / unicast x 100; the ratio reading is "
                           "(unicast - bridge) / bridge x 100. Both are listed per size.")
    return report


def _pct(v: float) -> str:
    return "NA" if math.isnan(v) else f"{v:.2f}%"


def callback_checks(report: LatencyReport, sizes: list[int]) -> list[Check]:
    checks = []
    means = []
    for size in sizes:
        u = report.find("callback-diff", "unicast-pair", size)
        b = report.find("callback-diff", "bridge-pair", size)
        if u is None or b is None:
            continue
        means.append(b.mean_ns)
        if size >= parse_size("100KB"):
            checks.append(Check(f"callback-diff {format_size(size)} bridge pair < unicast pair",
                                b.mean_ns < u.mean_ns,
                                f"bridge {b.mean_ns / 1e3:.1f} us vs unicast {u.mean_ns / 1e3:.1f} us"))
    if len(means) >= 2:
        spread = max(means) / min(means) if min(means) > 0 else math.inf
        checks.append(Check("callback-diff bridge pair varies < 3x across sizes", spread < 3.0,
                            f"max/min = {spread:.2f}"))
    return checks


def run_all(opts: BenchOptions) -> LatencyReport:
    report = run_latency_matrix(opts)
    for n in opts.subscribers:
        _, r = run_redundancy_scenario(opts, n)
        report.extend(r)
    report.extend(run_callback_diff_scenario(opts))
    return report
