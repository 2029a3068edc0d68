"""Acceptance criteria, one test each.  Every test prints a single PASS/FAIL line."""

import multiprocessing as mp
import random
import threading
import time
import uuid


from conftest import record_criterion
from oracles import TRANSPORT_TABLE, crc32_bitwise, delivery_probability, envelope_bytes, fragments_needed
from rimbus.bench.formulas import adjusted_stream_latency, callback_diff_reduction, latency_reduction
from rimbus.bench.scenarios import BenchOptions, run_callback_diff_scenario, run_latency_matrix, run_redundancy_scenario
from rimbus.bridge import load_bridge_config
from rimbus.core import (ConfigError, MessageEnvelope, Scope, SizeClass, TopicKey, checksum, decode_envelope,
                         encode_envelope, encoded_len, format_size, parse_size)
from rimbus.discovery import Participant, Role, decode_beacon, select_transport, vehicle_segment
from rimbus.shm import Gap, ShmMessage, shm_create_or_open, shm_publish, shm_subscribe

SIX_MB = parse_size("6MB")

# Reference latency table, microseconds, sizes 1KB 10KB 100KB 1MB 2MB 6MB.
REF_SHM = [181, 210, 375, 991, 1779, 4399]
REF_DDS = [1340, 1310, 1948, 11023, 21635, 65299]
REF_STREAM = [2182, 2427, 3223, 12783, 23341, 66475]
REF_STREAM_ADJUSTED = [1820, 2007, 2473, 10701, 19783, 57677]   # as published
# Reference callback-difference table, microseconds.
REF_UNICAST_PAIR = [92.48, 116.02, 467.89, 255.69, 746.68, 773.81]
REF_BRIDGE_PAIR = [54.09, 55.00, 53.47, 70.95, 68.28, 86.48]
# Hand-computed with exact decimal arithmetic, percent.
HAND_DL = [-62.8358, -85.2672, -65.4517, -15.9666, -7.8854, -1.8009]
HAND_DT = [41.5117, 52.5944, 88.5721, 72.2516, 90.8555, 88.8241]
SIZE_LABELS = ["1KB", "10KB", "100KB", "1MB", "2MB", "6MB"]


def close_pct(a, b, tol=1e-4):
    return abs(a - b) <= tol * abs(b)


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    record_criterion(f"{'PASS' if ok else 'FAIL'} criterion {n} ({title}): {detail}")
    assert ok, detail


def test_criterion_1_formula_reproduction():
    t0 = time.perf_counter()
    problems = []
    for label, orig, shm, published in zip(SIZE_LABELS, REF_STREAM, REF_SHM, REF_STREAM_ADJUSTED):
        got = adjusted_stream_latency(orig, shm)
        if got != published:
            problems.append(f"{label}: {orig} - 2x{shm} = {got}, published {published}")
    for label, base, opt, hand in zip(SIZE_LABELS, REF_DDS, REF_STREAM, HAND_DL):
        if not close_pct(latency_reduction(base, opt), hand):
            problems.append(f"dL {label}: {latency_reduction(base, opt):.4f} != {hand}")
    for label, base, opt, hand in zip(SIZE_LABELS, REF_UNICAST_PAIR, REF_BRIDGE_PAIR, HAND_DT):
        if not close_pct(callback_diff_reduction(base, opt), hand):
            problems.append(f"dT {label}: {callback_diff_reduction(base, opt):.4f} != {hand}")
    took = time.perf_counter() - t0
    if took >= 1.0:
        problems.append(f"took {took:.2f}s")
    exact = 6 - sum(p[0].isdigit() for p in problems)
    detail = f"{exact}/6 adjusted rows exact, dL and dT within 0.01% in {took * 1e3:.1f} ms"
    if problems:
        detail += "; " + "; ".join(problems)
    verdict(1, "formula reproduction", not problems, detail)


def _redundancy(n, samples):
    res, report = run_redundancy_scenario(BenchOptions(), n, SIX_MB, samples)
    return res, report


def test_criterion_2_redundancy_elimination():
    t0 = time.monotonic()
    lines, ok = [], True
    for n, tol, samples in ((2, 0.02, 100), (4, 0.05, 100)):
        res, report = _redundancy(n, samples)
        ok &= report.passed and abs(res.ratio - n) <= tol
        failed = [c.name for c in report.checks if not c.passed]
        lines.append(f"n={n} ratio {res.ratio:.4f} (+/-{tol}), dL {res.delta_l:.1f}%"
                     + (f" failed: {failed}" if failed else ""))
    took = time.monotonic() - t0
    verdict(2, "redundancy elimination", ok, "; ".join(lines) + f"; {took:.0f}s")


def test_criterion_3_large_message_robustness():
    t0 = time.monotonic()
    opts = BenchOptions(sizes=[SIX_MB], samples=500, loss_rate=0.01, seed=3, transports=["datagram", "stream"])
    report = run_latency_matrix(opts)
    dg = report.find("matrix", "datagram", SIX_MB)
    st = report.find("matrix", "stream", SIX_MB)
    frags = fragments_needed(encoded_len(MessageEnvelope(TopicKey.vehicle("bench/lat-dgram"), 0, 0, b"")) + SIX_MB,
                             61440)
    expect = delivery_probability(0.01, frags)
    rate = dg.received / dg.samples
    ok = abs(rate - expect) <= 0.05 and abs(expect - 0.355) <= 0.001 and st.received == st.samples
    verdict(3, "large-message robustness", ok,
            f"datagram delivery {rate:.3f} vs analytic {expect:.3f} ({frags} fragments), "
            f"stream {st.received}/{st.samples}; {time.monotonic() - t0:.0f}s")


def test_criterion_4_callback_difference_stability():
    t0 = time.monotonic()
    report = run_callback_diff_scenario(BenchOptions(samples=300, load=True))
    means = {r.size_bytes: r.mean_ns / 1e3 for r in report.rows if r.transport == "bridge-pair"}
    uni = {r.size_bytes: r.mean_ns / 1e3 for r in report.rows if r.transport == "unicast-pair"}
    detail = ", ".join(f"{lab} {means[parse_size(lab)]:.0f}/{uni[parse_size(lab)]:.0f}us" for lab in SIZE_LABELS)
    failed = [c.line() for c in report.checks if not c.passed]
    expected = {f"callback-diff {format_size(s)} bridge pair < unicast pair"
                for s in means if s >= parse_size("100KB")} | {"callback-diff bridge pair varies < 3x across sizes"}
    missing = expected - {c.name for c in report.checks}
    spread = max(means.values()) / min(means.values())
    ok = report.passed and len(means) == len(SIZE_LABELS) and not missing
    verdict(4, "callback-difference stability", ok,
            f"bridge/unicast pair means {detail}; spread {spread:.2f}x; {time.monotonic() - t0:.0f}s"
            + (f"; {failed}" if failed else "") + (f"; missing {sorted(missing)}" if missing else ""))


def _torn_writer(directory, name, stop, started):
    seg = shm_create_or_open(name, 2, 4096, directory=directory)
    started.set()
    i = 0
    while not stop.is_set():
        seg.publish(MessageEnvelope(TopicKey.local("t"), i, i, bytes([i & 0xFF]) * 4000))
        i += 1
    seg.close()


def test_criterion_5_property_suites(make_cfg, tmp_path):
    t0 = time.monotonic()
    results = {}
    rng = random.Random(5)

    ok = True
    for _ in range(10_000):
        topic = TopicKey(rng.choice(list(Scope)), "t/" + "".join(rng.choices("abcxyz_/09", k=rng.randint(1, 30))))
        payload = rng.randbytes(rng.randint(0, 2048))
        env = MessageEnvelope(topic, rng.getrandbits(64), rng.getrandbits(64), payload)
        raw = encode_envelope(env)
        ok &= decode_envelope(raw) == env
        ok &= raw == envelope_bytes(int(topic.scope), topic.name, env.seq, env.publish_ts, payload,
                                    crc32_bitwise(payload))
    results["envelope round trip x10^4"] = ok

    results["crc check value"] = checksum(b"123456789") == 0xCBF43926 == crc32_bitwise(b"123456789")

    ok = True
    for (same_chip, same_pid, large, bridged), want in TRANSPORT_TABLE.items():
        sub = ("A1" if same_chip else "B1", 1 if same_pid else 2)
        got = select_transport(("A1", 1), sub, SizeClass.LARGE if large else SizeClass.SMALL, bridged).transport
        ok &= got is want
    results["select_transport table"] = ok and len(TRANSPORT_TABLE) == 12

    seg = shm_create_or_open(f"rimbus.acc.{uuid.uuid4().hex[:6]}", 2, 4096, directory=str(tmp_path))
    ctx = mp.get_context("fork")
    stop, started = ctx.Event(), ctx.Event()
    proc = ctx.Process(target=_torn_writer, args=(str(tmp_path), seg.name, stop, started))
    proc.start()
    bad = delivered = 0
    try:
        started.wait(10)
        for _ in range(100_000):
            n = max(seg.cursor - 1, 0)
            got = seg.read_slot(n)
            if isinstance(got, ShmMessage):
                delivered += 1
                bad += got.env.payload != bytes([n & 0xFF]) * 4000
            elif got == "corrupt":
                bad += 1
    finally:
        stop.set()
        proc.join(10)
        seg.close()
    results[f"torn reads x10^5 ({delivered} delivered)"] = bad == 0 and delivered > 0

    ring = shm_create_or_open(f"rimbus.acc.{uuid.uuid4().hex[:6]}", 8, 4096, directory=str(tmp_path))
    reader = shm_subscribe(ring, from_seq=0)
    for i in range(100):
        shm_publish(ring, MessageEnvelope(TopicKey.local("g"), i, i, b"x"))
    items = reader.poll()
    results["ring gap arithmetic"] = items[0] == Gap(92) and [m.env.seq for m in items[1:]] == list(range(92, 100))
    ring.close()

    from rimbus import _net
    cfg = make_cfg("A1")
    seg_va = vehicle_segment(cfg)
    sniffer = _net.multicast_receiver(seg_va.group, seg_va.port, seg_va.interface, timeout=0.05)
    p = Participant(cfg, pid=9)
    p.add("n", TopicKey.local("private"), Role.PUBLISHER)
    p.add("n", TopicKey.vehicle("shared"), Role.PUBLISHER)
    levels = []
    end = time.monotonic() + 0.5
    while time.monotonic() < end:
        try:
            raw, _ = sniffer.recvfrom(2048)
        except TimeoutError:
            continue
        level, ann = decode_beacon(raw)
        levels.append((level, ann.topic.scope))
    p.close()
    sniffer.close()
    results["scope isolation"] = bool(levels) and all(
        lv is Scope.VEHICLE_AREA and sc is Scope.VEHICLE_AREA for lv, sc in levels)

    from rimbus.node import Context, create_node
    a, b = Context(make_cfg("A1"), pid=11), Context(make_cfg("B1"), pid=12)
    try:
        topic = TopicKey.vehicle("serial")
        depth, overlaps, count = [0], [0], [0]

        def cb(meta, payload):
            depth[0] += 1
            overlaps[0] += depth[0] > 1
            time.sleep(0.0002)
            count[0] += 1
            depth[0] -= 1

        node = create_node(a.cfg, "sink", ctx=a, settle=False)
        node.subscribe(topic, cb, depth=4096)
        local = node.advertise(topic)
        remote = create_node(b.cfg, "src", ctx=b, settle=False).advertise(topic)
        b.view.wait_for(lambda v: v.entries(topic, Role.SUBSCRIBER), 3.0)

        def blast(pub):
            for _ in range(200):
                pub.publish(b"z" * 500)

        ts = [threading.Thread(target=blast, args=(x,)) for x in (local, remote)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        end = time.monotonic() + 5
        while count[0] < 400 and time.monotonic() < end:
            time.sleep(0.01)
        results["serial callbacks"] = overlaps[0] == 0 and count[0] == 400
    finally:
        a.close()
        b.close()

    took = time.monotonic() - t0
    failed = [k for k, v in results.items() if not v]
    verdict(5, "property suites", not failed and took < 120,
            f"{len(results) - len(failed)}/{len(results)} suites hold; {took:.0f}s" + (f"; failed {failed}" if failed else ""))


def test_criterion_6_degenerate_cases(make_cfg, tmp_path):
    res, _ = run_redundancy_scenario(BenchOptions(), 1, SIX_MB, 50)
    ratio_ok = abs(res.ratio - 1.0) <= 0.01

    from rimbus.node import Context, create_node
    cfg = make_cfg("A1", bridge_routes=[{"topic": "lidar", "scope": "VehicleArea", "source": "A1", "dests": ["B1"]}])
    ctx = Context(cfg, pid=21)
    try:
        pub = create_node(cfg, "cam", ctx=ctx, settle=False).advertise(TopicKey.vehicle("lidar"))
        pub.publish(b"frame")
        landed = ctx.segment(TopicKey.vehicle("lidar")).cursor == 1
    finally:
        ctx.close()

    conf = tmp_path / "self.conf"
    conf.write_text("lidar: A1 -> [A1]\n")
    try:
        load_bridge_config(conf)
        rejected = False
    except ConfigError:
        rejected = True
    verdict(6, "degenerate cases", ratio_ok and landed and rejected,
            f"n=1 ratio {res.ratio:.4f}; zero-subscriber bridged publish in SHM: {landed}; "
            f"dest==source rejected: {rejected}")
