import itertools
import time

import pytest

from oracles import TRANSPORT_TABLE
from rimbus import _net
from rimbus.core import EncodingError, Scope, SizeClass, TopicKey
from rimbus.discovery import (BEACON_MAX, Announcement, Kind, Participant, Role, RouteUnavailable,
                              TopologyView, Transport, decode_beacon, encode_beacon, local_segment,
                              process_beacon, resolve_route, select_transport, vehicle_segment)


@pytest.mark.parametrize("same_chip,same_pid,large,bridged", sorted(TRANSPORT_TABLE))
def test_select_transport_table(same_chip, same_pid, large, bridged):
    pub = ("A1", 10)
    sub = ("A1" if same_chip else "B1", 10 if same_pid else 11)
    size = SizeClass.LARGE if large else SizeClass.SMALL
    assert select_transport(pub, sub, size, bridged).transport is TRANSPORT_TABLE[(same_chip, same_pid, large, bridged)]


def test_cross_chip_combinations_cover_eight_cases():
    cases = {(c, l, b): TRANSPORT_TABLE[(c, False, l, b)] for c, l, b in itertools.product([False, True], repeat=3)}
    assert len(cases) == 8
    assert [t for t in cases.values()].count(Transport.BRIDGED_STREAM) == 1


def _ann(**kw):
    base = dict(chip="A1", node="n", pid=1, topic=TopicKey.local("t"), role=Role.PUBLISHER)
    base.update(kw)
    return Announcement(**base)


def test_beacon_round_trip_and_size_limit():
    ann = _ann(hints={"shm": "rimbus.A1.x"}, sent_ts=5)
    level, back = decode_beacon(encode_beacon(ann, Scope.CHIP_LOCAL))
    assert level is Scope.CHIP_LOCAL and back == ann and back.hints == ann.hints
    with pytest.raises(EncodingError):
        encode_beacon(_ann(hints={"pad": "x" * BEACON_MAX}), Scope.CHIP_LOCAL)


def test_bye_carries_no_hints():
    assert Announcement("A1", "n", 1, TopicKey.local("t"), Role.PUBLISHER, Kind.BYE, {"a": 1}).hints == {}


class FakeClock:
    def __init__(self):
        self.t = 0

    def __call__(self):
        return self.t


def test_liveness_timeout_with_fake_clock():
    clock = FakeClock()
    view = TopologyView(liveness_timeout_ns=1_500_000_000, clock=clock)
    process_beacon(encode_beacon(_ann(), Scope.CHIP_LOCAL), view)
    assert len(view) == 1
    clock.t = 1_500_000_000
    assert len(view) == 1        # exactly at the limit: still live
    clock.t += 1
    assert len(view) == 0
    process_beacon(encode_beacon(_ann(), Scope.CHIP_LOCAL), view)   # re-announce revives
    assert len(view) == 1


def test_bye_removes_and_garbage_is_counted():
    view = TopologyView(10**9)
    process_beacon(encode_beacon(_ann(), Scope.CHIP_LOCAL), view)
    process_beacon(encode_beacon(_ann(kind=Kind.BYE), Scope.CHIP_LOCAL), view)
    assert len(view) == 0
    process_beacon(b"\x00garbage", view)
    assert view.malformed == 1


def test_entries_filters():
    view = TopologyView(10**9)
    view.upsert(_ann(), Scope.CHIP_LOCAL)
    view.upsert(_ann(role=Role.SUBSCRIBER, chip="B1", pid=2), Scope.CHIP_LOCAL)
    assert [a.chip for a in view.entries(role=Role.SUBSCRIBER)] == ["B1"]
    assert view.entries(chip="A1", role=Role.SUBSCRIBER) == []


def test_resolve_route_needs_both_sides():
    view = TopologyView(10**9)
    pub = _ann(hints={"shm": "seg"})
    sub = _ann(role=Role.SUBSCRIBER, chip="B1", pid=2)
    view.upsert(pub, Scope.CHIP_LOCAL)
    with pytest.raises(RouteUnavailable):
        resolve_route(view, pub.key, sub.key, SizeClass.SMALL, False)
    view.upsert(sub, Scope.CHIP_LOCAL)
    d = resolve_route(view, pub.key, sub.key, SizeClass.LARGE, True)
    assert d.transport is Transport.BRIDGED_STREAM and d.hints == {"shm": "seg"}


def _sniff(segment, seconds):
    sock = _net.multicast_receiver(segment.group, segment.port, segment.interface, timeout=0.05)
    seen = []
    end = time.monotonic() + seconds
    while time.monotonic() < end:
        try:
            raw, _ = sock.recvfrom(2048)
        except TimeoutError:
            continue
        seen.append(decode_beacon(raw))
    sock.close()
    return seen


def test_scope_isolation_on_the_wire(make_cfg):
    a1 = make_cfg("A1")
    p = Participant(a1, pid=4242)
    try:
        p.add("cam", TopicKey.local("raw"), Role.PUBLISHER)
        p.add("cam", TopicKey.vehicle("objects"), Role.PUBLISHER)
        import threading
        results = {}

        def sniff(key, seg):
            results[key] = _sniff(seg, 0.6)

        threads = [threading.Thread(target=sniff, args=(k, s)) for k, s in
                   (("va", vehicle_segment(a1)), ("a1", local_segment(a1)), ("a2", local_segment(a1, "A2")))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        p.close()
    va_topics = {a.topic for _, a in results["va"]}
    a1_topics = {a.topic for _, a in results["a1"]}
    assert TopicKey.vehicle("objects") in va_topics
    assert all(t.scope is Scope.VEHICLE_AREA for t in va_topics)
    assert all(level is Scope.VEHICLE_AREA for level, _ in results["va"])
    assert TopicKey.local("raw") in a1_topics
    assert results["a2"] == []


def test_participants_discover_each_other_and_say_bye(make_cfg):
    a = Participant(make_cfg("A1"), pid=1)
    b = Participant(make_cfg("B1"), pid=2)
    topic = TopicKey.vehicle("lidar")
    try:
        a.add("pub", topic, Role.PUBLISHER)
        b.add("sub", topic, Role.SUBSCRIBER)
        assert a.view.wait_for(lambda v: v.entries(topic, Role.SUBSCRIBER, chip="B1"), 2.0)
        assert b.view.wait_for(lambda v: v.entries(topic, Role.PUBLISHER, chip="A1"), 2.0)
        b.remove(("B1", "sub", topic, Role.SUBSCRIBER))
        assert a.view.wait_for(lambda v: not v.entries(topic, Role.SUBSCRIBER), 2.0)
    finally:
        a.close()
        b.close()


def test_chip_local_topics_stay_on_their_chip(make_cfg):
    a1 = Participant(make_cfg("A1"), pid=1)
    a2 = Participant(make_cfg("A2"), pid=2)
    try:
        a1.add("n", TopicKey.local("private"), Role.PUBLISHER)
        a1.add("n", TopicKey.vehicle("shared"), Role.PUBLISHER)
        a2.add("m", TopicKey.vehicle("shared"), Role.SUBSCRIBER)   # joins the vehicle segment
        assert a2.view.wait_for(lambda v: v.entries(TopicKey.vehicle("shared")), 2.0)
        time.sleep(0.3)
        assert a2.view.entries(TopicKey.local("private")) == []
    finally:
        a1.close()
        a2.close()
