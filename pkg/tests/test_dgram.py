import random
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import delivery_probability, fragments_needed
from rimbus.core import MessageEnvelope, TopicKey, encode_envelope, encoded_len, parse_size
from rimbus.dgram import (FRAG, DatagramEndpoint, FragmentHeader, LossInjector, Reassembler, SendError,
                          dgram_recv, dgram_send, fragment, fragment_count, send_fanout)

TOPIC = TopicKey.vehicle("lidar")
CAP = 61440


def frame_of(size, seq=0, seed=0):
    payload = random.Random(seed).randbytes(size)
    return encode_envelope(MessageEnvelope(TOPIC, seq, 123, payload)), payload


@pytest.mark.parametrize("size,expected", [("6MB", 103), ("100KB", 2), ("1MB", 18), ("1KB", 1)])
def test_fragment_counts(size, expected):
    n = encoded_len(MessageEnvelope(TOPIC, 0, 0, bytes(parse_size(size))))
    assert fragment_count(n, CAP) == fragments_needed(n, CAP) == expected


def test_fragment_header_bounds():
    with pytest.raises(ValueError):
        FragmentHeader(1, 3, 3)
    fh = FragmentHeader(9, 2, 3, 1000)
    assert FragmentHeader.unpack(fh.pack()) == fh


@settings(max_examples=200, deadline=None)
@given(size=st.integers(0, 20000), cap=st.integers(64, 4096), seed=st.integers(0, 2**32),
       dup=st.integers(0, 5))
def test_reassembly_any_order_with_duplicates(size, cap, seed, dup):
    frame, payload = frame_of(size, seed=seed)
    frags = fragment(frame, 5, cap)
    rng = random.Random(seed)
    frags = frags + [rng.choice(frags) for _ in range(dup)]
    rng.shuffle(frags)
    r = Reassembler()
    out = [e for e in (r.feed("peer", f) for f in frags) if e is not None]
    assert len(out) == 1 and out[0].payload == payload
    assert r.pending == {} and r.buffered == 0


def test_missing_fragment_expires_and_late_pieces_are_ignored():
    clock = [0.0]
    r = Reassembler(timeout_s=0.2, clock=lambda: clock[0])
    frags = fragment(frame_of(5000)[0], 1, 1000)
    for f in frags[:-1]:
        assert r.feed("p", f) is None
    clock[0] = 0.2
    assert r.expire() == 0
    clock[0] = 0.21
    assert r.expire() == 1
    assert r.feed("p", frags[-1]) is None
    assert r.expired == 1 and r.duplicates == 1 and r.buffered == 0


def test_senders_do_not_mix():
    frame_a, pa = frame_of(3000, seed=1)
    frame_b, pb = frame_of(3000, seed=2)
    r = Reassembler()
    fa, fb = fragment(frame_a, 0, 1000), fragment(frame_b, 0, 1000)
    got = []
    for x, y in zip(fa, fb):
        got += [r.feed("a", x), r.feed("b", y)]
    assert [e.payload for e in got if e] == [pa, pb]


def test_cap_evicts_oldest_partial():
    r = Reassembler(cap_bytes=10000)
    f1 = fragment(frame_of(6000, seed=1)[0], 1, 1000)
    f2, p2 = frame_of(6000, seed=2)
    f2 = fragment(f2, 2, 1000)
    r.feed("p", f1[0])
    for f in f2:
        env = r.feed("p", f)
    assert env.payload == p2 and r.evicted == 1


def test_corrupt_payload_is_dropped():
    frame, _ = frame_of(3000)
    frame = bytearray(frame)
    frame[-1] ^= 1
    r = Reassembler()
    assert all(r.feed("p", f) is None for f in fragment(bytes(frame), 0, 1000))
    assert r.checksum_drops == 1


def test_loss_simulation_matches_analytic():
    frags = fragments_needed(encoded_len(MessageEnvelope(TOPIC, 0, 0, bytes(parse_size("6MB")))), CAP)
    inj = LossInjector(0.01, seed=42)
    trials = 10_000
    ok = sum(all(not inj.drop() for _ in range(frags)) for _ in range(trials))
    expected = delivery_probability(0.01, frags)
    assert abs(expected - 0.99 ** 103) < 1e-12
    assert abs(ok / trials - expected) <= 0.03


def test_loss_injector_validation_and_seeds():
    with pytest.raises(ValueError):
        LossInjector(1.5)
    a, b = LossInjector(0.3, seed="x"), LossInjector(0.3, seed="x")
    assert [a.drop() for _ in range(100)] == [b.drop() for _ in range(100)]


def test_loopback_six_megabytes():
    rx, q = dgram_recv()
    ep = DatagramEndpoint(("127.0.0.1", rx.port), CAP)
    try:
        payload = random.Random(3).randbytes(parse_size("6MB"))
        assert dgram_send(ep, MessageEnvelope(TOPIC, 7, 1, payload)) == 103
        env = q.get(timeout=5.0)
        assert env is not None and env.payload == payload and env.seq == 7
    finally:
        ep.close()
        rx.close()


def test_total_loss_delivers_nothing():
    rx, q = dgram_recv()
    ep = DatagramEndpoint(("127.0.0.1", rx.port), CAP, loss=LossInjector(1.0))
    try:
        for i in range(5):
            dgram_send(ep, MessageEnvelope(TOPIC, i, 1, b"x" * 100))
        assert q.get(timeout=0.3) is None
        assert ep.loss.dropped == 5 and ep.datagrams_sent == 0
    finally:
        ep.close()
        rx.close()


class RecordingEndpoint(DatagramEndpoint):
    log: list = []

    def __init__(self, name, fail_at=None):
        super().__init__(("127.0.0.1", 9), 1000)
        self.name = name
        self.fail_at = fail_at

    def send_datagram(self, dg):
        fh = FragmentHeader.unpack(dg)
        if fh.frag_index == self.fail_at:
            raise SendError("boom")
        self.log.append((self.name, fh.frag_index))


def test_fanout_is_fragment_major_and_isolates_failures():
    RecordingEndpoint.log = []
    eps = [RecordingEndpoint("a"), RecordingEndpoint("b", fail_at=1), RecordingEndpoint("c")]
    frame, _ = frame_of(2500)
    failed = send_fanout(eps, frame)
    assert [ep.name for ep, _ in failed] == ["b"]
    assert RecordingEndpoint.log == [("a", 0), ("b", 0), ("c", 0), ("a", 1), ("c", 1), ("a", 2), ("c", 2)]
    assert [ep.messages_sent for ep in eps] == [1, 0, 1]
    for ep in eps:
        ep.close()


def test_unreachable_peer_send_error_keeps_others():
    rx, q = dgram_recv()
    good = DatagramEndpoint(("127.0.0.1", rx.port), CAP)
    bad = DatagramEndpoint(("127.0.0.1", rx.port), CAP)
    bad.sock.close()
    try:
        failed = send_fanout([bad, good], frame_of(100)[0])
        assert failed and failed[0][0] is bad and isinstance(failed[0][1], SendError)
        assert q.get(timeout=2.0) is not None
    finally:
        good.close()
        rx.close()


def test_fragment_header_size():
    assert FRAG.size == 16


def test_shaper_paces_fragments():
    from rimbus.link import LinkShaper
    shaper = LinkShaper(100.0)          # 12.5 MB/s
    rx, q = dgram_recv()
    ep = DatagramEndpoint(("127.0.0.1", rx.port), CAP, shaper=shaper)
    try:
        t0 = time.perf_counter()
        dgram_send(ep, MessageEnvelope(TOPIC, 0, 0, bytes(parse_size("1MB"))))
        took = time.perf_counter() - t0
        assert took >= 1048576 / 12.5e6 * 0.9
    finally:
        ep.close()
        rx.close()
