import socket
import threading
import time

from rimbus.core import MessageEnvelope, TopicKey, encode_envelope
from rimbus.link import Lane
from rimbus.stream import (HELLO, HELLO_MAGIC, LEN, STREAM_VERSION, State, StreamListener, StreamSender,
                           channel_id, encode_frame, stream_recv, stream_send)

TOPIC = TopicKey.vehicle("lidar")
CID = channel_id(TOPIC)


def wait_until(pred, timeout=5.0):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if pred():
            return True
        time.sleep(0.01)
    return False


def env(seq, size=100):
    return MessageEnvelope(TOPIC, seq, 1, bytes([seq & 0xFF]) * size)


def raw_client(port, cid=CID, lane=Lane.ETHERNET):
    s = socket.create_connection(("127.0.0.1", port), timeout=2)
    s.sendall(HELLO.pack(HELLO_MAGIC, cid, lane.index, STREAM_VERSION, 0))
    return s


def test_round_trip_in_order():
    rx, q = stream_recv(0, CID)
    tx = StreamSender(("127.0.0.1", rx.port), CID, Lane.ETHERNET)
    try:
        assert tx.wait_established(3.0)
        for i in range(50):
            assert stream_send(tx, env(i, 10_000))
        got = [q.get(timeout=3.0) for _ in range(50)]
        assert [e.seq for e in got] == list(range(50))
        assert all(e.payload == env(e.seq, 10_000).payload for e in got)
        assert rx.state is State.ESTABLISHED
    finally:
        tx.close()
        rx.close()


def test_listener_rejects_wrong_channel():
    rx, _ = stream_recv(0, CID)
    try:
        s = raw_client(rx.port, cid=CID ^ 1)
        assert s.recv(64) == b""
        s.close()
        assert wait_until(lambda: rx.handshake_failures == 1)
    finally:
        rx.close()


def test_sender_fails_on_mismatched_reply():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)

    def fake():
        c, _ = srv.accept()
        c.recv(HELLO.size)
        c.sendall(HELLO.pack(HELLO_MAGIC, CID ^ 7, 0, STREAM_VERSION, 0))
        time.sleep(0.5)
        c.close()

    threading.Thread(target=fake, daemon=True).start()
    tx = StreamSender(srv.getsockname(), CID, Lane.ETHERNET)
    try:
        assert wait_until(lambda: tx.state is State.FAILED)
        assert not tx.send(encode_frame(env(0)))
        assert tx.down_drops == 1
    finally:
        tx.close()
        srv.close()


def test_corrupt_frame_resets_connection():
    rx, q = stream_recv(0, CID)
    try:
        s = raw_client(rx.port)
        assert s.recv(HELLO.size)
        good = encode_envelope(env(0))
        bad = bytearray(encode_envelope(env(1)))
        bad[-1] ^= 0xFF
        s.sendall(LEN.pack(len(good)) + good + LEN.pack(len(bad)) + bytes(bad))
        assert q.get(timeout=2.0).seq == 0
        s.settimeout(2.0)
        assert s.recv(64) == b""
        assert rx.resets == 1 and rx.frames == 1
        s.close()
    finally:
        rx.close()


def test_oversize_frame_rejected():
    rx = StreamListener(0, CID, Lane.ETHERNET, lambda f: None, max_payload=1000)
    try:
        s = raw_client(rx.port)
        s.recv(HELLO.size)
        s.sendall(LEN.pack(10_000_000))
        s.settimeout(2.0)
        assert s.recv(64) == b""
        assert wait_until(lambda: rx.oversize == 1)
        s.close()
    finally:
        rx.close()


def test_send_while_down_counts_down_drops():
    port = socket.socket()
    port.bind(("127.0.0.1", 0))
    addr = port.getsockname()
    port.close()           # nothing listening
    tx = StreamSender(addr, CID, Lane.ETHERNET)
    try:
        assert not tx.send(encode_frame(env(0)))
        assert tx.down_drops == 1 and tx.state is State.CONNECTING
    finally:
        tx.close()


def test_slow_peer_drops_without_killing_channel():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    conns = []

    def stuck():
        c, _ = srv.accept()
        c.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4096)
        c.recv(HELLO.size)
        c.sendall(HELLO.pack(HELLO_MAGIC, CID, 0, STREAM_VERSION, 0))
        conns.append(c)            # never reads again

    threading.Thread(target=stuck, daemon=True).start()
    tx = StreamSender(srv.getsockname(), CID, Lane.ETHERNET, send_timeout=0.05, depth=2)
    try:
        assert tx.wait_established(3.0)
        frame = encode_frame(env(0, 1 << 20))
        for _ in range(200):
            tx.send(frame)
            if tx.slow_drops:
                break
        assert tx.slow_drops > 0
        assert tx.state is State.ESTABLISHED
    finally:
        tx.close()
        for c in conns:
            c.close()
        srv.close()


def test_reconnects_after_listener_restart():
    rx, q = stream_recv(0, CID)
    port = rx.port
    tx = StreamSender(("127.0.0.1", port), CID, Lane.ETHERNET)
    try:
        assert tx.wait_established(3.0)
        stream_send(tx, env(0))
        assert q.get(timeout=2.0).seq == 0
        rx.close()
        rx, q = stream_recv(port, CID)
        ok = False
        for i in range(1, 200):
            stream_send(tx, env(i))
            got = q.get(timeout=0.05)
            if got is not None:
                ok = True
                break
        assert ok and tx.reconnects >= 1
    finally:
        tx.close()
        rx.close()
