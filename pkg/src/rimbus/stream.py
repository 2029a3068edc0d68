"""Reliable framed stream transport: one TCP channel per (topic, chip pair, lane).

Wire format: each frame is ``len u32 (little-endian) | encoded envelope``.
A connection opens with a 12-byte hello in both directions::

    b"RIMS" | channel_id u32 | lane u8 | version u8 | reserved u16
"""

from __future__ import annotations

import enum
import logging
import queue
import socket
import struct
import threading
import zlib
from typing import Callable

from rimbus.core import (DEFAULT_MAX_PAYLOAD, FIXED_HEADER_LEN, EncodingError, MessageEnvelope,
                         RimbusError, SystemConfig, TopicKey, decode_envelope, encode_envelope,
                         verify_frame)
from rimbus.link import Lane, LinkShaper

log = logging.getLogger(__name__)

LEN = struct.Struct("<I")
HELLO = struct.Struct("<4sIBBH")
HELLO_MAGIC = b"RIMS"
STREAM_VERSION = 1
CHUNK = 64 * 1024
BACKOFF_MIN = 0.1
BACKOFF_MAX = 3.0


class HandshakeError(RimbusError):
    pass


class OversizeFrame(RimbusError):
    pass


class State(enum.Enum):
    CONNECTING = "Connecting"
    ESTABLISHED = "Established"
    CLOSED = "Closed"
    FAILED = "Failed"


def channel_id(topic: TopicKey) -> int:
    return zlib.crc32(f"{int(topic.scope)}:{topic.name}".encode()) & 0xFFFFFFFF


def stream_port(cfg: SystemConfig, topic: TopicKey, dest_chip: str, lane: Lane | str) -> int:
    """Stable port: base + (dest index * topics + topic index) * 2 + lane index."""
    lane = Lane.parse(lane)
    topics = sorted({r.topic for r in cfg.routes()})
    if topic not in topics:
        raise RimbusError(f"{topic} has no bridge route")
    return cfg.stream_base_port + (cfg.chip_index(dest_chip) * len(topics) + topics.index(topic)) * 2 + lane.index


def encode_frame(env: MessageEnvelope, max_payload: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    raw = encode_envelope(env, max_payload)
    return LEN.pack(len(raw)) + raw


def _recv_exact(sock: socket.socket, n: int, buf: bytearray | None = None) -> bytearray | None:
    buf = buf if buf is not None else bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:n])
        if k == 0:
            return None
        got += k
    return buf


def read_frame(sock: socket.socket, max_frame: int) -> bytearray | None:
    """Read one length-prefixed frame; None on clean EOF; OversizeFrame if over limit."""
    head = _recv_exact(sock, LEN.size)
    if head is None:
        return None
    (n,) = LEN.unpack(head)
    if n > max_frame:
        raise OversizeFrame(f"frame of {n} bytes exceeds max {max_frame}")
    if n < FIXED_HEADER_LEN:
        raise EncodingError(f"frame of {n} bytes is shorter than an envelope header")
    return _recv_exact(sock, n)


class StreamListener:
    """Receiving end of one channel.  Verified frames are handed to ``on_frame``.

    A checksum or framing error resets the connection: mid-stream corruption
    cannot be resynchronized.
    """

    def __init__(self, port: int, chan_id: int, lane: Lane, on_frame: Callable[[memoryview], None],
                 host: str = "127.0.0.1", max_payload: int = DEFAULT_MAX_PAYLOAD):
        self.chan_id = chan_id
        self.lane = lane
        self.on_frame = on_frame
        self.max_payload = max_payload
        self.max_frame = max_payload + FIXED_HEADER_LEN + 256
        self.frames = 0
        self.bytes = 0
        self.resets = 0
        self.oversize = 0
        self.handshake_failures = 0
        self.connections = 0
        self.state = State.CONNECTING
        self._srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._srv.bind((host, port))
        self._srv.listen(4)
        self._srv.settimeout(0.2)
        self.port = self._srv.getsockname()[1]
        self._stop = threading.Event()
        self._conn: socket.socket | None = None
        self._thread = threading.Thread(target=self._accept_loop, daemon=True, name=f"rimbus-stream-rx-{self.port}")
        self._thread.start()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._srv.accept()
            except TimeoutError:
                continue
            except OSError:
                break
            conn.setsockopt(socket.SOL_SOCKET, socket.SO_KEEPALIVE, 1)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            try:
                conn.settimeout(2.0)
                hello = _recv_exact(conn, HELLO.size)
                magic, cid, lane, version, _ = HELLO.unpack(hello) if hello else (b"", 0, 0, 0, 0)
                if magic != HELLO_MAGIC or cid != self.chan_id or lane != self.lane.index or version != STREAM_VERSION:
                    self.handshake_failures += 1
                    conn.close()
                    continue
                conn.sendall(HELLO.pack(HELLO_MAGIC, self.chan_id, self.lane.index, STREAM_VERSION, 0))
                conn.settimeout(None)
            except OSError:
                conn.close()
                continue
            self.connections += 1
            self._conn = conn
            self.state = State.ESTABLISHED
            self._serve(conn)
            self._conn = None
            if not self._stop.is_set():
                self.state = State.CONNECTING

    def _serve(self, conn: socket.socket) -> None:
        try:
            while not self._stop.is_set():
                try:
                    frame = read_frame(conn, self.max_frame)
                except TimeoutError:
                    continue
                if frame is None:
                    return
                try:
                    verify_frame(frame, self.max_payload)
                except EncodingError as exc:
                    self.resets += 1
                    log.warning("stream channel %08x reset: %s", self.chan_id, exc)
                    return
                self.frames += 1
                self.bytes += len(frame) + LEN.size
                try:
                    self.on_frame(memoryview(frame))
                except Exception:
                    log.exception("stream frame handler failed")
        except OversizeFrame as exc:
            self.oversize += 1
            log.warning("stream channel %08x rejected: %s", self.chan_id, exc)
        except (OSError, EncodingError):
            pass
        finally:
            conn.close()

    def close(self) -> None:
        self._stop.set()
        self.state = State.CLOSED
        try:
            self._srv.close()
        except OSError:
            pass
        if self._conn is not None:
            try:
                self._conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self._thread.join(timeout=2)


class StreamSender:
    """Sending end of one channel.

    Frames pass through a bounded queue to a single writer thread that owns
    the connection and its reconnect loop.  A frame is always written whole.
    ``send`` blocks while the queue is full, at most ``send_timeout``; after
    that the frame is dropped as a slow-peer drop and the channel lives on.
    """

    def __init__(self, addr: tuple[str, int], chan_id: int, lane: Lane,
                 shaper: LinkShaper | None = None, send_timeout: float = 5.0, depth: int = 32,
                 connect_timeout: float = 1.0):
        self.addr = addr
        self.chan_id = chan_id
        self.lane = lane
        self.shaper = shaper
        self.send_timeout = send_timeout
        self.connect_timeout = connect_timeout
        self.frames_sent = 0
        self.bytes_sent = 0
        self.slow_drops = 0
        self.down_drops = 0
        self.broken = 0
        self.reconnects = 0
        self.state = State.CONNECTING
        self.error: Exception | None = None
        self._q: queue.Queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._established = threading.Event()
        self._sock: socket.socket | None = None
        self._thread = threading.Thread(target=self._writer, daemon=True, name=f"rimbus-stream-tx-{addr[1]}")
        self._thread.start()

    def wait_established(self, timeout: float) -> bool:
        return self._established.wait(timeout)

    def send(self, frame: bytes) -> bool:
        """Queue one length-prefixed frame.  False if it was dropped."""
        if self.state is not State.ESTABLISHED:
            self.down_drops += 1
            return False
        try:
            self._q.put(frame, timeout=self.send_timeout)
            return True
        except queue.Full:
            self.slow_drops += 1
            return False

    def _connect(self) -> socket.socket | None:
        backoff = BACKOFF_MIN
        while not self._stop.is_set():
            try:
                s = socket.create_connection(self.addr, timeout=self.connect_timeout)
                s.setsockopt(socket.SOL_SOCKET, socket.SO_KEEPALIVE, 1)
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                s.sendall(HELLO.pack(HELLO_MAGIC, self.chan_id, self.lane.index, STREAM_VERSION, 0))
                reply = _recv_exact(s, HELLO.size)
                if reply is None:
                    s.close()
                    raise ConnectionResetError("peer closed during handshake")
                magic, cid, lane, version, _ = HELLO.unpack(reply)
                if magic != HELLO_MAGIC or cid != self.chan_id or lane != self.lane.index:
                    s.close()
                    raise HandshakeError(f"handshake mismatch from {self.addr}: {magic!r} {cid:08x}")
                s.settimeout(None)
                return s
            except HandshakeError as exc:
                self.error = exc
                self.state = State.FAILED
                log.error("%s", exc)
                return None
            except OSError:
                if self._stop.wait(backoff):
                    return None
                backoff = min(backoff * 2, BACKOFF_MAX)
        return None

    def _writer(self) -> None:
        while not self._stop.is_set():
            sock = self._connect()
            if sock is None:
                return
            self._sock = sock
            self.state = State.ESTABLISHED
            self._established.set()
            try:
                while not self._stop.is_set():
                    try:
                        frame = self._q.get(timeout=0.2)
                    except queue.Empty:
                        continue
                    self._write(sock, frame)
                    self.frames_sent += 1
            except OSError as exc:
                self.broken += 1
                log.info("stream channel %08x to %s broken: %s", self.chan_id, self.addr, exc)
            finally:
                self._established.clear()
                self._sock = None
                sock.close()
            if not self._stop.is_set():
                self.state = State.CONNECTING
                self.reconnects += 1

    def _write(self, sock: socket.socket, frame) -> None:
        view = memoryview(frame)
        if self.shaper is None:
            sock.sendall(view)
            self.bytes_sent += len(view)
            return
        for i in range(0, len(view), CHUNK):
            part = view[i:i + CHUNK]
            self.shaper.transmit(len(part))
            sock.sendall(part)
            self.bytes_sent += len(part)

    def close(self) -> None:
        self._stop.set()
        self.state = State.CLOSED
        s = self._sock
        if s is not None:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self._thread.join(timeout=2)


def stream_listen(cfg: SystemConfig, topic: TopicKey, lane: Lane | str,
                  on_frame: Callable[[memoryview], None], port: int | None = None) -> StreamListener:
    lane = Lane.parse(lane)
    port = stream_port(cfg, topic, cfg.chip_id, lane) if port is None else port
    return StreamListener(port, channel_id(topic), lane, on_frame, max_payload=cfg.max_payload_bytes)


def stream_connect(cfg: SystemConfig, topic: TopicKey, lane: Lane | str, dest_chip: str,
                   shaper: LinkShaper | None = None, port: int | None = None) -> StreamSender:
    lane = Lane.parse(lane)
    port = stream_port(cfg, topic, dest_chip, lane) if port is None else port
    return StreamSender(("127.0.0.1", port), channel_id(topic), lane, shaper,
                        cfg.send_timeout_ms / 1000.0, cfg.stream_queue_depth)


def stream_send(ch: StreamSender, env: MessageEnvelope) -> bool:
    return ch.send(encode_frame(env))


def stream_recv(port: int, chan_id: int, lane: Lane = Lane.ETHERNET, **kw):
    """Listener whose verified frames are decoded into a queue of envelopes."""
    from rimbus.shm import BoundedQueue

    q = BoundedQueue(depth=1 << 16)
    rx = StreamListener(port, chan_id, lane, lambda f: q.put(decode_envelope(f)), **kw)
    return rx, q
