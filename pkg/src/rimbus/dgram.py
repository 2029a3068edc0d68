"""Best-effort datagram transport for small cross-chip messages.

Envelopes larger than the datagram cap are cut into fragments and sent
back-to-back.  There is deliberately no retransmission, NACK or pacing:
losing any one fragment loses the whole message, which is the large-message
fragility this transport exists to exhibit.  Do not add reliability here.
"""

from __future__ import annotations

import logging
import math
import random
import socket
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable

from rimbus import _net
from rimbus.core import (EncodingError, MessageEnvelope, RimbusError, decode_envelope,
                         encode_envelope, DEFAULT_MAX_PAYLOAD)
from rimbus.link import LinkShaper

log = logging.getLogger(__name__)

FRAG = struct.Struct("<QHHI")  # msg_seq u64 | frag_index u16 | frag_count u16 | total_len u32
MAX_DATAGRAM = 65507
REASSEMBLY_CAP = 64 << 20


class SendError(RimbusError):
    def __init__(self, msg: str, errno: int | None = None):
        super().__init__(msg)
        self.errno = errno


@dataclass(frozen=True)
class FragmentHeader:
    msg_seq: int
    frag_index: int
    frag_count: int
    total_len: int = 0

    def __post_init__(self):
        if not 0 <= self.frag_index < self.frag_count:
            raise ValueError(f"frag_index {self.frag_index} outside [0, {self.frag_count})")

    def pack(self) -> bytes:
        return FRAG.pack(self.msg_seq, self.frag_index, self.frag_count, self.total_len)

    @classmethod
    def unpack(cls, buf) -> FragmentHeader:
        return cls(*FRAG.unpack_from(buf, 0))


def fragment_count(frame_len: int, cap: int) -> int:
    return max(1, math.ceil(frame_len / cap))


def fragment(frame: bytes, msg_seq: int, cap: int) -> list[bytes]:
    if cap + FRAG.size > MAX_DATAGRAM:
        raise ValueError(f"cap {cap} leaves no room for the fragment header")
    count = fragment_count(len(frame), cap)
    if count > 0xFFFF:
        raise EncodingError(f"{len(frame)}-byte frame needs {count} fragments (max 65535)")
    view = memoryview(frame)
    return [FRAG.pack(msg_seq, i, count, len(frame)) + view[i * cap:(i + 1) * cap]
            for i in range(count)]


class LossInjector:
    """Drops each outgoing datagram with probability ``rate``; reproducible per seed."""

    def __init__(self, rate: float, seed: int = 0):
        if not 0.0 <= rate <= 1.0:
            raise ValueError("loss rate must be within [0, 1]")
        self.rate = rate
        self.rng = random.Random(seed)
        self.dropped = 0
        self.passed = 0

    def drop(self) -> bool:
        if self.rate <= 0.0:
            self.passed += 1
            return False
        hit = self.rng.random() < self.rate
        if hit:
            self.dropped += 1
        else:
            self.passed += 1
        return hit


def loss_injector(rate: float, seed: int = 0) -> LossInjector:
    return LossInjector(rate, seed)


class DatagramEndpoint:
    """Sending side toward one peer (one per publisher, topic and peer)."""

    def __init__(self, peer: tuple[str, int], max_datagram: int = 61440,
                 shaper: LinkShaper | None = None, loss: LossInjector | None = None):
        if max_datagram + FRAG.size > MAX_DATAGRAM:
            raise ValueError(f"max datagram {max_datagram} too large")
        self.peer = peer
        self.cap = max_datagram
        self.shaper = shaper
        self.loss = loss
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        _net.grow_buffer(self.sock, 8 << 20, send=True)
        self.sock.connect(peer)
        self.port = self.sock.getsockname()[1]
        self.datagrams_sent = 0
        self.bytes_sent = 0
        self.messages_sent = 0
        self._msg_seq = 0
        self._lock = threading.Lock()

    def take_seq(self) -> int:
        with self._lock:
            seq = self._msg_seq
            self._msg_seq += 1
            return seq

    def send_datagram(self, dg) -> None:
        if self.shaper is not None:
            self.shaper.transmit(len(dg))
        if self.loss is not None and self.loss.drop():
            return
        try:
            self.sock.send(dg)
        except OSError as exc:
            raise SendError(f"send to {self.peer} failed: {exc}", exc.errno) from exc
        self.datagrams_sent += 1
        self.bytes_sent += len(dg)

    def send_frame(self, frame: bytes) -> int:
        """Send one encoded envelope; returns the number of datagrams it took."""
        failed = send_fanout([self], frame)
        if failed:
            raise failed[0][1]
        return fragment_count(len(frame), self.cap)

    def close(self) -> None:
        self.sock.close()


def send_fanout(endpoints: list[DatagramEndpoint], frame) -> list[tuple[DatagramEndpoint, SendError]]:
    """Send one frame to several peers, fragment-major: fragment i reaches every
    peer before fragment i+1 is sent to anyone.  A failing peer is dropped
    from the rest of this frame; the others carry on.  Returns the failures.
    """
    if not endpoints:
        return []
    cap = min(ep.cap for ep in endpoints)
    count = fragment_count(len(frame), cap)
    if count > 0xFFFF:
        raise EncodingError(f"{len(frame)}-byte frame needs {count} fragments (max 65535)")
    view = memoryview(frame)
    live = [(ep, ep.take_seq()) for ep in endpoints]
    failed = []
    for i in range(count):
        chunk = view[i * cap:(i + 1) * cap]
        for ep, seq in list(live):
            try:
                ep.send_datagram(FRAG.pack(seq, i, count, len(frame)) + chunk)
            except SendError as exc:
                failed.append((ep, exc))
                live.remove((ep, seq))
    for ep, _ in live:
        ep.messages_sent += 1
    return failed


def dgram_send(ep: DatagramEndpoint, env: MessageEnvelope) -> int:
    return ep.send_frame(encode_envelope(env))


@dataclass
class _Assembly:
    buf: bytearray
    count: int
    seen: set = field(default_factory=set)
    last: float = 0.0


class Reassembler:
    """Index-based reassembly keyed by (sender, msg_seq).  At-most-once delivery."""

    def __init__(self, timeout_s: float = 0.2, cap_bytes: int = REASSEMBLY_CAP,
                 max_payload: int = DEFAULT_MAX_PAYLOAD, clock: Callable[[], float] = time.monotonic):
        self.timeout_s = timeout_s
        self.cap_bytes = cap_bytes
        self.max_payload = max_payload
        self.clock = clock
        self.pending: OrderedDict[tuple, _Assembly] = OrderedDict()
        self.buffered = 0
        self.completed = 0
        self.expired = 0
        self.evicted = 0
        self.checksum_drops = 0
        self.malformed = 0
        self.duplicates = 0
        self._done: OrderedDict[tuple, None] = OrderedDict()

    @property
    def drops(self) -> int:
        return self.expired + self.evicted + self.checksum_drops

    def feed(self, sender, datagram) -> MessageEnvelope | None:
        now = self.clock()
        view = memoryview(datagram)
        try:
            fh = FragmentHeader.unpack(view)
        except (struct.error, ValueError):
            self.malformed += 1
            return None
        key = (sender, fh.msg_seq)
        if key in self._done:
            self.duplicates += 1
            return None
        piece = view[FRAG.size:]
        if fh.frag_count == 1:
            return self._finish(key, piece)
        asm = self.pending.get(key)
        if asm is None:
            if fh.total_len > self.max_payload + 4096:
                self.malformed += 1
                return None
            self._make_room(fh.total_len)
            asm = _Assembly(bytearray(fh.total_len), fh.frag_count)
            self.pending[key] = asm
            self.buffered += fh.total_len
        if fh.frag_count != asm.count:
            self.malformed += 1
            return None
        asm.last = now
        if fh.frag_index in asm.seen:
            self.duplicates += 1
            return None
        cap = len(piece) if fh.frag_index < fh.frag_count - 1 else None
        if cap is None:
            start = fh.total_len - len(piece)
        else:
            start = fh.frag_index * cap
        if start < 0 or start + len(piece) > fh.total_len:
            self.malformed += 1
            return None
        asm.buf[start:start + len(piece)] = piece
        asm.seen.add(fh.frag_index)
        if len(asm.seen) == asm.count:
            del self.pending[key]
            self.buffered -= len(asm.buf)
            return self._finish(key, asm.buf)
        return None

    def _finish(self, key, frame) -> MessageEnvelope | None:
        self._done[key] = None
        while len(self._done) > 4096:
            self._done.popitem(last=False)
        try:
            env = decode_envelope(frame, self.max_payload)
        except EncodingError:
            self.checksum_drops += 1
            return None
        self.completed += 1
        return env

    def _make_room(self, need: int) -> None:
        while self.pending and self.buffered + need > self.cap_bytes:
            key, asm = self.pending.popitem(last=False)
            self.buffered -= len(asm.buf)
            self._done[key] = None
            self.evicted += 1

    def expire(self) -> int:
        now = self.clock()
        stale = [k for k, a in self.pending.items() if now - a.last > self.timeout_s]
        for k in stale:
            asm = self.pending.pop(k)
            self.buffered -= len(asm.buf)
            self._done[k] = None
            self.expired += 1
        return len(stale)


class DatagramReceiver:
    """Bound socket plus one receive loop; completed envelopes go to ``on_message``."""

    def __init__(self, on_message: Callable[[MessageEnvelope], None], port: int = 0,
                 host: str = "127.0.0.1", reassembly_timeout_s: float = 0.2,
                 max_payload: int = DEFAULT_MAX_PAYLOAD, rcvbuf: int = 64 << 20):
        self.on_message = on_message
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.rcvbuf = _net.grow_buffer(self.sock, rcvbuf)
        self.sock.bind((host, port))
        self.sock.settimeout(0.05)
        self.port = self.sock.getsockname()[1]
        self.asm = Reassembler(reassembly_timeout_s, max_payload=max_payload)
        self.datagrams = 0
        self.bytes = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True, name=f"rimbus-dgram-{self.port}")
        self._thread.start()

    def _loop(self) -> None:
        buf = bytearray(MAX_DATAGRAM + 64)
        view = memoryview(buf)
        last_sweep = time.monotonic()
        while not self._stop.is_set():
            try:
                n, addr = self.sock.recvfrom_into(buf)
            except TimeoutError:
                n = 0
            except OSError:
                if self._stop.is_set():
                    break
                continue
            if n:
                self.datagrams += 1
                self.bytes += n
                env = self.asm.feed(addr, view[:n])
                if env is not None:
                    try:
                        self.on_message(env)
                    except Exception:
                        log.exception("datagram delivery callback failed")
            now = time.monotonic()
            if now - last_sweep > 0.05:
                self.asm.expire()
                last_sweep = now

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2)
        self.sock.close()


def dgram_recv(port: int = 0, **kw):
    """Generator-style receive: returns (receiver, queue) where queue yields envelopes."""
    from rimbus.shm import BoundedQueue

    q = BoundedQueue(depth=1 << 16)
    rx = DatagramReceiver(q.put, port=port, **kw)
    return rx, q
