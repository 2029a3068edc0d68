"""Same-chip delivery: a seqlock ring in POSIX shared memory, plus in-process channels.

Ring layout (little-endian)::

    0   magic u32 | version u32 | slot_count u64 | slot_size u64
    32  cursor u64                (number of committed messages)
    64  slot[0] ... slot[slot_count-1]

    slot: commit u64 | writer_id u64 | flags u32 | length u32 | pad (32 bytes)
          data[slot_size]         (one encoded envelope)

Message ``n`` lives in slot ``n % slot_count``.  The writer stores
``commit = 2n+1`` before touching the data and ``2n+2`` after, then bumps the
cursor.  A reader accepts a copy only if it saw ``2n+2`` both before and
after copying, and the CRC of the copy verifies.  The writer never waits.
"""

from __future__ import annotations

import collections
import hashlib
import logging
import mmap
import os
import socket
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from rimbus import _net
from rimbus.core import (ChecksumError, EncodingError, MessageEnvelope, RimbusError,
                         SystemConfig, TopicKey, checksum, pack_header, parse_header, verify_frame)

log = logging.getLogger(__name__)

RING_MAGIC = 0x524D4952  # "RIMR"
RING_VERSION = 1
_HDR = struct.Struct("<IIQQ")
_U64 = struct.Struct("<Q")
_SLOT = struct.Struct("<QQII")
CURSOR_OFF = 32
DATA_OFF = 64
SLOT_HDR = 32

FLAG_BRIDGED = 0x1


class ShmError(RimbusError):
    pass


class GeometryError(ShmError):
    pass


class SlotOverflow(ShmError):
    pass


def segment_name(chip: str, topic: TopicKey) -> str:
    digest = hashlib.sha1(f"{int(topic.scope)}:{topic.name}".encode()).hexdigest()[:16]
    return f"rimbus.{chip}.{digest}"


def _stride(slot_size: int) -> int:
    return (SLOT_HDR + slot_size + 63) & ~63


def _total_size(slot_count: int, slot_size: int) -> int:
    return DATA_OFF + slot_count * _stride(slot_size)


@dataclass(frozen=True)
class Gap:
    count: int


@dataclass
class ShmMessage:
    env: MessageEnvelope | None
    writer_id: int
    flags: int
    raw: bytes | None = None
    index: int = 0

    @property
    def bridged(self) -> bool:
        return bool(self.flags & FLAG_BRIDGED)

    @property
    def writer_pid(self) -> int:
        return self.writer_id >> 32


class Doorbell:
    """Wakes readers after a commit: one multicast datagram reaches every reader at once."""

    def __init__(self, group: str, port: int, interface: str = "127.0.0.1"):
        self.addr = (group, port)
        self.interface = interface
        self._tx = None
        self._lock = threading.Lock()

    def ring(self, name: str) -> None:
        with self._lock:
            try:
                if self._tx is None:
                    self._tx = _net.multicast_sender(self.interface)
                self._tx.sendto(name.encode(), self.addr)
            except OSError as exc:
                log.debug("doorbell send failed: %s", exc)
                self._tx = None

    def listener(self) -> socket.socket:
        return _net.multicast_receiver(self.addr[0], self.addr[1], self.interface, timeout=None)

    def close(self) -> None:
        if self._tx is not None:
            self._tx.close()


def doorbell_for(cfg: SystemConfig, chip: str | None = None) -> Doorbell | None:
    if cfg.shm_notify != "multicast":
        return None
    port = cfg.doorbell_base_port + cfg.chip_index(chip or cfg.chip_id)
    return Doorbell(cfg.doorbell_group, port, cfg.segments.interface)


class ShmSegment:
    """One per-topic ring.  Single writer, any number of readers."""

    def __init__(self, path: Path, mm: mmap.mmap, slot_count: int, slot_size: int, created: bool):
        self.path = path
        self.name = path.name
        self.mm = mm
        self.view = memoryview(mm)
        self.slot_count = slot_count
        self.slot_size = slot_size
        self.stride = _stride(slot_size)
        self.created = created
        self.doorbell: Doorbell | None = None
        self.publish_count = 0
        self._wlock = threading.Lock()

    # -- geometry -----------------------------------------------------------
    def _slot_off(self, n: int) -> int:
        return DATA_OFF + (n & (self.slot_count - 1)) * self.stride

    @property
    def cursor(self) -> int:
        return _U64.unpack_from(self.mm, CURSOR_OFF)[0]

    def commit_of(self, n: int) -> int:
        return _U64.unpack_from(self.mm, self._slot_off(n))[0]

    # -- writer -------------------------------------------------------------
    def publish(self, env: MessageEnvelope, writer_id: int = 0, flags: int = 0) -> int:
        """Write one envelope; returns its ring index."""
        hdr = pack_header(env.topic, env.seq, env.publish_ts, len(env.payload), env.checksum)
        return self.publish_parts(hdr, env.payload, writer_id, flags)

    def publish_raw(self, frame, writer_id: int = 0, flags: int = 0) -> int:
        return self.publish_parts(b"", frame, writer_id, flags)

    def publish_parts(self, head, body, writer_id: int = 0, flags: int = 0) -> int:
        length = len(head) + len(body)
        if length > self.slot_size:
            raise SlotOverflow(f"{length}-byte envelope exceeds slot size {self.slot_size}")
        with self._wlock:
            n = self.cursor
            off = self._slot_off(n)
            mm = self.mm
            _U64.pack_into(mm, off, 2 * n + 1)
            struct.pack_into("<QII", mm, off + 8, writer_id, flags, length)
            d = off + SLOT_HDR
            if head:
                mm[d:d + len(head)] = head
            mm[d + len(head):d + length] = body
            _U64.pack_into(mm, off, 2 * n + 2)
            _U64.pack_into(mm, CURSOR_OFF, n + 1)
            self.publish_count += 1
        if self.doorbell is not None:
            self.doorbell.ring(self.name)
        return n

    # -- reader helper --------------------------------------------------------
    def read_slot(self, n: int, raw: bool = False):
        """Copy message ``n`` out.  Returns ShmMessage, 'overrun', 'pending' or 'corrupt'."""
        off = self._slot_off(n)
        want = 2 * n + 2
        s1 = _U64.unpack_from(self.mm, off)[0]
        if s1 < want:
            return "pending"
        if s1 != want:
            return "overrun"
        _, writer_id, flags, length = _SLOT.unpack_from(self.mm, off)
        if length > self.slot_size:
            return "overrun" if _U64.unpack_from(self.mm, off)[0] != want else "corrupt"
        d = off + SLOT_HDR
        data = None
        env = None
        try:
            if raw:
                data = bytes(self.view[d:d + length])
            else:
                hdr = parse_header(self.view[d:d + length])
                if hdr.total_len != length:
                    raise EncodingError("slot length mismatch")
                payload = bytes(self.view[d + hdr.payload_offset:d + length])
        except EncodingError:
            return "overrun" if _U64.unpack_from(self.mm, off)[0] != want else "corrupt"
        if _U64.unpack_from(self.mm, off)[0] != want:
            return "overrun"
        try:
            if raw:
                verify_frame(data)
            else:
                if checksum(payload) != hdr.crc:
                    raise ChecksumError("slot checksum mismatch")
                env = MessageEnvelope(hdr.topic, hdr.seq, hdr.publish_ts, payload, hdr.crc)
        except EncodingError:
            return "corrupt"
        return ShmMessage(env, writer_id, flags, data, n)

    def close(self) -> None:
        try:
            self.view.release()
            self.mm.close()
        except (BufferError, ValueError):
            pass

    def unlink(self) -> None:
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


def shm_create_or_open(name: str, slot_count: int = 8, slot_size: int = 8 << 20,
                       directory: str = "/dev/shm", timeout: float = 2.0) -> ShmSegment:
    if slot_count <= 0 or slot_count & (slot_count - 1):
        raise GeometryError("slot_count must be a power of two")
    path = Path(directory) / name
    size = _total_size(slot_count, slot_size)
    created = False
    try:
        fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_EXCL, 0o666)
        created = True
    except FileExistsError:
        fd = os.open(path, os.O_RDWR)
    except OSError as exc:
        raise ShmError(f"cannot create {path}: {exc}") from exc
    try:
        if created:
            os.ftruncate(fd, size)  # zero-filled
            mm = mmap.mmap(fd, size)
            _HDR.pack_into(mm, 0, 0, RING_VERSION, slot_count, slot_size)
            _U64.pack_into(mm, CURSOR_OFF, 0)
            struct.pack_into("<I", mm, 0, RING_MAGIC)  # magic last: marks the ring ready
        else:
            deadline = time.monotonic() + timeout
            while True:
                st = os.fstat(fd)
                if st.st_size >= DATA_OFF:
                    mm = mmap.mmap(fd, st.st_size)
                    magic, version, count, ssize = _HDR.unpack_from(mm, 0)
                    if magic == RING_MAGIC:
                        break
                    mm.close()
                if time.monotonic() > deadline:
                    raise ShmError(f"{path} exists but was never initialised")
                time.sleep(0.001)
            if version != RING_VERSION:
                mm.close()
                raise GeometryError(f"{name}: ring version {version} != {RING_VERSION}")
            if (count, ssize) != (slot_count, slot_size):
                mm.close()
                raise GeometryError(f"{name}: existing geometry {count}x{ssize} != requested "
                                    f"{slot_count}x{slot_size}")
    finally:
        os.close(fd)
    return ShmSegment(path, mm, slot_count, slot_size, created)


def shm_publish(seg: ShmSegment, env: MessageEnvelope, writer_id: int = 0, flags: int = 0) -> int:
    return seg.publish(env, writer_id, flags)


class ShmReader:
    """Cursor over one ring.  Lagging readers get a Gap event, never a stall."""

    def __init__(self, seg: ShmSegment, from_seq: int | None = None, raw: bool = False,
                 doorbell: Doorbell | None = None, poll_interval: float = 100e-6):
        self.seg = seg
        self.next = seg.cursor if from_seq is None else from_seq
        self.raw = raw
        self.poll_interval = poll_interval
        self.corrupt = 0
        self.gaps = 0
        self.wakeups = 0
        self._bell = doorbell.listener() if doorbell is not None else None

    def poll(self) -> list:
        """Everything readable right now: ShmMessage and Gap items, in ring order."""
        out: list = []
        seg = self.seg
        while True:
            c = seg.cursor
            if self.next >= c:
                return out
            lag = c - self.next
            if lag > seg.slot_count:
                skipped = lag - seg.slot_count
                out.append(Gap(skipped))
                self.gaps += skipped
                self.next = c - seg.slot_count
                continue
            got = seg.read_slot(self.next, self.raw)
            if got == "pending":
                return out
            if got == "overrun":
                out.append(Gap(1))
                self.gaps += 1
            elif got == "corrupt":
                self.corrupt += 1
            else:
                out.append(got)
            self.next += 1

    def wait(self, timeout: float) -> None:
        """Block until a doorbell rings (or poll-sleep when doorbells are off)."""
        if self._bell is None:
            time.sleep(min(self.poll_interval, timeout))
            return
        self._bell.settimeout(timeout)
        try:
            self._bell.recv(256)
            self.wakeups += 1
        except (TimeoutError, OSError):
            return
        self._bell.setblocking(False)
        try:
            while True:
                self._bell.recv(256)
        except (BlockingIOError, OSError):
            pass

    def read(self, timeout: float = 1.0) -> list:
        items = self.poll()
        if items:
            return items
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return []
            self.wait(min(remaining, 0.05))
            items = self.poll()
            if items:
                return items

    def __iter__(self):
        while True:
            yield from self.read()

    def close(self) -> None:
        if self._bell is not None:
            self._bell.close()
            self._bell = None


def shm_subscribe(seg: ShmSegment, from_seq: int | None = None, **kw) -> ShmReader:
    return ShmReader(seg, from_seq, **kw)


def shm_clean(directory: str = "/dev/shm", prefix: str = "rimbus.") -> list[str]:
    removed = []
    for p in Path(directory).glob(prefix + "*"):
        try:
            p.unlink()
            removed.append(p.name)
        except OSError as exc:
            log.warning("could not remove %s: %s", p, exc)
    return removed


# ---------------------------------------------------------------------------
# in-process delivery

class BoundedQueue:
    """FIFO with drop-oldest overflow; safe for many producers and consumers."""

    def __init__(self, depth: int = 64):
        self.depth = depth
        self.dropped = 0
        self._q: collections.deque = collections.deque()
        self._cv = threading.Condition()
        self._closed = False

    def put(self, item) -> None:
        with self._cv:
            if len(self._q) >= self.depth:
                self._q.popleft()
                self.dropped += 1
            self._q.append(item)
            self._cv.notify()

    def get(self, timeout: float | None = None):
        with self._cv:
            if not self._q and not self._closed:
                self._cv.wait(timeout)
            if self._q:
                return self._q.popleft()
            return None

    def wait(self, timeout: float | None = None) -> bool:
        """Block until an item is queued (or closed/timeout); True if non-empty."""
        with self._cv:
            if not self._q and not self._closed:
                self._cv.wait(timeout)
            return bool(self._q)

    def drain(self) -> list:
        with self._cv:
            items = list(self._q)
            self._q.clear()
            return items

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify_all()

    def __len__(self) -> int:
        return len(self._q)


IntraChannel = BoundedQueue


class IntraBus:
    """Topic -> in-process channels.  Delivery hands over the same object, no serialization."""

    def __init__(self):
        self._channels: dict[TopicKey, list] = collections.defaultdict(list)
        self._lock = threading.Lock()
        self.delivered = 0

    def subscribe(self, topic: TopicKey, depth: int = 64) -> IntraChannel:
        return self.attach(topic, IntraChannel(depth))

    def attach(self, topic: TopicKey, channel):
        with self._lock:
            self._channels[topic].append(channel)
        return channel

    def detach(self, topic: TopicKey, channel) -> None:
        with self._lock:
            chans = self._channels.get(topic, [])
            if channel in chans:
                chans.remove(channel)

    def publish(self, topic: TopicKey, item) -> int:
        with self._lock:
            chans = list(self._channels.get(topic, ()))
        for ch in chans:
            ch.put(item)
        self.delivered += len(chans)
        return len(chans)

    def subscribers(self, topic: TopicKey) -> int:
        with self._lock:
            return len(self._channels.get(topic, ()))


_default_bus = IntraBus()


def intra_subscribe(topic: TopicKey, depth: int = 64, bus: IntraBus | None = None) -> IntraChannel:
    return (bus or _default_bus).subscribe(topic, depth)


def intra_publish(topic: TopicKey, item, bus: IntraBus | None = None) -> int:
    return (bus or _default_bus).publish(topic, item)
