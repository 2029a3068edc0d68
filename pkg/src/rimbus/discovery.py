"""Multi-level multicast discovery, the topology view, and transport selection.

Two kinds of discovery segment exist: one chip-local segment per chip and one
vehicle-area segment shared by the deployment.  A topic is announced only on
the segment matching its scope, so a chip-local topic never leaks onto the
vehicle-area network.  On a single host, chip-local segments are told apart
by port (``base_port + chip index``).
"""

from __future__ import annotations

import enum
import itertools
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

from rimbus import _net
from rimbus.core import (EncodingError, MessageEnvelope, RimbusError, Scope, SizeClass,
                         SystemConfig, TopicKey, decode_envelope, encode_envelope, now_ns)

log = logging.getLogger(__name__)

BEACON_MAX = 512
DISC_TOPIC_NAME = "_disc"
NODE_TOPIC = TopicKey.local("_node")


class RouteUnavailable(RimbusError):
    pass


class Role(enum.Enum):
    PUBLISHER = "pub"
    SUBSCRIBER = "sub"
    NODE = "node"
    SERVICE = "srv"


class Kind(enum.Enum):
    ALIVE = "alive"
    BYE = "bye"


class Transport(enum.Enum):
    INTRA = "Intra"
    SHM = "Shm"
    DATAGRAM = "Datagram"
    BRIDGED_STREAM = "BridgedStream"


@dataclass(frozen=True)
class Segment:
    level: Scope
    group: str
    port: int
    interface: str = "127.0.0.1"


def local_segment(cfg: SystemConfig, chip: str | None = None) -> Segment:
    seg = cfg.segments
    idx = cfg.chip_index(chip or cfg.chip_id)
    return Segment(Scope.CHIP_LOCAL, seg.local_group, seg.local_base_port + idx, seg.interface)


def vehicle_segment(cfg: SystemConfig) -> Segment:
    seg = cfg.segments
    return Segment(Scope.VEHICLE_AREA, seg.vehicle_group, seg.vehicle_port, seg.interface)


def segment_for(topic: TopicKey, cfg: SystemConfig) -> Segment:
    if topic.scope is Scope.CHIP_LOCAL:
        return local_segment(cfg)
    return vehicle_segment(cfg)


@dataclass(frozen=True)
class Announcement:
    chip: str
    node: str
    pid: int
    topic: TopicKey
    role: Role
    kind: Kind = Kind.ALIVE
    hints: dict = field(default_factory=dict, compare=False, hash=False)
    sent_ts: int = 0

    def __post_init__(self):
        if self.kind is Kind.BYE and self.hints:
            object.__setattr__(self, "hints", {})

    @property
    def key(self) -> tuple:
        return (self.chip, self.node, self.topic, self.role)

    def to_payload(self) -> bytes:
        doc = {"c": self.chip, "n": self.node, "p": self.pid, "s": int(self.topic.scope),
               "t": self.topic.name, "r": self.role.value, "k": self.kind.value,
               "ts": self.sent_ts}
        if self.hints and self.kind is Kind.ALIVE:
            doc["h"] = self.hints
        return json.dumps(doc, separators=(",", ":")).encode()

    @classmethod
    def from_payload(cls, raw: bytes) -> Announcement:
        doc = json.loads(raw)
        return cls(chip=str(doc["c"]), node=str(doc["n"]), pid=int(doc["p"]),
                   topic=TopicKey(Scope(int(doc["s"])), doc["t"]), role=Role(doc["r"]),
                   kind=Kind(doc["k"]), hints=dict(doc.get("h", {})), sent_ts=int(doc.get("ts", 0)))


def encode_beacon(ann: Announcement, level: Scope, seq: int = 0) -> bytes:
    env = MessageEnvelope(TopicKey(level, DISC_TOPIC_NAME), seq, ann.sent_ts or now_ns(), ann.to_payload())
    raw = encode_envelope(env)
    if len(raw) > BEACON_MAX:
        raise EncodingError(f"beacon of {len(raw)} bytes exceeds {BEACON_MAX}")
    return raw


def decode_beacon(raw: bytes) -> tuple[Scope, Announcement]:
    env = decode_envelope(raw, max_payload=BEACON_MAX)
    if env.topic.name != DISC_TOPIC_NAME:
        raise EncodingError(f"not a discovery beacon: {env.topic}")
    try:
        return env.topic.scope, Announcement.from_payload(env.payload)
    except (ValueError, KeyError, TypeError) as exc:
        raise EncodingError(f"malformed announcement: {exc}") from exc


@dataclass
class ViewEntry:
    ann: Announcement
    last_seen: int
    level: Scope


class TopologyView:
    """Live map of (chip, node, topic, role) -> last announcement.

    Single writer (the listener), many readers.  Entries older than the
    liveness timeout are filtered out of every query.
    """

    def __init__(self, liveness_timeout_ns: int, clock: Callable[[], int] = now_ns):
        self.liveness_timeout_ns = liveness_timeout_ns
        self.clock = clock
        self.malformed = 0
        self._entries: dict[tuple, ViewEntry] = {}
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)

    def upsert(self, ann: Announcement, level: Scope) -> None:
        with self._lock:
            self._entries[ann.key] = ViewEntry(ann, self.clock(), level)
            self._changed.notify_all()

    def remove(self, key: tuple) -> None:
        with self._lock:
            if self._entries.pop(key, None) is not None:
                self._changed.notify_all()

    def apply(self, ann: Announcement, level: Scope) -> None:
        if ann.kind is Kind.BYE:
            self.remove(ann.key)
        else:
            self.upsert(ann, level)

    def entries(self, topic: TopicKey | None = None, role: Role | None = None,
                chip: str | None = None, node: str | None = None) -> list[Announcement]:
        now = self.clock()
        with self._lock:
            found = [e.ann for e in self._entries.values()
                     if now - e.last_seen <= self.liveness_timeout_ns]
        return [a for a in found
                if (topic is None or a.topic == topic) and (role is None or a.role is role)
                and (chip is None or a.chip == chip) and (node is None or a.node == node)]

    def get(self, key: tuple) -> Announcement | None:
        now = self.clock()
        with self._lock:
            e = self._entries.get(key)
        if e is None or now - e.last_seen > self.liveness_timeout_ns:
            return None
        return e.ann

    def __len__(self) -> int:
        return len(self.entries())

    def wait_for(self, predicate: Callable[[TopologyView], bool], timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        while True:
            if predicate(self):
                return True
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return False
            with self._lock:
                self._changed.wait(min(remaining, 0.05))


def process_beacon(raw: bytes, view: TopologyView) -> TopologyView:
    try:
        level, ann = decode_beacon(raw)
    except EncodingError:
        view.malformed += 1
        return view
    view.apply(ann, level)
    return view


# ---------------------------------------------------------------------------
# transport selection

@dataclass(frozen=True)
class RouteDecision:
    transport: Transport
    hints: dict = field(default_factory=dict, compare=False, hash=False)


def select_transport(pub_loc: tuple[str, int], sub_loc: tuple[str, int], size: SizeClass,
                     bridged: bool) -> RouteDecision:
    """Pick the transport for one (publisher, subscriber, size class) triple.

    Locations are (chip id, process id) pairs.
    """
    if pub_loc[0] == sub_loc[0]:
        return RouteDecision(Transport.INTRA if pub_loc[1] == sub_loc[1] else Transport.SHM)
    if size is SizeClass.LARGE and bridged:
        return RouteDecision(Transport.BRIDGED_STREAM)
    return RouteDecision(Transport.DATAGRAM)


def resolve_route(view: TopologyView, pub_key: tuple, sub_key: tuple, size: SizeClass,
                  bridged: bool) -> RouteDecision:
    pub = view.get(pub_key)
    sub = view.get(sub_key)
    if pub is None or sub is None:
        missing = pub_key if pub is None else sub_key
        raise RouteUnavailable(f"participant {missing} not in topology view")
    decision = select_transport((pub.chip, pub.pid), (sub.chip, sub.pid), size, bridged)
    return RouteDecision(decision.transport, dict(pub.hints))


# ---------------------------------------------------------------------------
# participant: announcer + listeners

@dataclass
class _Entity:
    ann: Announcement
    segment: Segment


class Participant:
    """Announces local entities and listens on joined segments.

    One announcer thread for all entities and one listener thread per
    joined segment.  Entities are announced on the segment matching their
    topic scope unless an explicit segment is given.
    """

    def __init__(self, cfg: SystemConfig, pid: int, view: TopologyView | None = None):
        self.cfg = cfg
        self.pid = pid
        self.view = view or TopologyView(cfg.liveness_timeout_ns)
        self.sent = 0
        self.send_failures = 0
        self._entities: dict[tuple, _Entity] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._wake = threading.Event()
        self._listeners: dict[Segment, tuple[threading.Thread, object]] = {}
        self._sender = None
        self._seq = itertools.count()
        self.started_at = time.monotonic()
        self._announcer = threading.Thread(target=self._announce_loop, name="rimbus-announce", daemon=True)
        self.join(local_segment(cfg))
        self._announcer.start()

    # -- segments -----------------------------------------------------------
    def join(self, segment: Segment) -> None:
        with self._lock:
            if segment in self._listeners or self._stop.is_set():
                return
            sock = _net.multicast_receiver(segment.group, segment.port, segment.interface)
            t = threading.Thread(target=self._listen_loop, args=(sock,), daemon=True,
                                 name=f"rimbus-listen-{segment.port}")
            self._listeners[segment] = (t, sock)
        t.start()

    def joined(self) -> list[Segment]:
        return list(self._listeners)

    # -- entities -----------------------------------------------------------
    def add(self, node: str, topic: TopicKey, role: Role, hints: dict | None = None,
            segment: Segment | None = None) -> Announcement:
        segment = segment or segment_for(topic, self.cfg)
        ann = Announcement(self.cfg.chip_id, node, self.pid, topic, role, Kind.ALIVE, dict(hints or {}))
        if segment.level is Scope.VEHICLE_AREA:
            self.join(segment)
        with self._lock:
            self._entities[ann.key] = _Entity(ann, segment)
        self._send(ann, segment)
        return ann

    def remove(self, key: tuple) -> None:
        with self._lock:
            ent = self._entities.pop(key, None)
        if ent is not None:
            bye = Announcement(ent.ann.chip, ent.ann.node, ent.ann.pid, ent.ann.topic, ent.ann.role, Kind.BYE)
            self._send(bye, ent.segment)

    def _send(self, ann: Announcement, segment: Segment) -> bool:
        ann = Announcement(ann.chip, ann.node, ann.pid, ann.topic, ann.role, ann.kind, ann.hints, now_ns())
        raw = encode_beacon(ann, segment.level, next(self._seq))
        try:
            if self._sender is None:
                self._sender = _net.multicast_sender(segment.interface)
            self._sender.sendto(raw, (segment.group, segment.port))
            self.sent += 1
            return True
        except OSError as exc:
            self.send_failures += 1
            log.warning("beacon send failed on %s:%d: %s", segment.group, segment.port, exc)
            try:
                self._sender.close()
            except Exception:
                pass
            self._sender = None
            return False

    def _announce_loop(self) -> None:
        backoff = 0.0
        while not self._stop.wait(backoff or self.cfg.beacon_interval_s):
            with self._lock:
                ents = list(self._entities.values())
            ok = all([self._send(e.ann, e.segment) for e in ents])
            if ok:
                backoff = 0.0
            else:
                backoff = min(max(backoff * 2, 0.05), self.cfg.beacon_interval_s)

    def _listen_loop(self, sock) -> None:
        while not self._stop.is_set():
            try:
                raw, _ = sock.recvfrom(2048)
            except TimeoutError:
                continue
            except OSError:
                if self._stop.is_set():
                    break
                time.sleep(0.05)
                continue
            process_beacon(raw, self.view)
        sock.close()

    def close(self) -> None:
        if self._stop.is_set():
            return
        with self._lock:
            ents = list(self._entities.values())
            self._entities.clear()
        for e in ents:
            a = e.ann
            self._send(Announcement(a.chip, a.node, a.pid, a.topic, a.role, Kind.BYE), e.segment)
        self._stop.set()
        self._announcer.join(timeout=2)
        for t, _ in self._listeners.values():
            t.join(timeout=2)
        if self._sender is not None:
            self._sender.close()


def listen_only(cfg: SystemConfig, chips: Iterable[str] | None = None, pid: int = 0) -> Participant:
    """A participant that announces nothing and listens to every given chip segment."""
    p = Participant(cfg, pid)
    for chip in chips or cfg.chips:
        p.join(local_segment(cfg, chip))
    p.join(vehicle_segment(cfg))
    return p
