"""The message bridge: local SHM -> one stream frame per destination chip -> remote SHM.

Bridge config files are line oriented::

    # topic: source -> [dest, ...], lane=Ethernet|PcieVirtual, scope=ChipLocal|VehicleArea
    camera/front: A2 -> [A1], lane=PcieVirtual

``→`` is accepted for ``->``; lane defaults to Ethernet, scope to ChipLocal.
A ``.json`` file holding a list of ``{topic, scope, source, dests, lane}``
records is accepted as well.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import random
import re
import tempfile
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

from rimbus.core import (ConfigError, Scope, SystemConfig, TopicKey, parse_header,
                         validate_chip_id)
from rimbus.discovery import Participant, Role, local_segment
from rimbus.link import Lane, shaper_for
from rimbus.shm import (FLAG_BRIDGED, ShmMessage, ShmReader, doorbell_for, segment_name,
                        shm_create_or_open)
from rimbus.stream import LEN, StreamListener, StreamSender, channel_id, stream_port

log = logging.getLogger(__name__)

BRIDGE_NODE = "_bridge"
DEDUP_WINDOW = 1024


@dataclass(frozen=True)
class BridgeRoute:
    topic: TopicKey
    source: str
    dests: tuple[str, ...]
    lane: Lane = Lane.ETHERNET
    line: int = field(default=0, compare=False)

    def __post_init__(self):
        where = f"line {self.line}: " if self.line else ""
        validate_chip_id(self.source)
        if not self.dests:
            raise ConfigError(f"{where}route for {self.topic} has no destinations")
        for d in self.dests:
            validate_chip_id(d)
        if self.source in self.dests:
            raise ConfigError(f"{where}route for {self.topic} sends {self.source} to itself")
        if len(set(self.dests)) != len(self.dests):
            raise ConfigError(f"{where}route for {self.topic} lists a destination twice")


_LINE = re.compile(r"^(?P<topic>\S+?)\s*:\s*(?P<src>[^\s\-→]+)\s*(?:->|→)\s*\[(?P<dests>[^\]]*)\]\s*(?P<opts>.*)$")


def _parse_line(text: str, lineno: int) -> BridgeRoute:
    m = _LINE.match(text)
    if not m:
        raise ConfigError(f"line {lineno}: cannot parse route {text!r}")
    opts = {}
    for part in filter(None, (p.strip() for p in m["opts"].split(","))):
        key, sep, val = part.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: bad option {part!r}")
        opts[key.strip().lower()] = val.strip()
    unknown = set(opts) - {"lane", "scope"}
    if unknown:
        raise ConfigError(f"line {lineno}: unknown option(s) {sorted(unknown)}")
    try:
        lane = Lane.parse(opts.get("lane", "Ethernet"))
        scope = Scope.parse(opts.get("scope", "ChipLocal"))
        topic = TopicKey(scope, m["topic"])
    except (ConfigError, ValueError) as exc:
        raise ConfigError(f"line {lineno}: {exc}") from exc
    dests = tuple(d.strip() for d in m["dests"].split(",") if d.strip())
    return BridgeRoute(topic, m["src"], dests, lane, lineno)


def _check_duplicates(routes: list[BridgeRoute]) -> None:
    seen: dict[tuple, BridgeRoute] = {}
    for r in routes:
        for d in r.dests:
            prev = seen.get((r.topic, d))
            if prev is not None:
                raise ConfigError(f"duplicate route for {r.topic} -> {d} on lines {prev.line} and {r.line}")
            seen[(r.topic, d)] = r


def routes_from_records(records: list) -> list[BridgeRoute]:
    routes = []
    for i, rec in enumerate(records, 1):
        if isinstance(rec, BridgeRoute):
            routes.append(rec)
            continue
        try:
            topic = TopicKey(Scope.parse(rec.get("scope", "ChipLocal")), rec["topic"])
            routes.append(BridgeRoute(topic, rec["source"], tuple(rec["dests"]),
                                      Lane.parse(rec.get("lane", "Ethernet")), i))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"route {i}: {exc}") from exc
    _check_duplicates(routes)
    return routes


def load_bridge_config(path: str | os.PathLike) -> list[BridgeRoute]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read bridge config {path}: {exc}") from exc
    if str(path).endswith(".json"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return routes_from_records(data["routes"] if isinstance(data, dict) else data)
    routes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            routes.append(_parse_line(line, lineno))
    _check_duplicates(routes)
    return routes


def format_route(r: BridgeRoute) -> str:
    return f"{r.topic.name}: {r.source} -> [{', '.join(r.dests)}], lane={r.lane.value}, scope={r.topic.scope.label}"


def is_bridged(routes: list[BridgeRoute], topic: TopicKey, source: str, dest: str) -> bool:
    return any(r.topic == topic and r.source == source and dest in r.dests for r in routes)


# ---------------------------------------------------------------------------

class DedupWindow:
    """Remembers the last ``size`` keys; ``seen`` records as a side effect."""

    def __init__(self, size: int = DEDUP_WINDOW):
        self.size = size
        self._keys: OrderedDict = OrderedDict()

    def seen(self, key) -> bool:
        if key in self._keys:
            return True
        self._keys[key] = None
        if len(self._keys) > self.size:
            self._keys.popitem(last=False)
        return False


STATS_FIELDS = ["topic", "scope", "dest", "forwarded_count", "forwarded_bytes", "wire_bytes",
                "dedup_suppressed_count", "republish_count", "dropped_count"]


@dataclass
class RouteStats:
    forwarded_count: int = 0
    forwarded_bytes: int = 0
    wire_bytes: int = 0
    dedup_suppressed_count: int = 0
    republish_count: int = 0
    dropped_count: int = 0


class BridgeStats:
    def __init__(self):
        self._rows: dict[tuple[TopicKey, str], RouteStats] = {}
        self._lock = threading.Lock()

    def row(self, topic: TopicKey, dest: str) -> RouteStats:
        with self._lock:
            return self._rows.setdefault((topic, dest), RouteStats())

    def rows(self) -> list[tuple[TopicKey, str, RouteStats]]:
        with self._lock:
            return [(t, d, s) for (t, d), s in sorted(self._rows.items(), key=lambda kv: (kv[0][0], kv[0][1]))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(STATS_FIELDS)
        for topic, dest, s in self.rows():
            w.writerow([topic.name, topic.scope.label, dest, s.forwarded_count, s.forwarded_bytes,
                        s.wire_bytes, s.dedup_suppressed_count, s.republish_count, s.dropped_count])
        return buf.getvalue()


def read_stats_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        for k in STATS_FIELDS[3:]:
            r[k] = int(r[k])
    return rows


def run_dir() -> Path:
    d = Path(os.environ.get("RIMBUS_RUN_DIR", Path(tempfile.gettempdir()) / "rimbus"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def stats_path(chip: str) -> Path:
    return run_dir() / f"bridge-{chip}.stats.csv"


def pid_path(chip: str) -> Path:
    return run_dir() / f"bridge-{chip}.pid"


# ---------------------------------------------------------------------------

def new_writer_id(pid: int | None = None) -> int:
    return ((pid if pid is not None else os.getpid()) << 32) | random.getrandbits(32)


class _Egress:
    """One worker per (topic, dest chip): reads the local ring, sends one frame per message."""

    def __init__(self, bridge: Bridge, route: BridgeRoute, dest: str):
        self.bridge = bridge
        self.route = route
        self.dest = dest
        cfg = bridge.cfg
        self.stats = bridge.stats.row(route.topic, dest)
        self.dedup = DedupWindow()
        seg = bridge.segment(route.topic)
        self.reader = ShmReader(seg, raw=True, doorbell=doorbell_for(cfg))
        self.sender = StreamSender(("127.0.0.1", stream_port(cfg, route.topic, dest, route.lane)),
                                   channel_id(route.topic), route.lane, shaper_for(cfg, route.lane),
                                   cfg.send_timeout_ms / 1000.0, cfg.stream_queue_depth)
        self.thread = threading.Thread(target=self._loop, daemon=True,
                                       name=f"rimbus-egress-{route.topic.name}-{dest}")

    def handle(self, msg: ShmMessage) -> bool:
        """Forward one ring message unless it is a replay; returns True if sent."""
        if msg.bridged:
            return False  # written by an ingress on this chip: no multi-hop
        seq = parse_header(msg.raw).seq
        if self.dedup.seen((msg.writer_id, seq)):
            self.stats.dedup_suppressed_count += 1
            return False
        frame = LEN.pack(len(msg.raw)) + msg.raw
        if self.sender.send(frame):
            self.stats.forwarded_count += 1
            self.stats.forwarded_bytes += len(frame)
            return True
        self.stats.dropped_count += 1
        return False

    def _loop(self) -> None:
        stop = self.bridge._stop
        while not stop.is_set():
            for item in self.reader.read(timeout=0.2):
                if isinstance(item, ShmMessage):
                    self.handle(item)
            self.stats.wire_bytes = self.sender.bytes_sent

    def close(self) -> None:
        self.sender.close()
        self.reader.close()
        self.stats.wire_bytes = self.sender.bytes_sent


class _Ingress:
    """Listens on the channel for (topic, this chip, lane) and republishes into local SHM."""

    def __init__(self, bridge: Bridge, route: BridgeRoute):
        self.bridge = bridge
        self.route = route
        cfg = bridge.cfg
        self.stats = bridge.stats.row(route.topic, cfg.chip_id)
        self.seg = bridge.segment(route.topic)
        self.writer_id = new_writer_id(bridge.pid)
        self.listener = StreamListener(stream_port(cfg, route.topic, cfg.chip_id, route.lane),
                                       channel_id(route.topic), route.lane, self._on_frame,
                                       max_payload=cfg.max_payload_bytes)

    def _on_frame(self, frame: memoryview) -> None:
        self.seg.publish_raw(frame, self.writer_id, FLAG_BRIDGED)
        self.stats.republish_count += 1

    def close(self) -> None:
        self.listener.close()


class Bridge:
    """Per-chip bridge: every egress and ingress worker for ``cfg.chip_id``."""

    def __init__(self, cfg: SystemConfig, routes: list[BridgeRoute] | None = None,
                 pid: int | None = None, participant: Participant | None = None):
        self.cfg = cfg
        self.chip = cfg.chip_id
        self.pid = os.getpid() if pid is None else pid
        self.routes = cfg.routes() if routes is None else routes
        if routes is not None and not cfg.bridge_routes and not cfg.bridge_config:
            cfg.bridge_routes = list(routes)
        self.stats = BridgeStats()
        self._stop = threading.Event()
        self._segments: dict[TopicKey, object] = {}
        self._own_participant = participant is None
        self.participant = participant or Participant(cfg, self.pid)
        self.egress: list[_Egress] = []
        self.ingress: list[_Ingress] = []
        for r in self.routes:
            if r.source == self.chip:
                for d in r.dests:
                    self.egress.append(_Egress(self, r, d))
            if self.chip in r.dests:
                self.ingress.append(_Ingress(self, r))
        seg = local_segment(cfg)
        for t in sorted({e.route.topic for e in self.egress}):
            self.participant.add(BRIDGE_NODE, t, Role.SUBSCRIBER, {"bridge": 1}, segment=seg)
        for i in self.ingress:
            self.participant.add(BRIDGE_NODE, i.route.topic, Role.PUBLISHER,
                                 {"bridge": 1, "shm": i.seg.name}, segment=seg)
        for e in self.egress:
            e.thread.start()

    def segment(self, topic: TopicKey):
        if topic not in self._segments:
            seg = shm_create_or_open(segment_name(self.chip, topic), self.cfg.shm_slot_count,
                                     self.cfg.shm_slot_size, self.cfg.shm_dir)
            seg.doorbell = doorbell_for(self.cfg)
            self._segments[topic] = seg
        return self._segments[topic]

    def wait_connected(self, timeout: float = 5.0) -> bool:
        return all(e.sender.wait_established(timeout) for e in self.egress)

    def stats_csv(self) -> str:
        for e in self.egress:
            e.stats.wire_bytes = e.sender.bytes_sent
        return self.stats.to_csv()

    def dump_stats(self, path: str | os.PathLike | None = None) -> Path:
        path = Path(path or stats_path(self.chip))
        tmp = path.with_suffix(".tmp")
        tmp.write_text(self.stats_csv())
        tmp.replace(path)
        return path

    def close(self) -> None:
        self._stop.set()
        for e in self.egress:
            e.thread.join(timeout=2)
            e.close()
        for i in self.ingress:
            i.close()
        if self._own_participant:
            self.participant.close()
        for seg in self._segments.values():
            if seg.doorbell is not None:
                seg.doorbell.close()
            seg.close()
