"""Domain types, envelope codec, checksums and system configuration."""

from __future__ import annotations

import enum
import json
import os
import struct
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

try:
    from isal.isal_zlib import crc32 as _crc32
except ImportError:  # pragma: no cover - plain zlib is ~30x slower on 6 MB payloads
    _crc32 = zlib.crc32


MAGIC = 0x52494D43  # "RIMC"
VERSION = 1
DEFAULT_MAX_PAYLOAD = 64 * 1024 * 1024

# magic u32 | version u8 | scope u8 | name_len u16
_PREFIX = struct.Struct("<IBBH")
# seq u64 | publish_ts u64 | payload_len u32 | crc32 u32
_SUFFIX = struct.Struct("<QQII")
FIXED_HEADER_LEN = _PREFIX.size + _SUFFIX.size


class RimbusError(Exception):
    pass


class EncodingError(RimbusError):
    pass


class ChecksumError(EncodingError):
    pass


class ConfigError(RimbusError):
    pass


class Scope(enum.IntEnum):
    CHIP_LOCAL = 0
    VEHICLE_AREA = 1

    @classmethod
    def parse(cls, text: str | int | Scope) -> Scope:
        if isinstance(text, (int, Scope)):
            return cls(text)
        key = text.replace("_", "").replace("-", "").lower()
        for member, names in ((cls.CHIP_LOCAL, ("chiplocal", "local")),
                              (cls.VEHICLE_AREA, ("vehiclearea", "vehicle", "area"))):
            if key in names:
                return member
        raise ConfigError(f"unknown scope {text!r}")

    @property
    def label(self) -> str:
        return "ChipLocal" if self is Scope.CHIP_LOCAL else "VehicleArea"


class SizeClass(enum.Enum):
    SMALL = "Small"
    LARGE = "Large"


def validate_chip_id(chip: str) -> str:
    if not isinstance(chip, str) or not chip:
        raise ConfigError("chip id must be a non-empty string")
    try:
        raw = chip.encode("ascii")
    except UnicodeEncodeError as exc:
        raise ConfigError(f"chip id {chip!r} is not ASCII") from exc
    if len(raw) > 16:
        raise ConfigError(f"chip id {chip!r} longer than 16 bytes")
    return chip


@dataclass(frozen=True, order=True)
class TopicKey:
    scope: Scope
    name: str

    def __post_init__(self):
        object.__setattr__(self, "scope", Scope.parse(self.scope))
        raw = self.name.encode("utf-8")
        if not raw:
            raise ValueError("topic name must be non-empty")
        if len(raw) > 256:
            raise ValueError(f"topic name longer than 256 bytes: {self.name[:32]!r}...")
        if any(ch.isspace() for ch in self.name):
            raise ValueError(f"topic name contains whitespace: {self.name!r}")

    @classmethod
    def local(cls, name: str) -> TopicKey:
        return cls(Scope.CHIP_LOCAL, name)

    @classmethod
    def vehicle(cls, name: str) -> TopicKey:
        return cls(Scope.VEHICLE_AREA, name)

    def __str__(self) -> str:
        return f"{self.scope.label}:{self.name}"


@dataclass(frozen=True)
class MessageEnvelope:
    topic: TopicKey
    seq: int
    publish_ts: int
    payload: bytes
    checksum: int = -1

    def __post_init__(self):
        if self.checksum == -1:
            object.__setattr__(self, "checksum", checksum(self.payload))


def checksum(payload) -> int:
    """CRC-32 (IEEE 802.3, reflected) of any bytes-like object."""
    return _crc32(payload) & 0xFFFFFFFF


def classify_size(payload_len: int, threshold: int) -> SizeClass:
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return SizeClass.SMALL if payload_len < threshold else SizeClass.LARGE


def header_len(topic: TopicKey) -> int:
    return FIXED_HEADER_LEN + len(topic.name.encode("utf-8"))


def encoded_len(env: MessageEnvelope) -> int:
    return header_len(env.topic) + len(env.payload)


def pack_header(topic: TopicKey, seq: int, publish_ts: int, payload_len: int, crc: int) -> bytes:
    name = topic.name.encode("utf-8")
    return (_PREFIX.pack(MAGIC, VERSION, int(topic.scope), len(name)) + name
            + _SUFFIX.pack(seq, publish_ts, payload_len, crc))


def encode_envelope(env: MessageEnvelope, max_payload: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    if len(env.payload) > max_payload:
        raise EncodingError(f"payload of {len(env.payload)} bytes exceeds max {max_payload}")
    return pack_header(env.topic, env.seq, env.publish_ts, len(env.payload), env.checksum) + bytes(env.payload)


@dataclass(frozen=True)
class FrameHeader:
    topic: TopicKey
    seq: int
    publish_ts: int
    payload_len: int
    crc: int
    payload_offset: int

    @property
    def total_len(self) -> int:
        return self.payload_offset + self.payload_len


def parse_header(buf, max_payload: int = DEFAULT_MAX_PAYLOAD) -> FrameHeader:
    """Parse the envelope header from the front of ``buf`` without touching the payload."""
    view = memoryview(buf)
    if len(view) < FIXED_HEADER_LEN:
        raise EncodingError(f"frame too short ({len(view)} bytes)")
    magic, version, scope, name_len = _PREFIX.unpack_from(view, 0)
    if magic != MAGIC:
        raise EncodingError(f"bad magic 0x{magic:08X}")
    if version != VERSION:
        raise EncodingError(f"unsupported envelope version {version}")
    if scope not in (0, 1):
        raise EncodingError(f"bad scope byte {scope}")
    off = _PREFIX.size
    if len(view) < off + name_len + _SUFFIX.size:
        raise EncodingError("frame truncated inside header")
    try:
        name = bytes(view[off:off + name_len]).decode("utf-8")
        topic = TopicKey(Scope(scope), name)
    except (UnicodeDecodeError, ValueError) as exc:
        raise EncodingError(f"bad topic name: {exc}") from exc
    off += name_len
    seq, ts, plen, crc = _SUFFIX.unpack_from(view, off)
    off += _SUFFIX.size
    if plen > max_payload:
        raise EncodingError(f"payload length {plen} exceeds max {max_payload}")
    return FrameHeader(topic, seq, ts, plen, crc, off)


def verify_frame(buf, max_payload: int = DEFAULT_MAX_PAYLOAD) -> FrameHeader:
    """Check length and CRC of an encoded envelope in place; returns its header."""
    view = memoryview(buf)
    hdr = parse_header(view, max_payload)
    if len(view) != hdr.total_len:
        raise EncodingError(f"frame length {len(view)} != declared {hdr.total_len}")
    if checksum(view[hdr.payload_offset:]) != hdr.crc:
        raise ChecksumError(f"checksum mismatch on {hdr.topic} seq {hdr.seq}")
    return hdr


def decode_envelope(buf, max_payload: int = DEFAULT_MAX_PAYLOAD) -> MessageEnvelope:
    view = memoryview(buf)
    hdr = verify_frame(view, max_payload)
    payload = bytes(view[hdr.payload_offset:])
    return MessageEnvelope(hdr.topic, hdr.seq, hdr.publish_ts, payload, hdr.crc)


# Single-host clock: monotonic time anchored to the wall epoch once per process.
def _anchor() -> int:
    best = None
    for _ in range(5):
        m0 = time.monotonic_ns()
        w = time.time_ns()
        m1 = time.monotonic_ns()
        if best is None or m1 - m0 < best[0]:
            best = (m1 - m0, w - (m0 + m1) // 2)
    return best[1]


_EPOCH_OFFSET = _anchor()


def now_ns() -> int:
    return time.monotonic_ns() + _EPOCH_OFFSET


# ---------------------------------------------------------------------------
# configuration

def parse_size(text: str | int) -> int:
    """'6MB' -> 6291456, '100KB' -> 102400, '512' -> 512 (binary units)."""
    if isinstance(text, int):
        return text
    s = text.strip().upper().replace("IB", "B")
    try:
        for suffix, mult in (("GB", 1 << 30), ("MB", 1 << 20), ("KB", 1 << 10), ("G", 1 << 30),
                             ("M", 1 << 20), ("K", 1 << 10), ("B", 1)):
            if s.endswith(suffix):
                return int(float(s[: -len(suffix)]) * mult)
        return int(s)
    except ValueError:
        raise ConfigError(f"bad size {text!r}, expected e.g. 512, 100KB, 6MB") from None


def format_size(n: int) -> str:
    for suffix, mult in (("MB", 1 << 20), ("KB", 1 << 10)):
        if n >= mult and n % mult == 0:
            return f"{n // mult}{suffix}"
    return f"{n}B"


@dataclass
class SegmentConfig:
    vehicle_group: str = "239.255.42.1"
    vehicle_port: int = 17400
    local_group: str = "239.255.42.2"
    local_base_port: int = 17410
    interface: str = "127.0.0.1"


@dataclass
class SystemConfig:
    chip_id: str = "A1"
    chips: list[str] = field(default_factory=lambda: ["A1", "A2", "B1", "B2"])
    large_threshold_bytes: int = 1 << 20
    datagram_cap_bytes: int = 61440
    max_payload_bytes: int = DEFAULT_MAX_PAYLOAD
    segments: SegmentConfig = field(default_factory=SegmentConfig)
    beacon_interval_ms: int = 500
    liveness_timeout_intervals: int = 3
    datagram_base_port: int = 0
    reassembly_timeout_ms: int = 200
    loss_rate: float = 0.0
    seed: int = 0
    stream_base_port: int = 17500
    send_timeout_ms: int = 5000
    stream_queue_depth: int = 32
    shm_dir: str = "/dev/shm"
    shm_slot_count: int = 8
    shm_slot_size: int = 8 << 20
    shm_notify: str = "multicast"
    doorbell_group: str = "239.255.42.3"
    doorbell_base_port: int = 17600
    shaping_mbps: dict[str, float] = field(default_factory=dict)
    bridge_routes: list = field(default_factory=list)
    bridge_config: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        validate_chip_id(self.chip_id)
        for c in self.chips:
            validate_chip_id(c)
        if self.chip_id not in self.chips:
            self.chips = list(self.chips) + [self.chip_id]
        if self.large_threshold_bytes <= 0:
            raise ConfigError("large_threshold_bytes must be > 0")
        if not 0 < self.datagram_cap_bytes <= 65507 - 32:
            raise ConfigError("datagram_cap_bytes must be in (0, 65475]")
        if self.shm_slot_count <= 0 or self.shm_slot_count & (self.shm_slot_count - 1):
            raise ConfigError("shm_slot_count must be a power of two")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ConfigError("loss_rate must be within [0, 1]")
        if self.shm_notify not in ("multicast", "poll"):
            raise ConfigError("shm_notify must be 'multicast' or 'poll'")
        ports = self.fixed_ports()
        if len(ports) != len(set(ports)):
            raise ConfigError(f"configured ports are not distinct: {sorted(ports)}")

    def fixed_ports(self) -> list[int]:
        seg = self.segments
        ports = [seg.vehicle_port, self.doorbell_base_port]
        ports += [seg.local_base_port + i for i in range(len(self.chips))]
        if self.datagram_base_port:
            ports.append(self.datagram_base_port)
        return ports

    def chip_index(self, chip: str) -> int:
        try:
            return self.chips.index(chip)
        except ValueError as exc:
            raise ConfigError(f"chip {chip!r} not listed in config chips {self.chips}") from exc

    @property
    def beacon_interval_s(self) -> float:
        return self.beacon_interval_ms / 1000.0

    @property
    def liveness_timeout_ns(self) -> int:
        return int(self.beacon_interval_ms * self.liveness_timeout_intervals * 1_000_000)

    def for_chip(self, chip: str) -> SystemConfig:
        return replace(self, chip_id=chip, segments=replace(self.segments),
                       shaping_mbps=dict(self.shaping_mbps), chips=list(self.chips),
                       bridge_routes=list(self.bridge_routes))

    def routes(self):
        """Bridge routes from the inline list and/or the referenced bridge config file."""
        from rimbus.bridge import load_bridge_config, routes_from_records

        routes = routes_from_records(self.bridge_routes) if self.bridge_routes else []
        if self.bridge_config:
            routes += load_bridge_config(self.bridge_config)
        return routes

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        seg = self.segments
        return {
            "chip_id": self.chip_id,
            "chips": list(self.chips),
            "large_threshold_bytes": self.large_threshold_bytes,
            "datagram_cap_bytes": self.datagram_cap_bytes,
            "max_payload_bytes": self.max_payload_bytes,
            "segments": {
                "vehicle_area": {"group": seg.vehicle_group, "port": seg.vehicle_port},
                "chip_local": {"group": seg.local_group, "base_port": seg.local_base_port},
                "interface": seg.interface,
            },
            "beacon_interval_ms": self.beacon_interval_ms,
            "liveness_timeout_intervals": self.liveness_timeout_intervals,
            "datagram": {"base_port": self.datagram_base_port,
                         "reassembly_timeout_ms": self.reassembly_timeout_ms,
                         "loss_rate": self.loss_rate, "seed": self.seed},
            "stream": {"base_port": self.stream_base_port, "send_timeout_ms": self.send_timeout_ms,
                       "queue_depth": self.stream_queue_depth},
            "shm": {"dir": self.shm_dir, "slot_count": self.shm_slot_count,
                    "slot_size": self.shm_slot_size, "notify": self.shm_notify,
                    "doorbell_group": self.doorbell_group,
                    "doorbell_base_port": self.doorbell_base_port},
            "shaping_mbps": dict(self.shaping_mbps),
            "bridge": {"routes": [_route_record(r) for r in self.bridge_routes], "config": self.bridge_config},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SystemConfig:
        seg_d = d.get("segments", {})
        va = seg_d.get("vehicle_area", {})
        cl = seg_d.get("chip_local", {})
        defaults = SegmentConfig()
        segments = SegmentConfig(
            vehicle_group=va.get("group", defaults.vehicle_group),
            vehicle_port=int(va.get("port", defaults.vehicle_port)),
            local_group=cl.get("group", defaults.local_group),
            local_base_port=int(cl.get("base_port", defaults.local_base_port)),
            interface=seg_d.get("interface", defaults.interface),
        )
        dg = d.get("datagram", {})
        st = d.get("stream", {})
        shm = d.get("shm", {})
        br = d.get("bridge", {})
        kwargs: dict[str, Any] = dict(segments=segments)
        for key in ("chip_id", "chips", "large_threshold_bytes", "datagram_cap_bytes",
                    "max_payload_bytes", "beacon_interval_ms", "liveness_timeout_intervals",
                    "shaping_mbps"):
            if key in d:
                kwargs[key] = d[key]
        mapping = [
            (dg, "base_port", "datagram_base_port"), (dg, "reassembly_timeout_ms", "reassembly_timeout_ms"),
            (dg, "loss_rate", "loss_rate"), (dg, "seed", "seed"),
            (st, "base_port", "stream_base_port"), (st, "send_timeout_ms", "send_timeout_ms"),
            (st, "queue_depth", "stream_queue_depth"),
            (shm, "dir", "shm_dir"), (shm, "slot_count", "shm_slot_count"),
            (shm, "slot_size", "shm_slot_size"), (shm, "notify", "shm_notify"),
            (shm, "doorbell_group", "doorbell_group"), (shm, "doorbell_base_port", "doorbell_base_port"),
            (br, "routes", "bridge_routes"), (br, "config", "bridge_config"),
        ]
        for src, key, attr in mapping:
            if key in src and src[key] is not None:
                kwargs[attr] = src[key]
        return cls(**kwargs)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _route_record(r) -> dict:
    if isinstance(r, dict):
        return dict(r)
    return {"topic": r.topic.name, "scope": r.topic.scope.label, "source": r.source,
            "dests": list(r.dests), "lane": r.lane.value}


def load_config(path: str | os.PathLike | None = None, chip: str | None = None) -> SystemConfig:
    """Load config from ``path`` or $RIMBUS_CONFIG; falls back to defaults."""
    path = path or os.environ.get("RIMBUS_CONFIG")
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = SystemConfig.from_dict(data)
        if cfg.bridge_config and not os.path.isabs(cfg.bridge_config):
            cfg.bridge_config = str(Path(path).parent / cfg.bridge_config)
    else:
        cfg = SystemConfig()
    if chip:
        cfg = cfg.for_chip(validate_chip_id(chip))
        cfg.validate()
    return cfg
