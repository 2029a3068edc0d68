"""Inter-chip lanes and the optional bandwidth shaper that models them on loopback."""

from __future__ import annotations

import enum
import threading
import time

from rimbus.core import ConfigError, SystemConfig


class Lane(enum.Enum):
    ETHERNET = "Ethernet"
    PCIE_VIRTUAL = "PcieVirtual"

    @classmethod
    def parse(cls, text: str | Lane) -> Lane:
        if isinstance(text, Lane):
            return text
        key = text.replace("_", "").replace("-", "").lower()
        if key in ("ethernet", "eth"):
            return cls.ETHERNET
        if key in ("pcievirtual", "pcie"):
            return cls.PCIE_VIRTUAL
        raise ConfigError(f"unknown lane {text!r}")

    @property
    def index(self) -> int:
        return 0 if self is Lane.ETHERNET else 1


class LinkShaper:
    """Serializes transmissions onto a link of fixed rate.

    ``transmit(n)`` blocks the caller for the time ``n`` bytes occupy the
    link, queueing behind earlier transmissions from the same process.
    Finish times are tracked on an absolute virtual clock, so sleep
    overshoot is paid back on the next chunk (up to ``catchup_s``).
    """

    def __init__(self, mbps: float, catchup_s: float = 0.002):
        if mbps <= 0:
            raise ConfigError("shaper rate must be positive")
        self.bytes_per_s = mbps * 1e6 / 8.0
        self.catchup_s = catchup_s
        self.bytes = 0
        self._vt = 0.0
        self._lock = threading.Lock()

    def transmit(self, nbytes: int) -> None:
        with self._lock:
            now = time.perf_counter()
            start = max(self._vt, now - self.catchup_s)
            self._vt = start + nbytes / self.bytes_per_s
            finish = self._vt
            self.bytes += nbytes
        delay = finish - time.perf_counter()
        if delay > 20e-6:
            time.sleep(delay)


_shapers: dict[tuple, LinkShaper] = {}
_shapers_lock = threading.Lock()


def parse_shaping(text: str | None) -> dict[str, float]:
    """'ethernet=400,pcie=1600' -> {'Ethernet': 400.0, 'PcieVirtual': 1600.0}; 'none' -> {}."""
    out: dict[str, float] = {}
    if not text or text.strip().lower() == "none":
        return out
    for part in text.split(","):
        if not part.strip():
            continue
        lane, _, rate = part.partition("=")
        if not rate:
            raise ConfigError(f"bad shaping entry {part!r}, expected lane=mbps")
        out[Lane.parse(lane.strip()).value] = float(rate)
    return out


def shaper_for(cfg: SystemConfig, lane: Lane | str) -> LinkShaper | None:
    """Process-wide shaper per (lane, rate); None when the lane is unshaped."""
    lane = Lane.parse(lane)
    rate = cfg.shaping_mbps.get(lane.value)
    if not rate:
        return None
    key = (cfg.chip_id, lane, float(rate))
    with _shapers_lock:
        if key not in _shapers:
            _shapers[key] = LinkShaper(float(rate))
        return _shapers[key]
