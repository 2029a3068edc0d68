"""Benchmark report rows, summary statistics and CSV / markdown emission."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rimbus.core import format_size

COLUMNS = ["scenario", "transport", "size_bytes", "subscribers", "samples", "received", "drops",
           "wire_bytes", "p50_ns", "p99_ns", "mean_ns", "adjusted_ns", "delta_pct", "status"]
TIMING_COLUMNS = ("p50_ns", "p99_ns", "mean_ns", "adjusted_ns", "delta_pct")
NA = "NA"

_SCENARIO_ORDER = {"matrix": 0, "redundancy": 1, "callback-diff": 2}
_TRANSPORT_ORDER = {"shm": 0, "datagram": 1, "stream": 2, "unicast": 3, "bridge": 4,
                    "unicast-pair": 5, "bridge-pair": 6}


@dataclass
class Summary:
    count: int
    p50: float
    p99: float
    mean: float


def summarize(values) -> Summary:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return Summary(0, math.nan, math.nan, math.nan)
    p50, p99 = np.percentile(arr, [50, 99])
    return Summary(int(arr.size), float(p50), float(p99), float(arr.mean()))


@dataclass
class ReportRow:
    scenario: str
    transport: str
    size_bytes: int
    subscribers: int = 1
    samples: int = 0
    received: int = 0
    drops: int = 0
    wire_bytes: float = math.nan
    p50_ns: float = math.nan
    p99_ns: float = math.nan
    mean_ns: float = math.nan
    adjusted_ns: float = math.nan
    delta_pct: float = math.nan
    status: str = "ok"

    def sort_key(self) -> tuple:
        return (_SCENARIO_ORDER.get(self.scenario, 99), self.scenario, self.subscribers,
                _TRANSPORT_ORDER.get(self.transport, 99), self.transport, self.size_bytes)

    def cells(self) -> list[str]:
        return [_fmt(getattr(self, c), c) for c in COLUMNS]


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _fmt(v, column: str) -> str:
    if v is None:
        return NA
    if isinstance(v, float):
        if math.isnan(v) or math.isinf(v):
            return NA
        if column == "delta_pct":
            return f"{v:.2f}"
        return str(int(round(v)))
    s = str(v)
    return s if s else NA


@dataclass
class LatencyReport:
    rows: list[ReportRow] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def add(self, row: ReportRow) -> ReportRow:
        self.rows.append(row)
        return row

    def extend(self, other: LatencyReport) -> None:
        self.rows += other.rows
        self.checks += other.checks
        self.notes += [n for n in other.notes if n not in self.notes]

    def sorted_rows(self) -> list[ReportRow]:
        return sorted(self.rows, key=ReportRow.sort_key)

    def find(self, scenario: str, transport: str, size: int, subscribers: int | None = None) -> ReportRow | None:
        for r in self.rows:
            if (r.scenario, r.transport, r.size_bytes) == (scenario, transport, size) and \
                    (subscribers is None or r.subscribers == subscribers):
                return r
        return None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    # -- emission -------------------------------------------------------------
    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(COLUMNS)
        for r in self.sorted_rows():
            w.writerow(r.cells())
        return buf.getvalue()

    def to_markdown(self) -> str:
        out = ["# rimbus benchmark report", ""]
        scenarios = sorted({r.scenario for r in self.rows}, key=lambda s: _SCENARIO_ORDER.get(s, 99))
        for sc in scenarios:
            out += _pivot(sc, [r for r in self.sorted_rows() if r.scenario == sc])
        out += ["## All cells", "", "| " + " | ".join(COLUMNS) + " |",
                "|" + "---|" * len(COLUMNS)]
        out += ["| " + " | ".join(r.cells()) + " |" for r in self.sorted_rows()]
        if self.checks:
            out += ["", "## Checks", ""] + [f"- {c.line()}" for c in self.checks]
        if self.notes:
            out += ["", "## Notes", ""] + [f"- {n}" for n in self.notes]
        return "\n".join(out) + "\n"


def _us(v: float) -> str:
    return NA if v is None or math.isnan(v) else f"{v / 1000.0:.2f}"


def _pivot(scenario: str, rows: list[ReportRow]) -> list[str]:
    sizes = sorted({r.size_bytes for r in rows})
    head = "| " + " | ".join(["(μs)"] + [format_size(s) for s in sizes]) + " |"
    out = [f"## {scenario}", "", head, "|" + "---|" * (len(sizes) + 1)]
    groups: dict[tuple, dict[int, ReportRow]] = {}
    for r in rows:
        groups.setdefault((r.transport, r.subscribers), {})[r.size_bytes] = r
    for (transport, subs), cells in groups.items():
        label = transport if scenario == "matrix" else f"{transport} (n={subs})"
        out.append("| " + " | ".join([label] + [_us(cells[s].mean_ns) if s in cells else NA for s in sizes]) + " |")
        if any(not math.isnan(c.adjusted_ns) for c in cells.values()):
            out.append("| " + " | ".join([f"{label} adjusted"] + [
                _us(cells[s].adjusted_ns) if s in cells else NA for s in sizes]) + " |")
        if any(not math.isnan(c.delta_pct) for c in cells.values()):
            out.append("| " + " | ".join([f"{label} Δ%"] + [
                _fmt(cells[s].delta_pct, "delta_pct") if s in cells else NA for s in sizes]) + " |")
    return out + [""]


def emit_report(report: LatencyReport, out_dir: str | Path, fmt: str = "csv",
                stem: str = "report") -> list[Path]:
    """Write the report as CSV and/or markdown; returns the written paths."""
    if not report.rows:
        raise ValueError("report has no rows")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    formats = ("csv", "md") if fmt == "both" else (fmt,)
    for f in formats:
        if f == "csv":
            p = out / f"{stem}.csv"
            p.write_text(report.to_csv(), newline="")
        elif f in ("md", "markdown"):
            p = out / f"{stem}.md"
            p.write_text(report.to_markdown())
        else:
            raise ValueError(f"unknown report format {f!r}")
        written.append(p)
    return written


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def strip_timing(rows: list[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in rows]
