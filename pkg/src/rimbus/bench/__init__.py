"""Benchmark harness: formulas, single-host testbed, scenarios and reports."""

from rimbus.bench.formulas import (InvalidAdjustment, adjusted_stream_latency, callback_diff_reduction,
                                   latency_reduction)
from rimbus.bench.report import LatencyReport, emit_report

__all__ = ["InvalidAdjustment", "LatencyReport", "adjusted_stream_latency", "callback_diff_reduction",
           "emit_report", "latency_reduction"]
