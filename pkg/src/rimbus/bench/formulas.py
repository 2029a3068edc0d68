"""The three evaluation formulas.  Inputs and outputs share one time unit."""

from __future__ import annotations

import math

from rimbus.core import RimbusError


class InvalidAdjustment(RimbusError):
    """The original stream latency is smaller than two shared-memory hops."""


def adjusted_stream_latency(t_original: float, t_shm: float) -> float:
    """Stream latency with the two shared-memory hops removed: t_original - 2 * t_shm."""
    if t_shm < 0 or t_original < 0:
        raise InvalidAdjustment(f"negative latency ({t_original}, {t_shm})")
    if t_original < 2 * t_shm:
        raise InvalidAdjustment(f"original {t_original} < 2 x shm {t_shm}")
    return t_original - 2 * t_shm


def _reduction(base: float, opt: float) -> float:
    if base <= 0 or math.isnan(base) or math.isnan(opt):
        return math.nan  # undefined: the report prints NA
    return (base - opt) / base * 100.0


def latency_reduction(l_base: float, l_opt: float) -> float:
    """Percent latency reduction of ``l_opt`` relative to ``l_base``; NaN when undefined."""
    return _reduction(l_base, l_opt)


def callback_diff_reduction(t_base: float, t_opt: float) -> float:
    """Percent reduction of the mean callback time difference; NaN when undefined."""
    return _reduction(t_base, t_opt)


def ratio_to_opt(t_base: float, t_opt: float) -> float:
    """(t_base - t_opt) / t_opt * 100, the alternative reading used in some headline figures."""
    if t_opt <= 0:
        return math.nan
    return (t_base - t_opt) / t_opt * 100.0
