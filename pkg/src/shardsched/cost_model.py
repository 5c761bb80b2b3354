"""Communication/transfer cost model and cluster limits.

Times are microseconds and sizes bytes throughout.  Comparisons that decide
pass behavior (fusion, priority ratios) are done on exact fractions so a
boundary case cannot flip on rounding.
"""

from __future__ import annotations

import bisect
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction

from .graph_ir import Parameter

KiB = 1024
MiB = 1024**2
GiB = 1024**3

_UNITS = {"": 1, "B": 1, "KB": KiB, "MB": MiB, "GB": GiB, "TB": 1024**4,
          "KIB": KiB, "MIB": MiB, "GIB": GiB, "TIB": 1024**4}
_SIZE_RE = re.compile(r"^\s*([0-9]+(?:\.[0-9]*)?)\s*([A-Za-z]*)\s*$")


def parse_size(value) -> int:
    """Bytes from an int or a string such as ``"2GB"`` (powers of 1024)."""
    if isinstance(value, bool):
        raise ValueError(f"not a size: {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"fractional byte count {value!r}")
        return int(value)
    m = _SIZE_RE.match(str(value))
    if not m or m.group(2).upper() not in _UNITS:
        raise ValueError(f"cannot parse size {value!r}")
    return int(Fraction(m.group(1)) * _UNITS[m.group(2).upper()])


@dataclass(frozen=True)
class CostModel:
    collective_latency_us: float = 50.0
    collective_bandwidth: float = 100e9  # bytes/s
    host_transfer_latency_us: float = 10.0
    host_transfer_bandwidth: float = 25e9
    # (size_bytes, time_us) points; overrides the affine collective model when set
    table: tuple | None = None

    def __post_init__(self):
        if self.collective_latency_us < 0 or self.host_transfer_latency_us < 0:
            raise ValueError("latencies must be >= 0")
        if self.collective_bandwidth <= 0 or self.host_transfer_bandwidth <= 0:
            raise ValueError("bandwidths must be > 0")
        if self.table is not None:
            pts = tuple((int(s), Fraction(t)) for s, t in self.table)
            if not pts:
                raise ValueError("cost table is empty")
            for (s0, t0), (s1, t1) in zip(pts, pts[1:]):
                if s1 <= s0:
                    raise ValueError("cost table sizes must be strictly increasing")
                if t1 < t0:
                    raise ValueError("cost table times must be nondecreasing")
            object.__setattr__(self, "table", tuple(self.table))
            object.__setattr__(self, "_points", pts)

    def comm_time_exact(self, nbytes: int) -> Fraction:
        if nbytes < 0:
            raise ValueError("negative message size")
        if self.table is None:
            return (Fraction(self.collective_latency_us)
                    + Fraction(nbytes) * 1_000_000 / Fraction(self.collective_bandwidth))
        pts = self._points
        sizes = [s for s, _ in pts]
        if nbytes <= sizes[0]:
            return pts[0][1]
        k = bisect.bisect_left(sizes, nbytes)
        if k < len(pts):
            (s0, t0), (s1, t1) = pts[k - 1], pts[k]
        elif len(pts) >= 2:
            (s0, t0), (s1, t1) = pts[-2], pts[-1]
        else:
            s0, t0 = pts[0]
            return t0 + Fraction(nbytes - s0) * 1_000_000 / Fraction(self.collective_bandwidth)
        return t0 + (t1 - t0) * Fraction(nbytes - s0, s1 - s0)

    def comm_time(self, nbytes: int) -> float:
        return float(self.comm_time_exact(nbytes))

    def comm_time_us(self, nbytes: int) -> int:
        """Integer microseconds used by the simulator (rounded up)."""
        return math.ceil(self.comm_time_exact(nbytes))

    def transfer_time_us(self, nbytes: int) -> int:
        t = (Fraction(self.host_transfer_latency_us)
             + Fraction(nbytes) * 1_000_000 / Fraction(self.host_transfer_bandwidth))
        return math.ceil(t)

    def should_fuse(self, v1: int, v2: int, alpha: float) -> bool:
        lhs = self.comm_time_exact(v1) + self.comm_time_exact(v2)
        return lhs > Fraction(alpha) * self.comm_time_exact(v1 + v2)

    def unshard_priority(self, nbytes: int) -> Fraction:
        """Communication time saved per byte kept resident."""
        return self.comm_time_exact(nbytes) / nbytes


def allgather_buffer_size(param: Parameter) -> int:
    # full unsharded buffer; the local shard is not assumed to be reused
    return param.size_bytes


@dataclass(frozen=True)
class ClusterConfig:
    device_count: int = 8
    device_memory_bytes: int = 80 * GiB
    memory_limit: int | None = None
    prefetch_limit: int = 2 * GiB
    fusion_threshold: float = 1.5
    accumulation_steps: int = 1
    # runtime/driver reserve taken off the device before the safety margin
    reserved_bytes: int = 0
    host_memory_bytes: int | None = None
    memory_fraction: float = field(default=0.9, repr=False)

    def __post_init__(self):
        if self.device_count < 1:
            raise ValueError("device_count must be >= 1")
        if self.reserved_bytes < 0 or self.reserved_bytes >= self.device_memory_bytes:
            raise ValueError("reserved_bytes must be in [0, device_memory_bytes)")
        if self.memory_limit is None:
            usable = self.device_memory_bytes - self.reserved_bytes
            object.__setattr__(self, "memory_limit", int(usable * Fraction(str(self.memory_fraction))))
        if not 0 < self.memory_limit <= self.device_memory_bytes:
            raise ValueError("memory_limit must satisfy 0 < M <= device_memory_bytes")
        if self.prefetch_limit <= 0:
            raise ValueError("prefetch_limit must be > 0")
        if self.fusion_threshold < 1:
            raise ValueError("fusion_threshold must be >= 1")
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")
        if self.host_memory_bytes is not None and self.host_memory_bytes < 0:
            raise ValueError("host_memory_bytes must be >= 0")

    @property
    def capacity_bytes(self) -> int:
        return self.device_memory_bytes - self.reserved_bytes


def fuse_boundary_affine(cost: CostModel, alpha: float) -> Fraction:
    """Equal-size message bound below which two affine-model gathers fuse."""
    a = Fraction(alpha)
    if not 1 < a < 2:
        raise ValueError("closed form only holds for 1 < alpha < 2")
    bw_per_us = Fraction(cost.collective_bandwidth) / 1_000_000
    return bw_per_us * Fraction(cost.collective_latency_us) * (2 - a) / (2 * (a - 1))

