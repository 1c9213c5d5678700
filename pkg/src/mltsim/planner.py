"""
SRAM-budgeted tile planning for the query-tiled attention block.

A tile of ``t`` query rows keeps its Q slice, all of K and V, its score slice
and its output slice resident at once. The planner picks the largest ``t``
that fits the budget, which gives the fewest (and largest) tiles.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .attention import TileSpan, check_partition
from .tensor import ElementType


class InfeasiblePlan(ValueError):
    """Not even a single-row tile fits in the SRAM budget."""

    def __init__(self, required_bytes: int, available_bytes: int) -> None:
        self.required_bytes = required_bytes
        self.available_bytes = available_bytes
        super().__init__(
            f"a single-row tile needs {required_bytes} bytes but only {available_bytes} bytes of SRAM are budgeted"
        )


@dataclass(frozen=True)
class HardwareProfile:
    sram_bytes: int
    dram_bandwidth_bytes_per_us: float
    dma_setup_us: float
    tensor_engine_macs_per_us: float
    vector_engine_elems_per_us: float
    utilization_target: float = 0.9

    def __post_init__(self) -> None:
        if self.sram_bytes <= 0:
            raise ValueError("sram_bytes must be positive")
        if not 0 < self.utilization_target <= 1:
            raise ValueError("utilization_target must lie in (0, 1]")
        for name in ("dram_bandwidth_bytes_per_us", "tensor_engine_macs_per_us", "vector_engine_elems_per_us"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        # A zero setup cost is the calibration default; negative makes no sense.
        if self.dma_setup_us < 0:
            raise ValueError("dma_setup_us must be non-negative")

    @property
    def sram_budget_bytes(self) -> int:
        """Whole bytes the planner may use: floor(utilization_target * sram_bytes)."""
        frac = Fraction(str(self.utilization_target)) * self.sram_bytes
        return math.floor(frac)

    def scaled(self, factor: float) -> "HardwareProfile":
        """Every throughput multiplied by ``factor`` and the DMA setup cost divided by it."""
        return HardwareProfile(
            sram_bytes=self.sram_bytes,
            dram_bandwidth_bytes_per_us=self.dram_bandwidth_bytes_per_us * factor,
            dma_setup_us=self.dma_setup_us / factor,
            tensor_engine_macs_per_us=self.tensor_engine_macs_per_us * factor,
            vector_engine_elems_per_us=self.vector_engine_elems_per_us * factor,
            utilization_target=self.utilization_target,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "HardwareProfile":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown hardware profile fields: {', '.join(unknown)}")
        required = known - {"utilization_target"}
        missing = sorted(required - set(doc))
        if missing:
            raise ValueError(f"missing hardware profile fields: {', '.join(missing)}")
        if isinstance(doc["sram_bytes"], bool) or int(doc["sram_bytes"]) != doc["sram_bytes"]:
            raise ValueError("sram_bytes must be an integer")
        kwargs = {k: (int(v) if k == "sram_bytes" else float(v)) for k, v in doc.items()}
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "HardwareProfile":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def working_set(t_rows: int, n_k: int, d: int, dtype: ElementType) -> int:
    """Resident bytes for one tile: Q slice + K + V + score slice + output slice."""
    if min(t_rows, n_k, d) <= 0:
        raise ValueError("working_set needs positive dimensions")
    elems = t_rows * d + 2 * n_k * d + t_rows * n_k + t_rows * d
    return elems * dtype.byte_width


@dataclass(frozen=True)
class TilePlan:
    spans: Tuple[TileSpan, ...]
    working_set_bytes: int
    sram_budget_bytes: int
    n_k: Optional[int] = None
    d: Optional[int] = None
    dtype: Optional[ElementType] = None

    def __post_init__(self) -> None:
        spans = tuple(self.spans)
        if not spans:
            raise ValueError("a plan needs at least one span")
        object.__setattr__(self, "spans", spans)
        check_partition(spans, spans[-1].row_stop)
        if self.working_set_bytes > self.sram_budget_bytes:
            raise ValueError(
                f"working set {self.working_set_bytes} bytes exceeds the {self.sram_budget_bytes} byte budget"
            )

    @property
    def tile_count(self) -> int:
        return len(self.spans)

    @property
    def n_q(self) -> int:
        return self.spans[-1].row_stop

    @property
    def row_counts(self) -> List[int]:
        return [s.row_count for s in self.spans]

    @classmethod
    def from_row_counts(
        cls,
        counts: Sequence[int],
        n_k: int,
        d: int,
        dtype: ElementType,
        sram_budget_bytes: Optional[int] = None,
    ) -> "TilePlan":
        """Plan with explicit tile heights, e.g. for tests or hand-tuned schedules.

        Without a budget the plan is checked against its own working set only.
        """
        spans, start = [], 0
        for c in counts:
            spans.append(TileSpan(start, int(c)))
            start += int(c)
        ws = working_set(max(counts), n_k, d, dtype)
        budget = ws if sram_budget_bytes is None else sram_budget_bytes
        return cls(tuple(spans), ws, budget, n_k, d, dtype)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_q": self.n_q,
            "n_k": self.n_k,
            "d": self.d,
            "dtype": self.dtype.value if self.dtype else None,
            "tile_count": self.tile_count,
            "spans": [[s.row_start, s.row_count] for s in self.spans],
            "working_set_bytes": self.working_set_bytes,
            "sram_budget_bytes": self.sram_budget_bytes,
        }


def max_tile_rows(n_k: int, d: int, dtype: ElementType, budget_bytes: int) -> int:
    """Largest row count whose working set fits ``budget_bytes`` (0 if none)."""
    fixed = 2 * n_k * d * dtype.byte_width
    per_row = (2 * d + n_k) * dtype.byte_width
    return max(0, (budget_bytes - fixed) // per_row)


def balanced_counts(n_q: int, tile_count: int) -> List[int]:
    """Split n_q rows into tile_count heights differing by at most one, larger first."""
    base, extra = divmod(n_q, tile_count)
    return [base + 1] * extra + [base] * (tile_count - extra)


def plan_tiles(n_q: int, n_k: int, d: int, dtype: ElementType, hw: HardwareProfile) -> TilePlan:
    if min(n_q, n_k, d) <= 0:
        raise ValueError("plan_tiles needs positive dimensions")
    budget = hw.sram_budget_bytes
    t_max = max_tile_rows(n_k, d, dtype, budget)
    if t_max < 1:
        raise InfeasiblePlan(working_set(1, n_k, d, dtype), budget)
    t_max = min(t_max, n_q)
    tile_count = -(-n_q // t_max)
    counts = balanced_counts(n_q, tile_count)
    return TilePlan.from_row_counts(counts, n_k, d, dtype, budget)
