"""
Operation graph, fusion pass and serial DMA/compute cost model for one
cross-attention block.

The untiled graph has nine rows: three calculations, each fed and drained
through DRAM. Fusion and tiling keep the score matrix on chip, which deletes
the four score spills/reloads and shrinks the value load to V alone.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

from .attention import AttentionInputs, fp_scores, fp_weighted_values
from .planner import HardwareProfile, TilePlan
from .tensor import ElementType, Tensor, cast, concat_rows, softmax_rows

QUERY, KEY, VALUE, S_IN, S_OUT, OUT = "Query", "Key", "Value", "S_in", "S_out", "A"
SCORE_ROLES = frozenset({S_IN, S_OUT})

DEFAULT_MLT_OVERHEAD = 0.04


class OpKind(Enum):
    DMA_LOAD = "dma_load"
    DMA_STORE = "dma_store"
    TENSOR_CALC = "tensor_calc"
    VECTOR_CALC = "vector_calc"

    @property
    def is_dma(self) -> bool:
        return self in (OpKind.DMA_LOAD, OpKind.DMA_STORE)

    @property
    def engine(self) -> str:
        return {
            OpKind.DMA_LOAD: "dma",
            OpKind.DMA_STORE: "dma",
            OpKind.TENSOR_CALC: "tensor",
            OpKind.VECTOR_CALC: "vector",
        }[self]


# Row keys shared by graphs, cost tables and reports.
LOAD_QK = "load_q_k"
CALC_QK = "calc_q_kt"
STORE_SIN = "store_s_in"
LOAD_SIN = "load_s_in"
SOFTMAX = "softmax"
STORE_SOUT = "store_s_out"
LOAD_SOUT_V = "load_s_out_v"
LOAD_V = "load_v"
CALC_SV = "calc_s_out_v"
STORE_A = "store_a"

UNTILED_ROWS = (LOAD_QK, CALC_QK, STORE_SIN, LOAD_SIN, SOFTMAX, STORE_SOUT, LOAD_SOUT_V, CALC_SV, STORE_A)
COMPUTE_ROWS = (CALC_QK, SOFTMAX, CALC_SV)
SPILL_ROWS = (STORE_SIN, LOAD_SIN, STORE_SOUT)

LABELS = {
    LOAD_QK: "DMA load: Query, Key",
    CALC_QK: "Tensor calc: Query x Key^T = S_in",
    STORE_SIN: "DMA store: S_in",
    LOAD_SIN: "DMA load: S_in",
    SOFTMAX: "Vector calc: Softmax(S_in) = S_out",
    STORE_SOUT: "DMA store: S_out",
    LOAD_SOUT_V: "DMA load: S_out, Value",
    LOAD_V: "DMA load: Value",
    CALC_SV: "Tensor calc: S_out x Value = A",
    STORE_A: "DMA store: A",
}


@dataclass(frozen=True)
class OpNode:
    key: str
    kind: OpKind
    role_bytes: Tuple[Tuple[str, int], ...] = ()
    work: int = 0
    transfers: int = 0
    fused: bool = False

    def __post_init__(self) -> None:
        if self.kind.is_dma:
            if self.bytes_moved <= 0 or self.work != 0 or self.transfers < 1:
                raise ValueError(f"{self.key}: DMA nodes move bytes in at least one transfer and do no work")
        elif self.bytes_moved != 0 or self.work <= 0:
            raise ValueError(f"{self.key}: calc nodes do work and move no bytes")

    @property
    def label(self) -> str:
        return LABELS[self.key]

    @property
    def operand_roles(self) -> FrozenSet[str]:
        if self.kind.is_dma:
            return frozenset(r for r, _ in self.role_bytes)
        return _CALC_ROLES[self.key]

    @property
    def bytes_moved(self) -> int:
        return sum(b for _, b in self.role_bytes)

    def bytes_for(self, role: str) -> int:
        return sum(b for r, b in self.role_bytes if r == role)

    @property
    def engine(self) -> str:
        return self.kind.engine


_CALC_ROLES = {
    CALC_QK: frozenset({QUERY, KEY, S_IN}),
    SOFTMAX: frozenset({S_IN, S_OUT}),
    CALC_SV: frozenset({S_OUT, VALUE, OUT}),
}


@dataclass(frozen=True)
class AttentionGraph:
    nodes: Tuple[OpNode, ...]
    dims: Tuple[int, int, int]
    dtype: ElementType
    tiled_with: Optional[TilePlan] = None
    resident_v: bool = False

    @property
    def fused(self) -> bool:
        return all(n.fused for n in self.nodes if not n.kind.is_dma)

    def dma_bytes(self, role: str) -> int:
        return sum(n.bytes_for(role) for n in self.nodes if n.kind.is_dma)

    @property
    def total_dma_bytes(self) -> int:
        return sum(n.bytes_moved for n in self.nodes)

    def node(self, key: str) -> OpNode:
        for n in self.nodes:
            if n.key == key:
                return n
        raise KeyError(key)

    @property
    def keys(self) -> List[str]:
        return [n.key for n in self.nodes]


def _check_dims(dims: Sequence[int]) -> Tuple[int, int, int]:
    if len(dims) != 3 or any(int(x) <= 0 for x in dims):
        raise ValueError(f"dims must be three positive integers (n_q, n_k, d), got {dims}")
    return tuple(int(x) for x in dims)


def build_attention_graph(
    dims: Sequence[int],
    dtype: ElementType,
    plan: Optional[TilePlan] = None,
    resident_v: bool = False,
) -> AttentionGraph:
    """Operation graph for one block; tiled and fused when ``plan`` is given.

    With a plan, Q loads and A stores are issued per tile, K once, and V once
    per tile (``resident_v=True``: once in total).
    """
    n_q, n_k, d = _check_dims(dims)
    bw = dtype.byte_width
    q_b, k_b, v_b = n_q * d * bw, n_k * d * bw, n_k * d * bw
    s_b, a_b = n_q * n_k * bw, n_q * d * bw
    macs = n_q * n_k * d

    if plan is None:
        nodes = (
            OpNode(LOAD_QK, OpKind.DMA_LOAD, ((QUERY, q_b), (KEY, k_b)), transfers=2),
            OpNode(CALC_QK, OpKind.TENSOR_CALC, work=macs),
            OpNode(STORE_SIN, OpKind.DMA_STORE, ((S_IN, s_b),), transfers=1),
            OpNode(LOAD_SIN, OpKind.DMA_LOAD, ((S_IN, s_b),), transfers=1),
            OpNode(SOFTMAX, OpKind.VECTOR_CALC, work=n_q * n_k),
            OpNode(STORE_SOUT, OpKind.DMA_STORE, ((S_OUT, s_b),), transfers=1),
            OpNode(LOAD_SOUT_V, OpKind.DMA_LOAD, ((S_OUT, s_b), (VALUE, v_b)), transfers=2),
            OpNode(CALC_SV, OpKind.TENSOR_CALC, work=macs),
            OpNode(STORE_A, OpKind.DMA_STORE, ((OUT, a_b),), transfers=1),
        )
        return AttentionGraph(nodes, (n_q, n_k, d), dtype)

    if plan.n_q != n_q or (plan.n_k is not None and (plan.n_k, plan.d) != (n_k, d)):
        raise ValueError(f"plan (n_q={plan.n_q}, n_k={plan.n_k}, d={plan.d}) does not match dims {dims}")
    tiles = plan.tile_count
    v_loads = 1 if resident_v else tiles
    nodes = (
        OpNode(LOAD_QK, OpKind.DMA_LOAD, ((QUERY, q_b), (KEY, k_b)), transfers=tiles + 1),
        OpNode(CALC_QK, OpKind.TENSOR_CALC, work=macs, fused=True),
        OpNode(SOFTMAX, OpKind.VECTOR_CALC, work=n_q * n_k, fused=True),
        OpNode(LOAD_V, OpKind.DMA_LOAD, ((VALUE, v_b * v_loads),), transfers=v_loads),
        OpNode(CALC_SV, OpKind.TENSOR_CALC, work=macs, fused=True),
        OpNode(STORE_A, OpKind.DMA_STORE, ((OUT, a_b),), transfers=tiles),
    )
    return AttentionGraph(nodes, (n_q, n_k, d), dtype, tiled_with=plan, resident_v=resident_v)


def fuse_attention(g: AttentionGraph) -> AttentionGraph:
    """Merge Q*K^T, softmax and S_out*V into one on-chip region.

    Score spills and reloads disappear; the value load keeps only V.
    Already-fused graphs are returned unchanged.
    """
    if g.fused:
        return g
    nodes: List[OpNode] = []
    for n in g.nodes:
        if n.key in SPILL_ROWS:
            continue
        if n.key == LOAD_SOUT_V:
            nodes.append(OpNode(LOAD_V, OpKind.DMA_LOAD, ((VALUE, n.bytes_for(VALUE)),), transfers=1))
        elif n.kind.is_dma:
            nodes.append(n)
        else:
            nodes.append(replace(n, fused=True))
    return AttentionGraph(tuple(nodes), g.dims, g.dtype, g.tiled_with, resident_v=True)


# -- simulation ---------------------------------------------------------------


@dataclass(frozen=True)
class TrafficRow:
    key: str
    label: str
    bytes: int
    engine: str
    time_us: float
    relative_pct: float


@dataclass(frozen=True)
class TrafficReport:
    rows: Tuple[TrafficRow, ...]
    total_time_us: float
    total_relative_pct: float
    baseline: str = "self"

    @property
    def total_bytes(self) -> int:
        return sum(r.bytes for r in self.rows)

    def row(self, key: str) -> TrafficRow:
        for r in self.rows:
            if r.key == key:
                return r
        raise KeyError(key)

    def relative_to(self, baseline: "TrafficReport", name: str = "baseline") -> "TrafficReport":
        """Same rows with percentages expressed against ``baseline``'s total time."""
        return _finish([(r.key, r.label, r.bytes, r.engine, r.time_us) for r in self.rows], baseline.total_time_us, name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "baseline": self.baseline,
            "rows": [
                {"label": r.label, "bytes": r.bytes, "engine": r.engine, "time_us": r.time_us, "relative_pct": r.relative_pct}
                for r in self.rows
            ],
            "total": {
                "label": "total",
                "bytes": self.total_bytes,
                "engine": "",
                "time_us": self.total_time_us,
                "relative_pct": self.total_relative_pct,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "bytes", "engine", "time_us", "relative_pct"])
        for r in self.rows:
            writer.writerow([r.label, r.bytes, r.engine, repr(r.time_us), repr(r.relative_pct)])
        writer.writerow(["total", self.total_bytes, "", repr(self.total_time_us), repr(self.total_relative_pct)])
        return buf.getvalue()


def _finish(raw: Sequence[Tuple[str, str, int, str, float]], reference_us: Optional[float], name: str) -> TrafficReport:
    total = 0.0
    for *_, t in raw:
        total += t
    ref = total if reference_us is None else reference_us
    if ref <= 0:
        raise ValueError("reference time must be positive")
    rows = tuple(TrafficRow(k, lbl, b, eng, t, 100.0 * t / ref) for k, lbl, b, eng, t in raw)
    return TrafficReport(rows, total, 100.0 * total / ref, name if reference_us is not None else "self")


def simulate(
    g: AttentionGraph,
    hw: HardwareProfile,
    mlt_overhead: float = DEFAULT_MLT_OVERHEAD,
    baseline: Optional[TrafficReport] = None,
) -> TrafficReport:
    """Serial cost model: every row runs alone, times add up.

    DMA rows cost ``transfers * dma_setup_us + bytes / bandwidth``; tensor rows
    ``MACs / tensor rate``; vector rows ``elements / vector rate``. Compute rows
    of tiled graphs are stretched by ``1 + mlt_overhead``.
    """
    if mlt_overhead < 0:
        raise ValueError("mlt_overhead must be non-negative")
    stretch = 1.0 + mlt_overhead if g.tiled_with is not None else 1.0
    raw = []
    for n in g.nodes:
        if n.kind.is_dma:
            t = n.transfers * hw.dma_setup_us + n.bytes_moved / hw.dram_bandwidth_bytes_per_us
        elif n.kind is OpKind.TENSOR_CALC:
            t = n.work / hw.tensor_engine_macs_per_us * stretch
        else:
            t = n.work / hw.vector_engine_elems_per_us * stretch
        raw.append((n.key, n.label, n.bytes_moved, n.engine, t))
    if baseline is None:
        return _finish(raw, None, "self")
    return _finish(raw, baseline.total_time_us, "baseline")


# -- measured baseline shares -------------------------------------------------

# Row shares (percent of block time) of an SD cross-attention block on the
# Exynos 2400 NPU without tiling, and the compute shares measured with tiling.
EXYNOS2400_BASELINE = {
    LOAD_QK: 0.6,
    CALC_QK: 6.9,
    STORE_SIN: 19.1,
    LOAD_SIN: 18.2,
    SOFTMAX: 11.0,
    STORE_SOUT: 18.5,
    LOAD_SOUT_V: 19.5,
    CALC_SV: 5.4,
    STORE_A: 0.7,
}
EXYNOS2400_TILED_COMPUTE = {CALC_QK: 7.2, SOFTMAX: 11.6, CALC_SV: 5.7}
EXYNOS2400_TILED_V_LOAD = 0.8


@dataclass(frozen=True)
class BaselineCostTable:
    """Per-row percentages of an untiled block; optionally the tiled compute shares."""

    rows: Mapping[str, float]
    tiled_compute: Optional[Mapping[str, float]] = None

    def __post_init__(self) -> None:
        if set(self.rows) != set(UNTILED_ROWS):
            raise ValueError(f"baseline table needs exactly the rows {', '.join(UNTILED_ROWS)}")
        if any(v < 0 for v in self.rows.values()):
            raise ValueError("percentages must be non-negative")
        total = self.total
        if total > 0 and abs(total - 100.0) > 0.2:
            raise ValueError(f"baseline rows sum to {total}, expected 100 +- 0.2")
        if self.tiled_compute is not None and set(self.tiled_compute) != set(COMPUTE_ROWS):
            raise ValueError(f"tiled_compute needs exactly {', '.join(COMPUTE_ROWS)}")
        object.__setattr__(self, "rows", dict(self.rows))
        if self.tiled_compute is not None:
            object.__setattr__(self, "tiled_compute", dict(self.tiled_compute))

    @property
    def total(self) -> float:
        s = 0.0
        for key in UNTILED_ROWS:
            s += self.rows[key]
        return s

    @classmethod
    def exynos2400(cls, with_tiled_compute: bool = False) -> "BaselineCostTable":
        return cls(dict(EXYNOS2400_BASELINE), dict(EXYNOS2400_TILED_COMPUTE) if with_tiled_compute else None)

    @classmethod
    def zeros(cls) -> "BaselineCostTable":
        return cls({k: 0.0 for k in UNTILED_ROWS})

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {"rows": dict(self.rows)}
        if self.tiled_compute is not None:
            doc["tiled_compute"] = dict(self.tiled_compute)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "BaselineCostTable":
        unknown = set(doc) - {"rows", "tiled_compute"}
        if unknown:
            raise ValueError(f"unknown baseline table fields: {', '.join(sorted(unknown))}")
        rows = {k: float(v) for k, v in doc["rows"].items()}
        tc = doc.get("tiled_compute")
        return cls(rows, {k: float(v) for k, v in tc.items()} if tc is not None else None)


def tiled_row_percents(
    tbl: BaselineCostTable,
    v_load_percent: float,
    compute_overhead: Optional[float] = None,
) -> Dict[str, float]:
    """Row shares after tiling, in the same units as ``tbl``.

    Score spills are dropped and the value load is replaced by
    ``v_load_percent``. Compute rows are the baseline stretched by
    ``1 + compute_overhead`` when an overhead is given, else the table's
    measured tiled compute shares if it has them, else unchanged.
    """
    if not 0 <= v_load_percent <= tbl.rows[LOAD_SOUT_V]:
        raise ValueError(f"v_load_percent must lie in [0, {tbl.rows[LOAD_SOUT_V]}]")
    if compute_overhead is not None:
        if compute_overhead < 0:
            raise ValueError("compute_overhead must be non-negative")
        compute = {k: tbl.rows[k] * (1.0 + compute_overhead) for k in COMPUTE_ROWS}
    elif tbl.tiled_compute is not None:
        compute = dict(tbl.tiled_compute)
    else:
        compute = {k: tbl.rows[k] for k in COMPUTE_ROWS}
    return {
        LOAD_QK: tbl.rows[LOAD_QK],
        CALC_QK: compute[CALC_QK],
        SOFTMAX: compute[SOFTMAX],
        LOAD_V: v_load_percent,
        CALC_SV: compute[CALC_SV],
        STORE_A: tbl.rows[STORE_A],
    }


def apply_mlt_to_baseline(
    tbl: BaselineCostTable,
    v_load_percent: float,
    compute_overhead: Optional[float] = None,
) -> float:
    """Predicted tiled block time as a percentage of the untiled baseline."""
    total = 0.0
    for pct in tiled_row_percents(tbl, v_load_percent, compute_overhead).values():
        total += pct
    return total


def simulate_calibrated(
    g: AttentionGraph,
    tbl: BaselineCostTable,
    block_time_us: float,
    v_load_percent: float = EXYNOS2400_TILED_V_LOAD,
    compute_overhead: Optional[float] = DEFAULT_MLT_OVERHEAD,
    baseline: Optional[TrafficReport] = None,
) -> TrafficReport:
    """Cost every row as a share of ``block_time_us`` taken from a measured table.

    Unfused graphs use the table's untiled shares directly; fused or tiled
    graphs use :func:`tiled_row_percents`.
    """
    if g.fused:
        pct = tiled_row_percents(tbl, v_load_percent, compute_overhead)
    else:
        pct = dict(tbl.rows)
    raw = [(n.key, n.label, n.bytes_moved, n.engine, block_time_us * pct[n.key] / 100.0) for n in g.nodes]
    return _finish(raw, None if baseline is None else baseline.total_time_us, "baseline" if baseline else "self")


# -- graph interpreter --------------------------------------------------------


@dataclass
class ExecutionTrace:
    """DMA bytes actually moved, per row key and per operand role."""

    by_row: Dict[str, int] = field(default_factory=dict)
    by_role: Dict[str, int] = field(default_factory=dict)
    transfers: Dict[str, int] = field(default_factory=dict)

    def record(self, key: str, role: str, t: Tensor, dtype: ElementType) -> None:
        nbytes = t.size * dtype.byte_width
        self.by_row[key] = self.by_row.get(key, 0) + nbytes
        self.by_role[role] = self.by_role.get(role, 0) + nbytes
        self.transfers[key] = self.transfers.get(key, 0) + 1


def execute_graph(g: AttentionGraph, inputs: AttentionInputs) -> Tuple[Tensor, ExecutionTrace]:
    """Run the block by walking ``g``'s rows against a DRAM/SRAM model.

    Stores narrow to ``g.dtype`` as a real spill would. Returns the output and
    the bytes each DMA row moved.
    """
    if (inputs.n_q, inputs.n_k, inputs.d) != g.dims:
        raise ValueError(f"inputs {inputs.n_q, inputs.n_k, inputs.d} do not match graph dims {g.dims}")
    trace = ExecutionTrace()
    if not g.fused:
        return _execute_unfused(g, inputs, trace), trace

    spans = g.tiled_with.spans if g.tiled_with is not None else None
    n_q = inputs.n_q
    row_ranges = [(s.row_start, s.row_count) for s in spans] if spans else [(0, n_q)]
    k_t = inputs.k.transpose()
    outs = []
    sram: Dict[str, Tensor] = {}
    for tile_idx, (start, count) in enumerate(row_ranges):
        for n in g.nodes:
            if n.key == LOAD_QK:
                sram[QUERY] = inputs.q.rows(start, count)
                trace.record(n.key, QUERY, sram[QUERY], g.dtype)
                if tile_idx == 0:
                    sram[KEY] = k_t
                    trace.record(n.key, KEY, inputs.k, g.dtype)
            elif n.key == CALC_QK:
                sram[S_IN] = fp_scores(sram.pop(QUERY), sram[KEY], inputs.scale)
            elif n.key == SOFTMAX:
                sram[S_OUT] = softmax_rows(sram.pop(S_IN))
            elif n.key == LOAD_V:
                if tile_idx == 0 or not g.resident_v:
                    sram[VALUE] = inputs.v
                    trace.record(n.key, VALUE, inputs.v, g.dtype)
            elif n.key == CALC_SV:
                sram[OUT] = fp_weighted_values(sram.pop(S_OUT), sram[VALUE])
            elif n.key == STORE_A:
                tile_out = cast(sram.pop(OUT), g.dtype)
                trace.record(n.key, OUT, tile_out, g.dtype)
                outs.append(tile_out)
            else:
                raise ValueError(f"row {n.key} cannot appear in a fused graph")
    return concat_rows(outs), trace


def _execute_unfused(g: AttentionGraph, inputs: AttentionInputs, trace: ExecutionTrace) -> Tensor:
    dram: Dict[str, Tensor] = {QUERY: inputs.q, KEY: inputs.k, VALUE: inputs.v}
    sram: Dict[str, Tensor] = {}
    for n in g.nodes:
        if n.kind is OpKind.DMA_LOAD:
            for role, _ in n.role_bytes:
                sram[role] = dram[role]
                trace.record(n.key, role, dram[role], g.dtype)
        elif n.kind is OpKind.DMA_STORE:
            for role, _ in n.role_bytes:
                dram[role] = cast(sram.pop(role), g.dtype)
                trace.record(n.key, role, dram[role], g.dtype)
        elif n.key == CALC_QK:
            sram[S_IN] = fp_scores(sram.pop(QUERY), sram.pop(KEY).transpose(), inputs.scale)
        elif n.key == SOFTMAX:
            sram[S_OUT] = softmax_rows(sram.pop(S_IN))
        elif n.key == CALC_SV:
            sram[OUT] = fp_weighted_values(sram.pop(S_OUT), sram.pop(VALUE))
    return dram[OUT]
