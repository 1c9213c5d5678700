"""
Reference and query-tiled executors for a single cross-attention block.

The tiled path splits only the query rows. Keys and values stay whole, so each
tile holds complete score rows and its softmax needs no rescaling; the score
slice is created and consumed inside the tile and never handed back.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence

import numpy as np

from .tensor import ElementType, Tensor, cast, concat_rows, matmul, scale as scale_tensor, softmax_rows

if TYPE_CHECKING:
    from .planner import TilePlan


@dataclass(frozen=True)
class TileSpan:
    row_start: int
    row_count: int

    def __post_init__(self) -> None:
        if self.row_start < 0:
            raise ValueError("row_start must be non-negative")
        if self.row_count <= 0:
            raise ValueError("row_count must be positive")

    @property
    def row_stop(self) -> int:
        return self.row_start + self.row_count


def check_partition(spans: Sequence[TileSpan], n_q: int) -> None:
    """Raise unless ``spans`` are sorted, disjoint and cover ``[0, n_q)`` exactly."""
    cursor = 0
    for span in spans:
        if span.row_start != cursor:
            raise ValueError(f"span starting at {span.row_start} leaves a gap or overlap at row {cursor}")
        cursor = span.row_stop
    if cursor != n_q:
        raise ValueError(f"spans cover {cursor} rows, expected {n_q}")


@dataclass(frozen=True)
class AttentionInputs:
    q: Tensor
    k: Tensor
    v: Tensor
    scale: Optional[float] = None

    def __post_init__(self) -> None:
        q, k, v = self.q, self.k, self.v
        if not (q.dtype == k.dtype == v.dtype):
            raise TypeError("q, k and v must share a dtype")
        if not q.dtype.is_float:
            raise TypeError("attention operands must be floating")
        if q.rank != 2 or k.rank != 2 or v.rank != 2:
            raise ValueError("q, k, v must be 2-D")
        if q.shape[1] != k.shape[1]:
            raise ValueError(f"q width {q.shape[1]} != k width {k.shape[1]}")
        if k.shape[0] != v.shape[0]:
            raise ValueError(f"k has {k.shape[0]} rows but v has {v.shape[0]}")
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / math.sqrt(q.shape[1]))
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def n_q(self) -> int:
        return self.q.shape[0]

    @property
    def n_k(self) -> int:
        return self.k.shape[0]

    @property
    def d(self) -> int:
        return self.q.shape[1]

    @property
    def d_v(self) -> int:
        return self.v.shape[1]

    @property
    def dtype(self) -> ElementType:
        return self.q.dtype


# Operand kernels, swappable so the quantized path can reuse the tiling logic.
ScoreFn = Callable[[Tensor, Tensor, float], Tensor]
ValueFn = Callable[[Tensor, Tensor], Tensor]


def fp_scores(q: Tensor, k_t: Tensor, scale: float) -> Tensor:
    s = matmul(q, k_t, ElementType.FP32, ElementType.FP32)
    return scale_tensor(s, scale)


def fp_weighted_values(p: Tensor, v: Tensor) -> Tensor:
    return matmul(p, v, ElementType.FP32, ElementType.FP32)


def _block(q: Tensor, k_t: Tensor, v: Tensor, scale: float, scores: ScoreFn, values: ValueFn) -> Tensor:
    s_in = scores(q, k_t, scale)
    s_out = softmax_rows(s_in)
    return values(s_out, v)


def attention_reference(
    inputs: AttentionInputs,
    scores: ScoreFn = fp_scores,
    values: ValueFn = fp_weighted_values,
) -> Tensor:
    """softmax(scale * q k^T) v with the full score matrix materialized.

    Accumulation is FP32; the output has the inputs' dtype.
    """
    a = _block(inputs.q, inputs.k.transpose(), inputs.v, inputs.scale, scores, values)
    return cast(a, inputs.dtype)


def attention_tiled(
    inputs: AttentionInputs,
    plan: "TilePlan",
    order: Optional[Sequence[int]] = None,
    max_workers: int = 1,
    scores: ScoreFn = fp_scores,
    values: ValueFn = fp_weighted_values,
    on_tile: Optional[Callable[[TileSpan, Tensor], None]] = None,
) -> Tensor:
    """Run the block tile by tile over ``plan``'s query spans.

    ``order`` permutes the tile schedule and ``max_workers > 1`` runs tiles on a
    thread pool; neither changes the result. ``on_tile`` receives each tile's
    softmax output for inspection.
    """
    if plan.n_q != inputs.n_q:
        raise ValueError(f"plan covers {plan.n_q} query rows, inputs have {inputs.n_q}")
    if plan.n_k is not None and (plan.n_k, plan.d) != (inputs.n_k, inputs.d):
        raise ValueError(f"plan was made for n_k={plan.n_k}, d={plan.d}; inputs have n_k={inputs.n_k}, d={inputs.d}")
    spans = plan.spans
    schedule = list(range(len(spans))) if order is None else list(order)
    if sorted(schedule) != list(range(len(spans))):
        raise ValueError("order must be a permutation of the tile indices")

    k_t = inputs.k.transpose()
    results: List[Optional[Tensor]] = [None] * len(spans)

    def run(idx: int) -> None:
        span = spans[idx]
        q_tile = inputs.q.rows(span.row_start, span.row_count)
        s_in = scores(q_tile, k_t, inputs.scale)
        s_out = softmax_rows(s_in)
        if on_tile is not None:
            on_tile(span, s_out)
        results[idx] = values(s_out, inputs.v)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            list(pool.map(run, schedule))
    else:
        for idx in schedule:
            run(idx)
    return cast(concat_rows(results), inputs.dtype)


def random_inputs(
    rng: np.random.Generator,
    n_q: int,
    n_k: int,
    d: int,
    dtype: ElementType = ElementType.FP32,
    scale: Optional[float] = None,
) -> AttentionInputs:
    """Standard-normal q, k, v of the given shape."""
    q = Tensor.from_array(rng.standard_normal((n_q, d)), dtype)
    k = Tensor.from_array(rng.standard_normal((n_k, d)), dtype)
    v = Tensor.from_array(rng.standard_normal((n_k, d)), dtype)
    return AttentionInputs(q, k, v, scale)
