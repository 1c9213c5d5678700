"""
Post-training quantization: min/max calibration, affine INT8/INT16 codes,
integer matmul with zero-point correction, and fidelity metrics.

Conventions: weights are symmetric per output channel (INT8), activations are
asymmetric per tensor (INT16), rounding is half-to-even everywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .attention import AttentionInputs, attention_reference, attention_tiled
from .tensor import ElementType, Tensor


class Scheme(Enum):
    SYMMETRIC = "symmetric"
    ASYMMETRIC = "asymmetric"


class Precision(Enum):
    FP32 = "FP32"
    FP16 = "FP16"
    W8A16 = "W8A16"


_INT_TYPE = {8: ElementType.INT8, 16: ElementType.INT16}


def int_type(bit_width: int) -> ElementType:
    try:
        return _INT_TYPE[bit_width]
    except KeyError:
        raise ValueError(f"bit_width must be 8 or 16, got {bit_width}") from None


def _group_view(arr: np.ndarray, axis: Optional[int]) -> np.ndarray:
    """2-D view with one row per quantization group."""
    if axis is None:
        return arr.reshape(1, -1)
    return np.moveaxis(arr, axis, 0).reshape(arr.shape[axis], -1)


def _broadcast(values: np.ndarray, ndim: int, axis: Optional[int]) -> np.ndarray:
    if axis is None:
        return values.reshape(())
    shape = [1] * ndim
    shape[axis] = -1
    return values.reshape(shape)


@dataclass
class CalibrationStats:
    """Running per-group min/max. Owned by a single caller while observing."""

    axis: Optional[int] = None
    mins: Optional[np.ndarray] = None
    maxs: Optional[np.ndarray] = None
    samples: int = 0
    shape: Optional[Tuple[int, ...]] = None

    def observe(self, t: Tensor) -> "CalibrationStats":
        arr = t.data.astype(np.float64)
        if self.shape is not None and t.shape != self.shape:
            raise ValueError(f"sample shape {t.shape} differs from earlier samples {self.shape}")
        if self.axis is not None and not -t.rank <= self.axis < t.rank:
            raise ValueError(f"axis {self.axis} out of range for rank {t.rank}")
        groups = _group_view(arr, self.axis)
        lo, hi = groups.min(axis=1), groups.max(axis=1)
        if self.samples == 0:
            self.mins, self.maxs, self.shape = lo, hi, t.shape
        else:
            self.mins = np.minimum(self.mins, lo)
            self.maxs = np.maximum(self.maxs, hi)
        self.samples += 1
        return self

    @property
    def groups(self) -> int:
        return 0 if self.mins is None else int(self.mins.size)


def calibrate(samples: Iterable[Tensor], axis: Optional[int] = None) -> CalibrationStats:
    """Exact min/max over all samples, per tensor (``axis=None``) or per channel along ``axis``."""
    stats = CalibrationStats(axis=axis)
    for s in samples:
        stats.observe(s)
    if stats.samples == 0:
        raise ValueError("calibration needs at least one sample")
    return stats


@dataclass(frozen=True)
class QuantParams:
    scheme: Scheme
    bit_width: int
    scales: Tuple[float, ...]
    zero_points: Tuple[int, ...]
    axis: Optional[int] = None

    def __post_init__(self) -> None:
        dtype = int_type(self.bit_width)
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "zero_points", tuple(int(z) for z in self.zero_points))
        if not self.scales or len(self.scales) != len(self.zero_points):
            raise ValueError("need one scale and one zero point per group")
        if self.axis is None and len(self.scales) != 1:
            raise ValueError("per-tensor params carry exactly one scale")
        if any(not (s > 0 and math.isfinite(s)) for s in self.scales):
            raise ValueError("scales must be positive and finite")
        lo, hi = dtype.int_range
        if any(not lo <= z <= hi for z in self.zero_points):
            raise ValueError(f"zero points must lie in [{lo}, {hi}]")
        if self.scheme is Scheme.SYMMETRIC and any(self.zero_points):
            raise ValueError("symmetric params have zero zero-points")

    @property
    def dtype(self) -> ElementType:
        return int_type(self.bit_width)

    @property
    def granularity(self) -> str:
        return "per_tensor" if self.axis is None else "per_channel"

    def check_shape(self, shape: Sequence[int]) -> None:
        if self.axis is None:
            return
        if not -len(shape) <= self.axis < len(shape):
            raise ValueError(f"axis {self.axis} out of range for shape {tuple(shape)}")
        if shape[self.axis] != len(self.scales):
            raise ValueError(f"{len(self.scales)} channel scales for an axis of size {shape[self.axis]}")

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {
            "scheme": self.scheme.value,
            "bit_width": self.bit_width,
            "granularity": self.granularity,
            "scales": list(self.scales),
            "zero_points": list(self.zero_points),
        }
        if self.axis is not None:
            doc["axis"] = self.axis
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "QuantParams":
        allowed = {"scheme", "bit_width", "granularity", "axis", "scales", "zero_points"}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown quant param fields: {', '.join(sorted(unknown))}")
        gran = doc.get("granularity", "per_tensor")
        axis = doc.get("axis")
        if gran == "per_tensor" and axis is not None:
            raise ValueError("per_tensor params take no axis")
        if gran == "per_channel" and axis is None:
            raise ValueError("per_channel params need an axis")
        if gran not in ("per_tensor", "per_channel"):
            raise ValueError(f"unknown granularity {gran!r}")
        return cls(Scheme(doc["scheme"]), int(doc["bit_width"]), tuple(doc["scales"]), tuple(doc["zero_points"]), axis)

    @classmethod
    def from_json(cls, text: str) -> "QuantParams":
        return cls.from_dict(json.loads(text))


def make_params(stats: CalibrationStats, scheme: Union[Scheme, str], bit_width: int) -> QuantParams:
    """Scales and zero points from observed ranges.

    Symmetric: ``scale = max|x| / qmax``, zero point 0. Asymmetric: the range
    ``[min, max]`` is stretched over all ``2**bits`` codes and the zero point is
    the code that represents 0.0. Groups that saw only zeros get scale 1.
    """
    scheme = Scheme(scheme)
    if stats.samples == 0:
        raise ValueError("stats have no samples")
    lo_q, hi_q = int_type(bit_width).int_range
    scales: List[float] = []
    zps: List[int] = []
    for lo, hi in zip(stats.mins.tolist(), stats.maxs.tolist()):
        if scheme is Scheme.SYMMETRIC:
            amax = max(abs(lo), abs(hi))
            scales.append(amax / hi_q if amax > 0 else 1.0)
            zps.append(0)
        else:
            # range must contain 0 so that 0.0 is exactly representable
            lo, hi = min(lo, 0.0), max(hi, 0.0)
            if hi == lo:
                scales.append(1.0)
                zps.append(0)
                continue
            s = (hi - lo) / (2 ** bit_width - 1)
            scales.append(s)
            zps.append(int(min(max(lo_q - round(lo / s), lo_q), hi_q)))
    return QuantParams(scheme, bit_width, tuple(scales), tuple(zps), stats.axis)


def _params_arrays(p: QuantParams, ndim: int) -> Tuple[np.ndarray, np.ndarray]:
    s = _broadcast(np.asarray(p.scales, dtype=np.float64), ndim, p.axis)
    z = _broadcast(np.asarray(p.zero_points, dtype=np.int64), ndim, p.axis)
    return s, z


def quantize(t: Tensor, p: QuantParams) -> Tensor:
    """``clamp(round_half_even(x / scale) + zero_point)`` per group."""
    if not t.dtype.is_float:
        raise TypeError("quantize needs a floating tensor")
    p.check_shape(t.shape)
    s, z = _params_arrays(p, t.rank)
    lo, hi = p.dtype.int_range
    q = np.rint(t.data.astype(np.float64) / s).astype(np.int64) + z
    q = np.clip(q, lo, hi)
    return Tensor(t.shape, p.dtype, q.astype(p.dtype.np_dtype))


def dequantize(q: Tensor, p: QuantParams) -> Tensor:
    """``(q - zero_point) * scale`` rounded once to FP32."""
    if q.dtype != p.dtype:
        raise TypeError(f"expected a {p.dtype.name} tensor, got {q.dtype.name}")
    p.check_shape(q.shape)
    s, z = _params_arrays(p, q.rank)
    x = (q.data.astype(np.int64) - z) * s
    return Tensor(q.shape, ElementType.FP32, x.astype(np.float32))


def quantize_tensor(
    t: Tensor,
    scheme: Union[Scheme, str] = Scheme.ASYMMETRIC,
    bit_width: int = 16,
    axis: Optional[int] = None,
) -> Tuple[Tensor, QuantParams]:
    """Calibrate on ``t`` alone and quantize it."""
    p = make_params(calibrate([t], axis), scheme, bit_width)
    return quantize(t, p), p


# -- integer matmul -----------------------------------------------------------

INT32_MAX = 2 ** 31 - 1


def _accumulator_for(bound: int) -> np.dtype:
    return np.dtype(np.int32) if bound <= INT32_MAX else np.dtype(np.int64)


def _centered(q: Tensor, p: QuantParams) -> np.ndarray:
    _, z = _params_arrays(p, q.rank)
    return q.data.astype(np.int64) - z


def int_matmul(aq: Tensor, bq: Tensor, ap: QuantParams, bp: QuantParams) -> Tensor:
    """FP32 product of two quantized matrices, ``a`` (m x k) times ``b`` (k x n).

    ``a`` may be per-tensor or per-row (axis 0); ``b`` per-tensor or per-column
    (axis 1). Zero points are removed before accumulation. The accumulator is
    32-bit when the worst-case dot product fits, else 64-bit.
    """
    if aq.rank != 2 or bq.rank != 2 or aq.shape[1] != bq.shape[0]:
        raise ValueError(f"cannot multiply {aq.shape} by {bq.shape}")
    if ap.axis not in (None, 0) or bp.axis not in (None, 1):
        raise ValueError("per-channel scales must run along a's rows or b's columns")
    a = _centered(aq, ap)
    b = _centered(bq, bp)
    k = aq.shape[1]
    bound = k * int(np.abs(a).max(initial=0)) * int(np.abs(b).max(initial=0))
    acc_t = _accumulator_for(bound)
    assert bound <= np.iinfo(acc_t).max, "integer accumulator too narrow"
    acc = a.astype(acc_t) @ b.astype(acc_t)
    sa = np.asarray(ap.scales, dtype=np.float64).reshape(-1, 1)
    sb = np.asarray(bp.scales, dtype=np.float64).reshape(1, -1)
    y = acc.astype(np.float64) * sa * sb
    return Tensor(y.shape, ElementType.FP32, y.astype(np.float32))


def qmatmul(wq: Tensor, xq: Tensor, wp: QuantParams, xp: QuantParams) -> Tensor:
    """W8A16 linear product ``x @ w`` for INT16 activations ``x`` (m x k) and INT8 weights ``w`` (k x n).

    The raw integer sum runs before zero-point correction, so its worst case
    is ``k * 32768 * 128``; past 2**31 the accumulator widens to 64 bits.
    """
    if wq.dtype != ElementType.INT8 or xq.dtype != ElementType.INT16:
        raise TypeError("qmatmul takes INT8 weights and INT16 activations")
    if wp.scheme is not Scheme.SYMMETRIC:
        raise ValueError("weights must be symmetrically quantized")
    if wp.axis not in (None, 1) or xp.axis is not None:
        raise ValueError("weights are per-tensor or per output column; activations per tensor")
    if xq.rank != 2 or wq.rank != 2 or xq.shape[1] != wq.shape[0]:
        raise ValueError(f"cannot multiply activations {xq.shape} by weights {wq.shape}")
    k = xq.shape[1]
    x_max = max(abs(v) for v in ElementType.INT16.int_range)
    w_max = max(abs(v) for v in ElementType.INT8.int_range)
    acc_t = _accumulator_for(k * x_max * w_max)
    assert k * x_max * w_max <= np.iinfo(acc_t).max, "integer accumulator too narrow"
    raw = xq.data.astype(acc_t) @ wq.data.astype(acc_t)
    zx = xp.zero_points[0]
    corr = zx * wq.data.astype(np.int64).sum(axis=0, keepdims=True)
    acc = raw.astype(np.int64) - corr
    sw = np.asarray(wp.scales, dtype=np.float64).reshape(1, -1)
    y = acc.astype(np.float64) * xp.scales[0] * sw
    return Tensor(y.shape, ElementType.FP32, y.astype(np.float32))


# -- fidelity -----------------------------------------------------------------


@dataclass(frozen=True)
class Fidelity:
    cosine_similarity: float
    snr_db: float
    max_abs_err: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "cosine_similarity": self.cosine_similarity,
            "snr_db": self.snr_db,
            "max_abs_err": self.max_abs_err,
        }


def fidelity_metrics(reference: Tensor, test: Tensor) -> Fidelity:
    """Cosine similarity, SNR in dB (``inf`` when identical) and max absolute error."""
    if reference.shape != test.shape:
        raise ValueError(f"shapes differ: {reference.shape} vs {test.shape}")
    r = reference.data.astype(np.float64).ravel()
    t = test.data.astype(np.float64).ravel()
    signal = float(r @ r)
    if signal == 0.0:
        raise ValueError("reference has zero norm; cosine similarity is undefined")
    t_energy = float(t @ t)
    # one square root of the product keeps identical inputs at exactly 1.0
    cos = float(r @ t) / math.sqrt(signal * t_energy) if t_energy > 0 else 0.0
    noise = float(((r - t) ** 2).sum())
    snr = math.inf if noise == 0.0 else 10.0 * math.log10(signal / noise)
    return Fidelity(min(1.0, max(-1.0, cos)), snr, float(np.abs(r - t).max()))


# -- quantized attention ------------------------------------------------------

# Softmax outputs live in [0, 1], so their activation params are fixed rather
# than calibrated; a tiled run then quantizes every tile identically.
SOFTMAX_RANGE = (0.0, 1.0)


@dataclass(frozen=True)
class QuantizedAttention:
    """Integer operands and params for one W8A16 attention block."""

    q: Tuple[Tensor, QuantParams]
    k: Tuple[Tensor, QuantParams]
    v: Tuple[Tensor, QuantParams]
    p_params: QuantParams
    scale: float
    static_kv: bool = False

    @classmethod
    def prepare(cls, inputs: AttentionInputs, static_kv: bool = False) -> "QuantizedAttention":
        """Calibrate on ``inputs`` and quantize q, k, v.

        By default all operands are INT16 activations. ``static_kv=True`` treats
        K and V as precomputed weights: INT8, symmetric, per output channel.
        """
        q = quantize_tensor(inputs.q, Scheme.ASYMMETRIC, 16)
        if static_kv:
            k = quantize_tensor(inputs.k, Scheme.SYMMETRIC, 8, axis=0)
            v = quantize_tensor(inputs.v, Scheme.SYMMETRIC, 8, axis=1)
        else:
            k = quantize_tensor(inputs.k, Scheme.ASYMMETRIC, 16)
            v = quantize_tensor(inputs.v, Scheme.ASYMMETRIC, 16)
        stats = CalibrationStats(
            axis=None, mins=np.array([SOFTMAX_RANGE[0]]), maxs=np.array([SOFTMAX_RANGE[1]]), samples=1
        )
        return cls(q, k, v, make_params(stats, Scheme.ASYMMETRIC, 16), inputs.scale, static_kv)

    def scores(self, q_tile: Tensor, k_t: Tensor, scale: float) -> Tensor:
        # q_tile arrives as float rows; re-quantize with the block's fixed params
        qq = quantize(q_tile, self.q[1])
        kq, kp = self.k
        if self.static_kv:
            s = qmatmul(kq.transpose(), qq, _transposed(kp), self.q[1])
        else:
            s = int_matmul(qq, kq.transpose(), self.q[1], _transposed(kp))
        y = s.data.astype(np.float64) * scale
        return Tensor(s.shape, ElementType.FP32, y.astype(np.float32))

    def values(self, p: Tensor, v: Tensor) -> Tensor:
        pq = quantize(p, self.p_params)
        vq, vp = self.v
        if self.static_kv:
            return qmatmul(vq, pq, vp, self.p_params)
        return int_matmul(pq, vq, self.p_params, vp)


def _transposed(p: QuantParams) -> QuantParams:
    if p.axis is None:
        return p
    return QuantParams(p.scheme, p.bit_width, p.scales, p.zero_points, 1 - p.axis)


def attention_w8a16(
    inputs: AttentionInputs,
    plan=None,
    static_kv: bool = False,
) -> Tensor:
    """Attention with integer Q*K^T and S_out*V and an FP32 softmax.

    Output is FP32. With ``plan`` the block runs query-tiled.
    """
    qa = QuantizedAttention.prepare(inputs, static_kv)
    if plan is None:
        return attention_reference(inputs, scores=qa.scores, values=qa.values)
    return attention_tiled(inputs, plan, scores=qa.scores, values=qa.values)
