"""
Multi-stage execution harness: runs every attention block of a model
descriptor numerically, costs it with the traffic model, and aggregates
encoder / unet / decoder times the way an on-device benchmark reports them.

The unet stage repeats once per denoising step; encoder and decoder run once.
Tiling is applied to unet blocks only.
"""

from __future__ import annotations

import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from . import __version__
from .attention import AttentionInputs, attention_reference, attention_tiled, random_inputs
from .memmodel import (
    DEFAULT_MLT_OVERHEAD,
    EXYNOS2400_TILED_V_LOAD,
    BaselineCostTable,
    TrafficReport,
    build_attention_graph,
    simulate,
    simulate_calibrated,
)
from .planner import HardwareProfile, TilePlan, plan_tiles
from .quant import Fidelity, Precision, attention_w8a16, fidelity_metrics
from .tensor import ElementType, Tensor, cast, read_tensor, write_tensor

STAGE_NAMES = ("encoder", "unet", "decoder")
CANONICAL_STEPS = (1, 2, 4, 25)
UNET = "unet"


def _data_path(name: str):
    return resources.files("mltsim").joinpath("data", name)


@dataclass(frozen=True)
class StageSpec:
    name: str
    blocks: Tuple[Tuple[int, int, int], ...] = ()
    fixed_cost_us: float = 0.0

    def __post_init__(self) -> None:
        if self.name not in STAGE_NAMES:
            raise ValueError(f"stage name must be one of {STAGE_NAMES}, got {self.name!r}")
        blocks = tuple(tuple(int(x) for x in b) for b in self.blocks)
        for b in blocks:
            if len(b) != 3 or min(b) <= 0:
                raise ValueError(f"{self.name}: block dims must be three positive integers, got {b}")
        if self.fixed_cost_us < 0:
            raise ValueError(f"{self.name}: fixed_cost_us must be non-negative")
        object.__setattr__(self, "blocks", blocks)


@dataclass(frozen=True)
class ModelDescriptor:
    stages: Tuple[StageSpec, ...]
    name: str = "custom"

    def __post_init__(self) -> None:
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate stage names in {names}")
        object.__setattr__(self, "stages", tuple(self.stages))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "stages": [
                {"name": s.name, "blocks": [list(b) for b in s.blocks], "fixed_cost_us": s.fixed_cost_us}
                for s in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ModelDescriptor":
        stages = tuple(
            StageSpec(s["name"], tuple(tuple(b) for b in s.get("blocks", ())), float(s.get("fixed_cost_us", 0.0)))
            for s in doc["stages"]
        )
        return cls(stages, doc.get("name", "custom"))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelDescriptor":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def sd_proxy(cls) -> "ModelDescriptor":
        """Bundled illustrative descriptor: four unet cross-attention blocks."""
        return cls.from_dict(json.loads(_data_path("sd_proxy.json").read_text()))


def default_profile() -> HardwareProfile:
    """Bundled illustrative NPU profile (editable example, not a datasheet)."""
    return HardwareProfile.from_dict(json.loads(_data_path("npu_proxy_profile.json").read_text()))


@dataclass(frozen=True)
class PrecisionPolicy:
    stages: Mapping[str, Precision] = field(
        default_factory=lambda: {"encoder": Precision.FP16, "unet": Precision.W8A16, "decoder": Precision.FP16}
    )

    @classmethod
    def uniform(cls, precision: Union[Precision, str]) -> "PrecisionPolicy":
        p = Precision(precision.upper()) if isinstance(precision, str) else precision
        return cls({name: p for name in STAGE_NAMES})

    @classmethod
    def from_flag(cls, flag: str) -> "PrecisionPolicy":
        """``fp32`` / ``fp16`` apply everywhere; ``w8a16`` is the mixed default."""
        flag = flag.lower()
        if flag == "w8a16":
            return cls()
        if flag in ("fp32", "fp16"):
            return cls.uniform(flag)
        raise ValueError(f"unknown precision {flag!r}")

    def for_stage(self, name: str) -> Precision:
        try:
            p = self.stages[name]
        except KeyError:
            raise ValueError(f"precision policy has no entry for stage {name!r}") from None
        if not isinstance(p, Precision):
            raise ValueError(f"invalid precision {p!r} for stage {name!r}")
        return p

    def to_dict(self) -> Dict[str, str]:
        return {k: v.value for k, v in sorted(self.stages.items())}


@dataclass(frozen=True)
class RunConfig:
    steps: int = 2
    mlt: bool = True
    precision: PrecisionPolicy = field(default_factory=PrecisionPolicy)
    hw: HardwareProfile = field(default_factory=default_profile)
    seed: int = 0
    calibration: Optional[BaselineCostTable] = None
    v_load_percent: float = EXYNOS2400_TILED_V_LOAD
    mlt_overhead: float = DEFAULT_MLT_OVERHEAD
    resident_v: bool = False
    static_kv: bool = False

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be at least 1")


def _graph_dtype(p: Precision) -> ElementType:
    return {Precision.FP32: ElementType.FP32, Precision.FP16: ElementType.FP16, Precision.W8A16: ElementType.INT16}[p]


def profile_hash(hw: HardwareProfile) -> str:
    return hashlib.sha256(json.dumps(hw.to_dict(), sort_keys=True).encode()).hexdigest()


def tensor_digest(t: Tensor) -> str:
    buf = io.BytesIO()
    write_tensor(t, buf)
    return hashlib.sha256(buf.getvalue()).hexdigest()


@dataclass(frozen=True)
class BlockResult:
    stage: str
    index: int
    dims: Tuple[int, int, int]
    precision: Precision
    plan: Optional[TilePlan]
    traffic: TrafficReport
    output: Tensor

    @property
    def key(self) -> str:
        return f"{self.stage}_{self.index}"

    @property
    def time_us(self) -> float:
        return self.traffic.total_time_us

    def to_dict(self) -> Dict[str, Any]:
        return {
            "key": self.key,
            "dims": list(self.dims),
            "precision": self.precision.value,
            "tile_count": self.plan.tile_count if self.plan else None,
            "time_us": self.time_us,
            "traffic": self.traffic.to_dict(),
            "output_sha256": tensor_digest(self.output),
        }


@dataclass(frozen=True)
class BenchReport:
    descriptor: ModelDescriptor
    steps: int
    mlt: bool
    seed: int
    precision: PrecisionPolicy
    hw: HardwareProfile
    calibrated: bool
    blocks: Tuple[BlockResult, ...]
    stage_times_us: Mapping[str, float]
    per_step_unet_us: float
    total_us: float

    def block(self, key: str) -> BlockResult:
        for b in self.blocks:
            if b.key == key:
                return b
        raise KeyError(key)

    @property
    def outputs(self) -> Dict[str, Tensor]:
        return {b.key: b.output for b in self.blocks}

    def attention_time_us(self, stage: str = UNET) -> float:
        """Per-step attention time of one stage (fixed costs excluded)."""
        total = 0.0
        for b in self.blocks:
            if b.stage == stage:
                total += b.time_us
        return total

    def to_dict(self) -> Dict[str, Any]:
        doc = {
            "provenance": {
                "tool": "mltsim",
                "version": __version__,
                "profile_sha256": profile_hash(self.hw),
                "seed": self.seed,
            },
            "descriptor": self.descriptor.to_dict(),
            "config": {
                "steps": self.steps,
                "mlt": self.mlt,
                "precision": self.precision.to_dict(),
                "calibrated": self.calibrated,
                "hw": self.hw.to_dict(),
            },
            "stages": dict(self.stage_times_us),
            "per_step_unet_us": self.per_step_unet_us,
            "total_us": self.total_us,
            "blocks": [b.to_dict() for b in self.blocks],
        }
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """Stage summary: one line per stage plus the total."""
        lines = ["stage,time_us"]
        for s in self.descriptor.stages:
            lines.append(f"{s.name},{self.stage_times_us[s.name]!r}")
        lines.append(f"total,{self.total_us!r}")
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]) -> Path:
        """Write the JSON report and, next to it, one TNSR1 file per block output."""
        path = Path(path)
        path.write_text(self.to_json())
        out_dir = outputs_dir(path)
        out_dir.mkdir(parents=True, exist_ok=True)
        for b in self.blocks:
            write_tensor(b.output, out_dir / f"{b.key}.tnsr")
        return path


def outputs_dir(report_path: Union[str, Path]) -> Path:
    p = Path(report_path)
    return p.with_name(p.name + ".d")


def _run_block(
    stage: str,
    stage_idx: int,
    index: int,
    dims: Tuple[int, int, int],
    precision: Precision,
    c: RunConfig,
) -> BlockResult:
    n_q, n_k, d = dims
    rng = np.random.default_rng([c.seed, stage_idx, index])
    inputs = random_inputs(rng, n_q, n_k, d)
    gdtype = _graph_dtype(precision)
    tiled = c.mlt and stage == UNET
    plan = plan_tiles(n_q, n_k, d, gdtype, c.hw) if tiled else None

    if precision is Precision.W8A16:
        out = attention_w8a16(inputs, plan, static_kv=c.static_kv)
    else:
        run_inputs = inputs
        if precision is Precision.FP16:
            run_inputs = AttentionInputs(
                cast(inputs.q, ElementType.FP16), cast(inputs.k, ElementType.FP16), cast(inputs.v, ElementType.FP16), inputs.scale
            )
        out = attention_tiled(run_inputs, plan) if plan is not None else attention_reference(run_inputs)
        out = cast(out, ElementType.FP32)

    graph = build_attention_graph(dims, gdtype, plan, resident_v=c.resident_v)
    if c.calibration is not None:
        untiled_us = simulate(build_attention_graph(dims, gdtype), c.hw).total_time_us
        traffic = simulate_calibrated(graph, c.calibration, untiled_us, c.v_load_percent, c.mlt_overhead)
    else:
        traffic = simulate(graph, c.hw, c.mlt_overhead)
    return BlockResult(stage, index, dims, precision, plan, traffic, out)


def run_pipeline(m: ModelDescriptor, c: RunConfig, max_workers: int = 1) -> BenchReport:
    """Execute and cost every block; the unet stage is scaled by ``c.steps``.

    Blocks are independent and may run on a thread pool; the report is
    assembled in descriptor order, so it does not depend on the schedule.
    """
    jobs = []
    for stage_idx, stage in enumerate(m.stages):
        precision = c.precision.for_stage(stage.name)
        for i, dims in enumerate(stage.blocks):
            jobs.append((stage.name, stage_idx, i, dims, precision, c))

    if max_workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            blocks = list(pool.map(lambda j: _run_block(*j), jobs))
    else:
        blocks = [_run_block(*j) for j in jobs]

    stage_times: Dict[str, float] = {}
    per_step_unet = 0.0
    for stage in m.stages:
        t = stage.fixed_cost_us
        for b in blocks:
            if b.stage == stage.name:
                t += b.time_us
        if stage.name == UNET:
            per_step_unet = t
            t = c.steps * t
        stage_times[stage.name] = t
    total = 0.0
    for stage in m.stages:
        total += stage_times[stage.name]
    return BenchReport(
        descriptor=m,
        steps=c.steps,
        mlt=c.mlt,
        seed=c.seed,
        precision=c.precision,
        hw=c.hw,
        calibrated=c.calibration is not None,
        blocks=tuple(blocks),
        stage_times_us=stage_times,
        per_step_unet_us=per_step_unet,
        total_us=total,
    )


# -- run comparison ------------------------------------------------------------


@dataclass(frozen=True)
class RunOutputs:
    """What a comparison needs from a run: identity plus per-block outputs."""

    descriptor: Mapping[str, Any]
    seed: int
    steps: int
    outputs: Mapping[str, Tensor]

    @classmethod
    def from_report(cls, r: BenchReport) -> "RunOutputs":
        return cls(r.descriptor.to_dict(), r.seed, r.steps, r.outputs)

    @classmethod
    def load(cls, report_path: Union[str, Path]) -> "RunOutputs":
        doc = json.loads(Path(report_path).read_text())
        out_dir = outputs_dir(report_path)
        outputs = {}
        for b in doc["blocks"]:
            t = read_tensor(out_dir / f"{b['key']}.tnsr")
            if tensor_digest(t) != b["output_sha256"]:
                raise ValueError(f"output tensor for {b['key']} does not match the report digest")
            outputs[b["key"]] = t
        return cls(doc["descriptor"], int(doc["provenance"]["seed"]), int(doc["config"]["steps"]), outputs)


@dataclass(frozen=True)
class FidelitySummary:
    blocks: Mapping[str, Fidelity]
    aggregate: Fidelity

    @property
    def min_cosine(self) -> float:
        return min(f.cosine_similarity for f in self.blocks.values())

    @property
    def min_snr_db(self) -> float:
        return min(f.snr_db for f in self.blocks.values())

    def to_dict(self) -> Dict[str, Any]:
        def enc(f: Fidelity) -> Dict[str, Any]:
            d = f.to_dict()
            if d["snr_db"] == float("inf"):
                d["snr_db"] = "inf"
            return d

        return {"blocks": {k: enc(v) for k, v in sorted(self.blocks.items())}, "aggregate": enc(self.aggregate)}


def compare_runs(reference: Union[BenchReport, RunOutputs], test: Union[BenchReport, RunOutputs]) -> FidelitySummary:
    """Per-block and aggregate fidelity of ``test`` against ``reference``."""
    a = RunOutputs.from_report(reference) if isinstance(reference, BenchReport) else reference
    b = RunOutputs.from_report(test) if isinstance(test, BenchReport) else test
    if a.descriptor != b.descriptor:
        raise ValueError("runs use different model descriptors")
    if a.seed != b.seed:
        raise ValueError(f"runs use different seeds ({a.seed} vs {b.seed})")
    if a.steps != b.steps:
        raise ValueError(f"runs use different step counts ({a.steps} vs {b.steps})")
    if set(a.outputs) != set(b.outputs):
        raise ValueError("runs have different block sets")
    if not a.outputs:
        raise ValueError("runs have no attention blocks to compare")
    per_block = {k: fidelity_metrics(a.outputs[k], b.outputs[k]) for k in sorted(a.outputs)}
    keys = sorted(a.outputs)
    ref_all = np.concatenate([a.outputs[k].data.ravel().astype(np.float32) for k in keys])
    test_all = np.concatenate([b.outputs[k].data.ravel().astype(np.float32) for k in keys])
    aggregate = fidelity_metrics(
        Tensor(ref_all.shape, ElementType.FP32, ref_all), Tensor(test_all.shape, ElementType.FP32, test_all)
    )
    return FidelitySummary(per_block, aggregate)


def mlt_ratio(m: ModelDescriptor, c: RunConfig) -> float:
    """Per-step unet attention time with tiling as a percentage of the untiled time."""
    on = run_pipeline(m, replace(c, mlt=True))
    off = run_pipeline(m, replace(c, mlt=False))
    return 100.0 * on.attention_time_us(UNET) / off.attention_time_us(UNET)
