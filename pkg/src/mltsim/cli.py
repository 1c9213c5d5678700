"""Command-line entry point: ``mltsim <command> ...``.

Exit codes: 0 success, 1 usage error, 2 infeasible tile plan, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .memmodel import BaselineCostTable, apply_mlt_to_baseline, build_attention_graph, simulate
from .pipeline import ModelDescriptor, PrecisionPolicy, RunConfig, RunOutputs, compare_runs, default_profile, run_pipeline
from .planner import HardwareProfile, InfeasiblePlan, plan_tiles
from .quant import QuantParams, Scheme, make_params, calibrate, quantize
from .tensor import ElementType, read_tensor, write_tensor

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InputError(Exception):
    """A file could not be read or parsed."""


def _load(loader, path: Path):
    try:
        return loader(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: {exc}") from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit(2)
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_dims(p: argparse.ArgumentParser) -> None:
    p.add_argument("n_q", type=int, help="query rows (spatial tokens)")
    p.add_argument("n_k", type=int, help="key/value rows (text tokens)")
    p.add_argument("d", type=int, help="head width")
    p.add_argument("--dtype", default="fp16", choices=[e.value for e in ElementType])


def _add_profile(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", type=Path, help="hardware profile JSON (default: bundled NPU proxy)")
    p.add_argument("--sram-bytes", type=int, help="override the profile's SRAM capacity")
    p.add_argument("--utilization", type=float, help="override the profile's utilization target")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mltsim", description="Tiled attention planning, traffic simulation and quantization.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("plan", help="choose tiles for one attention block")
    _add_dims(p)
    _add_profile(p)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("traffic", help="per-operation DMA/compute report for one block")
    _add_dims(p)
    _add_profile(p)
    p.add_argument("--mlt", action="store_true", help="tile and fuse the block")
    p.add_argument("--resident-v", action="store_true", help="load V once instead of once per tile")
    p.add_argument("--overhead", type=float, default=0.04, help="compute stretch for tiled graphs")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("run", help="run a model descriptor and report stage times")
    p.add_argument("--descriptor", type=Path, help="model descriptor JSON (default: bundled sd-proxy)")
    _add_profile(p)
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--mlt", action="store_true")
    p.add_argument("--precision", choices=["fp32", "fp16", "w8a16"], default="w8a16")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--calibrated", action="store_true", help="cost rows from the measured baseline table")
    p.add_argument("--static-kv", action="store_true", help="quantize K and V as INT8 weights")
    p.add_argument("--format", choices=["csv", "json"], default="json")
    p.add_argument("--out", type=Path, help="write the JSON report here, block outputs to <out>.d/")

    p = sub.add_parser("quantize", help="quantize a TNSR1 tensor file")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--params", type=Path, help="QuantParams JSON; calibrated from the input when absent")
    p.add_argument("--scheme", choices=[s.value for s in Scheme], default="asymmetric")
    p.add_argument("--bits", type=int, choices=[8, 16], default=16)
    p.add_argument("--axis", type=int, help="per-channel axis (default: per tensor)")
    p.add_argument("--params-out", type=Path, help="write the params used as JSON")

    p = sub.add_parser("compare", help="fidelity of one saved run against another")
    p.add_argument("reference", type=Path)
    p.add_argument("test", type=Path)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("calibrate-table", help="predict the tiled block time from a baseline table")
    p.add_argument("--table", type=Path, help="baseline table JSON (default: bundled Exynos 2400 table)")
    p.add_argument("--v-load", type=float, default=0.8, help="value-load share after tiling, percent")
    p.add_argument("--overhead", type=float, help="stretch baseline compute by 1+overhead instead of measured values")
    p.add_argument("--format", choices=["text", "json"], default="text")
    return parser


def _profile(args: argparse.Namespace) -> HardwareProfile:
    hw = _load(HardwareProfile.load, args.profile) if args.profile else default_profile()
    if args.sram_bytes is not None or args.utilization is not None:
        doc = hw.to_dict()
        if args.sram_bytes is not None:
            doc["sram_bytes"] = args.sram_bytes
        if args.utilization is not None:
            doc["utilization_target"] = args.utilization
        hw = HardwareProfile.from_dict(doc)
    return hw


def _emit(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _cmd_plan(args: argparse.Namespace) -> int:
    dtype = ElementType.parse(args.dtype)
    plan = plan_tiles(args.n_q, args.n_k, args.d, dtype, _profile(args))
    _emit(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def _cmd_traffic(args: argparse.Namespace) -> int:
    dtype = ElementType.parse(args.dtype)
    hw = _profile(args)
    dims = (args.n_q, args.n_k, args.d)
    base = simulate(build_attention_graph(dims, dtype), hw)
    if args.mlt:
        plan = plan_tiles(*dims, dtype, hw)
        report = simulate(build_attention_graph(dims, dtype, plan, args.resident_v), hw, args.overhead, baseline=base)
    else:
        report = base
    _emit(report.to_csv() if args.format == "csv" else report.to_json() + "\n", args.out)
    return EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    m = _load(ModelDescriptor.load, args.descriptor) if args.descriptor else ModelDescriptor.sd_proxy()
    cfg = RunConfig(
        steps=args.steps,
        mlt=args.mlt,
        precision=PrecisionPolicy.from_flag(args.precision),
        hw=_profile(args),
        seed=args.seed,
        calibration=BaselineCostTable.exynos2400() if args.calibrated else None,
        static_kv=args.static_kv,
    )
    report = run_pipeline(m, cfg)
    if args.out is not None:
        report.save(args.out)
        if args.format == "csv":
            sys.stdout.write(report.to_csv())
        return EXIT_OK
    sys.stdout.write(report.to_csv() if args.format == "csv" else report.to_json())
    return EXIT_OK


def _cmd_quantize(args: argparse.Namespace) -> int:
    t = _load(read_tensor, args.input)
    if args.params:
        params = _load(lambda p: QuantParams.from_json(p.read_text()), args.params)
    else:
        params = make_params(calibrate([t], args.axis), args.scheme, args.bits)
    q = quantize(t, params)
    try:
        write_tensor(q, args.output)
        if args.params_out:
            args.params_out.write_text(params.to_json() + "\n")
    except OSError as exc:
        raise InputError(str(exc)) from exc
    return EXIT_OK


def _cmd_compare(args: argparse.Namespace) -> int:
    summary = compare_runs(_load(RunOutputs.load, args.reference), _load(RunOutputs.load, args.test))
    _emit(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def _cmd_calibrate_table(args: argparse.Namespace) -> int:
    if args.table:
        tbl = _load(lambda p: BaselineCostTable.from_dict(json.loads(p.read_text())), args.table)
    else:
        tbl = BaselineCostTable.exynos2400(with_tiled_compute=True)
    total = apply_mlt_to_baseline(tbl, args.v_load, args.overhead)
    if args.format == "json":
        doc = {"predicted_total_pct": round(total, 6), "latency_gain_pct": round(100.0 - total, 6)}
        sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
    else:
        sys.stdout.write(f"{total:.1f}\n")
    return EXIT_OK


COMMANDS = {
    "plan": _cmd_plan,
    "traffic": _cmd_traffic,
    "run": _cmd_run,
    "quantize": _cmd_quantize,
    "compare": _cmd_compare,
    "calibrate-table": _cmd_calibrate_table,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except InfeasiblePlan as exc:
        sys.stderr.write(f"infeasible: {exc}\n")
        return EXIT_INFEASIBLE
    except (InputError, OSError) as exc:
        sys.stderr.write(f"i/o error: {exc}\n")
        return EXIT_IO
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
