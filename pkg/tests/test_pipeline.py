import json

import pytest

from mltsim.memmodel import BaselineCostTable
from mltsim.pipeline import (
    ModelDescriptor,
    PrecisionPolicy,
    RunConfig,
    RunOutputs,
    StageSpec,
    compare_runs,
    default_profile,
    mlt_ratio,
    run_pipeline,
)
from mltsim.planner import HardwareProfile, InfeasiblePlan


def small_model(unet_blocks=((256, 16, 8), (64, 16, 16))):
    return ModelDescriptor(
        (
            StageSpec("encoder", ((32, 8, 8),), 100.0),
            StageSpec("unet", unet_blocks, 50.0),
            StageSpec("decoder", (), 400.0),
        ),
        name="small",
    )


def small_hw():
    return HardwareProfile(16384, 64.0, 0.25, 4096.0, 256.0, 0.9)


def cfg(**kw):
    return RunConfig(hw=small_hw(), **kw)


def test_unet_time_scales_with_steps():
    m = small_model()
    one = run_pipeline(m, cfg(steps=1))
    two = run_pipeline(m, cfg(steps=2))
    assert two.stage_times_us["unet"] == 2 * one.stage_times_us["unet"]
    assert two.stage_times_us["encoder"] == one.stage_times_us["encoder"]
    assert two.stage_times_us["decoder"] == one.stage_times_us["decoder"]


def test_model_without_unet_blocks():
    m = ModelDescriptor((StageSpec("encoder", (), 100.0), StageSpec("unet", (), 0.0), StageSpec("decoder", (), 400.0)))
    assert run_pipeline(m, cfg(steps=25)).total_us == 500.0


def test_mlt_reduces_unet_time():
    m = small_model()
    assert mlt_ratio(m, cfg()) < 100.0


def test_calibrated_ratio_in_measured_band():
    ratio = mlt_ratio(ModelDescriptor.sd_proxy(), RunConfig(calibration=BaselineCostTable.exynos2400()))
    assert 25.0 <= ratio <= 28.0


def test_infeasible_block_propagates():
    m = small_model(unet_blocks=((64, 512, 64),))
    with pytest.raises(InfeasiblePlan):
        run_pipeline(m, cfg(mlt=True))
    run_pipeline(m, cfg(mlt=False))  # untiled never plans


def test_missing_stage_precision_rejected():
    with pytest.raises(ValueError):
        run_pipeline(small_model(), cfg(precision=PrecisionPolicy({"unet": PrecisionPolicy().stages["unet"]})))


def test_unknown_precision_flag():
    with pytest.raises(ValueError):
        PrecisionPolicy.from_flag("int4")


def test_steps_must_be_positive():
    with pytest.raises(ValueError):
        RunConfig(steps=0)


def test_all_fp32_compare_is_exact():
    m = small_model()
    a = run_pipeline(m, cfg(precision=PrecisionPolicy.uniform("fp32")))
    b = run_pipeline(m, cfg(precision=PrecisionPolicy.uniform("fp32"), mlt=False))
    s = compare_runs(a, b)
    assert s.min_cosine == 1.0
    assert s.aggregate.cosine_similarity == 1.0


def test_w8a16_compare_against_fp32():
    m = small_model()
    ref = run_pipeline(m, cfg(precision=PrecisionPolicy.uniform("fp32")))
    test = run_pipeline(m, cfg(precision=PrecisionPolicy.uniform("w8a16")))
    assert compare_runs(ref, test).min_cosine >= 0.999


def test_compare_rejects_mismatched_seeds():
    m = small_model()
    with pytest.raises(ValueError, match="seed"):
        compare_runs(run_pipeline(m, cfg(seed=1)), run_pipeline(m, cfg(seed=2)))


def test_compare_rejects_mismatched_descriptor():
    with pytest.raises(ValueError, match="descriptor"):
        compare_runs(run_pipeline(small_model(), cfg()), run_pipeline(small_model(((64, 8, 8),)), cfg()))


def test_report_is_deterministic_and_schedule_free():
    m = small_model()
    a = run_pipeline(m, cfg(seed=7)).to_json()
    assert run_pipeline(m, cfg(seed=7)).to_json() == a
    assert run_pipeline(m, cfg(seed=7), max_workers=4).to_json() == a
    assert run_pipeline(m, cfg(seed=8)).to_json() != a


def test_report_provenance_and_csv():
    r = run_pipeline(small_model(), cfg(steps=4))
    doc = json.loads(r.to_json())
    assert doc["provenance"]["seed"] == 0
    assert len(doc["provenance"]["profile_sha256"]) == 64
    rows = r.to_csv().strip().splitlines()
    assert rows[0] == "stage,time_us"
    assert sum(float(line.split(",")[1]) for line in rows[1:] if not line.startswith("total")) == pytest.approx(r.total_us)


def test_saved_outputs_reload_and_compare(tmp_path):
    m = small_model()
    a = run_pipeline(m, cfg(precision=PrecisionPolicy.uniform("fp32")))
    path = a.save(tmp_path / "ref.json")
    loaded = RunOutputs.load(path)
    assert compare_runs(loaded, a).min_cosine == 1.0


def test_tampered_output_rejected(tmp_path):
    a = run_pipeline(small_model(), cfg())
    path = a.save(tmp_path / "run.json")
    victim = sorted((tmp_path / "run.json.d").iterdir())[0]
    raw = bytearray(victim.read_bytes())
    raw[-1] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        RunOutputs.load(path)


def test_descriptor_json_roundtrip(tmp_path):
    m = ModelDescriptor.sd_proxy()
    path = tmp_path / "m.json"
    path.write_text(json.dumps(m.to_dict()))
    assert ModelDescriptor.load(path) == m


def test_bundled_profile_loads():
    assert default_profile().sram_bytes > 0
