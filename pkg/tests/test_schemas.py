"""
文本产物Schema测试：报告、运行配置回显、清单
"""
import pytest
from pydantic import ValidationError

from schemas.manifest_schema import ShardEntry, ShardManifest, Split, WorldManifestEntry
from schemas.report_schema import EvalReport, SuiteResult, VerifyReport
from schemas.run_schema import RunConfig


def _report(**overrides) -> EvalReport:
    values = dict(acc_i2m=71.5, acc_m2i=69.25, delta_theta=0.41, delta_d=0.33, batch_size=32, triplets=640,
                  pairs=320, views=640, config_hash="ab12cd34", checkpoint="final.pt")
    values.update(overrides)
    return EvalReport(**values)


@pytest.mark.unit
def test_eval_report_text_round_trip():
    report = _report(violations=["acc_i2m<80.0", "delta_d>0.3"], probe_d_mae=0.2)
    loaded = EvalReport.from_text(report.to_text())
    assert loaded == report
    assert not loaded.passed


@pytest.mark.unit
def test_eval_report_optional_fields_survive_empty_values():
    loaded = EvalReport.from_text(_report().to_text())
    assert loaded.probe_d_mae is None and loaded.violations == []
    assert loaded.passed


@pytest.mark.unit
def test_eval_report_rejects_out_of_range_accuracy():
    with pytest.raises(ValidationError):
        _report(acc_i2m=120.0)


@pytest.mark.unit
def test_unknown_key_rejected():
    with pytest.raises(ValidationError):
        EvalReport.from_text(_report().to_text() + "bogus = 1\n")


@pytest.mark.unit
def test_run_config_validation():
    cfg = RunConfig(subcommand="train", out_dir="runs/a", seed=2**64 - 1, overrides=["train.epochs=3"])
    assert RunConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValidationError):
        RunConfig(subcommand="deploy", out_dir="runs/a")
    with pytest.raises(ValidationError):
        RunConfig(subcommand="train", out_dir="runs/a", seed=2**64)


@pytest.mark.unit
def test_verify_report_round_trip():
    report = VerifyReport(suites=[
        SuiteResult(name="geodesic", passed=True, seconds=0.5, detail="50 queries"),
        SuiteResult(name="infonce", passed=False, seconds=0.25, detail="max err 1e-3 | N=7"),
    ])
    text = report.to_text()
    assert text.splitlines()[-1].startswith("overall | FAIL")
    loaded = VerifyReport.from_text(text)
    assert [s.name for s in loaded.suites] == ["geodesic", "infonce"]
    assert loaded.suites[1].detail == "max err 1e-3 | N=7"
    assert not loaded.passed
    assert not VerifyReport().passed


@pytest.mark.unit
def test_world_manifest_line_round_trip():
    entry = WorldManifestEntry(world_id=3, seed=123456789, navigable_area=41.25, target_viewpoints=165,
                               viewpoints=160, saturated=True, triplets=80, follower_failures=1)
    assert WorldManifestEntry.from_pairs(dict(kv.split("=", 1) for kv in entry.to_line().split())) == entry


@pytest.mark.unit
def test_shard_manifest_rejects_overlapping_splits():
    train = ShardEntry(path="train-00000.e2ms", records=10, split=Split.TRAIN, worlds=[0, 1])
    val = ShardEntry(path="val-00000.e2ms", records=5, split=Split.VAL, worlds=[1])
    with pytest.raises(ValidationError):
        ShardManifest(shards=[train, val])
    ok = ShardManifest(shards=[train], seed=4)
    merged = ok.merge(ShardManifest(shards=[val.model_copy(update={"worlds": [2]})]))
    assert merged.record_count() == 15 and merged.world_ids(Split.VAL) == [2]
    assert ShardManifest.from_text(merged.to_text()).shards == merged.shards
