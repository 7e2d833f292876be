"""
命令行与配置测试
"""
import glob
import logging
import os

import pytest

from config import ConfigError, build_config
from main import EXIT_OK, EXIT_USAGE, main
from schemas.run_schema import RunConfig

SMALL = {
    "world.extent_min": "6", "world.extent_max": "7", "world.scale": "0.1", "world.max_rooms": "2",
    "sampler.max_viewpoints": "24",
    "camera.width": "16", "camera.height": "16", "model.image_size": "16", "model.patch_size": "4",
    "map.size": "32", "model.map_size": "32", "model.map_patch_size": "8",
    "model.embed_dim": "16", "model.depth": "1", "model.heads": "2", "model.proj_dim": "8",
    "train.batch_size": "4", "train.epochs": "1", "eval.batch_size": "2",
    "data.num_worlds": "2", "runtime.threads": "1",
}


def _argv(command: str, out: str, *extra: str):
    argv = [command, "--out", out, "--seed", "1"]
    for key, value in SMALL.items():
        argv += ["--set", f"{key}={value}"]
    return argv + list(extra)


@pytest.mark.unit
def test_unknown_subcommand_is_usage_error():
    assert main(["deploy"]) == EXIT_USAGE


@pytest.mark.unit
@pytest.mark.parametrize("item", ["train.epochs", "train.nope=3", "train.epochs=many", "model.embed_dim=10"])
def test_bad_override_is_usage_error(tmp_path, item):
    assert main(["verify", "--out", str(tmp_path), "--set", item, "--suite", "infonce"]) == EXIT_USAGE


@pytest.mark.unit
def test_verify_subcommand_writes_report(tmp_path):
    assert main(["verify", "--out", str(tmp_path), "--suite", "accuracy"]) == EXIT_OK
    with open(tmp_path / "verify" / "report.txt", encoding="utf-8") as f:
        assert f.readline().startswith("accuracy | PASS")
    run = RunConfig.load(str(tmp_path / "run_config.txt"))
    assert run.subcommand == "verify" and run.config_hash


@pytest.mark.unit
def test_config_precedence(tmp_path):
    path = tmp_path / "e2m.cfg"
    path.write_text("# 示例\ntrain.epochs = 7\ntrain.lr = 0.001\nseed = 5\n", encoding="utf-8")
    cfg = build_config(str(path), {"train.epochs": "9"}, seed=11)
    assert cfg.train.epochs == 9
    assert cfg.train.lr == 0.001
    assert cfg.seed == 11 and cfg.train.seed == 11
    with pytest.raises(ConfigError):
        build_config(str(tmp_path / "missing.cfg"))


@pytest.mark.unit
def test_preset_overrides_loss_switches(caplog):
    with caplog.at_level(logging.WARNING, logger="config"):
        cfg = build_config(overrides={"train.preset": "model2", "train.loss_c": "true"})
    assert cfg.train.enabled_losses == {"c": False, "theta": False, "d": True}
    assert "train.loss_c" in caplog.text

    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="config"):
        build_config(overrides={"train.preset": "model2", "train.loss_d": "true"})
    assert not caplog.records
    with pytest.raises(ConfigError):
        build_config(overrides={"train.preset": "model9"})


@pytest.mark.unit
def test_config_hash_ignores_runtime(monkeypatch):
    a = build_config(out_dir="/tmp/a")
    monkeypatch.setenv("E2M_THREADS", "3")
    b = build_config(out_dir="/tmp/b")
    assert b.runtime.threads == 3
    assert a.config_hash == b.config_hash
    assert a.config_hash != build_config(overrides={"train.lr": "0.1"}).config_hash


def _shard_bytes(out: str):
    result = {}
    for path in sorted(glob.glob(os.path.join(out, "data", "*.e2ms"))):
        with open(path, "rb") as f:
            result[os.path.basename(path)] = f.read()
    return result


@pytest.mark.slow
@pytest.mark.integration
def test_sampling_is_reproducible_and_pipeline_runs(tmp_path):
    first, second = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(_argv("sample", first, "--worlds", "2")) == EXIT_OK
    assert main(_argv("sample", second, "--worlds", "2")) == EXIT_OK
    shards = _shard_bytes(first)
    assert shards and shards == _shard_bytes(second)

    for command in ("train", "eval", "probe", "plot"):
        assert main(_argv(command, first)) == EXIT_OK, command
    assert os.path.exists(os.path.join(first, "train", "rgbd_encoder.pt"))
    assert os.path.exists(os.path.join(first, "eval", "report.txt"))
    assert os.path.exists(os.path.join(first, "plots", "loss_c.png"))
