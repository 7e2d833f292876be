"""
训练服务测试：增强、优化步、确定性、断点续训与梯度检查
"""
import copy
import os

import numpy as np
import pytest
import torch

from config import TrainConfig
from models.ego2map import Ego2MapModel
from schemas.manifest_schema import Split
from services.dataset import select_records
from services.trainer import (
    FINAL_CHECKPOINT,
    LATEST_CHECKPOINT,
    CheckpointError,
    augment,
    build_optimizer,
    fit,
    grad_check,
    iter_batches,
    load_checkpoint,
    lr_schedule,
    prepare_record,
    train_step,
)
from services.verify import MINI_MODEL, synthetic_batch
from conftest import make_records


def _metric_rows(path: str):
    with open(path, "r", encoding="utf-8") as f:
        return [line for line in f.read().splitlines() if line and not line.startswith(("#", "step"))]


@pytest.mark.unit
def test_zero_jitter_is_identity():
    record = make_records({0: 1})[0]
    cfg = TrainConfig(view_jitter=0.0, map_jitter=0.0)
    out = augment(record, seed=1, epoch=0, cfg=cfg)
    assert np.array_equal(out.pair_rgb, record.pair_rgb)
    assert np.array_equal(out.triplet_rgb, record.triplet_rgb)


@pytest.mark.unit
def test_augmentation_is_clamped_and_deterministic():
    record, _ = prepare_record(make_records({0: 1})[0], TrainConfig(augment=False), seed=0, epoch=0)
    cfg = TrainConfig(view_jitter=0.5, map_jitter=0.5)
    a = augment(record, seed=7, epoch=2, cfg=cfg)
    b = augment(record, seed=7, epoch=2, cfg=cfg)
    c = augment(record, seed=7, epoch=3, cfg=cfg)
    for arr in (a.pair_rgb, a.triplet_rgb, a.map_rgb):
        assert arr.min() >= 0.0 and arr.max() <= 1.0
    assert np.array_equal(a.pair_rgb, b.pair_rgb) and np.array_equal(a.map_rgb, b.map_rgb)
    assert not np.array_equal(a.pair_rgb, c.pair_rgb)
    assert np.array_equal(a.pair_depth, record.pair_depth)


@pytest.mark.unit
def test_zero_learning_rate_leaves_parameters_unchanged():
    torch.manual_seed(0)
    model = Ego2MapModel(MINI_MODEL)
    before = copy.deepcopy(model.state_dict())
    cfg = TrainConfig(lr=0.0)
    optimizer, _ = build_optimizer(model, cfg, total_steps=1)
    train_step(model, optimizer, synthetic_batch(MINI_MODEL, 4, dtype=torch.float32), cfg)
    for name, value in model.state_dict().items():
        assert torch.equal(value, before[name]), name


@pytest.mark.unit
def test_lr_schedule_shape():
    factor = lr_schedule(100, 0.05)
    assert factor(0) == pytest.approx(0.2)
    assert factor(4) == pytest.approx(1.0)
    assert factor(5) == pytest.approx(1.0)
    assert factor(100) == pytest.approx(0.0, abs=1e-12)
    tail = [factor(s) for s in range(5, 101)]
    assert all(a >= b for a, b in zip(tail, tail[1:]))


@pytest.mark.unit
def test_partial_last_batch_is_kept(tiny_dataset, tiny_cfg):
    entries = select_records(tiny_dataset, Split.TRAIN)
    sizes = [b["theta_star"].shape[0] for b in iter_batches(tiny_dataset, entries, tiny_cfg.train, epoch=0)]
    assert sizes == [16] * 6 + [4]


@pytest.mark.integration
def test_fit_writes_one_metric_row_per_step(tiny_dataset, tiny_cfg, tmp_path):
    result = fit(tiny_cfg, tiny_dataset, str(tmp_path / "a"))
    assert result.steps_per_epoch == 7 and result.global_step == 7
    assert len(_metric_rows(result.metrics_path)) == 7
    assert os.path.basename(result.checkpoint_path) == FINAL_CHECKPOINT
    assert load_checkpoint(result.checkpoint_path)["config_hash"] == tiny_cfg.config_hash


@pytest.mark.integration
def test_two_runs_are_identical(tiny_dataset, tiny_cfg, tmp_path):
    a = fit(tiny_cfg, tiny_dataset, str(tmp_path / "a"))
    b = fit(tiny_cfg, tiny_dataset, str(tmp_path / "b"))
    assert _metric_rows(a.metrics_path) == _metric_rows(b.metrics_path)


@pytest.mark.integration
def test_resume_is_bit_identical(tiny_dataset, tiny_cfg, tmp_path):
    tiny_cfg.train.epochs = 2
    full = fit(tiny_cfg, tiny_dataset, str(tmp_path / "full"))

    out = str(tmp_path / "resumed")
    partial = fit(tiny_cfg, tiny_dataset, out, stop_after_steps=3)
    assert partial.interrupted and partial.global_step == 3
    resumed = fit(tiny_cfg, tiny_dataset, out, resume=os.path.join(out, LATEST_CHECKPOINT))

    assert resumed.global_step == full.global_step == 14
    assert _metric_rows(resumed.metrics_path) == _metric_rows(full.metrics_path)
    want = load_checkpoint(full.checkpoint_path)["model"]
    got = load_checkpoint(resumed.checkpoint_path)["model"]
    assert all(torch.equal(got[k], want[k]) for k in want)


@pytest.mark.integration
def test_resume_rejects_different_config(tiny_dataset, tiny_cfg, tmp_path):
    out = str(tmp_path / "run")
    fit(tiny_cfg, tiny_dataset, out, stop_after_steps=2)
    changed = copy.deepcopy(tiny_cfg)
    changed.train.lr = 1e-3
    with pytest.raises(CheckpointError):
        fit(changed, tiny_dataset, out, resume=os.path.join(out, LATEST_CHECKPOINT))


@pytest.mark.integration
def test_angle_only_preset_trains(tiny_dataset, tiny_cfg, tmp_path):
    tiny_cfg.train.preset = "model1"
    tiny_cfg.train.apply_preset()
    result = fit(tiny_cfg, tiny_dataset, str(tmp_path / "m1"))
    assert result.last_losses["l_c"] == 0.0 and result.last_losses["l_d"] == 0.0
    assert result.last_losses["l_theta"] > 0.0


@pytest.mark.slow
def test_overfits_a_fixed_batch():
    torch.manual_seed(0)
    model = Ego2MapModel(MINI_MODEL)
    cfg = TrainConfig(lr=1e-3, weight_decay=0.0, preset="model7")
    optimizer, scheduler = build_optimizer(model, cfg, total_steps=200)
    batch = synthetic_batch(MINI_MODEL, 4, seed=5, dtype=torch.float32)
    first = train_step(model, optimizer, batch, cfg, scheduler=scheduler).as_floats()["l_total"]
    for step in range(1, 200):
        last = train_step(model, optimizer, batch, cfg, step=step, scheduler=scheduler).as_floats()["l_total"]
        if step == 20:
            # 预热结束后学习率回到峰值附近
            assert optimizer.param_groups[0]["lr"] > 0.9 * cfg.lr
    assert last < 0.5 * first


@pytest.mark.unit
def test_float64_gradients_match_finite_differences():
    result = grad_check(MINI_MODEL, synthetic_batch(MINI_MODEL, 3, seed=2), dtype=torch.float64, n_coords=96)
    assert result.coords >= len(result.groups)
    assert result.max_rel_error < 1e-5


@pytest.mark.unit
def test_stationary_point_has_vanishing_gradient():
    result = grad_check(MINI_MODEL, synthetic_batch(MINI_MODEL, 2, seed=4), n_coords=64, zero_loss=True)
    assert result.max_abs_grad <= 1e-7
