"""
验证服务测试：对齐准确率、预测头误差、线性探针与端到端评估
"""
import math

import numpy as np
import pytest
import torch

from models.ego2map import Ego2MapModel
from services.evaluator import (
    EvaluationError,
    alignment_accuracy,
    evaluate,
    head_errors,
    linear_probe,
    probe,
)
from services.oracles import brute_force_accuracy
from sim.world import NUM_OBJECT_CLASSES


@pytest.mark.unit
def test_orthogonal_embeddings_are_perfectly_aligned():
    eye = np.eye(32)
    assert alignment_accuracy(eye, eye, 32) == (100.0, 100.0)


@pytest.mark.unit
def test_random_embeddings_reach_chance():
    rng = np.random.default_rng(0)
    c_i, c_m = rng.normal(size=(12800, 16)), rng.normal(size=(12800, 16))
    i2m, m2i = alignment_accuracy(c_i, c_m, 32)
    assert i2m == pytest.approx(100 / 32, abs=0.9)
    assert m2i == pytest.approx(100 / 32, abs=0.9)


@pytest.mark.unit
def test_ties_count_as_incorrect():
    same = np.ones((8, 4))
    assert alignment_accuracy(same, same, 4) == (0.0, 0.0)


@pytest.mark.unit
def test_accuracy_matches_brute_force_and_drops_tail():
    rng = np.random.default_rng(3)
    c_i = rng.normal(size=(70, 6))
    c_m = c_i + rng.normal(scale=0.8, size=(70, 6))
    got = alignment_accuracy(c_i, c_m, 16)
    want = brute_force_accuracy(c_i, c_m, 16)
    assert got == pytest.approx(want)
    assert got == pytest.approx(alignment_accuracy(c_i[:64], c_m[:64], 16))


@pytest.mark.unit
def test_too_few_triplets():
    with pytest.raises(EvaluationError):
        alignment_accuracy(np.eye(4), np.eye(4), 8)
    with pytest.raises(EvaluationError):
        alignment_accuracy(np.eye(4), np.eye(4), 1)


@pytest.mark.unit
def test_head_errors():
    rng = np.random.default_rng(1)
    theta_star = rng.uniform(-math.pi, math.pi, size=20000)
    d_star = rng.uniform(0.5, 5.0, size=(100, 4))
    assert head_errors(theta_star, theta_star, d_star, d_star) == (0.0, 0.0)
    delta_theta, delta_d = head_errors(np.zeros_like(theta_star), theta_star, d_star + 0.25, d_star)
    assert delta_theta == pytest.approx(math.pi / 2, abs=0.05)
    assert delta_d == pytest.approx(0.25)
    with pytest.raises(EvaluationError):
        head_errors([], [], [], [])


def _probe_data(rng, n, dim, class_prob=0.2):
    return (
        rng.normal(size=(n, 4, dim)),
        rng.uniform(0.5, 5.0, size=(n, 4)),
        (rng.random((n, 4, NUM_OBJECT_CLASSES)) < class_prob).astype(np.uint8),
    )


@pytest.mark.unit
def test_probe_on_constant_features_matches_baselines():
    rng = np.random.default_rng(2)
    train_f, train_d, train_c = _probe_data(rng, 200, 8)
    val_f, val_d, val_c = _probe_data(rng, 50, 8)
    scores = linear_probe(np.zeros_like(train_f), train_d, train_c, np.zeros_like(val_f), val_d, val_c)
    assert scores.d_mae == pytest.approx(scores.d_baseline_mae)
    assert scores.class_accuracy == pytest.approx(scores.class_prior_accuracy)
    assert (scores.train_samples, scores.val_samples, scores.feature_dim) == (800, 200, 8)


@pytest.mark.unit
def test_probe_with_unrelated_labels_stays_near_prior():
    rng = np.random.default_rng(4)
    scores = linear_probe(*_probe_data(rng, 500, 8), *_probe_data(rng, 200, 8))
    assert abs(scores.class_accuracy - scores.class_prior_accuracy) < 3.0
    assert scores.d_mae == pytest.approx(scores.d_baseline_mae, rel=0.05)


@pytest.mark.unit
def test_probe_recovers_linear_target():
    rng = np.random.default_rng(5)
    train_f, _, train_c = _probe_data(rng, 300, 6)
    val_f, _, val_c = _probe_data(rng, 100, 6)
    weights = rng.normal(size=6)
    scores = linear_probe(train_f, 2.5 + train_f @ weights * 0.1, train_c, val_f, 2.5 + val_f @ weights * 0.1, val_c)
    assert scores.d_mae < 0.1 * scores.d_baseline_mae


@pytest.mark.unit
def test_singular_features_escalate_ridge():
    rng = np.random.default_rng(6)
    train_f, train_d, train_c = _probe_data(rng, 100, 4)
    train_f[..., 1] = train_f[..., 0]
    val_f, val_d, val_c = _probe_data(rng, 20, 4)
    scores = linear_probe(train_f, train_d, train_c, val_f, val_d, val_c, ridge=1e-15)
    assert scores.ridge > 1e-15
    assert math.isfinite(scores.d_mae)


@pytest.mark.integration
def test_evaluate_on_tiny_dataset(tiny_dataset, tiny_cfg):
    torch.manual_seed(0)
    model = Ego2MapModel(tiny_cfg.model)
    scores = probe(model, tiny_dataset, tiny_cfg)
    assert (scores.train_samples, scores.val_samples, scores.feature_dim) == (400, 96, tiny_cfg.model.embed_dim)

    report = evaluate(model, tiny_dataset, tiny_cfg, checkpoint="/x/checkpoint_final.pt",
                      config_hash=tiny_cfg.config_hash, probe_scores=scores)
    assert 0.0 <= report.acc_i2m <= 100.0 and 0.0 <= report.acc_m2i <= 100.0
    assert (report.triplets, report.pairs, report.views) == (24, 24, 96)
    assert 0.0 <= report.delta_theta <= 2 * math.pi
    assert report.checkpoint == "checkpoint_final.pt"
    assert report.probe_d_mae == scores.d_mae
    assert report.passed


@pytest.mark.integration
def test_unreachable_threshold_is_reported(tiny_dataset, tiny_cfg):
    torch.manual_seed(0)
    tiny_cfg.eval.min_acc_i2m = 101.0
    report = evaluate(Ego2MapModel(tiny_cfg.model), tiny_dataset, tiny_cfg)
    assert report.violations == ["acc_i2m<101.0"]
    assert not report.passed
