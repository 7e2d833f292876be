"""
验证服务：对齐准确率（I→M / M→I）、Δθ / Δd、冻结特征线性探针
"""
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from config import Config, EvalConfig, TrainConfig
from models.ego2map import Ego2MapModel
from models.objectives import cosine_matrix
from schemas.manifest_schema import ShardManifest, Split
from schemas.report_schema import EvalReport, ProbeScores
from services.dataset import build_index, stream_records
from services.trainer import collate, prepare_record
from sim.world import NUM_OBJECT_CLASSES

logger = logging.getLogger(__name__)

MAX_RIDGE_ESCALATIONS = 12


class EvaluationError(RuntimeError):
    """评估数据不足或无法计算指标"""
    pass


@dataclass
class EvalOutputs:
    """在某个划分上逐条记录收集的模型输出与标签（顺序与分片顺序一致）"""
    c_i: np.ndarray          # (n, e)
    c_m: np.ndarray          # (n, e)
    theta_p: np.ndarray      # (n,)
    theta_star: np.ndarray   # (n,)
    d_p: np.ndarray          # (n, 4)
    d_star: np.ndarray       # (n, 4)
    features: np.ndarray     # (n, 4, d) 冻结 RGBD 特征
    classes: np.ndarray      # (n, 4, K)

    @property
    def n(self) -> int:
        return self.c_i.shape[0]


def _diagonal_hits(scores: np.ndarray) -> np.ndarray:
    """每行对角元素严格大于该行其余元素时为真（并列记为错误）"""
    b = scores.shape[0]
    off = scores.copy()
    off[np.arange(b), np.arange(b)] = -np.inf
    return np.diag(scores) > off.max(axis=1)


def alignment_accuracy(c_i, c_m, batch_size: int) -> Tuple[float, float]:
    """
    按 B 个一组切分，在每组的 B×B 余弦矩阵上统计对角命中率（百分比，微平均）

    末尾不足 B 个的三元组丢弃；不足一组时报错。
    """
    c_i = torch.as_tensor(c_i)
    c_m = torch.as_tensor(c_m)
    n = c_i.shape[0]
    if batch_size < 2:
        raise EvaluationError("评估批大小 B 必须 >= 2")
    if n < batch_size:
        raise EvaluationError(f"三元组数量 {n} 少于评估批大小 {batch_size}")
    hits_i2m = hits_m2i = 0
    used = (n // batch_size) * batch_size
    for start in range(0, used, batch_size):
        scores = cosine_matrix(c_i[start:start + batch_size], c_m[start:start + batch_size]).double().numpy()
        hits_i2m += int(_diagonal_hits(scores).sum())
        hits_m2i += int(_diagonal_hits(scores.T).sum())
    return 100.0 * hits_i2m / used, 100.0 * hits_m2i / used


def head_errors(theta_p, theta_star, d_p, d_star) -> Tuple[float, float]:
    """Δθ = mean|θ^p − θ*|，Δd = mean|d^p − d*|"""
    theta_p, theta_star = np.asarray(theta_p, np.float64), np.asarray(theta_star, np.float64)
    d_p, d_star = np.asarray(d_p, np.float64), np.asarray(d_star, np.float64)
    if theta_p.size == 0 or d_p.size == 0:
        raise EvaluationError("没有可用于计算 Δθ/Δd 的样本")
    return float(np.mean(np.abs(theta_p - theta_star))), float(np.mean(np.abs(d_p - d_star)))


@torch.no_grad()
def collect_outputs(
    model: Ego2MapModel,
    manifest: ShardManifest,
    split: Split,
    train_cfg: TrainConfig,
    batch_size: int = 32,
) -> EvalOutputs:
    """按分片顺序读取某个划分的全部记录（不做增强，按训练时的地图消融处理）"""
    model.eval()
    parts: Dict[str, List[np.ndarray]] = {k: [] for k in EvalOutputs.__dataclass_fields__}
    records, flags = [], []

    def flush():
        batch = collate(records, flags)
        b = len(records)
        views_rgb = torch.cat([batch["pair_rgb"], batch["triplet_rgb"]], dim=1)
        views_depth = torch.cat([batch["pair_depth"], batch["triplet_depth"]], dim=1)
        f = model.encode_rgbd(views_rgb.flatten(0, 1), views_depth.flatten(0, 1)).reshape(b, 4, -1)
        parts["c_i"].append(model.pair_embed(f[:, 2], f[:, 3], batch["no_target"]).numpy())
        parts["c_m"].append(model.map_embed(model.encode_map(batch["map_rgb"])).numpy())
        parts["theta_p"].append(model.predict_angle(f[:, 0], f[:, 1]).numpy())
        parts["theta_star"].append(batch["theta_star"].numpy())
        parts["d_p"].append(model.predict_distance(f).numpy())
        parts["d_star"].append(batch["d_stars"].numpy())
        parts["features"].append(f.numpy())
        parts["classes"].append(np.stack([r.classes for r in records]))
        records.clear()
        flags.clear()

    for record in stream_records(manifest, split, shuffle=False, entries=build_index(manifest, split)):
        prepared, no_target = prepare_record(record, train_cfg, train_cfg.seed, 0, train=False)
        records.append(prepared)
        flags.append(no_target)
        if len(records) == batch_size:
            flush()
    if records:
        flush()
    if not parts["c_i"]:
        raise EvaluationError(f"{split} 划分没有记录")
    return EvalOutputs(**{k: np.concatenate(v) for k, v in parts.items()})


def _ridge_fit(x: np.ndarray, y: np.ndarray, ridge: float) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    中心化岭回归闭式解：W = (XᵀX + λI)⁻¹ Xᵀ(Y − ȳ)，截距为 ȳ − x̄W

    方程组奇异时把 λ 放大 10 倍重试。
    """
    x_mean = x.mean(axis=0)
    y_mean = y.mean(axis=0)
    xc, yc = x - x_mean, y - y_mean
    gram = xc.T @ xc
    lam = ridge
    for _ in range(MAX_RIDGE_ESCALATIONS):
        try:
            system = gram + lam * np.eye(gram.shape[0])
            if not np.isfinite(np.linalg.cond(system)) or np.linalg.cond(system) > 1e12:
                raise np.linalg.LinAlgError("病态方程组")
            w = np.linalg.solve(system, xc.T @ yc)
            return w, y_mean - x_mean @ w, lam
        except np.linalg.LinAlgError as e:
            logger.warning(f"岭回归方程组奇异 (λ={lam:g}): {e}，λ 放大 10 倍重试")
            lam *= 10.0
    raise EvaluationError(f"岭回归在 λ={lam:g} 时仍无法求解")


def linear_probe(
    train_features: np.ndarray,
    train_d: np.ndarray,
    train_classes: np.ndarray,
    val_features: np.ndarray,
    val_d: np.ndarray,
    val_classes: np.ndarray,
    ridge: float = 1e-3,
) -> ProbeScores:
    """
    冻结特征上的两个线性读出

    (a) d* 回归：报告验证集平均绝对误差，并给出预测训练集均值的基线；
    (b) 每个语义类别是否出现（多标签）：线性输出阈值 0.5，报告平均逐类准确率，
        并给出按训练集多数类预测的基线。
    """
    x_train = np.asarray(train_features, np.float64).reshape(-1, train_features.shape[-1])
    x_val = np.asarray(val_features, np.float64).reshape(-1, val_features.shape[-1])
    y_d_train = np.asarray(train_d, np.float64).reshape(-1, 1)
    y_d_val = np.asarray(val_d, np.float64).reshape(-1, 1)
    y_c_train = np.asarray(train_classes, np.float64).reshape(-1, NUM_OBJECT_CLASSES)
    y_c_val = np.asarray(val_classes, np.float64).reshape(-1, NUM_OBJECT_CLASSES)
    if x_train.shape[0] < 2 or x_val.shape[0] < 1:
        raise EvaluationError("探针需要至少 2 个训练样本与 1 个验证样本")

    targets = np.concatenate([y_d_train, y_c_train], axis=1)
    w, b, lam = _ridge_fit(x_train, targets, ridge)
    pred = x_val @ w + b
    d_mae = float(np.mean(np.abs(pred[:, 0] - y_d_val[:, 0])))
    d_baseline = float(np.mean(np.abs(y_d_train.mean() - y_d_val[:, 0])))
    class_pred = pred[:, 1:] >= 0.5
    class_acc = float(np.mean(class_pred == (y_c_val >= 0.5)))
    majority = y_c_train.mean(axis=0) >= 0.5
    prior_acc = float(np.mean(majority[None, :] == (y_c_val >= 0.5)))
    return ProbeScores(
        d_mae=d_mae,
        d_baseline_mae=d_baseline,
        class_accuracy=100.0 * class_acc,
        class_prior_accuracy=100.0 * prior_acc,
        ridge=lam,
        train_samples=x_train.shape[0],
        val_samples=x_val.shape[0],
        feature_dim=x_train.shape[1],
    )


def check_thresholds(report: EvalReport, cfg: EvalConfig) -> List[str]:
    violations = []
    if report.acc_i2m < cfg.min_acc_i2m:
        violations.append(f"acc_i2m<{cfg.min_acc_i2m}")
    if report.acc_m2i < cfg.min_acc_m2i:
        violations.append(f"acc_m2i<{cfg.min_acc_m2i}")
    if report.delta_theta > cfg.max_delta_theta:
        violations.append(f"delta_theta>{cfg.max_delta_theta}")
    if report.delta_d > cfg.max_delta_d:
        violations.append(f"delta_d>{cfg.max_delta_d}")
    return violations


def probe(model: Ego2MapModel, manifest: ShardManifest, cfg: Config) -> ProbeScores:
    """在训练划分上拟合、验证划分上评估"""
    train = collect_outputs(model, manifest, Split.TRAIN, cfg.train, cfg.eval.batch_size)
    val = collect_outputs(model, manifest, Split.VAL, cfg.train, cfg.eval.batch_size)
    scores = linear_probe(
        train.features, train.d_star, train.classes, val.features, val.d_star, val.classes, cfg.eval.probe_ridge
    )
    logger.info(
        f"线性探针: d* MAE={scores.d_mae:.3f}m (均值基线 {scores.d_baseline_mae:.3f}m), "
        f"类别准确率={scores.class_accuracy:.2f}% (先验 {scores.class_prior_accuracy:.2f}%)"
    )
    return scores


def evaluate(
    model: Ego2MapModel,
    manifest: ShardManifest,
    cfg: Config,
    checkpoint: str = "",
    config_hash: str = "",
    probe_scores: Optional[ProbeScores] = None,
) -> EvalReport:
    """在验证划分上计算全部指标，并按 EvalConfig 的阈值记录违规项"""
    out = collect_outputs(model, manifest, Split.VAL, cfg.train, cfg.eval.batch_size)
    acc_i2m, acc_m2i = alignment_accuracy(out.c_i, out.c_m, cfg.eval.batch_size)
    delta_theta, delta_d = head_errors(out.theta_p, out.theta_star, out.d_p, out.d_star)
    report = EvalReport(
        acc_i2m=acc_i2m,
        acc_m2i=acc_m2i,
        delta_theta=delta_theta,
        delta_d=delta_d,
        batch_size=cfg.eval.batch_size,
        triplets=(out.n // cfg.eval.batch_size) * cfg.eval.batch_size,
        pairs=out.n,
        views=int(out.d_p.size),
        probe_d_mae=probe_scores.d_mae if probe_scores else None,
        probe_class_accuracy=probe_scores.class_accuracy if probe_scores else None,
        config_hash=config_hash,
        checkpoint=os.path.basename(checkpoint) if checkpoint else "",
    )
    report.violations = check_thresholds(report, cfg.eval)
    logger.info(
        f"评估: I→M={acc_i2m:.2f}%, M→I={acc_m2i:.2f}% (B={cfg.eval.batch_size}), "
        f"Δθ={delta_theta:.3f}rad, Δd={delta_d:.3f}m"
    )
    if report.violations:
        logger.warning(f"未通过的验收阈值: {report.violations}")
    return report
