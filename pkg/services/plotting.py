"""
静态图输出：损失曲线、对齐准确率柱状图、视图/地图拼图、数据集统计直方图
"""
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from schemas.report_schema import EvalReport  # noqa: E402
from services.dataset import TrainingRecord  # noqa: E402

logger = logging.getLogger(__name__)

LOSS_LABELS = {"l_c": "L_c (InfoNCE)", "l_theta": "L_theta", "l_d": "L_d"}
_SAVE_KW = dict(dpi=100, metadata={"Software": None})


class PlotError(RuntimeError):
    pass


@dataclass
class MetricsLog:
    """训练指标文件的内容"""
    header: Dict[str, str] = field(default_factory=dict)
    columns: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.columns.get("step", []))

    @property
    def enabled_losses(self) -> List[str]:
        names = [n for n in self.header.get("losses", "").split(",") if n]
        return [f"l_{n}" for n in names]


def read_metrics(path: str) -> MetricsLog:
    """读取训练指标文件；文件缺失或没有任何训练步时报错"""
    if not os.path.exists(path):
        raise FileNotFoundError(f"指标文件不存在: {path}")
    log = MetricsLog()
    names: List[str] = []
    rows: List[List[float]] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f.read().splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                log.header[key.strip()] = value.strip()
            elif not names:
                names = line.split("\t")
            else:
                rows.append([float(v) for v in line.split("\t")])
    if not rows:
        raise PlotError(f"指标文件没有任何训练步: {path}")
    data = np.asarray(rows)
    log.columns = {name: data[:, i] for i, name in enumerate(names)}
    return log


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_loss_curves(log: MetricsLog, out_dir: str, prefix: str = "") -> List[str]:
    """每个启用的损失一张曲线图"""
    paths = []
    steps = log.columns["step"]
    for name in log.enabled_losses:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(steps, log.columns[name], linewidth=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel(LOSS_LABELS.get(name, name))
        ax.set_title(f"{LOSS_LABELS.get(name, name)} ({log.header.get('preset', '')})")
        ax.grid(alpha=0.3)
        paths.append(_save(fig, os.path.join(out_dir, f"{prefix}loss_{name[2:]}.png")))
    return paths


def plot_accuracy_bar(report: EvalReport, out_dir: str) -> str:
    fig, ax = plt.subplots(figsize=(4, 4))
    values = [report.acc_i2m, report.acc_m2i]
    bars = ax.bar(["I->M", "M->I"], values, color=["tab:blue", "tab:orange"])
    ax.axhline(100.0 / report.batch_size, color="gray", linestyle="--", linewidth=1, label="chance")
    for bar, v in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, v + 1, f"{v:.1f}%", ha="center")
    ax.set_ylim(0, 105)
    ax.set_ylabel("alignment accuracy (%)")
    ax.set_title(f"B = {report.batch_size}, {report.triplets} triplets")
    ax.legend()
    return _save(fig, os.path.join(out_dir, "alignment_accuracy.png"))


def plot_montage(records: Sequence[TrainingRecord], out_dir: str, limit: int = 4) -> str:
    """每条记录一行：四张视图 + 地图"""
    records = list(records)[:limit]
    if not records:
        raise PlotError("没有可用于拼图的记录")
    fig, axes = plt.subplots(len(records), 5, figsize=(12, 2.6 * len(records)), squeeze=False)
    titles = ["I_theta0", "I_theta1", "I_s", "I_t", "M"]
    for row, record in zip(axes, records):
        images = list(record.views_rgb) + [record.map_rgb]
        for col, (ax, image) in enumerate(zip(row, images)):
            ax.imshow(np.clip(image, 0, 255 if image.dtype == np.uint8 else 1))
            ax.set_xticks([])
            ax.set_yticks([])
            if col < 4:
                ax.set_title(f"{titles[col]} d*={record.d_stars[col]:.2f}", fontsize=8)
            else:
                ax.set_title(f"{record.record_id} theta*={record.theta_star:.2f}", fontsize=8)
    fig.tight_layout()
    return _save(fig, os.path.join(out_dir, "samples_montage.png"))


def plot_dataset_statistics(theta_star: np.ndarray, path_length: np.ndarray, out_dir: str) -> str:
    """θ* 直方图与路径长度直方图"""
    if len(theta_star) == 0:
        raise PlotError("数据集为空")
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].hist(theta_star, bins=36, range=(-math.pi, math.pi), color="tab:green")
    axes[0].set_xlabel("theta* (rad)")
    axes[0].set_ylabel("pairs")
    axes[1].hist(path_length, bins=30, color="tab:purple")
    axes[1].set_xlabel("path length (m)")
    axes[1].set_ylabel("triplets")
    fig.tight_layout()
    return _save(fig, os.path.join(out_dir, "dataset_statistics.png"))


def plot_metrics(
    metrics_path: str,
    out_dir: str,
    report: Optional[EvalReport] = None,
    records: Optional[Sequence[TrainingRecord]] = None,
) -> List[str]:
    """损失曲线 + （可选）准确率柱状图 + （可选）样本拼图"""
    log = read_metrics(metrics_path)
    paths = plot_loss_curves(log, out_dir)
    if report is not None:
        paths.append(plot_accuracy_bar(report, out_dir))
    if records:
        paths.append(plot_montage(records, out_dir))
    logger.info(f"已输出 {len(paths)} 张图到 {out_dir}")
    return paths
