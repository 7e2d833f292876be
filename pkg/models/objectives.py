"""
预训练目标：对称 InfoNCE（视图↔地图）、角度偏移 MSE、可探索距离 MSE 及其等权求和
"""
import math
import logging
from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn.functional as F
from einops import rearrange

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
LOSS_NAMES = ("c", "theta", "d")


class DegenerateEmbeddingError(ValueError):
    """嵌入向量范数过小，余弦相似度无定义"""
    pass


class NonFiniteLossError(FloatingPointError):
    """损失或相似度出现 NaN/Inf"""
    pass


class NoLossEnabledError(ValueError):
    pass


@dataclass
class BatchLosses:
    """一个批次的各项损失（张量，total 参与反向传播）"""
    l_c: torch.Tensor
    l_theta: torch.Tensor
    l_d: torch.Tensor
    l_total: torch.Tensor
    per_sample: Optional[torch.Tensor]
    n: int

    def as_floats(self) -> Dict[str, float]:
        return {
            "l_c": float(self.l_c.detach()),
            "l_theta": float(self.l_theta.detach()),
            "l_d": float(self.l_d.detach()),
            "l_total": float(self.l_total.detach()),
        }


def _check_norms(x: torch.Tensor, name: str):
    norms = torch.linalg.vector_norm(x, dim=-1)
    if bool(torch.any(norms < NORM_EPS)):
        raise DegenerateEmbeddingError(f"{name} 中存在范数 < {NORM_EPS} 的嵌入")


def cosine_score(c_i: torch.Tensor, c_m: torch.Tensor) -> torch.Tensor:
    """⟨c^I, c^M⟩ = c^I·c^M / (‖c^I‖‖c^M‖)"""
    _check_norms(c_i, "c^I")
    _check_norms(c_m, "c^M")
    return (c_i * c_m).sum(-1) / (torch.linalg.vector_norm(c_i, dim=-1) * torch.linalg.vector_norm(c_m, dim=-1))


def cosine_matrix(c_i: torch.Tensor, c_m: torch.Tensor) -> torch.Tensor:
    """N×N 余弦相似度矩阵，行对应视图嵌入，列对应地图嵌入"""
    _check_norms(c_i, "c^I")
    _check_norms(c_m, "c^M")
    return F.normalize(c_i, dim=-1) @ F.normalize(c_m, dim=-1).T


def infonce_loss(c_i: torch.Tensor, c_m: torch.Tensor, tau):
    """
    对称 InfoNCE

    第 j 个样本：I→M 项为第 j 行 softmax 的负对数对角概率，M→I 项为第 j 列；
    l_c 为两项之和在批次上的均值。N = 1 时恰好为 0。

    Returns:
        (l_c, 每个样本的 I→M + M→I)
    """
    n = c_i.shape[0]
    if n < 1:
        raise ValueError("批大小必须 >= 1")
    scores = cosine_matrix(c_i, c_m)
    if not bool(torch.isfinite(scores).all()):
        raise NonFiniteLossError("相似度矩阵包含非有限值")
    logits = scores / tau
    labels = torch.arange(n, device=c_i.device)
    i2m = F.cross_entropy(logits, labels, reduction="none")
    m2i = F.cross_entropy(logits.T, labels, reduction="none")
    per_sample = i2m + m2i
    return per_sample.mean(), per_sample


def angular_loss(theta_p: torch.Tensor, theta_star: torch.Tensor, circular: bool = False) -> torch.Tensor:
    """E[(θ^p − θ*)²]；circular 时残差先包裹到 [−π, π)"""
    residual = theta_p - theta_star
    if circular:
        residual = torch.remainder(residual + math.pi, 2 * math.pi) - math.pi
    return (residual ** 2).mean()


def distance_loss(d_p: torch.Tensor, d_star: torch.Tensor) -> torch.Tensor:
    """E[(d^p − d*)²]"""
    return ((d_p - d_star) ** 2).mean()


def _views(x: torch.Tensor) -> torch.Tensor:
    """(B, V, ...) → (V·B, ...)，前 B 个为第 0 个视图"""
    return rearrange(x, "b v ... -> (v b) ...")


def total_loss(model, batch: Dict[str, torch.Tensor], enabled: Dict[str, bool], circular_angle: bool = False) -> BatchLosses:
    """
    启用损失的等权和；未启用的损失记为 0 且不参与梯度（𝓛_c 关闭时不计算地图编码）

    batch 键：pair_rgb (B,2,H,W,3)、pair_depth (B,2,H,W)、theta_star (B,)、
    triplet_rgb/triplet_depth、map_rgb (B,G,G,3)、d_stars (B,4)、no_target (B,)
    """
    use = {name: bool(enabled.get(name, False)) for name in LOSS_NAMES}
    if not any(use.values()):
        raise NoLossEnabledError("至少需要启用一个损失")
    b = batch["theta_star"].shape[0]
    need_pair = use["theta"] or use["d"]
    need_triplet = use["c"] or use["d"]

    rgb_parts, depth_parts = [], []
    if need_pair:
        rgb_parts.append(_views(batch["pair_rgb"]))
        depth_parts.append(_views(batch["pair_depth"]))
    if need_triplet:
        rgb_parts.append(_views(batch["triplet_rgb"]))
        depth_parts.append(_views(batch["triplet_depth"]))
    f = model.encode_rgbd(torch.cat(rgb_parts), torch.cat(depth_parts))
    chunks = list(f.split(b))
    f_pair = chunks[:2] if need_pair else None
    f_triplet = chunks[-2:] if need_triplet else None

    zero = f.new_zeros(())
    l_theta = l_d = l_c = zero
    per_sample = None
    if use["theta"]:
        theta_p = model.predict_angle(f_pair[0], f_pair[1])
        l_theta = angular_loss(theta_p, batch["theta_star"].to(f.dtype), circular_angle)
    if use["d"]:
        d_p = model.predict_distance(torch.cat(f_pair + f_triplet))
        l_d = distance_loss(d_p, _views(batch["d_stars"]).to(f.dtype))
    if use["c"]:
        c_i = model.pair_embed(f_triplet[0], f_triplet[1], batch.get("no_target", False))
        c_m = model.map_embed(model.encode_map(batch["map_rgb"]))
        l_c, per_sample = infonce_loss(c_i, c_m, model.tau)

    l_total = l_c + l_theta + l_d
    if not bool(torch.isfinite(l_total)):
        raise NonFiniteLossError(f"损失非有限: l_c={float(l_c)}, l_theta={float(l_theta)}, l_d={float(l_d)}")
    return BatchLosses(l_c=l_c, l_theta=l_theta, l_d=l_d, l_total=l_total, per_sample=per_sample, n=b)
