"""
Ego²-Map 模型：RGBD 编码器、地图编码器、各预测头与可学习温度
"""
import math
import logging
import os
from typing import Optional, Union

import torch
import torch.nn as nn

from config import ModelConfig
from models.encoders import RGBDEncoder, MapEncoder, block_parameter_count

logger = logging.getLogger(__name__)

ENCODER_FORMAT_VERSION = 1


class ProjectionHead(nn.Sequential):
    """两层感知机（Linear → GELU → Linear）"""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__(nn.Linear(in_dim, hidden_dim), nn.GELU(), nn.Linear(hidden_dim, out_dim))


class Ego2MapModel(nn.Module):
    """
    视图-地图对齐模型

    - pair_head Π_i:     c^I = Π_i[f_s; f_t]
    - map_head Π_m:      c^M = Π_m[f_m]
    - angle_head Π_θ:    θ^p = π·tanh(Π_θ[f_θ0; f_θ1]) ∈ (−π, π)
    - distance_head Π_d: d^p = 0.5 + 4.5·sigmoid(Π_d[f]) ∈ (0.5, 5.0)
    - τ = exp(log_tau)，每次更新后截断到 ≥ tau_min
    """

    def __init__(self, cfg: Optional[ModelConfig] = None, tau_init: float = 0.07, tau_min: float = 0.01):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        d, e = self.cfg.embed_dim, self.cfg.proj_dim
        self.rgbd_encoder = RGBDEncoder(self.cfg)
        self.map_encoder = MapEncoder(self.cfg)
        self.pair_head = ProjectionHead(2 * d, d, e)
        self.map_head = ProjectionHead(d, d, e)
        self.angle_head = ProjectionHead(2 * d, d, 1)
        self.distance_head = ProjectionHead(d, d, 1)
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau_init)))
        self.tau_min = tau_min

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def clamp_tau(self):
        with torch.no_grad():
            self.log_tau.clamp_(min=math.log(self.tau_min))

    def encode_rgbd(self, rgb: torch.Tensor, depth: torch.Tensor) -> torch.Tensor:
        return self.rgbd_encoder(rgb, depth)

    def encode_map(self, map_rgb: torch.Tensor) -> torch.Tensor:
        return self.map_encoder(map_rgb)

    def pair_embed(
        self, f_s: torch.Tensor, f_t: torch.Tensor, no_target: Union[bool, torch.Tensor] = False
    ) -> torch.Tensor:
        """no_target 为真（标量或逐样本）时用零向量代替 f_t"""
        if isinstance(no_target, torch.Tensor):
            f_t = torch.where(no_target.reshape(-1, 1).bool(), torch.zeros_like(f_t), f_t)
        elif no_target:
            f_t = torch.zeros_like(f_t)
        return self.pair_head(torch.cat([f_s, f_t], dim=-1))

    def map_embed(self, f_m: torch.Tensor) -> torch.Tensor:
        return self.map_head(f_m)

    def predict_angle(self, f_0: torch.Tensor, f_1: torch.Tensor) -> torch.Tensor:
        return math.pi * torch.tanh(self.angle_head(torch.cat([f_0, f_1], dim=-1)).squeeze(-1))

    def predict_distance(self, f: torch.Tensor) -> torch.Tensor:
        return 0.5 + 4.5 * torch.sigmoid(self.distance_head(f).squeeze(-1))


def expected_parameter_count(cfg: ModelConfig) -> int:
    """按配置解析计算的参数总数"""
    d, e, c = cfg.embed_dim, cfg.proj_dim, cfg.patch_channels
    p, mp = cfg.patch_size, cfg.map_patch_size
    blocks = cfg.depth * block_parameter_count(d, cfg.mlp_ratio * d) + 2 * d
    n_img = (cfg.image_size // p) ** 2
    n_map = (cfg.map_size // mp) ** 2
    rgbd = (
        (3 * p * p * c + c) + (p * p * c + c)      # conv_rgb, conv_d
        + (2 * c * d + d) + (d * d + d)            # Π_v
        + d + (n_img + 1) * d + blocks             # 类别 token、位置编码、Transformer
    )
    map_encoder = (3 * mp * mp * d + d) + d + (n_map + 1) * d + blocks

    def head(i: int, h: int, o: int) -> int:
        return i * h + h + h * o + o

    heads = head(2 * d, d, e) + head(d, d, e) + head(2 * d, d, 1) + head(d, d, 1)
    return rgbd + map_encoder + heads + 1


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def export_encoder(model: Ego2MapModel, path: str):
    """单独导出 RGBD 编码器（下游视觉骨干）"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(
        {
            "format_version": ENCODER_FORMAT_VERSION,
            "model_config": vars(model.cfg).copy(),
            "rgbd_encoder": model.rgbd_encoder.state_dict(),
        },
        path,
    )
    logger.info(f"RGBD 编码器已导出: {path}")


def load_encoder(path: str) -> RGBDEncoder:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != ENCODER_FORMAT_VERSION:
        raise ValueError(f"不支持的编码器文件版本: {payload.get('format_version')}")
    encoder = RGBDEncoder(ModelConfig(**payload["model_config"]))
    encoder.load_state_dict(payload["rgbd_encoder"])
    return encoder
