"""
从零训练的小型 ViT 组件：注意力块、RGBD 编码器、地图编码器
"""
import logging

import torch
import torch.nn as nn
from einops import rearrange, repeat
from einops.layers.torch import Rearrange

from config import ModelConfig

logger = logging.getLogger(__name__)

DEPTH_MIN = 0.5
DEPTH_SPAN = 4.5


class ShapeMismatchError(ValueError):
    """输入张量尺寸与模型配置不符"""
    pass


class MLP(nn.Module):
    """预归一化前馈层"""

    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.layer_norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.gelu = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.gelu(self.fc1(self.layer_norm(x))))


class MSA(nn.Module):
    """预归一化多头自注意力（qkv 无偏置，输出投影有偏置）"""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.norm = nn.LayerNorm(dim)
        self.to_qkv = nn.Linear(dim, dim * 3, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        qkv = self.to_qkv(self.norm(x)).chunk(3, dim=-1)
        q, k, v = (rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in qkv)
        attn = torch.softmax(torch.matmul(q, k.transpose(-1, -2)) * self.scale, dim=-1)
        out = rearrange(torch.matmul(attn, v), "b h n d -> b n (h d)")
        return self.to_out(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.msa = MSA(dim, heads)
        self.mlp = MLP(dim, mlp_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.msa(x) + x
        return self.mlp(x) + x


class Transformer(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, mlp_dim: int):
        super().__init__()
        self.layers = nn.ModuleList([TransformerBlock(dim, heads, mlp_dim) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.layers:
            x = block(x)
        return self.norm(x)


class _TokenEncoder(nn.Module):
    """类别 token + 可学习位置编码 + Transformer，取类别 token 的最终状态作为特征"""

    def __init__(self, num_tokens: int, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.num_tokens = num_tokens
        self.cls_token = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.pos_embedding = nn.Parameter(torch.randn(1, num_tokens + 1, d) * 0.02)
        self.transformer = Transformer(d, cfg.depth, cfg.heads, cfg.mlp_ratio * d)

    def pool(self, tokens: torch.Tensor) -> torch.Tensor:
        cls = repeat(self.cls_token, "1 1 d -> b 1 d", b=tokens.shape[0])
        x = torch.cat([cls, tokens], dim=1) + self.pos_embedding
        return self.transformer(x)[:, 0]


class RGBDEncoder(_TokenEncoder):
    """
    RGBD 编码器

    RGB 与深度分别做 patch 卷积得到 v_rgb、v_d，逐 token 拼接后经非线性投影 Π_v
    映射到嵌入维度，再送入 Transformer。深度按 (d − 0.5)/4.5 归一化到 [0, 1]。
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__((cfg.image_size // cfg.patch_size) ** 2, cfg)
        c, p, d = cfg.patch_channels, cfg.patch_size, cfg.embed_dim
        self.image_size = cfg.image_size
        self.conv_rgb = nn.Conv2d(3, c, kernel_size=p, stride=p)
        self.conv_d = nn.Conv2d(1, c, kernel_size=p, stride=p)
        self.to_tokens = Rearrange("b c h w -> b (h w) c")
        self.proj = nn.Sequential(nn.Linear(2 * c, d), nn.GELU(), nn.Linear(d, d))

    def forward(self, rgb: torch.Tensor, depth: torch.Tensor) -> torch.Tensor:
        """rgb: (B, H, W, 3) ∈ [0,1]；depth: (B, H, W) 米 → (B, d)"""
        s = self.image_size
        if rgb.ndim != 4 or tuple(rgb.shape[1:]) != (s, s, 3) or tuple(depth.shape) != tuple(rgb.shape[:3]):
            raise ShapeMismatchError(
                f"RGBD 输入应为 (B,{s},{s},3)/(B,{s},{s})，得到 {tuple(rgb.shape)}/{tuple(depth.shape)}"
            )
        v_rgb = self.to_tokens(self.conv_rgb(rearrange(rgb, "b h w c -> b c h w")))
        v_d = self.to_tokens(self.conv_d(((depth - DEPTH_MIN) / DEPTH_SPAN).unsqueeze(1)))
        return self.pool(self.proj(torch.cat([v_rgb, v_d], dim=-1)))


class MapEncoder(_TokenEncoder):
    """俯视地图编码器（3通道 patch 卷积直接映射到嵌入维度）"""

    def __init__(self, cfg: ModelConfig):
        super().__init__((cfg.map_size // cfg.map_patch_size) ** 2, cfg)
        p = cfg.map_patch_size
        self.map_size = cfg.map_size
        self.conv_map = nn.Conv2d(3, cfg.embed_dim, kernel_size=p, stride=p)
        self.to_tokens = Rearrange("b c h w -> b (h w) c")

    def forward(self, map_rgb: torch.Tensor) -> torch.Tensor:
        """map_rgb: (B, G, G, 3) ∈ [0,1] → (B, d)"""
        g = self.map_size
        if map_rgb.ndim != 4 or tuple(map_rgb.shape[1:]) != (g, g, 3):
            raise ShapeMismatchError(f"地图输入应为 (B,{g},{g},3)，得到 {tuple(map_rgb.shape)}")
        return self.pool(self.to_tokens(self.conv_map(rearrange(map_rgb, "b h w c -> b c h w"))))


def block_parameter_count(d: int, mlp_dim: int) -> int:
    """单个 Transformer 块：两个 LayerNorm、qkv（无偏置）、输出投影、前馈层"""
    return 2 * d + 3 * d * d + (d * d + d) + 2 * d + (d * mlp_dim + mlp_dim) + (mlp_dim * d + d)
