"""
数据清单Schema
采样清单（每个世界一行）与分片清单（分片路径、记录数、划分标签、子集比例）
"""
import os
from enum import Enum
from typing import List, Optional

from pydantic import Field, PrivateAttr, model_validator

from schemas.kv_schema import KeyValueModel, parse_pairs, format_value

SHARD_FORMAT_VERSION = 1


class Split(str, Enum):
    """按世界划分的数据集标签"""
    TRAIN = "train"
    VAL = "val"


class WorldManifestEntry(KeyValueModel):
    """采样清单中的一条世界记录"""
    world_id: int = Field(..., ge=0, description="世界编号")
    seed: int = Field(..., ge=0, description="世界生成种子")
    navigable_area: float = Field(..., ge=0, description="可导航面积 𝒮（平方米）")
    target_viewpoints: int = Field(..., ge=0, description="目标视点数 min(⌈4𝒮⌉, 500)")
    viewpoints: int = Field(..., ge=0, description="实际接受的视点数")
    saturated: bool = Field(False, description="是否因空间饱和少于目标数")
    triplets: int = Field(..., ge=0, description="生成的三元组数")
    follower_failures: int = Field(0, ge=0, description="跟随器失败次数")
    unpaired_sources: int = Field(0, ge=0, description="未能配对目标的源视点数")


class ShardEntry(KeyValueModel):
    """单个分片文件"""
    path: str = Field(..., description="相对清单目录的分片文件名")
    records: int = Field(..., ge=0, description="分片内记录数")
    split: Split = Field(..., description="train / val")
    worlds: List[int] = Field(default_factory=list, description="分片包含的世界编号")


class ShardManifest(KeyValueModel):
    """分片清单：整个数据集的分片列表与生成参数"""
    format_version: int = Field(SHARD_FORMAT_VERSION, description="分片格式版本")
    seed: int = Field(0, ge=0, description="全局种子")
    shard_size: int = Field(500, ge=1, description="每个分片的记录数上限")
    world_fraction: float = Field(1.0, gt=0, le=1, description="采样时使用的世界比例")
    sample_fraction: float = Field(1.0, gt=0, le=1, description="采样时使用的样本比例")
    shards: List[ShardEntry] = Field(default_factory=list, description="分片列表")

    _root: str = PrivateAttr(default=".")

    @model_validator(mode="after")
    def _check_disjoint_splits(self):
        train = set(self.world_ids(Split.TRAIN))
        val = set(self.world_ids(Split.VAL))
        overlap = train & val
        if overlap:
            raise ValueError(f"训练/验证集共享世界: {sorted(overlap)}")
        return self

    @property
    def root(self) -> str:
        return self._root

    def with_root(self, root: str) -> "ShardManifest":
        self._root = root
        return self

    def shard_path(self, entry: ShardEntry) -> str:
        return os.path.join(self._root, entry.path)

    def entries(self, split: Optional[Split] = None) -> List[ShardEntry]:
        return [s for s in self.shards if split is None or s.split == Split(split)]

    def world_ids(self, split: Optional[Split] = None) -> List[int]:
        return sorted({w for s in self.entries(split) for w in s.worlds})

    def record_count(self, split: Optional[Split] = None) -> int:
        return sum(s.records for s in self.entries(split))

    def merge(self, other: "ShardManifest") -> "ShardManifest":
        merged = self.model_copy(update={"shards": list(self.shards) + list(other.shards)})
        return ShardManifest.model_validate(merged.model_dump()).with_root(self._root)

    def to_text(self) -> str:
        lines = [
            f"{name} = {format_value(getattr(self, name))}"
            for name in type(self).model_fields if name != "shards"
        ]
        lines += [f"shard = {s.to_line()}" for s in self.shards]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ShardManifest":
        scalars, shards = {}, []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, value = line.split("=", 1)
            if key.strip() == "shard":
                shards.append(ShardEntry.from_line(value.strip()))
            else:
                scalars.update(parse_pairs(line))
        manifest = cls.from_pairs(scalars)
        return cls.model_validate({**manifest.model_dump(), "shards": [s.model_dump() for s in shards]})

    @classmethod
    def load(cls, path: str) -> "ShardManifest":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_text(f.read()).with_root(os.path.dirname(os.path.abspath(path)))
