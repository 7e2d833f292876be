"""
运行配置回显Schema（每个子命令写入输出目录）
"""
from typing import List, Optional

from pydantic import Field, field_validator

from schemas.kv_schema import KeyValueModel

SUBCOMMANDS = ("worldgen", "sample", "train", "eval", "probe", "plot", "verify")


class RunConfig(KeyValueModel):
    """一次命令行调用的参数"""
    subcommand: str = Field(..., description="子命令")
    config_path: Optional[str] = Field(None, description="配置文件路径")
    seed: int = Field(0, ge=0, description="全局种子（u64）")
    out_dir: str = Field(..., description="输出目录")
    overrides: List[str] = Field(default_factory=list, description="--set 覆盖项 key=value")
    config_hash: str = Field("", description="生效配置哈希")

    @field_validator("subcommand")
    @classmethod
    def _known_subcommand(cls, value: str) -> str:
        if value not in SUBCOMMANDS:
            raise ValueError(f"未知子命令: {value}")
        return value

    @field_validator("seed")
    @classmethod
    def _u64(cls, value: int) -> int:
        if value >= 1 << 64:
            raise ValueError("seed 必须是 64 位无符号整数")
        return value
