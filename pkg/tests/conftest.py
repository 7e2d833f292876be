"""
pytest 全局配置和 fixtures
提供手工构造的世界、迷你模型配置与小型合成数据集
"""
import math
import os
import sys
from typing import Callable, Dict, List

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import Config, ModelConfig, build_config  # noqa: E402
from schemas.manifest_schema import ShardManifest, Split  # noqa: E402
from services.dataset import TrainingRecord, record_key, save_manifest, load_manifest, write_shards  # noqa: E402
from services.verify import MINI_MODEL  # noqa: E402
from sim.world import FREE, NUM_OBJECT_CLASSES, WALL, World  # noqa: E402

TINY_IMAGE = 8
TINY_MAP = 16


# ==================== 世界工厂 ====================

def make_room(height: int, width: int, scale: float = 0.05) -> World:
    """四周为墙、内部全空的矩形房间（height×width 格）"""
    cells = np.full((height, width), FREE, dtype=np.uint8)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = WALL
    return World(cells=cells, scale=scale)


def make_round_room(radius: float, scale: float = 0.05, size_m: float = 5.0) -> World:
    """以 (size_m/2, size_m/2) 为圆心的圆形房间，圆外全为墙"""
    n = int(round(size_m / scale))
    centers = (np.arange(n) + 0.5) * scale - size_m / 2.0
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    cells = np.where(np.hypot(xx, yy) < radius, FREE, WALL).astype(np.uint8)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = WALL
    return World(cells=cells, scale=scale)


@pytest.fixture
def room_factory() -> Callable[..., World]:
    return make_room


@pytest.fixture
def corridor() -> World:
    """10 米长、1 米宽的走廊（scale 0.05）"""
    return make_room(21, 202)


# ==================== 配置 ====================

@pytest.fixture
def mini_model_cfg() -> ModelConfig:
    return MINI_MODEL


@pytest.fixture
def tiny_cfg(tmp_path) -> Config:
    """与迷你模型、8×8 相机、16×16 地图一致的完整配置"""
    return build_config(
        overrides={
            "camera.width": str(TINY_IMAGE),
            "camera.height": str(TINY_IMAGE),
            "map.size": str(TINY_MAP),
            "model.image_size": str(TINY_IMAGE),
            "model.map_size": str(TINY_MAP),
            "model.patch_size": "4",
            "model.map_patch_size": "8",
            "model.embed_dim": "16",
            "model.depth": "2",
            "model.heads": "2",
            "model.mlp_ratio": "2",
            "model.proj_dim": "8",
            "train.batch_size": "16",
            "train.epochs": "1",
            "eval.batch_size": "4",
            "runtime.threads": "1",
        },
        seed=3,
        out_dir=str(tmp_path / "run"),
    )


# ==================== 合成训练记录 ====================

def make_record(world_id: int, index: int, rng: np.random.Generator,
                image_size: int = TINY_IMAGE, map_size: int = TINY_MAP) -> TrainingRecord:
    s, g = image_size, map_size
    return TrainingRecord(
        record_id=record_key(world_id, index),
        world_id=world_id,
        pair_rgb=rng.random((2, s, s, 3), dtype=np.float32),
        pair_depth=rng.uniform(0.5, 5.0, size=(2, s, s)).astype(np.float32),
        theta_star=float(rng.uniform(-math.pi, math.pi)),
        triplet_rgb=rng.random((2, s, s, 3), dtype=np.float32),
        triplet_depth=rng.uniform(0.5, 5.0, size=(2, s, s)).astype(np.float32),
        map_rgb=rng.integers(0, 256, size=(g, g, 3), dtype=np.uint8),
        map_labels=rng.integers(0, 6, size=(g, g), dtype=np.uint8),
        d_stars=rng.uniform(0.5, 5.0, size=4).astype(np.float32),
        classes=(rng.random((4, NUM_OBJECT_CLASSES)) < 0.3).astype(np.uint8),
        path_length=float(rng.uniform(0.0, 7.5)),
        path_actions=int(rng.integers(0, 140)),
        source_view_id=int(rng.integers(0, 100)),
        target_view_id=int(rng.integers(0, 100)),
    )


def make_records(worlds: Dict[int, int], seed: int = 0) -> List[TrainingRecord]:
    """worlds: 世界编号 → 记录数"""
    rng = np.random.default_rng(seed)
    return [make_record(w, i, rng) for w, n in sorted(worlds.items()) for i in range(n)]


def write_dataset(root: str, train: Dict[int, int], val: Dict[int, int], shard_size: int = 40) -> ShardManifest:
    """写出训练/验证两个划分并保存合并后的清单，返回重新加载的清单"""
    manifest = write_shards(make_records(train, seed=1), root, shard_size, Split.TRAIN)
    manifest = manifest.merge(write_shards(make_records(val, seed=2), root, shard_size, Split.VAL))
    path = os.path.join(root, "manifest.txt")
    save_manifest(manifest, path)
    return load_manifest(path)


@pytest.fixture
def tiny_dataset(tmp_path) -> ShardManifest:
    """训练 100 条（4 个世界），验证 24 条（2 个世界）"""
    return write_dataset(str(tmp_path / "data"), {0: 25, 1: 25, 2: 25, 3: 25}, {4: 12, 5: 12})


@pytest.fixture
def dataset_factory(tmp_path) -> Callable[..., ShardManifest]:
    counter = {"n": 0}

    def factory(train: Dict[int, int], val: Dict[int, int], shard_size: int = 40) -> ShardManifest:
        counter["n"] += 1
        return write_dataset(str(tmp_path / f"data{counter['n']}"), train, val, shard_size)

    return factory
