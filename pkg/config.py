"""
配置管理模块
用于管理Ego²-Map预训练流水线的配置（世界生成、采样、建图、模型、训练、评估）

配置来源优先级（低 → 高）：
1. dataclass 默认值
2. 环境变量（通过 .env 加载，E2M_THREADS / E2M_OUT / E2M_LOG_LEVEL）
3. 纯文本配置文件（`section.key = value`）
4. 命令行 `--set section.key=value`
"""
import os
import math
import hashlib
import logging
import typing
from typing import Dict, Any, Optional, Tuple
from dataclasses import dataclass, field, fields, is_dataclass
from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """配置错误（未知键、类型错误、违反约束）"""
    pass


# 损失消融预设：(𝓛_θ, 𝓛_d, 𝓛_c)
LOSS_PRESETS: Dict[str, Tuple[bool, bool, bool]] = {
    "model1": (True, False, False),
    "model2": (False, True, False),
    "model3": (False, False, True),
    "model4": (False, True, True),
    "model5": (True, False, True),
    "model6": (True, True, False),
    "model7": (True, True, True),
}

MAP_ABLATIONS = ("none", "no_semantics", "no_space", "no_target")


@dataclass
class WorldGenConfig:
    """程序化室内世界生成配置"""
    extent_min: float = 12.0       # 世界边长下限（米）
    extent_max: float = 20.0       # 世界边长上限（米）
    scale: float = 0.05            # 米/格
    wall_height: float = 2.5       # 米
    wall_thickness: float = 0.10   # 米
    min_rooms: int = 2
    max_rooms: int = 6
    min_room_size: float = 3.0     # 房间最小边长（米）
    door_width: float = 0.9        # 门宽（米），至少3格
    num_classes: int = 12          # 物体语义类别数
    object_density: float = 0.06   # 物体占房间面积比例
    max_retries: int = 8           # 生成失败后的重试次数

    def validate(self):
        if self.scale <= 0 or self.wall_height <= 0:
            raise ConfigError("world.scale 和 world.wall_height 必须大于0")
        if not 0 < self.extent_min <= self.extent_max:
            raise ConfigError("world.extent_min 必须满足 0 < extent_min <= extent_max")
        if not 1 <= self.min_rooms <= self.max_rooms:
            raise ConfigError("world.min_rooms/max_rooms 范围无效")
        if self.door_width < 3 * self.scale:
            raise ConfigError("world.door_width 至少为3格宽")
        if not 0 <= self.object_density < 1:
            raise ConfigError("world.object_density 必须在 [0, 1) 内")
        if not 1 <= self.num_classes <= 12:
            raise ConfigError("world.num_classes 必须在 [1, 12] 内")


@dataclass
class CameraConfig:
    """针孔相机配置（90°水平视场，深度量程 [0.5, 5.0] 米）"""
    width: int = 64
    height: int = 64
    hfov: float = math.pi / 2
    depth_min: float = 0.5
    depth_max: float = 5.0
    camera_height: float = 1.25    # 相机离地高度（米）

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("camera.width/height 必须为正")
        if not 0 < self.hfov < math.pi:
            raise ConfigError("camera.hfov 必须满足 0 < hfov < π")
        if not 0 < self.depth_min < self.depth_max:
            raise ConfigError("camera 深度量程必须满足 0 < depth_min < depth_max")

    @property
    def focal(self) -> float:
        """像素焦距（方形像素，水平/垂直共用）"""
        return (self.width / 2.0) / math.tan(self.hfov / 2.0)


@dataclass
class SamplerConfig:
    """视点/视图对/路径采样配置"""
    viewpoints_per_m2: float = 4.0     # 4×𝒮
    max_viewpoints: int = 500          # 或500个，取较小者
    min_island_radius: float = 1.5     # 米
    min_pair_distance: float = 0.40    # 米
    agent_radius: float = 0.10         # 米
    step_size: float = 0.10            # 米
    turn_angle_deg: float = 5.0
    max_actions: int = 140
    success_radius: float = 0.50       # 米
    triplet_radius: float = 7.0        # 米
    max_explore_steps: int = 50
    attempts_per_viewpoint: int = 30   # 拒绝采样预算 = 目标数 × 该值
    max_target_retries: int = 5        # 跟随失败后换目标的次数

    def validate(self):
        for name in ("step_size", "agent_radius", "success_radius", "triplet_radius", "turn_angle_deg"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"sampler.{name} 必须为正")
        if self.max_viewpoints < 1 or self.max_actions < 1:
            raise ConfigError("sampler.max_viewpoints/max_actions 必须 >= 1")


@dataclass
class MapConfig:
    """俯视语义地图配置"""
    size: int = 128                    # G（像素）
    extent: float = 6.0                # 覆盖 [-6, 6] 米
    pose_stride: int = 3               # 路径位姿每3个动作取一次
    sweep_poses: int = 72              # 终点360°旋转（5°一步）
    sweep_stride: int = 3              # 旋转下采样后不少于24个位姿
    line_width: int = 3                # 轨迹线宽（像素）

    def validate(self):
        if self.size < 4 or self.size % 2:
            raise ConfigError("map.size 必须为 >= 4 的偶数")
        if self.extent <= 0 or self.pose_stride < 1 or self.sweep_stride < 1:
            raise ConfigError("map.extent/pose_stride/sweep_stride 无效")
        if self.sweep_poses // self.sweep_stride < 24:
            raise ConfigError("map 终点旋转下采样后不得少于24个位姿")


@dataclass
class ModelConfig:
    """RGBD编码器 / 地图编码器 / 各预测头配置"""
    image_size: int = 64
    map_size: int = 128
    patch_size: int = 8
    map_patch_size: int = 16
    embed_dim: int = 128               # d
    depth: int = 4                     # Transformer块数
    heads: int = 4
    mlp_ratio: int = 4
    proj_dim: int = 64                 # e
    conv_channels: int = 0             # 每个模态的patch卷积通道数，0 表示 embed_dim // 2

    def validate(self):
        if self.image_size % self.patch_size or self.map_size % self.map_patch_size:
            raise ConfigError("model 输入尺寸必须能被patch大小整除")
        if self.embed_dim % self.heads:
            raise ConfigError("model.embed_dim 必须能被 heads 整除")

    @property
    def patch_channels(self) -> int:
        return self.conv_channels or max(1, self.embed_dim // 2)


@dataclass
class TrainConfig:
    """训练配置（桌面规模默认：N=64，20个epoch）"""
    batch_size: int = 64
    epochs: int = 20
    lr: float = 3e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0
    preset: str = ""                   # model1..model7，非空时覆盖下面三个开关
    loss_theta: bool = True
    loss_d: bool = True
    loss_c: bool = True
    circular_angle: bool = False       # 角度残差是否按圆周包裹
    map_ablation: str = "none"         # none / no_semantics / no_space / no_target
    world_fraction: float = 1.0
    sample_fraction: float = 1.0
    augment: bool = True
    view_jitter: float = 0.10
    map_jitter: float = 0.05
    tau_init: float = 0.07
    tau_min: float = 0.01
    checkpoint_every: int = 1          # 每多少个epoch保存一次
    loader_queue: int = 4              # 数据线程与优化线程之间的有界队列长度

    def __post_init__(self):
        self.apply_preset()

    def apply_preset(self):
        if self.preset:
            if self.preset not in LOSS_PRESETS:
                raise ConfigError(f"未知的 train.preset: {self.preset}")
            self.loss_theta, self.loss_d, self.loss_c = LOSS_PRESETS[self.preset]

    def validate(self):
        self.apply_preset()
        if not (self.loss_theta or self.loss_d or self.loss_c):
            raise ConfigError("至少需要启用一个损失")
        if self.loss_c and self.batch_size < 2:
            raise ConfigError("启用对比损失时 batch_size 必须 >= 2（需要负样本）")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("train.batch_size/epochs 必须 >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("train.lr/weight_decay 不能为负")
        if self.map_ablation not in MAP_ABLATIONS:
            raise ConfigError(f"未知的 train.map_ablation: {self.map_ablation}")
        if not (0 < self.world_fraction <= 1 and 0 < self.sample_fraction <= 1):
            raise ConfigError("train.world_fraction/sample_fraction 必须在 (0, 1] 内")
        if not 0 < self.tau_min <= self.tau_init:
            raise ConfigError("train.tau_min 必须满足 0 < tau_min <= tau_init")

    @property
    def enabled_losses(self) -> Dict[str, bool]:
        return {"c": self.loss_c, "theta": self.loss_theta, "d": self.loss_d}


@dataclass
class DataConfig:
    """数据集构建配置"""
    num_worlds: int = 10
    val_fraction: float = 0.2          # 验证集世界比例（按世界划分，互不相交）
    shard_size: int = 500

    def validate(self):
        if self.num_worlds < 2:
            raise ConfigError("data.num_worlds 至少为2（训练/验证各一个）")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("data.val_fraction 必须在 (0, 1) 内")
        if self.shard_size < 1:
            raise ConfigError("data.shard_size 必须 >= 1")


@dataclass
class EvalConfig:
    """评估配置（含CI验收阈值）"""
    batch_size: int = 32               # B
    probe_ridge: float = 1e-3
    min_acc_i2m: float = 0.0           # 百分比
    min_acc_m2i: float = 0.0
    max_delta_theta: float = math.inf  # 弧度
    max_delta_d: float = math.inf      # 米

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError("eval.batch_size 必须 >= 2")
        if self.probe_ridge <= 0:
            raise ConfigError("eval.probe_ridge 必须为正")


@dataclass
class RuntimeConfig:
    """运行时配置"""
    threads: int = field(default_factory=lambda: int(os.getenv("E2M_THREADS", str(min(4, os.cpu_count() or 1)))))
    out_dir: str = field(default_factory=lambda: os.getenv("E2M_OUT", "./runs/default"))
    log_level: str = field(default_factory=lambda: os.getenv("E2M_LOG_LEVEL", "INFO"))

    def validate(self):
        if self.threads < 1:
            raise ConfigError("runtime.threads (E2M_THREADS) 必须 >= 1")


@dataclass
class Config:
    """全局配置"""
    seed: int = 0
    world: WorldGenConfig = field(default_factory=WorldGenConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    map: MapConfig = field(default_factory=MapConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    def validate(self) -> "Config":
        """校验所有配置段，并检查跨段一致性"""
        for f in fields(self):
            section = getattr(self, f.name)
            if is_dataclass(section):
                section.validate()
        if self.camera.width != self.camera.height or self.camera.width != self.model.image_size:
            raise ConfigError("model.image_size 必须与相机分辨率一致（方形图像）")
        if self.model.map_size != self.map.size:
            raise ConfigError("model.map_size 必须与 map.size 一致")
        return self

    def to_text(self) -> str:
        """导出为 `section.key = value` 纯文本（用于回显与哈希）"""
        lines = [f"seed = {self.seed}"]
        for f in fields(self):
            section = getattr(self, f.name)
            if not is_dataclass(section):
                continue
            for sf in fields(section):
                lines.append(f"{f.name}.{sf.name} = {_format_value(getattr(section, sf.name))}")
        return "\n".join(lines) + "\n"

    @property
    def config_hash(self) -> str:
        # runtime 段不影响结果
        text = "\n".join(
            line for line in self.to_text().splitlines() if not line.startswith("runtime.")
        )
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(raw: str, target_type: Any, key: str) -> Any:
    """按字段类型把字符串转换为具体值"""
    raw = raw.strip()
    try:
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"配置项 {key} 的值无法解析: {raw!r}")


def parse_key_values(text: str) -> Dict[str, str]:
    """解析 `key = value` 行（忽略空行与 # 注释）"""
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"第{lineno}行缺少 '=': {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config_file(path: str) -> Dict[str, str]:
    """读取纯文本配置文件"""
    if not os.path.exists(path):
        raise ConfigError(f"配置文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return parse_key_values(f.read())


def apply_overrides(cfg: Config, overrides: Dict[str, str]) -> Config:
    """
    应用 `section.key -> value` 覆盖，未知键直接报错

    Args:
        cfg: 待修改的配置
        overrides: 字符串形式的覆盖值

    Returns:
        Config: 修改后的配置（同一对象）
    """
    for key, raw in overrides.items():
        if key == "seed":
            cfg.seed = _coerce(raw, int, key)
            continue
        if "." not in key:
            raise ConfigError(f"未知配置项: {key}")
        section_name, field_name = key.split(".", 1)
        section = getattr(cfg, section_name, None)
        if section is None or not is_dataclass(section):
            raise ConfigError(f"未知配置段: {section_name}")
        hints = typing.get_type_hints(type(section))
        if field_name not in hints:
            raise ConfigError(f"未知配置项: {key}")
        setattr(section, field_name, _coerce(raw, hints[field_name], key))
    _warn_preset_conflicts(cfg.train, {k for k in overrides if k.startswith("train.loss_")})
    cfg.train.apply_preset()
    return cfg


def _warn_preset_conflicts(train: TrainConfig, explicit: set):
    """预设会改写显式给出的损失开关；值不同时给出警告"""
    if train.preset not in LOSS_PRESETS:
        return
    for name, value in zip(("loss_theta", "loss_d", "loss_c"), LOSS_PRESETS[train.preset]):
        if f"train.{name}" in explicit and getattr(train, name) != value:
            logger.warning(f"train.preset={train.preset} 覆盖了显式设置的 train.{name}={getattr(train, name)}，按预设取 {value}")


def build_config(
    config_path: Optional[str] = None,
    overrides: Optional[Dict[str, str]] = None,
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
) -> Config:
    """按优先级组装并校验配置"""
    cfg = Config()
    merged = load_config_file(config_path) if config_path else {}
    merged.update(overrides or {})
    if merged:
        apply_overrides(cfg, merged)
    if seed is not None:
        cfg.seed = seed
        cfg.train.seed = seed
    if out_dir:
        cfg.runtime.out_dir = out_dir
    return cfg.validate()

