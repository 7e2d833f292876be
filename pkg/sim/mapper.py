"""
俯视语义地图 M 的生成（真值可见性累积）

沿路径（每3个动作取一个位姿）并在终点做360°旋转，按水平视场投射扇形光线，
光线穿过的空闲格子记为开放空间，首个命中格子记为其语义类别；
再投影到以 p_s 为中心、世界坐标轴对齐的 [−6, 6] 米窗口，最后叠加渐变色轨迹线。
"""
import math
import logging
from enum import Enum
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw

from config import CameraConfig, MapConfig
from sim.render import cast_rays
from sim.sampler import Path, TripletSpec
from sim.world import World, Point, Pose, WALL, OBJECT_BASE

logger = logging.getLogger(__name__)

# 标签层编码
LABEL_VOID = 0
LABEL_OPEN = 1
LABEL_WALL = 2
LABEL_OBJECT_BASE = 3
LABEL_TRAJECTORY = 255

VOID_RGB = (0, 0, 0)
OPEN_RGB = (245, 245, 245)
OBSTACLE_RGB = (128, 128, 128)     # 去语义消融时的统一障碍颜色
MASKED_SPACE_RGB = VOID_RGB        # 去空间消融时开放空间与未探索区域的统一颜色
RAMP_START_RGB = (255, 0, 0)
RAMP_END_RGB = (0, 0, 255)


class UnknownAblationError(ValueError):
    pass


class MapAblation(str, Enum):
    NONE = "none"
    NO_SEMANTICS = "no_semantics"
    NO_SPACE = "no_space"
    NO_TARGET = "no_target"

    @classmethod
    def parse(cls, mode) -> "MapAblation":
        try:
            return cls(mode.value if isinstance(mode, Enum) else str(mode).lower())
        except ValueError:
            raise UnknownAblationError(f"未知的地图消融模式: {mode}")


@dataclass
class SemanticMap:
    """
    以 p_s 为中心的俯视地图，rgb 为 G×G×3 的 [0,1] 浮点，labels 为同尺寸标签层

    像素 (row, col) 覆盖 x ∈ [psx − E + col·Δ, psx − E + (col+1)·Δ)，
    y ∈ (psy + E − (row+1)·Δ, psy + E − row·Δ]，Δ = 2E/G，上方为 +y。
    """
    rgb: np.ndarray
    labels: np.ndarray
    origin: Point
    extent: float = 6.0

    @property
    def size(self) -> int:
        return self.labels.shape[0]


def label_colors(w: World) -> np.ndarray:
    """标签编码 → RGB 颜色表（uint8，256 项）"""
    lut = np.zeros((256, 3), dtype=np.uint8)
    lut[LABEL_VOID] = VOID_RGB
    lut[LABEL_OPEN] = OPEN_RGB
    lut[LABEL_WALL] = w.palette[WALL]
    n_objects = len(w.palette) - OBJECT_BASE
    lut[LABEL_OBJECT_BASE:LABEL_OBJECT_BASE + n_objects] = w.palette[OBJECT_BASE:]
    return lut


def ramp_color(t: float) -> Tuple[int, int, int]:
    """轨迹渐变色，t ∈ [0, 1]"""
    return tuple(int(round(a + (b - a) * t)) for a, b in zip(RAMP_START_RGB, RAMP_END_RGB))


def observation_poses(path: Path, cfg: Optional[MapConfig] = None) -> List[Pose]:
    """路径位姿（每 pose_stride 个取一个，含终点）加终点 360° 旋转（按 sweep_stride 下采样）"""
    cfg = cfg or MapConfig()
    poses = list(path.poses[::cfg.pose_stride])
    if poses[-1] is not path.poses[-1]:
        poses.append(path.poses[-1])
    final = path.poses[-1]
    step = 2.0 * math.pi / cfg.sweep_poses
    poses += [
        Pose(final.position, final.heading + k * step)
        for k in range(0, cfg.sweep_poses, cfg.sweep_stride)
    ]
    return poses


def ray_fan(poses: List[Pose], cam: CameraConfig, scale: float) -> Tuple[np.ndarray, ...]:
    """每个位姿在水平视场内等角投射 ⌈hfov·depth_max/scale⌉+1 条单位方向光线"""
    n = int(math.ceil(cam.hfov * cam.depth_max / scale)) + 1
    offsets = np.linspace(cam.hfov / 2.0, -cam.hfov / 2.0, n)
    headings = np.array([p.heading for p in poses])[:, None] + offsets[None, :]
    ox = np.repeat([p.position.x for p in poses], n)
    oy = np.repeat([p.position.y for p in poses], n)
    return ox, oy, np.cos(headings).ravel(), np.sin(headings).ravel()


def observe_cells(w: World, poses: List[Pose], cam: CameraConfig) -> np.ndarray:
    """
    世界格子级观测标签（与 cells 同形）：0 未观测，1 开放，2 墙，3+k 物体类别 k
    """
    observed = np.zeros(w.cells.shape, dtype=np.uint8)
    ox, oy, dx, dy = ray_fan(poses, cam, w.scale)
    hits = cast_rays(w, ox, oy, dx, dy, max_range=cam.depth_max, collect=True)
    observed[hits.free_row, hits.free_col] = LABEL_OPEN
    seen = np.isfinite(hits.distance)
    codes = hits.code[seen]
    # 格子编码 WALL=1 → 标签2，物体 2+k → 标签 3+k
    observed[hits.row[seen], hits.col[seen]] = codes + (LABEL_WALL - WALL)
    return observed


def _pixel_cells(w: World, origin: Point, size: int, extent: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """地图像素中心对应的世界格子 (row, col) 及是否在世界内"""
    delta = 2.0 * extent / size
    centers = (np.arange(size) + 0.5) * delta
    xs = origin.x - extent + centers
    ys = origin.y + extent - centers
    cols = np.floor(xs / w.scale).astype(np.int64)
    rows = np.floor(ys / w.scale).astype(np.int64)
    grid_rows, grid_cols = np.meshgrid(rows, cols, indexing="ij")
    inside = (grid_rows >= 0) & (grid_rows < w.height) & (grid_cols >= 0) & (grid_cols < w.width)
    return grid_rows.clip(0, w.height - 1), grid_cols.clip(0, w.width - 1), inside


def to_map_pixel(p: Point, origin: Point, size: int, extent: float) -> Tuple[float, float]:
    """世界坐标 → 地图连续像素坐标 (x=列, y=行)，p_s 落在 (G/2, G/2)"""
    return (p.x - origin.x + extent) / (2.0 * extent) * size, (extent - (p.y - origin.y)) / (2.0 * extent) * size


def _draw_trajectory(
    rgb: np.ndarray, labels: np.ndarray, path: Path, origin: Point, cfg: MapConfig
):
    size = labels.shape[0]
    canvas = Image.fromarray(rgb)
    mask = Image.new("L", (size, size), 0)
    draw, draw_mask = ImageDraw.Draw(canvas), ImageDraw.Draw(mask)

    points = [to_map_pixel(p.position, origin, size, cfg.extent) for p in path.poses]
    deduped = [points[0]] + [q for p, q in zip(points, points[1:]) if q != p]
    segments = len(deduped) - 1
    for k in range(segments):
        color = ramp_color(k / max(1, segments - 1))
        draw.line([deduped[k], deduped[k + 1]], fill=color, width=cfg.line_width)
        draw_mask.line([deduped[k], deduped[k + 1]], fill=LABEL_TRAJECTORY, width=cfg.line_width)

    # 起点方块保证中心像素落在轨迹上
    c = size // 2
    half = cfg.line_width // 2
    box = [c - half, c - half, c + half, c + half]
    draw.rectangle(box, fill=RAMP_START_RGB)
    draw_mask.rectangle(box, fill=LABEL_TRAJECTORY)

    on_line = np.asarray(mask) == LABEL_TRAJECTORY
    labels[on_line] = LABEL_TRAJECTORY
    rgb[on_line] = np.asarray(canvas)[on_line]


def build_semantic_map(
    w: World, path: Path, cam: Optional[CameraConfig] = None, cfg: Optional[MapConfig] = None
) -> SemanticMap:
    """为一条路径生成语义地图（可见性累积 + 终点旋转 + 渐变轨迹）"""
    cam = cam or CameraConfig()
    cfg = cfg or MapConfig()
    origin = path.poses[0].position
    observed = observe_cells(w, observation_poses(path, cfg), cam)

    rows, cols, inside = _pixel_cells(w, origin, cfg.size, cfg.extent)
    labels = np.where(inside, observed[rows, cols], LABEL_VOID).astype(np.uint8)
    rgb = label_colors(w)[labels]
    _draw_trajectory(rgb, labels, path, origin, cfg)
    return SemanticMap(
        rgb=rgb.astype(np.float32) / np.float32(255.0),
        labels=labels,
        origin=origin,
        extent=cfg.extent,
    )


def ablate_rgb(rgb: np.ndarray, labels: np.ndarray, mode) -> np.ndarray:
    """
    按标签层重新着色（rgb 可为 uint8 或 [0,1] 浮点）

    no_semantics：墙与所有物体统一为障碍色；no_space：开放空间与未探索区域统一颜色；
    其余模式返回原图副本。
    """
    mode = MapAblation.parse(mode)
    out = rgb.copy()
    if mode == MapAblation.NO_SEMANTICS:
        region, color = (labels >= LABEL_WALL) & (labels != LABEL_TRAJECTORY), OBSTACLE_RGB
    elif mode == MapAblation.NO_SPACE:
        region, color = labels <= LABEL_OPEN, MASKED_SPACE_RGB
    else:
        return out
    value = np.asarray(color, dtype=np.float32)
    if np.issubdtype(out.dtype, np.floating):
        value = value / np.float32(255.0)
    out[region] = value.astype(out.dtype)
    return out


def apply_ablation(t: TripletSpec, m: SemanticMap, mode) -> Tuple[TripletSpec, SemanticMap]:
    """地图信息消融；no_target 不改地图，只标记三元组（模型用零向量代替 f_t）"""
    mode = MapAblation.parse(mode)
    if mode == MapAblation.NO_TARGET:
        return replace(t, no_target=True), replace(m, rgb=m.rgb.copy())
    return t, replace(m, rgb=ablate_rgb(m.rgb, m.labels, mode))


def export_map_ppm(m: SemanticMap, path: str):
    """导出 8-bit RGB 地图（调试用）"""
    rgb = np.round(np.clip(m.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(rgb).save(path, format="PPM")
