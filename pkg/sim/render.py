"""
第一人称 RGBD 渲染与碰撞检测前进
按列投射光线（针孔模型），并提供基于扫掠圆盘的前进步与可探索距离
"""
import math
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from config import CameraConfig
from sim.world import (
    World, Point, Pose, FREE, WALL, OBJECT_BASE, NUM_OBJECT_CLASSES, OutOfBoundsError,
)

logger = logging.getLogger(__name__)

FLOOR_RGB = np.array([0.55, 0.50, 0.45], dtype=np.float32)
CEILING_RGB = np.array([0.85, 0.85, 0.88], dtype=np.float32)
MIN_SHADE = 0.3
SWEEP_RESOLUTION = 0.001   # 扫掠采样间隔（米）


class InvalidPoseError(ValueError):
    """位姿位于墙体/物体内或世界之外"""
    pass


@dataclass
class RgbdImage:
    """H×W RGB（[0,1]）+ H×W 平面深度（米）"""
    rgb: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3 or self.rgb.shape[:2] != self.depth.shape:
            raise ValueError(f"RGB {self.rgb.shape} 与深度 {self.depth.shape} 尺寸不匹配")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape


@dataclass
class RayHits:
    """批量光线的首次命中结果（距离以方向向量长度为单位）"""
    distance: np.ndarray
    code: np.ndarray
    row: np.ndarray
    col: np.ndarray
    # 命中前穿过的空闲格子（仅 collect=True 时填充）
    free_ray: Optional[np.ndarray] = None
    free_row: Optional[np.ndarray] = None
    free_col: Optional[np.ndarray] = None


def cast_rays(
    w: World,
    ox: np.ndarray,
    oy: np.ndarray,
    dx: np.ndarray,
    dy: np.ndarray,
    max_range: float = math.inf,
    collect: bool = False,
) -> RayHits:
    """
    栅格遍历（逐格推进）批量求光线首次命中的非空闲格子

    光线参数 t 以方向向量 (dx, dy) 的长度为单位：单位方向时 t 为欧氏距离，
    前向分量为1时 t 为平面深度。入射参数超过 max_range 的光线不记命中（距离为 inf）。
    collect=True 时额外返回每条光线在命中之前进入（入射参数 ≤ max_range）的空闲格子。
    """
    ox, oy, dx, dy = (np.asarray(a, dtype=np.float64).ravel() for a in (ox, oy, dx, dy))
    n = ox.shape[0]
    s = w.scale
    cells = w.cells
    col = np.floor(ox / s).astype(np.int64)
    row = np.floor(oy / s).astype(np.int64)
    step_c = np.sign(dx).astype(np.int64)
    step_r = np.sign(dy).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta_x = np.where(dx != 0, s / np.abs(dx), np.inf)
        t_delta_y = np.where(dy != 0, s / np.abs(dy), np.inf)
        t_max_x = np.where(dx != 0, ((col + (dx > 0)) * s - ox) / dx, np.inf)
        t_max_y = np.where(dy != 0, ((row + (dy > 0)) * s - oy) / dy, np.inf)

    t_entry = np.zeros(n)
    distance = np.full(n, np.inf)
    code = np.zeros(n, dtype=np.uint8)
    hit_row = np.full(n, -1, dtype=np.int64)
    hit_col = np.full(n, -1, dtype=np.int64)
    free_parts = []
    active = np.arange(n)

    while active.size:
        r, c = row[active], col[active]
        outside = (r < 0) | (r >= w.height) | (c < 0) | (c >= w.width)
        cell = np.full(active.size, WALL, dtype=np.uint8)
        inside = ~outside
        cell[inside] = cells[r[inside], c[inside]]
        beyond = t_entry[active] > max_range
        blocked = ~beyond & (cell != FREE)
        done = beyond | blocked
        if blocked.any():
            hit = active[blocked]
            distance[hit] = t_entry[hit]
            code[hit] = cell[blocked]
            hit_row[hit] = r[blocked]
            hit_col[hit] = c[blocked]
        if collect:
            free = ~done
            free_parts.append((active[free], r[free], c[free]))
        active = active[~done]
        if not active.size:
            break
        step_x = t_max_x[active] < t_max_y[active]
        ax, ay = active[step_x], active[~step_x]
        t_entry[ax] = t_max_x[ax]
        col[ax] += step_c[ax]
        t_max_x[ax] += t_delta_x[ax]
        t_entry[ay] = t_max_y[ay]
        row[ay] += step_r[ay]
        t_max_y[ay] += t_delta_y[ay]

    hits = RayHits(distance=distance, code=code, row=hit_row, col=hit_col)
    if collect:
        if free_parts:
            hits.free_ray = np.concatenate([p[0] for p in free_parts])
            hits.free_row = np.concatenate([p[1] for p in free_parts])
            hits.free_col = np.concatenate([p[2] for p in free_parts])
        else:
            hits.free_ray = hits.free_row = hits.free_col = np.zeros(0, dtype=np.int64)
    return hits


def _check_pose(w: World, pose: Pose):
    try:
        row, col = w.world_to_cell(pose.position)
    except OutOfBoundsError as e:
        raise InvalidPoseError(str(e))
    if w.cells[row, col] != FREE:
        raise InvalidPoseError(
            f"位姿 ({pose.position.x:.3f}, {pose.position.y:.3f}) 位于非空闲格子 (编码 {w.cells[row, col]})"
        )


def _column_rays(pose: Pose, cam: CameraConfig) -> Tuple[np.ndarray, np.ndarray]:
    """每列一条光线，方向向量的前向分量为1（t 即平面深度）"""
    u = ((np.arange(cam.width) + 0.5) - cam.width / 2.0) / cam.focal
    fx, fy = pose.forward
    rx, ry = math.sin(pose.heading), -math.cos(pose.heading)
    return fx + u * rx, fy + u * ry


def cast_columns(w: World, pose: Pose, cam: CameraConfig) -> RayHits:
    """按列投射，返回每列未截断的平面深度与命中格子"""
    _check_pose(w, pose)
    dx, dy = _column_rays(pose, cam)
    ox = np.full(cam.width, pose.position.x)
    oy = np.full(cam.width, pose.position.y)
    return cast_rays(w, ox, oy, dx, dy)


def render_rgbd(w: World, pose: Pose, cam: CameraConfig) -> RgbdImage:
    """
    渲染第一人称 RGBD 图像

    墙/物体切片高度与平面深度成反比；命中列按调色板着色并乘以距离衰减
    max(0.3, 1 − depth/depth_max)；切片上下分别填充天花板/地面。
    深度通道为平面深度，截断到 [depth_min, depth_max]。
    """
    hits = cast_columns(w, pose, cam)
    f = cam.focal
    z = hits.distance[None, :]
    v = ((np.arange(cam.height) + 0.5) - cam.height / 2.0)[:, None]   # 向下为正

    seen_height = cam.camera_height - v * z / f
    is_slice = (seen_height >= 0.0) & (seen_height <= w.wall_height)
    with np.errstate(divide="ignore", invalid="ignore"):
        floor_depth = np.where(v > 0, cam.camera_height * f / v, np.inf)
        ceiling_depth = np.where(v < 0, (w.wall_height - cam.camera_height) * f / -v, np.inf)
    depth = np.where(is_slice, z, np.where(v > 0, floor_depth, ceiling_depth))
    depth = np.clip(depth, cam.depth_min, cam.depth_max)

    shade = np.maximum(MIN_SHADE, 1.0 - depth / cam.depth_max)[..., None]
    hit_rgb = (w.palette[hits.code].astype(np.float64) / 255.0)[None, :, :]
    floor_rgb = np.broadcast_to(FLOOR_RGB, depth.shape + (3,))
    ceiling_rgb = np.broadcast_to(CEILING_RGB, depth.shape + (3,))
    below = np.broadcast_to(v > 0, depth.shape)[..., None]
    rgb = np.where(
        is_slice[..., None],
        hit_rgb * shade,
        np.where(below, floor_rgb * shade, ceiling_rgb),
    )
    return RgbdImage(
        rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
        depth=depth.astype(np.float32),
    )


def visible_classes(w: World, pose: Pose, cam: CameraConfig) -> np.ndarray:
    """视野内出现的物体类别（多标签，长度 NUM_OBJECT_CLASSES）"""
    hits = cast_columns(w, pose, cam)
    present = np.zeros(NUM_OBJECT_CLASSES, dtype=bool)
    objects = hits.code[hits.code >= OBJECT_BASE].astype(np.int64) - OBJECT_BASE
    present[objects[objects < NUM_OBJECT_CLASSES]] = True
    return present


def sweep_collides(w: World, start: Point, end: Point, radius: float) -> bool:
    """
    半径为 radius 的圆盘沿线段 start→end 扫掠时是否触碰非空闲格子

    以不超过 1 mm 的间隔采样线段，对包围盒内每个非空闲格子计算点到方格的距离。
    """
    length = start.distance_to(end)
    n = max(2, int(math.ceil(length / SWEEP_RESOLUTION)) + 1)
    ts = np.linspace(0.0, 1.0, n)
    px = start.x + ts * (end.x - start.x)
    py = start.y + ts * (end.y - start.y)

    s = w.scale
    c0 = max(0, int(math.floor((min(start.x, end.x) - radius) / s)))
    c1 = min(w.width - 1, int(math.floor((max(start.x, end.x) + radius) / s)))
    r0 = max(0, int(math.floor((min(start.y, end.y) - radius) / s)))
    r1 = min(w.height - 1, int(math.floor((max(start.y, end.y) + radius) / s)))
    window = w.cells[r0:r1 + 1, c0:c1 + 1]
    rows, cols = np.nonzero(window != FREE)
    if rows.size == 0:
        return False
    bx0 = (cols + c0) * s
    by0 = (rows + r0) * s
    gap_x = np.maximum(np.maximum(bx0[None, :] - px[:, None], 0.0), px[:, None] - (bx0[None, :] + s))
    gap_y = np.maximum(np.maximum(by0[None, :] - py[:, None], 0.0), py[:, None] - (by0[None, :] + s))
    return bool(np.any(gap_x * gap_x + gap_y * gap_y < radius * radius))


def step_forward(w: World, pose: Pose, step: float, agent_radius: float = 0.10) -> Tuple[Pose, bool]:
    """
    沿朝向前进 step 米

    Returns:
        (新位姿, 是否碰撞)；碰撞时位姿保持不变
    """
    if step <= 0:
        raise ValueError(f"step 必须为正，得到 {step}")
    _check_pose(w, pose)
    fx, fy = pose.forward
    start = pose.position
    end = Point(start.x + step * fx, start.y + step * fy)
    if sweep_collides(w, start, end, agent_radius):
        return pose, True
    return Pose(end, pose.heading), False


def explorable_distance(
    w: World,
    pose: Pose,
    step: float = 0.10,
    max_steps: int = 50,
    agent_radius: float = 0.10,
    d_min: float = 0.5,
    d_max: float = 5.0,
) -> float:
    """可探索距离真值 d*：以 0.10 m 步长最多前进 50 步，成功步数×步长截断到 [0.5, 5.0]"""
    current = pose
    successful = 0
    for _ in range(max_steps):
        current, collided = step_forward(w, current, step, agent_radius)
        if collided:
            break
        successful += 1
    return min(max(successful * step, d_min), d_max)


def export_rgb_ppm(img: RgbdImage, path: str):
    """导出 8-bit RGB（调试用）"""
    rgb = np.round(np.clip(img.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(rgb).save(path, format="PPM")


def export_depth_pgm(img: RgbdImage, path: str):
    """导出 16-bit 灰度深度（毫米量化，调试用）"""
    mm = np.round(img.depth.astype(np.float64) * 1000.0).clip(0, 65535).astype(np.int32)
    Image.fromarray(mm).save(path, format="PPM")
