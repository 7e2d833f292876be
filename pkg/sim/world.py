"""
程序化室内世界（2.5-D 占据 + 语义栅格）
负责世界生成，以及所有采样约束依赖的度量/拓扑查询：
可导航面积、测地距离、岛半径、智能体可通行掩码
"""
import math
import struct
import logging
from functools import cached_property
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from config import WorldGenConfig

logger = logging.getLogger(__name__)

# 格子编码：0 空闲，1 墙，2..13 物体类别 0..11
FREE = 0
WALL = 1
OBJECT_BASE = 2
NUM_OBJECT_CLASSES = 12

CLASS_NAMES = (
    "chair", "table", "sofa", "bed", "cabinet", "plant",
    "shelf", "desk", "counter", "appliance", "lamp", "stool",
)

# 调色板按格子编码索引，0号为地面颜色
DEFAULT_PALETTE = np.array(
    [
        [200, 200, 200],  # floor
        [90, 90, 90],     # wall
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [170, 110, 40],
    ],
    dtype=np.uint8,
)

MIN_NAVIGABLE_AREA = 4.0   # 平方米
UNREACHABLE = math.inf
SQRT2 = math.sqrt(2.0)
TWO_PI = 2.0 * math.pi
_SEED_MASK = (1 << 64) - 1

WORLD_MAGIC = b"E2MW"
WORLD_VERSION = 1
_WORLD_HEADER = struct.Struct("<4sHIIffQ")


class WorldGenerationError(RuntimeError):
    """世界生成在重试次数内仍失败"""
    pass


class InvalidWorldError(ValueError):
    """世界栅格违反不变量（边界非墙、非法类别等）或文件格式错误"""
    pass


class OutOfBoundsError(ValueError):
    """查询点超出世界边界"""
    pass


class InvalidCellError(ValueError):
    """查询点不在空闲格子内"""
    pass


def wrap_angle(angle: float) -> float:
    """把角度包裹到 (−π, π]，±π 统一返回 +π"""
    wrapped = math.fmod(float(angle) + math.pi, TWO_PI)
    if wrapped < 0:
        wrapped += TWO_PI
    wrapped -= math.pi
    return math.pi if wrapped <= -math.pi else wrapped


@dataclass(frozen=True)
class Point:
    """世界坐标系中的点（米）"""
    x: float
    y: float

    def distance_to(self, other: "Point") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class Pose:
    """位置 + 朝向（弧度，逆时针为正，归一化到 (−π, π]）"""
    position: Point
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def forward(self) -> Tuple[float, float]:
        return math.cos(self.heading), math.sin(self.heading)


def default_palette() -> np.ndarray:
    return DEFAULT_PALETTE.copy()


def grid_graph(mask: np.ndarray, scale: float) -> csr_matrix:
    """
    在布尔掩码上构建8连通图（直边代价 scale，斜边代价 √2·scale）

    节点编号为行主序的扁平索引 row * width + col，图按无向方式使用。
    """
    h, w = mask.shape
    index = np.arange(h * w).reshape(h, w)
    sources, targets, weights = [], [], []
    for dr, dc, cost in ((0, 1, 1.0), (1, 0, 1.0), (1, 1, SQRT2), (1, -1, SQRT2)):
        r1 = h - dr
        c0, c1 = max(0, -dc), w - max(0, dc)
        both = mask[0:r1, c0:c1] & mask[dr:r1 + dr, c0 + dc:c1 + dc]
        sources.append(index[0:r1, c0:c1][both])
        targets.append(index[dr:r1 + dr, c0 + dc:c1 + dc][both])
        weights.append(np.full(int(both.sum()), cost * scale))
    return csr_matrix(
        (np.concatenate(weights), (np.concatenate(sources), np.concatenate(targets))),
        shape=(h * w, h * w),
    )


@dataclass(eq=False)
class World:
    """
    2.5-D 室内世界

    cells 为 (height, width) 的 uint8 栅格，行对应 y、列对应 x；
    世界原点在栅格左下角 (0, 0)，格子 (row, col) 覆盖
    x ∈ [col·scale, (col+1)·scale)，y ∈ [row·scale, (row+1)·scale)。
    生成后不可变，可被多个线程并发只读查询。
    """
    cells: np.ndarray
    scale: float
    wall_height: float = 2.5
    seed: int = 0
    palette: np.ndarray = field(default_factory=default_palette)

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.uint8, copy=True, order="C")
        if cells.ndim != 2 or min(cells.shape) < 3:
            raise InvalidWorldError(f"栅格必须是至少3×3的二维数组，得到 {cells.shape}")
        cells.setflags(write=False)
        self.cells = cells
        # 与文件格式中的 f32 字段保持一致，保证往返位级相同
        self.scale = float(np.float32(self.scale))
        self.wall_height = float(np.float32(self.wall_height))
        self.seed = int(self.seed) & _SEED_MASK
        self.palette = np.array(self.palette, dtype=np.uint8).reshape(-1, 3)
        if self.scale <= 0 or self.wall_height <= 0:
            raise InvalidWorldError("scale 和 wall_height 必须大于0")
        boundary = np.concatenate([cells[0, :], cells[-1, :], cells[:, 0], cells[:, -1]])
        if np.any(boundary != WALL):
            raise InvalidWorldError("世界边界必须全部为墙（封闭世界）")
        if int(cells.max()) >= len(self.palette):
            raise InvalidWorldError("存在超出调色板范围的类别编码")

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def size_m(self) -> Tuple[float, float]:
        return self.width * self.scale, self.height * self.scale

    @cached_property
    def free_mask(self) -> np.ndarray:
        return self.cells == FREE

    @cached_property
    def component_labels(self) -> np.ndarray:
        """空闲格子的8连通分量标签（0 表示非空闲）"""
        labels, _ = ndimage.label(self.free_mask, structure=np.ones((3, 3), dtype=bool))
        return labels

    @cached_property
    def component_sizes(self) -> np.ndarray:
        return np.bincount(self.component_labels.ravel())

    @cached_property
    def largest_component(self) -> int:
        sizes = self.component_sizes
        if len(sizes) <= 1:
            return 0
        return int(np.argmax(sizes[1:]) + 1)

    @cached_property
    def largest_component_mask(self) -> np.ndarray:
        if self.largest_component == 0:
            return np.zeros_like(self.free_mask)
        return self.component_labels == self.largest_component

    @cached_property
    def obstacle_distance(self) -> np.ndarray:
        """每个格子中心到最近非空闲格子中心的距离（米）"""
        return ndimage.distance_transform_edt(self.free_mask) * self.scale

    @cached_property
    def free_graph(self) -> csr_matrix:
        return grid_graph(self.free_mask, self.scale)

    def world_to_cell(self, p: Point) -> Tuple[int, int]:
        """点 → (row, col)，越界抛出 OutOfBoundsError"""
        col = math.floor(p.x / self.scale)
        row = math.floor(p.y / self.scale)
        if not (0 <= row < self.height and 0 <= col < self.width):
            raise OutOfBoundsError(f"点 ({p.x:.3f}, {p.y:.3f}) 超出世界边界 {self.size_m}")
        return row, col

    def cell_center(self, row: int, col: int) -> Point:
        return Point((col + 0.5) * self.scale, (row + 0.5) * self.scale)

    def flat_index(self, row: int, col: int) -> int:
        return row * self.width + col

    def is_free(self, p: Point) -> bool:
        try:
            row, col = self.world_to_cell(p)
        except OutOfBoundsError:
            return False
        return bool(self.free_mask[row, col])


def navigable_area(w: World) -> float:
    """最大空闲连通分量的面积（平方米）"""
    return float(w.component_sizes[w.largest_component]) * w.scale ** 2 if w.largest_component else 0.0


def distances_from(w: World, p: Point, limit: float = math.inf) -> np.ndarray:
    """
    从 p 所在格子出发到所有格子的测地距离（米），形状 (height, width)

    超过 limit 或不可达的格子为 inf。
    """
    row, col = w.world_to_cell(p)
    if not w.free_mask[row, col]:
        raise InvalidCellError(f"点 ({p.x:.3f}, {p.y:.3f}) 不在空闲格子内")
    dist = dijkstra(w.free_graph, directed=False, indices=w.flat_index(row, col), limit=limit)
    return dist.reshape(w.height, w.width)


def geodesic_distance(w: World, a: Point, b: Point, limit: float = math.inf) -> float:
    """
    两点所在格子之间的8连通最短路长度（米）

    不同连通分量（或任一端不在空闲格子内）返回 UNREACHABLE。
    """
    ra, ca = w.world_to_cell(a)
    rb, cb = w.world_to_cell(b)
    if not (w.free_mask[ra, ca] and w.free_mask[rb, cb]):
        return UNREACHABLE
    if (ra, ca) == (rb, cb):
        return 0.0
    labels = w.component_labels
    if labels[ra, ca] != labels[rb, cb]:
        return UNREACHABLE
    dist = dijkstra(w.free_graph, directed=False, indices=w.flat_index(ra, ca), limit=limit)
    return float(dist[w.flat_index(rb, cb)])


def clearance_radius(w: World, p: Point) -> float:
    """岛半径近似：√(所在连通分量面积 / π)"""
    row, col = w.world_to_cell(p)
    if not w.free_mask[row, col]:
        raise InvalidCellError(f"点 ({p.x:.3f}, {p.y:.3f}) 不在空闲格子内")
    area = float(w.component_sizes[w.component_labels[row, col]]) * w.scale ** 2
    return math.sqrt(area / math.pi)


def navigable_mask(w: World, radius: float) -> np.ndarray:
    """
    智能体可放置的格子：位于最大连通分量，且格内任意一点的半径为 radius 的圆盘不触碰障碍

    相当于按智能体半径腐蚀后的导航网格。
    """
    margin = w.scale * SQRT2
    return w.largest_component_mask & (w.obstacle_distance - margin >= radius)


def generate_world(seed: int, cfg: Optional[WorldGenConfig] = None) -> World:
    """
    按 (seed, cfg) 确定性地生成一个封闭室内世界

    Raises:
        WorldGenerationError: 重试 cfg.max_retries 次后最大连通区域仍小于 4 m²
    """
    cfg = cfg or WorldGenConfig()
    cfg.validate()
    seed = int(seed) & _SEED_MASK
    for attempt in range(cfg.max_retries):
        rng = np.random.default_rng([seed, attempt])
        cells = _layout(rng, cfg)
        world = World(cells=cells, scale=cfg.scale, wall_height=cfg.wall_height, seed=seed)
        area = navigable_area(world)
        if area >= MIN_NAVIGABLE_AREA:
            logger.info(
                f"世界生成完成 seed={seed} 尺寸={world.width}×{world.height}格 "
                f"可导航面积={area:.1f}m² (尝试{attempt + 1}次)"
            )
            return world
        logger.debug(f"seed={seed} 第{attempt + 1}次生成的可导航面积过小: {area:.2f}m²")
    raise WorldGenerationError(f"seed={seed} 在 {cfg.max_retries} 次重试后仍无法生成有效世界")


def _rects_overlap(a: Tuple[int, int, int, int], b: Tuple[int, int, int, int]) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _layout(rng: np.random.Generator, cfg: WorldGenConfig) -> np.ndarray:
    """二叉空间划分生成房间、门洞与物体"""
    scale = float(np.float32(cfg.scale))
    width = int(round(rng.uniform(cfg.extent_min, cfg.extent_max) / scale))
    height = int(round(rng.uniform(cfg.extent_min, cfg.extent_max) / scale))
    t = max(1, int(round(cfg.wall_thickness / scale)))
    min_room = max(3, int(round(cfg.min_room_size / scale)))
    door = max(3, int(round(cfg.door_width / scale)))

    cells = np.zeros((height, width), dtype=np.uint8)
    cells[:t, :] = WALL
    cells[-t:, :] = WALL
    cells[:, :t] = WALL
    cells[:, -t:] = WALL

    rooms: List[Tuple[int, int, int, int]] = [(t, t, height - t, width - t)]
    doors: List[Tuple[int, int, int, int]] = []
    frozen = set()
    n_rooms = int(rng.integers(cfg.min_rooms, cfg.max_rooms + 1))

    while len(rooms) < n_rooms:
        candidates = [
            i for i, (r0, c0, r1, c1) in enumerate(rooms)
            if i not in frozen and max(r1 - r0, c1 - c0) >= 2 * min_room + t
        ]
        if not candidates:
            break
        i = max(candidates, key=lambda k: (rooms[k][2] - rooms[k][0]) * (rooms[k][3] - rooms[k][1]))
        r0, c0, r1, c1 = rooms[i]
        split_rows = (r1 - r0) >= (c1 - c0)
        lo, hi = ((r0, r1) if split_rows else (c0, c1))
        wall_rect = None
        for _ in range(10):
            p = int(rng.integers(lo + min_room, hi - min_room - t + 1))
            if split_rows:
                rect = (p, c0, p + t, c1)
            else:
                rect = (r0, p, r1, p + t)
            guard = (rect[0] - 1, rect[1] - 1, rect[2] + 1, rect[3] + 1)
            if not any(_rects_overlap(guard, d) for d in doors):
                wall_rect = rect
                break
        if wall_rect is None:
            frozen.add(i)
            continue

        wr0, wc0, wr1, wc1 = wall_rect
        cells[wr0:wr1, wc0:wc1] = WALL
        span = (wc1 - wc0) if split_rows else (wr1 - wr0)
        length = min(door, span)
        offset = int(rng.integers(0, span - length + 1))
        if split_rows:
            door_rect = (wr0, wc0 + offset, wr1, wc0 + offset + length)
            children = [(r0, c0, wr0, c1), (wr1, c0, r1, c1)]
        else:
            door_rect = (wr0 + offset, wc0, wr0 + offset + length, wc1)
            children = [(r0, c0, r1, wc0), (r0, wc1, r1, c1)]
        cells[door_rect[0]:door_rect[2], door_rect[1]:door_rect[3]] = FREE
        doors.append(door_rect)
        rooms[i:i + 1] = children
        frozen = set()

    _place_objects(rng, cfg, cells, rooms, doors, scale)
    return cells


def _place_objects(rng, cfg: WorldGenConfig, cells: np.ndarray, rooms, doors, scale: float):
    """在每个房间内放置矩形家具，避开门洞附近"""
    keep_out = int(round(0.6 / scale))
    guarded = [(d[0] - keep_out, d[1] - keep_out, d[2] + keep_out, d[3] + keep_out) for d in doors]
    min_obj = max(1, int(round(0.3 / scale)))
    max_obj = max(min_obj, int(round(1.2 / scale)))
    for r0, c0, r1, c1 in rooms:
        target = cfg.object_density * (r1 - r0) * (c1 - c0)
        placed = 0
        for _ in range(60):
            if placed >= target:
                break
            oh = int(rng.integers(min_obj, max_obj + 1))
            ow = int(rng.integers(min_obj, max_obj + 1))
            if oh >= (r1 - r0) - 2 or ow >= (c1 - c0) - 2:
                continue
            rr = int(rng.integers(r0, r1 - oh + 1))
            cc = int(rng.integers(c0, c1 - ow + 1))
            rect = (rr, cc, rr + oh, cc + ow)
            if np.any(cells[rr:rr + oh, cc:cc + ow] != FREE):
                continue
            if any(_rects_overlap(rect, g) for g in guarded):
                continue
            cls = int(rng.integers(cfg.num_classes))
            cells[rr:rr + oh, cc:cc + ow] = OBJECT_BASE + cls
            placed += oh * ow


def save_world(w: World, path: str):
    """按 E2MW 版本化二进制格式写出世界（小端）"""
    with open(path, "wb") as f:
        f.write(_WORLD_HEADER.pack(WORLD_MAGIC, WORLD_VERSION, w.width, w.height, w.scale, w.wall_height, w.seed))
        f.write(struct.pack("<H", len(w.palette)))
        f.write(w.palette.astype(np.uint8).tobytes())
        f.write(w.cells.tobytes(order="C"))
    logger.debug(f"世界已写出: {path}")


def load_world(path: str) -> World:
    """读取 E2MW 文件"""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _WORLD_HEADER.size + 2:
        raise InvalidWorldError(f"世界文件过短: {path}")
    magic, version, width, height, scale, wall_height, seed = _WORLD_HEADER.unpack_from(data, 0)
    if magic != WORLD_MAGIC:
        raise InvalidWorldError(f"世界文件魔数错误: {magic!r}")
    if version != WORLD_VERSION:
        raise InvalidWorldError(f"不支持的世界文件版本: {version}")
    offset = _WORLD_HEADER.size
    (n_colors,) = struct.unpack_from("<H", data, offset)
    offset += 2
    palette = np.frombuffer(data, dtype=np.uint8, count=n_colors * 3, offset=offset).reshape(n_colors, 3)
    offset += n_colors * 3
    if len(data) - offset != width * height:
        raise InvalidWorldError(f"世界文件栅格长度不匹配: {path}")
    cells = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=offset).reshape(height, width)
    return World(cells=cells, scale=scale, wall_height=wall_height, seed=seed, palette=palette)
