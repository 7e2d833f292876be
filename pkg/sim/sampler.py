"""
数据采样：视点、四视图采集、视图对、最短路跟随器与 (I_s, I_t) 三元组

采样流程：
1. 在最大连通区域内按约束拒绝采样视点（岛半径、两两测地距离）
2. 每个视点以随机朝向采集4张RGBD图像，并附带可探索距离 d* 与可见类别
3. 视图 (0,1)、(2,3) 组成两个视图对，θ* 为带符号角度差
4. 每个源视点在7米测地半径内随机配对目标视点，由跟随器生成动作序列
"""
import math
import logging
from enum import IntEnum
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.sparse.csgraph import dijkstra

from config import CameraConfig, SamplerConfig
from schemas.manifest_schema import WorldManifestEntry
from sim.render import RgbdImage, render_rgbd, step_forward, explorable_distance, visible_classes
from sim.world import (
    World, Point, Pose, SQRT2, wrap_angle, grid_graph,
    navigable_area, navigable_mask, clearance_radius, distances_from, geodesic_distance,
)

logger = logging.getLogger(__name__)

VIEWS_PER_VIEWPOINT = 4
VIEW_PAIRS = ((0, 1), (2, 3))
HEADING_TOLERANCE_DEG = 2.5
LOOKAHEAD_CELLS = 4


class SamplingError(RuntimeError):
    """采样无法产生任何有效视点"""
    pass


class FollowerFailure(RuntimeError):
    """跟随器未能在动作预算内到达目标（需要为源视点重新配对目标）"""
    pass


class Action(IntEnum):
    TURN_LEFT = 0
    TURN_RIGHT = 1
    FORWARD = 2
    STOP = 3


@dataclass
class OrientedView:
    """某视点上的一张带朝向的图像及其真值"""
    view_id: int
    heading: float
    image: RgbdImage
    d_star: float
    classes: np.ndarray


@dataclass
class Viewpoint:
    id: int
    position: Point
    views: List[OrientedView]

    def __post_init__(self):
        if len(self.views) != VIEWS_PER_VIEWPOINT:
            raise ValueError(f"视点必须恰好包含{VIEWS_PER_VIEWPOINT}个视图，得到 {len(self.views)}")


@dataclass
class ViewPair:
    a: OrientedView
    b: OrientedView
    theta_star: float


@dataclass
class Path:
    """
    动作序列：poses[i] 为执行 actions[i] 时的位姿，最后一个动作为 STOP
    """
    poses: List[Pose]
    actions: List[Action]
    source_view_id: int = -1
    target_view_id: int = -1

    @property
    def steps(self) -> List[Tuple[Pose, Action]]:
        return list(zip(self.poses, self.actions))

    @property
    def final_pose(self) -> Pose:
        return self.poses[-1]

    @property
    def num_moves(self) -> int:
        """STOP 之前的动作数"""
        return sum(1 for a in self.actions if a != Action.STOP)

    @property
    def length(self) -> float:
        """轨迹长度（米）"""
        return float(sum(a.position.distance_to(b.position) for a, b in zip(self.poses, self.poses[1:])))


@dataclass
class TripletSpec:
    source: OrientedView
    target: OrientedView
    path: Path
    source_viewpoint: int
    target_viewpoint: int
    no_target: bool = False


@dataclass
class WorldSamples:
    """单个世界的采样结果与统计（写入采样清单）"""
    viewpoints: List[Viewpoint]
    triplets: List[TripletSpec]
    target_count: int
    navigable_area: float
    follower_failures: int = 0
    unpaired_sources: int = 0

    @property
    def saturated(self) -> bool:
        return len(self.viewpoints) < self.target_count


def angular_offset(h0: float, h1: float) -> float:
    """h0 → h1 的最短旋转（逆时针为正），结果在 (−π, π]"""
    return wrap_angle(h1 - h0)


def viewpoint_target_count(area: float, cfg: SamplerConfig) -> int:
    """min(⌈4𝒮⌉, 500)"""
    return min(int(math.ceil(round(cfg.viewpoints_per_m2 * area, 9))), cfg.max_viewpoints)


def sample_viewpoint_positions(
    w: World, rng: np.random.Generator, cfg: Optional[SamplerConfig] = None
) -> Tuple[List[Point], int]:
    """
    拒绝采样视点位置

    Returns:
        (接受的位置列表, 目标数量)；空间饱和时列表可能短于目标数量

    Raises:
        SamplingError: 一个视点都无法接受
    """
    cfg = cfg or SamplerConfig()
    area = navigable_area(w)
    target = viewpoint_target_count(area, cfg)
    mask = navigable_mask(w, cfg.agent_radius)
    rows, cols = np.nonzero(mask)
    if rows.size == 0 or math.sqrt(area / math.pi) < cfg.min_island_radius:
        raise SamplingError(f"世界 seed={w.seed} 没有满足岛半径/净空约束的可放置区域")

    s = w.scale
    near_radius = cfg.min_pair_distance + 2.0 * s * SQRT2
    accepted: List[Point] = []
    accepted_xy = np.empty((0, 2))
    accepted_cells = np.empty((0, 2), dtype=np.int64)
    rejected = 0
    for _ in range(target * cfg.attempts_per_viewpoint):
        if len(accepted) >= target:
            break
        k = int(rng.integers(rows.size))
        p = Point((cols[k] + rng.random()) * s, (rows[k] + rng.random()) * s)
        if clearance_radius(w, p) < cfg.min_island_radius:
            rejected += 1
            continue
        if accepted:
            euclid = np.hypot(accepted_xy[:, 0] - p.x, accepted_xy[:, 1] - p.y)
            near = np.nonzero(euclid <= near_radius)[0]
            if near.size:
                dist = distances_from(w, p, limit=cfg.min_pair_distance)
                if np.any(dist[accepted_cells[near, 0], accepted_cells[near, 1]] <= cfg.min_pair_distance):
                    rejected += 1
                    continue
        accepted.append(p)
        accepted_xy = np.vstack([accepted_xy, [p.x, p.y]])
        accepted_cells = np.vstack([accepted_cells, w.world_to_cell(p)])

    if not accepted:
        raise SamplingError(f"世界 seed={w.seed} 未接受任何视点")
    if len(accepted) < target:
        logger.warning(f"世界 seed={w.seed} 视点采样饱和: {len(accepted)}/{target}")
    logger.debug(f"视点采样: 接受 {len(accepted)}，拒绝 {rejected}")
    return accepted, target


def capture_viewpoint(
    w: World,
    vp_id: int,
    position: Point,
    rng: np.random.Generator,
    cam: Optional[CameraConfig] = None,
    cfg: Optional[SamplerConfig] = None,
) -> Viewpoint:
    """以4个独立均匀随机朝向采集 RGBD 图像，附带 d* 与可见类别"""
    cam = cam or CameraConfig()
    cfg = cfg or SamplerConfig()
    views = []
    for k, heading in enumerate(rng.uniform(-math.pi, math.pi, size=VIEWS_PER_VIEWPOINT)):
        pose = Pose(position, float(heading))
        views.append(OrientedView(
            view_id=vp_id * VIEWS_PER_VIEWPOINT + k,
            heading=pose.heading,
            image=render_rgbd(w, pose, cam),
            d_star=explorable_distance(
                w, pose, cfg.step_size, cfg.max_explore_steps, cfg.agent_radius,
                cam.depth_min, cam.depth_max,
            ),
            classes=visible_classes(w, pose, cam),
        ))
    return Viewpoint(id=vp_id, position=position, views=views)


def sample_viewpoints(
    w: World,
    rng: np.random.Generator,
    cfg: Optional[SamplerConfig] = None,
    cam: Optional[CameraConfig] = None,
) -> List[Viewpoint]:
    """采样视点并为每个视点采集四个视图"""
    positions, _ = sample_viewpoint_positions(w, rng, cfg)
    return [capture_viewpoint(w, i, p, rng, cam, cfg) for i, p in enumerate(positions)]


def make_view_pairs(v: Viewpoint) -> List[ViewPair]:
    """视图 (0,1) 与 (2,3) 组成两个视图对"""
    return [
        ViewPair(v.views[i], v.views[j], angular_offset(v.views[i].heading, v.views[j].heading))
        for i, j in VIEW_PAIRS
    ]


def apply_action(w: World, pose: Pose, action: Action, cfg: SamplerConfig) -> Tuple[Pose, bool]:
    """执行单个离散动作，返回 (新位姿, 是否碰撞)"""
    if action == Action.FORWARD:
        return step_forward(w, pose, cfg.step_size, cfg.agent_radius)
    turn = math.radians(cfg.turn_angle_deg)
    if action == Action.TURN_LEFT:
        return Pose(pose.position, pose.heading + turn), False
    if action == Action.TURN_RIGHT:
        return Pose(pose.position, pose.heading - turn), False
    return pose, False


def replay_path(w: World, path: Path, cfg: Optional[SamplerConfig] = None) -> List[Pose]:
    """按动作序列逐步重放，返回每个动作执行前的位姿（与 Path.poses 对齐）"""
    cfg = cfg or SamplerConfig()
    poses = [path.poses[0]]
    for action in path.actions[:-1]:
        pose, collided = apply_action(w, poses[-1], action, cfg)
        if collided:
            raise FollowerFailure("重放路径时发生碰撞")
        poses.append(pose)
    return poses


class FollowerContext:
    """
    跟随器的规划上下文（每个世界构建一次）

    在按智能体半径腐蚀的可通行掩码上建8连通图；不在掩码内的格子吸附到最近的掩码格子。
    """

    def __init__(self, w: World, agent_radius: float):
        self.world = w
        self.mask = navigable_mask(w, agent_radius)
        self.graph = grid_graph(self.mask, w.scale)
        if self.mask.any():
            _, (self.snap_rows, self.snap_cols) = ndimage.distance_transform_edt(
                ~self.mask, return_indices=True
            )
        else:
            self.snap_rows = self.snap_cols = None

    def snap(self, p: Point) -> int:
        if self.snap_rows is None:
            raise FollowerFailure("世界中没有可通行格子")
        row, col = self.world.world_to_cell(p)
        return self.world.flat_index(int(self.snap_rows[row, col]), int(self.snap_cols[row, col]))

    def tree(self, target: Point) -> Tuple[int, np.ndarray, np.ndarray]:
        """以目标为根的最短路树：(根节点, 距离, 前驱)"""
        root = self.snap(target)
        dist, pred = dijkstra(self.graph, directed=False, indices=root, return_predecessors=True)
        return root, dist, pred


def _aim_point(
    ctx: FollowerContext, pose: Pose, target: Point, root: int, dist: np.ndarray, pred: np.ndarray, lookahead: int
) -> Point:
    w = ctx.world
    node = ctx.snap(pose.position)
    if not np.isfinite(dist[node]):
        raise FollowerFailure("当前位置与目标不连通")
    if pose.position.distance_to(target) <= (lookahead + 1) * w.scale:
        return target
    chain = [node]
    while chain[-1] != root and len(chain) <= lookahead:
        chain.append(int(pred[chain[-1]]))
    if chain[-1] == root:
        return target
    row, col = divmod(chain[-1], w.width)
    return w.cell_center(row, col)


def shortest_path_follow(
    w: World,
    start: Pose,
    target: Point,
    cfg: Optional[SamplerConfig] = None,
    ctx: Optional[FollowerContext] = None,
) -> Path:
    """
    贪心最短路跟随器

    朝路径上前瞻航点转向（每次5°，取较短方向）直到朝向误差 ≤ 2.5°，随后前进0.10米；
    与目标的欧氏距离不超过半步时停止。前进碰撞时从当前位置重规划一次，再碰撞即失败。

    Raises:
        FollowerFailure: 动作预算内未到达目标0.5米测地范围内，或再次碰撞
    """
    cfg = cfg or SamplerConfig()
    ctx = ctx or FollowerContext(w, cfg.agent_radius)
    if geodesic_distance(w, start.position, target, limit=cfg.success_radius + w.scale) <= cfg.success_radius:
        return Path(poses=[start], actions=[Action.STOP])

    root, dist, pred = ctx.tree(target)
    tolerance = math.radians(HEADING_TOLERANCE_DEG)
    poses, actions = [start], []
    pose = start
    lookahead = LOOKAHEAD_CELLS
    replans = 0
    while len(actions) < cfg.max_actions:
        if pose.position.distance_to(target) <= cfg.step_size / 2.0:
            break
        aim = _aim_point(ctx, pose, target, root, dist, pred, lookahead)
        desired = math.atan2(aim.y - pose.position.y, aim.x - pose.position.x)
        error = wrap_angle(desired - pose.heading)
        if abs(error) > tolerance:
            action = Action.TURN_LEFT if error > 0 else Action.TURN_RIGHT
        else:
            action = Action.FORWARD
        new_pose, collided = apply_action(w, pose, action, cfg)
        if collided:
            replans += 1
            if replans > 1:
                raise FollowerFailure(f"重规划后再次碰撞（已执行 {len(actions)} 个动作）")
            logger.debug(f"前进碰撞，从 ({pose.position.x:.2f}, {pose.position.y:.2f}) 重规划")
            lookahead = 1
            continue
        pose = new_pose
        actions.append(action)
        poses.append(pose)

    remaining = geodesic_distance(w, pose.position, target, limit=cfg.success_radius + w.scale)
    if remaining > cfg.success_radius:
        raise FollowerFailure(f"{len(actions)} 个动作后距目标仍有 {remaining:.2f} 米（测地）")
    actions.append(Action.STOP)
    return Path(poses=poses, actions=actions)


def sample_triplets(
    w: World,
    vps: List[Viewpoint],
    rng: np.random.Generator,
    cfg: Optional[SamplerConfig] = None,
    stats: Optional[Dict[str, int]] = None,
) -> List[TripletSpec]:
    """
    为源视点随机配对 7 米测地范围内的目标视点并生成路径

    每个视点至多参与一个三元组（作源或作目标），因此任一图像至多被用作一次 I_s 或 I_t。
    跟随失败时换一个目标重试，最多 cfg.max_target_retries 次。
    """
    cfg = cfg or SamplerConfig()
    stats = stats if stats is not None else {}
    stats.setdefault("follower_failures", 0)
    stats.setdefault("unpaired_sources", 0)
    if len(vps) < 2:
        return []

    ctx = FollowerContext(w, cfg.agent_radius)
    cells = np.array([w.world_to_cell(v.position) for v in vps])
    used = np.zeros(len(vps), dtype=bool)
    triplets: List[TripletSpec] = []
    for si in rng.permutation(len(vps)):
        if used[si]:
            continue
        source_vp = vps[si]
        dist = distances_from(w, source_vp.position, limit=cfg.triplet_radius)
        reach = dist[cells[:, 0], cells[:, 1]]
        candidates = [int(j) for j in np.nonzero((reach <= cfg.triplet_radius) & ~used)[0] if j != si]
        paired = False
        for _ in range(cfg.max_target_retries):
            if not candidates:
                break
            tj = candidates.pop(int(rng.integers(len(candidates))))
            target_vp = vps[tj]
            source_view = source_vp.views[int(rng.integers(VIEWS_PER_VIEWPOINT))]
            target_view = target_vp.views[int(rng.integers(VIEWS_PER_VIEWPOINT))]
            try:
                path = shortest_path_follow(
                    w, Pose(source_vp.position, source_view.heading), target_vp.position, cfg, ctx
                )
            except FollowerFailure as e:
                stats["follower_failures"] += 1
                logger.debug(f"视点 {source_vp.id} → {target_vp.id} 跟随失败: {e}")
                continue
            path.source_view_id = source_view.view_id
            path.target_view_id = target_view.view_id
            triplets.append(TripletSpec(
                source=source_view,
                target=target_view,
                path=path,
                source_viewpoint=source_vp.id,
                target_viewpoint=target_vp.id,
            ))
            used[si] = used[tj] = True
            paired = True
            break
        if not paired:
            stats["unpaired_sources"] += 1
    return triplets


def sample_world_dataset(
    w: World,
    rng: np.random.Generator,
    cfg: Optional[SamplerConfig] = None,
    cam: Optional[CameraConfig] = None,
) -> WorldSamples:
    """对单个世界执行完整采样：视点 → 视图 → 三元组"""
    cfg = cfg or SamplerConfig()
    positions, target = sample_viewpoint_positions(w, rng, cfg)
    viewpoints = [capture_viewpoint(w, i, p, rng, cam, cfg) for i, p in enumerate(positions)]
    stats: Dict[str, int] = {}
    triplets = sample_triplets(w, viewpoints, rng, cfg, stats)
    samples = WorldSamples(
        viewpoints=viewpoints,
        triplets=triplets,
        target_count=target,
        navigable_area=navigable_area(w),
        follower_failures=stats["follower_failures"],
        unpaired_sources=stats["unpaired_sources"],
    )
    logger.info(
        f"世界 seed={w.seed}: 视点 {len(viewpoints)}/{target}，三元组 {len(triplets)}，"
        f"跟随失败 {samples.follower_failures}"
    )
    return samples


def manifest_entry(world_id: int, w: World, samples: WorldSamples) -> WorldManifestEntry:
    return WorldManifestEntry(
        world_id=world_id,
        seed=w.seed,
        navigable_area=round(samples.navigable_area, 4),
        target_viewpoints=samples.target_count,
        viewpoints=len(samples.viewpoints),
        saturated=samples.saturated,
        triplets=len(samples.triplets),
        follower_failures=samples.follower_failures,
        unpaired_sources=samples.unpaired_sources,
    )


def write_sampler_manifest(entries: List[WorldManifestEntry], path: str):
    """采样清单：每个世界一行"""
    with open(path, "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(entry.to_line() + "\n")
    logger.info(f"采样清单已写入: {path} ({len(entries)} 个世界)")


def read_sampler_manifest(path: str) -> List[WorldManifestEntry]:
    with open(path, "r", encoding="utf-8") as f:
        return [WorldManifestEntry.from_line(line) for line in f if line.strip()]
