"""
独立参考实现（oracle）

与被测实现走不同的算法路径：一致代价搜索代替 scipy 最短路，深度与可见性都用逐 (光线, 格子) 的
slab 求交代替逐格推进，逐项求和的 InfoNCE 代替 cross_entropy。
verify 子命令与测试共用。
"""
import heapq
import logging
import math
from collections import deque
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import CameraConfig, SamplerConfig
from sim.mapper import LABEL_OPEN, LABEL_WALL, ray_fan
from sim.render import _column_rays
from sim.sampler import Action, WorldSamples, make_view_pairs, replay_path
from sim.world import FREE, SQRT2, WALL, Point, Pose, World

logger = logging.getLogger(__name__)

NEIGHBOURS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


def random_grid(rng: np.random.Generator, max_size: int = 20, free_prob: float = 0.7, classes: int = 0) -> np.ndarray:
    """边界为墙的随机栅格；classes > 0 时部分障碍换成物体编码"""
    h, w = (int(v) for v in rng.integers(5, max_size + 1, size=2))
    cells = np.where(rng.random((h, w)) < free_prob, FREE, WALL).astype(np.uint8)
    if classes:
        objects = (cells == WALL) & (rng.random((h, w)) < 0.5)
        cells[objects] = (2 + rng.integers(0, classes, size=int(objects.sum()))).astype(np.uint8)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = WALL
    return cells


def random_free_point(w: World, rng: np.random.Generator) -> Optional[Point]:
    rows, cols = np.nonzero(w.cells == FREE)
    if rows.size == 0:
        return None
    k = int(rng.integers(rows.size))
    return Point((cols[k] + rng.random()) * w.scale, (rows[k] + rng.random()) * w.scale)


def ucs_geodesic(cells: np.ndarray, scale: float, a: Tuple[int, int], b: Tuple[int, int]) -> float:
    """一致代价搜索：8邻接，直边 scale、斜边 √2·scale"""
    if cells[a] != FREE or cells[b] != FREE:
        return math.inf
    best = {a: 0.0}
    frontier = [(0.0, a)]
    while frontier:
        cost, (r, c) = heapq.heappop(frontier)
        if (r, c) == b:
            return cost
        if cost > best.get((r, c), math.inf):
            continue
        for dr, dc in NEIGHBOURS:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < cells.shape[0] and 0 <= nc < cells.shape[1]) or cells[nr, nc] != FREE:
                continue
            step = scale * (SQRT2 if dr and dc else 1.0)
            if cost + step < best.get((nr, nc), math.inf):
                best[(nr, nc)] = cost + step
                heapq.heappush(frontier, (cost + step, (nr, nc)))
    return math.inf


def flood_fill_area(cells: np.ndarray, scale: float) -> float:
    """广度优先填充求最大8连通空闲分量面积"""
    seen = np.zeros(cells.shape, dtype=bool)
    largest = 0
    for start in zip(*np.nonzero(cells == FREE)):
        if seen[start]:
            continue
        seen[start] = True
        queue, size = deque([start]), 0
        while queue:
            r, c = queue.popleft()
            size += 1
            for dr, dc in NEIGHBOURS:
                nr, nc = r + dr, c + dc
                if 0 <= nr < cells.shape[0] and 0 <= nc < cells.shape[1] and cells[nr, nc] == FREE and not seen[nr, nc]:
                    seen[nr, nc] = True
                    queue.append((nr, nc))
        largest = max(largest, size)
    return largest * scale * scale


def slab_depth(w: World, pose: Pose, cam: CameraConfig) -> np.ndarray:
    """
    每列光线与所有非空闲格子逐个做 slab 求交，取最小入射参数；只擦过一点（区间长度为 0）的格子不算命中，
    离开世界边界视为命中。方向向量前向分量为1，入射参数即平面深度。返回截断后的深度。
    """
    dx, dy = _column_rays(pose, cam)
    s = w.scale
    rows, cols = np.nonzero(w.cells != FREE)
    x0, y0 = cols * s, rows * s
    x1, y1 = x0 + s, y0 + s
    ox, oy = pose.position.x, pose.position.y
    bounds = (w.width * s, w.height * s)
    depth = np.empty(dx.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        for i in range(dx.size):
            t_lo = np.zeros(x0.size)
            t_hi = np.full(x0.size, np.inf)
            leave = math.inf
            for o, d, lo, hi, edge in ((ox, dx[i], x0, x1, bounds[0]), (oy, dy[i], y0, y1, bounds[1])):
                if d == 0:
                    t_hi = np.where((lo < o) & (o < hi), t_hi, -np.inf)
                    continue
                ta, tb = (lo - o) / d, (hi - o) / d
                t_lo = np.maximum(t_lo, np.minimum(ta, tb))
                t_hi = np.minimum(t_hi, np.maximum(ta, tb))
                leave = min(leave, ((edge if d > 0 else 0.0) - o) / d)
            entries = t_lo[t_lo < t_hi]
            depth[i] = min(float(entries.min()) if entries.size else math.inf, leave)
    return np.clip(depth, cam.depth_min, cam.depth_max)


def _segment_point_distance(px, py, ax, ay, bx, by) -> float:
    vx, vy = bx - ax, by - ay
    length2 = vx * vx + vy * vy
    t = 0.0 if length2 == 0 else min(1.0, max(0.0, ((px - ax) * vx + (py - ay) * vy) / length2))
    return math.hypot(px - (ax + t * vx), py - (ay + t * vy))


def _segment_box_distance(start: Point, end: Point, x0: float, y0: float, x1: float, y1: float) -> float:
    """线段到轴对齐方框的精确距离（相交为 0）"""
    if _slab(start.x, start.y, end.x - start.x, end.y - start.y, x0, y0, x1, y1, 0.0, 1.0) is not None:
        return 0.0
    candidates = []
    for px, py in ((start.x, start.y), (end.x, end.y)):
        cx, cy = min(max(px, x0), x1), min(max(py, y0), y1)
        candidates.append(math.hypot(px - cx, py - cy))
    for cx, cy in ((x0, y0), (x0, y1), (x1, y0), (x1, y1)):
        candidates.append(_segment_point_distance(cx, cy, start.x, start.y, end.x, end.y))
    return min(candidates)


def _slab(ox, oy, dx, dy, x0, y0, x1, y1, t_lo, t_hi) -> Optional[Tuple[float, float]]:
    """参数区间 [t_lo, t_hi] 内光线与方框的相交区间"""
    for o, d, lo, hi in ((ox, dx, x0, x1), (oy, dy, y0, y1)):
        if d == 0:
            if o < lo or o > hi:
                return None
            continue
        ta, tb = (lo - o) / d, (hi - o) / d
        if ta > tb:
            ta, tb = tb, ta
        t_lo, t_hi = max(t_lo, ta), min(t_hi, tb)
        if t_lo > t_hi:
            return None
    return t_lo, t_hi


def brute_force_sweep(w: World, start: Point, end: Point, radius: float) -> Tuple[bool, float]:
    """遍历所有非空闲格子求线段到方框的最小距离；返回 (是否碰撞, 最小距离)"""
    s = w.scale
    nearest = math.inf
    for r, c in zip(*np.nonzero(w.cells != FREE)):
        nearest = min(nearest, _segment_box_distance(start, end, c * s, r * s, (c + 1) * s, (r + 1) * s))
    return nearest < radius, nearest


def visibility_oracle(w: World, poses: List[Pose], cam: CameraConfig) -> np.ndarray:
    """
    对每条光线与每个格子做 slab 求交：光线依次穿过的格子按入射参数排序，
    首个非空闲格子之前的空闲格子记为开放，首个非空闲格子记为其类别；入射参数超过量程的格子不计
    """
    observed = np.zeros(w.cells.shape, dtype=np.uint8)
    s = w.scale
    ox, oy, dx, dy = ray_fan(poses, cam, s)
    rows, cols = np.indices(w.cells.shape)
    x0, y0 = cols.ravel() * s, rows.ravel() * s
    x1, y1 = x0 + s, y0 + s
    codes = w.cells.ravel()
    with np.errstate(divide="ignore", invalid="ignore"):
        for i in range(ox.size):
            t_lo = np.zeros(x0.size)
            t_hi = np.full(x0.size, np.inf)
            ok = np.ones(x0.size, dtype=bool)
            for o, d, lo, hi in ((ox[i], dx[i], x0, x1), (oy[i], dy[i], y0, y1)):
                if d == 0:
                    ok &= (lo <= o) & (o < hi)
                    continue
                ta, tb = (lo - o) / d, (hi - o) / d
                t_lo = np.maximum(t_lo, np.minimum(ta, tb))
                t_hi = np.minimum(t_hi, np.maximum(ta, tb))
            # 只擦过角点（交段长度为 0）的格子不算穿过
            crossed = ok & (t_hi > t_lo)
            crossed &= t_lo <= cam.depth_max
            idx = np.nonzero(crossed)[0]
            order = idx[np.argsort(t_lo[idx], kind="stable")]
            for k in order:
                r, c = divmod(int(k), w.width)
                if codes[k] == FREE:
                    observed[r, c] = LABEL_OPEN
                else:
                    observed[r, c] = int(codes[k]) + (LABEL_WALL - WALL)
                    break
    return observed


def direct_infonce(c_i: np.ndarray, c_m: np.ndarray, tau: float) -> float:
    """逐项按定义求和的对称 InfoNCE（float64）"""
    c_i = np.asarray(c_i, np.float64)
    c_m = np.asarray(c_m, np.float64)
    n = c_i.shape[0]
    scores = np.empty((n, n))
    for j in range(n):
        for k in range(n):
            scores[j, k] = c_i[j] @ c_m[k] / (np.linalg.norm(c_i[j]) * np.linalg.norm(c_m[k]))
    total = 0.0
    for j in range(n):
        row = sum(math.exp(scores[j, k] / tau) for k in range(n))
        col = sum(math.exp(scores[k, j] / tau) for k in range(n))
        diag = math.exp(scores[j, j] / tau)
        total += -math.log(diag / row) - math.log(diag / col)
    return total / n


def brute_force_accuracy(c_i: np.ndarray, c_m: np.ndarray, batch_size: int) -> Tuple[float, float]:
    """逐条重新排序：真配对的得分必须严格高于所有其他候选"""
    c_i = np.asarray(c_i, np.float64)
    c_m = np.asarray(c_m, np.float64)
    used = (len(c_i) // batch_size) * batch_size
    hits_i2m = hits_m2i = 0
    for start in range(0, used, batch_size):
        a = c_i[start:start + batch_size] / np.linalg.norm(c_i[start:start + batch_size], axis=1, keepdims=True)
        b = c_m[start:start + batch_size] / np.linalg.norm(c_m[start:start + batch_size], axis=1, keepdims=True)
        scores = np.array([[float(np.dot(a[j], b[k])) for k in range(batch_size)] for j in range(batch_size)])
        for j in range(batch_size):
            rivals_row = [scores[j, k] for k in range(batch_size) if k != j]
            rivals_col = [scores[k, j] for k in range(batch_size) if k != j]
            hits_i2m += all(scores[j, j] > v for v in rivals_row)
            hits_m2i += all(scores[j, j] > v for v in rivals_col)
    return 100.0 * hits_i2m / used, 100.0 * hits_m2i / used


def sampling_violations(w: World, samples: WorldSamples, cfg: SamplerConfig, cam: CameraConfig) -> List[str]:
    """逐项检查采样约束，返回违规描述（空列表为通过）"""
    problems: List[str] = []
    vps = samples.viewpoints
    expected = min(int(math.ceil(round(cfg.viewpoints_per_m2 * samples.navigable_area, 9))), cfg.max_viewpoints)
    if samples.target_count != expected:
        problems.append(f"目标视点数 {samples.target_count} != {expected}")
    if len(vps) != expected and not samples.saturated:
        problems.append(f"视点数 {len(vps)} 与目标 {expected} 不符且未标记饱和")
    cells = [w.world_to_cell(v.position) for v in vps]
    for i in range(len(vps)):
        for j in range(i + 1, len(vps)):
            d = ucs_geodesic(w.cells, w.scale, cells[i], cells[j])
            if d <= cfg.min_pair_distance:
                problems.append(f"视点 {vps[i].id}/{vps[j].id} 测地距离 {d:.3f} <= {cfg.min_pair_distance}")
    for v in vps:
        for view in v.views:
            if not cam.depth_min <= view.d_star <= cam.depth_max:
                problems.append(f"视图 {view.view_id} d*={view.d_star} 超出量程")
        for pair in make_view_pairs(v):
            if not -math.pi < pair.theta_star <= math.pi:
                problems.append(f"视点 {v.id} θ*={pair.theta_star} 超出 (−π, π]")
    used_images: Dict[int, int] = {}
    for t in samples.triplets:
        for view in (t.source, t.target):
            used_images[view.view_id] = used_images.get(view.view_id, 0) + 1
        path = t.path
        if path.num_moves > cfg.max_actions or path.actions[-1] != Action.STOP:
            problems.append(f"路径 {t.source.view_id}→{t.target.view_id} 动作数 {path.num_moves} 或结尾无效")
        target = vps[t.target_viewpoint].position
        end = path.final_pose.position
        d = ucs_geodesic(w.cells, w.scale, w.world_to_cell(end), w.world_to_cell(target))
        if d > cfg.success_radius:
            problems.append(f"路径终点距目标 {d:.3f} > {cfg.success_radius}")
        replayed = replay_path(w, path, cfg)
        if replayed[-1].position != end:
            problems.append(f"路径 {t.source.view_id}→{t.target.view_id} 重放结果不一致")
    for view_id, count in used_images.items():
        if count > 1:
            problems.append(f"图像 {view_id} 被用作 I_s/I_t {count} 次")
    return problems
