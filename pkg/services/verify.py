"""
oracle 验证套件（verify 子命令）

几何：测地距离 / 可导航面积 / 渲染深度 / 地图可见性 / 扫掠碰撞
学习：InfoNCE 复算、有限差分梯度检查、对齐准确率复算
采样：在一个小世界上逐项检查采样约束
"""
import logging
import math
import time
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from config import CameraConfig, ModelConfig, SamplerConfig, WorldGenConfig
from models.objectives import infonce_loss
from schemas.report_schema import SuiteResult, VerifyReport
from services import oracles
from services.evaluator import alignment_accuracy
from services.trainer import grad_check
from sim.mapper import observe_cells
from sim.render import render_rgbd, sweep_collides
from sim.sampler import sample_world_dataset
from sim.world import Point, Pose, World, generate_world, geodesic_distance, navigable_area

logger = logging.getLogger(__name__)

GRID_SCALE = 0.25
MINI_MODEL = ModelConfig(
    image_size=8, map_size=16, patch_size=4, map_patch_size=8,
    embed_dim=16, depth=2, heads=2, mlp_ratio=2, proj_dim=8,
)
GRAD_TOL = {torch.float64: 1e-5, torch.float32: 1e-3}
INFONCE_TOL = 1e-6


def synthetic_batch(cfg: ModelConfig, n: int, seed: int = 0, dtype: torch.dtype = torch.float64) -> Dict[str, torch.Tensor]:
    """随机合成的训练批次（梯度检查与单元测试用）"""
    g = torch.Generator().manual_seed(seed)
    s, m = cfg.image_size, cfg.map_size

    def uniform(shape, lo=0.0, hi=1.0):
        return lo + (hi - lo) * torch.rand(shape, generator=g, dtype=dtype)

    return {
        "pair_rgb": uniform((n, 2, s, s, 3)),
        "pair_depth": uniform((n, 2, s, s), 0.5, 5.0),
        "theta_star": uniform((n,), -math.pi, math.pi),
        "triplet_rgb": uniform((n, 2, s, s, 3)),
        "triplet_depth": uniform((n, 2, s, s), 0.5, 5.0),
        "map_rgb": uniform((n, m, m, 3)),
        "d_stars": uniform((n, 4), 0.5, 5.0),
        "no_target": torch.zeros(n, dtype=torch.bool),
    }


def _random_world(rng: np.random.Generator, max_size: int = 20, classes: int = 0) -> World:
    return World(cells=oracles.random_grid(rng, max_size, classes=classes), scale=GRID_SCALE)


def geodesic_suite(seed: int, worlds: int = 100, pairs: int = 5) -> str:
    rng = np.random.default_rng([seed, 1])
    checked = 0
    for i in range(worlds):
        w = _random_world(rng)
        for _ in range(pairs):
            a, b = oracles.random_free_point(w, rng), oracles.random_free_point(w, rng)
            if a is None:
                break
            got = geodesic_distance(w, a, b)
            want = oracles.ucs_geodesic(w.cells, w.scale, w.world_to_cell(a), w.world_to_cell(b))
            if not (got == want or math.isclose(got, want, rel_tol=1e-12)):
                raise AssertionError(f"世界 {i}: 测地距离 {got} != oracle {want}")
            checked += 1
        area, want_area = navigable_area(w), oracles.flood_fill_area(w.cells, w.scale)
        if not math.isclose(area, want_area, rel_tol=1e-12, abs_tol=1e-12):
            raise AssertionError(f"世界 {i}: 可导航面积 {area} != oracle {want_area}")
    return f"{worlds} worlds, {checked} pairs"


def depth_suite(seed: int, probes: int = 500) -> str:
    rng = np.random.default_rng([seed, 2])
    cam = CameraConfig(width=32, height=32)
    worst = 0.0
    done = 0
    while done < probes:
        w = _random_world(rng, classes=4)
        p = oracles.random_free_point(w, rng)
        if p is None:
            continue
        pose = Pose(p, float(rng.uniform(-math.pi, math.pi)))
        rendered = render_rgbd(w, pose, cam).depth[cam.height // 2].astype(np.float64)
        want = oracles.slab_depth(w, pose, cam)
        err = float(np.max(np.abs(rendered - want)))
        if err > w.scale * math.sqrt(2):
            raise AssertionError(f"探针 {done}: 深度误差 {err:.4f} 超过一个格子对角线")
        worst = max(worst, err)
        done += 1
    return f"{probes} probes, max error {worst:.4f} m"


def visibility_suite(seed: int, worlds: int = 30, poses: int = 3) -> str:
    rng = np.random.default_rng([seed, 3])
    cam = CameraConfig(depth_max=3.0)
    cells = 0
    for i in range(worlds):
        w = _random_world(rng, max_size=16, classes=4)
        chosen = []
        for _ in range(poses):
            p = oracles.random_free_point(w, rng)
            if p is not None:
                chosen.append(Pose(p, float(rng.uniform(-math.pi, math.pi))))
        if not chosen:
            continue
        got = observe_cells(w, chosen, cam)
        want = oracles.visibility_oracle(w, chosen, cam)
        diff = np.argwhere(got != want)
        if diff.size:
            r, c = diff[0]
            raise AssertionError(f"世界 {i}: 格子 ({r},{c}) 可见性 {got[r, c]} != oracle {want[r, c]}")
        cells += int((got > 0).sum())
    return f"{worlds} worlds, {cells} observed cells"


def sweep_suite(seed: int, probes: int = 300, radius: float = 0.10) -> str:
    rng = np.random.default_rng([seed, 4])
    checked = skipped = 0
    while checked + skipped < probes:
        w = _random_world(rng, max_size=12)
        start = oracles.random_free_point(w, rng)
        if start is None:
            continue
        heading = rng.uniform(-math.pi, math.pi)
        length = rng.uniform(0.05, 0.6)
        end = Point(start.x + length * math.cos(heading), start.y + length * math.sin(heading))
        want, nearest = oracles.brute_force_sweep(w, start, end, radius)
        # 采样间隔 1 mm 内的擦边情况不判定
        if abs(nearest - radius) < 1e-3:
            skipped += 1
            continue
        if sweep_collides(w, start, end, radius) != want:
            raise AssertionError(f"扫掠碰撞与 oracle 不一致 (最近距离 {nearest:.4f})")
        checked += 1
    return f"{checked} sweeps, {skipped} grazing skipped"


def infonce_suite(seed: int, batches: int = 100) -> str:
    rng = np.random.default_rng([seed, 5])
    worst = 0.0
    for i in range(batches):
        n = int(rng.integers(1, 17))
        e = int(rng.integers(2, 9))
        tau = float(rng.uniform(0.01, 1.0))
        c_i, c_m = rng.normal(size=(n, e)), rng.normal(size=(n, e))
        got, _ = infonce_loss(torch.from_numpy(c_i), torch.from_numpy(c_m), tau)
        got = float(got)
        if n == 1:
            if got != 0.0:
                raise AssertionError(f"批次 {i}: N=1 时损失应恰为 0，得到 {got}")
            continue
        want = oracles.direct_infonce(c_i, c_m, tau)
        rel = abs(got - want) / max(abs(want), 1e-12)
        if rel >= INFONCE_TOL:
            raise AssertionError(f"批次 {i}: InfoNCE 相对误差 {rel:.2e}")
        worst = max(worst, rel)
    return f"{batches} batches, max rel error {worst:.2e}"


def grad_check_suite(seed: int) -> str:
    details = []
    batch = synthetic_batch(MINI_MODEL, 3, seed)
    for dtype, tol in GRAD_TOL.items():
        result = grad_check(MINI_MODEL, batch, dtype=dtype, n_coords=256, seed=seed)
        if result.max_rel_error >= tol:
            raise AssertionError(f"{dtype}: 最大相对误差 {result.max_rel_error:.2e} >= {tol}")
        if "log_tau" not in result.groups:
            raise AssertionError("梯度检查未覆盖 log_tau")
        details.append(f"{str(dtype).split('.')[-1]} {result.max_rel_error:.1e}")
    stationary = grad_check(MINI_MODEL, batch, dtype=torch.float64, n_coords=200, seed=seed, zero_loss=True)
    if stationary.max_abs_grad > 1e-7:
        raise AssertionError(f"零损失配置下梯度不为 0: {stationary.max_abs_grad:.2e}")
    details.append(f"stationary {stationary.max_abs_grad:.1e}")
    return ", ".join(details)


def accuracy_suite(seed: int, trials: int = 50) -> str:
    rng = np.random.default_rng([seed, 6])
    for i in range(trials):
        b = int(rng.integers(2, 9))
        n = b * int(rng.integers(1, 4)) + int(rng.integers(0, b))
        c_i = rng.normal(size=(n, 4))
        c_m = c_i + rng.normal(scale=float(rng.uniform(0.1, 2.0)), size=(n, 4))
        if i % 5 == 0 and n > 1:
            c_m[1] = c_m[0]  # 构造并列
        got = alignment_accuracy(c_i, c_m, b)
        want = oracles.brute_force_accuracy(c_i, c_m, b)
        if not np.allclose(got, want, rtol=0, atol=1e-9):
            raise AssertionError(f"试验 {i}: 准确率 {got} != 重排序 oracle {want}")
    return f"{trials} trials"


def sampling_suite(seed: int) -> str:
    world_cfg = WorldGenConfig(extent_min=6.0, extent_max=7.0, scale=0.1, min_rooms=1, max_rooms=2)
    cfg = SamplerConfig(max_viewpoints=24)
    cam = CameraConfig(width=16, height=16)
    w = generate_world(seed, world_cfg)
    samples = sample_world_dataset(w, np.random.default_rng([seed, 7]), cfg, cam)
    problems = oracles.sampling_violations(w, samples, cfg, cam)
    if problems:
        raise AssertionError(f"{len(problems)} 项违规，首项: {problems[0]}")
    return f"{len(samples.viewpoints)} viewpoints, {len(samples.triplets)} triplets"


SUITES: Dict[str, Callable[[int], str]] = {
    "geodesic": geodesic_suite,
    "render_depth": depth_suite,
    "visibility": visibility_suite,
    "sweep": sweep_suite,
    "infonce": infonce_suite,
    "grad_check": grad_check_suite,
    "accuracy": accuracy_suite,
    "sampling": sampling_suite,
}


def run_suite(name: str, seed: int = 0) -> SuiteResult:
    start = time.perf_counter()
    try:
        detail = SUITES[name](seed)
        passed = True
    except Exception as e:
        logger.error(f"套件 {name} 失败: {e}")
        detail, passed = f"{type(e).__name__}: {e}".replace("|", "/"), False
    seconds = time.perf_counter() - start
    logger.info(f"{'✅' if passed else '❌'} {name}: {detail} ({seconds:.1f}s)")
    return SuiteResult(name=name, passed=passed, seconds=seconds, detail=detail)


def run_all(seed: int = 0, only: Optional[List[str]] = None) -> VerifyReport:
    names = only or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"未知的验证套件: {unknown}")
    return VerifyReport(suites=[run_suite(name, seed) for name in names])
