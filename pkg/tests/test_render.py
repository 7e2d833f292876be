"""
RGBD 渲染、碰撞前进与可探索距离测试
"""
import math

import numpy as np
import pytest

from config import CameraConfig
from services.oracles import brute_force_sweep, random_free_point, random_grid, slab_depth
from sim.render import (
    InvalidPoseError,
    explorable_distance,
    render_rgbd,
    step_forward,
    sweep_collides,
    visible_classes,
)
from sim.world import OBJECT_BASE, Point, Pose, World
from conftest import make_room

CAM = CameraConfig()


@pytest.mark.unit
def test_center_column_depth_to_facing_wall():
    # 东墙内表面在 x = 80 × 0.05 = 4.0 米
    w = make_room(81, 81)
    img = render_rgbd(w, Pose(Point(2.0, 2.0), 0.0), CAM)
    assert img.rgb.shape == (64, 64, 3) and img.depth.shape == (64, 64)
    assert abs(float(img.depth[32, 32]) - 2.0) <= w.scale * math.sqrt(2)


@pytest.mark.unit
def test_long_corridor_clamps_to_depth_max(corridor):
    img = render_rgbd(corridor, Pose(Point(1.0, 0.525), 0.0), CAM)
    assert img.depth[32, 31] == pytest.approx(CAM.depth_max)
    assert img.depth[32, 32] == pytest.approx(CAM.depth_max)
    assert float(img.depth.min()) >= CAM.depth_min
    assert 0.0 <= float(img.rgb.min()) and float(img.rgb.max()) <= 1.0


@pytest.mark.unit
def test_render_is_deterministic():
    w = World(cells=random_grid(np.random.default_rng(4), 20, classes=3), scale=0.25)
    p = random_free_point(w, np.random.default_rng(5))
    pose = Pose(p, 0.7)
    a, b = render_rgbd(w, pose, CAM), render_rgbd(w, pose, CAM)
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth, b.depth)


@pytest.mark.unit
def test_depth_matches_slab_oracle():
    rng = np.random.default_rng(8)
    cam = CameraConfig(width=32, height=32)
    for _ in range(20):
        w = World(cells=random_grid(rng, 16, classes=2), scale=0.25)
        p = random_free_point(w, rng)
        if p is None:
            continue
        pose = Pose(p, float(rng.uniform(-math.pi, math.pi)))
        rendered = render_rgbd(w, pose, cam).depth[cam.height // 2].astype(np.float64)
        assert np.max(np.abs(rendered - slab_depth(w, pose, cam))) <= w.scale * math.sqrt(2)


@pytest.mark.unit
def test_depth_oracle_catches_corner_clips():
    # 17×8 格、scale 0.25；物体格 (7,4) 的右上角被若干列光线擦过
    cells = np.zeros((17, 8), dtype=np.uint8)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = 1
    cells[7, 4] = OBJECT_BASE
    w = World(cells=cells, scale=0.25)
    cam = CameraConfig(width=32, height=32)
    origin = Point(1.5301, 1.4962)
    for heading in np.linspace(2.3525 - 0.05, 2.3525 + 0.05, 101):
        pose = Pose(origin, float(heading))
        rendered = render_rgbd(w, pose, cam).depth[cam.height // 2].astype(np.float64)
        np.testing.assert_allclose(slab_depth(w, pose, cam), rendered, atol=1e-5)


@pytest.mark.unit
def test_pose_inside_wall_is_rejected():
    w = make_room(20, 20)
    with pytest.raises(InvalidPoseError):
        render_rgbd(w, Pose(Point(0.02, 0.5), 0.0), CAM)


@pytest.mark.unit
def test_visible_classes_sees_object_ahead():
    w_cells = make_room(41, 41).cells.copy()
    w_cells[15:25, 30:35] = OBJECT_BASE + 4
    w = World(cells=w_cells, scale=0.05)
    present = visible_classes(w, Pose(Point(0.5, 1.0), 0.0), CAM)
    assert present[4] and present.sum() == 1


@pytest.mark.unit
def test_step_blocked_by_close_wall():
    # 东墙内表面 x = 1.0，智能体在 0.95
    w = make_room(21, 21)
    pose = Pose(Point(0.95, 0.5), 0.0)
    new_pose, collided = step_forward(w, pose, 0.10)
    assert collided and new_pose == pose


@pytest.mark.unit
def test_ten_steps_along_open_corridor(corridor):
    pose = Pose(Point(1.0, 0.525), 0.0)
    for _ in range(10):
        pose, collided = step_forward(corridor, pose, 0.10)
        assert not collided
    assert pose.position.x - 1.0 == pytest.approx(1.0)
    assert pose.position.y == pytest.approx(0.525)


@pytest.mark.unit
def test_sweep_matches_brute_force_oracle():
    rng = np.random.default_rng(21)
    checked = 0
    while checked < 60:
        w = World(cells=random_grid(rng, 12), scale=0.25)
        start = random_free_point(w, rng)
        if start is None:
            continue
        heading = rng.uniform(-math.pi, math.pi)
        length = rng.uniform(0.05, 0.6)
        end = Point(start.x + length * math.cos(heading), start.y + length * math.sin(heading))
        want, nearest = brute_force_sweep(w, start, end, 0.10)
        if abs(nearest - 0.10) < 1e-3:
            continue
        assert sweep_collides(w, start, end, 0.10) == want
        checked += 1


@pytest.mark.unit
def test_explorable_distance_caps_open_space(corridor):
    assert explorable_distance(corridor, Pose(Point(1.0, 0.525), 0.0)) == pytest.approx(5.0)


@pytest.mark.unit
def test_explorable_distance_lower_cap():
    # 墙在前方 0.3 米
    w = make_room(21, 21)
    assert explorable_distance(w, Pose(Point(0.70, 0.525), 0.0)) == 0.5


@pytest.mark.unit
@pytest.mark.parametrize("start_x,expected", [
    # 墙面在 x = 60 × 0.05 = 3.0。距离按圆盘前缘计：前缘离墙 2.35 m，第 24 步越过墙面
    (0.55, 2.3),
    # 中心离墙 2.35 m：中心前进 2.3 m 时圆盘已压到墙内，只有 22 步成功
    (0.65, 2.2),
])
def test_explorable_distance_counts_successful_steps(start_x, expected):
    w = make_room(21, 61)
    d = explorable_distance(w, Pose(Point(start_x, 0.525), 0.0))
    assert d == pytest.approx(expected)


@pytest.mark.unit
def test_debug_exports(tmp_path, corridor):
    from PIL import Image
    from sim.render import export_depth_pgm, export_rgb_ppm

    img = render_rgbd(corridor, Pose(Point(1.0, 0.525), 0.0), CameraConfig(width=16, height=16))
    export_rgb_ppm(img, str(tmp_path / "v.ppm"))
    export_depth_pgm(img, str(tmp_path / "v.pgm"))
    rgb = np.asarray(Image.open(tmp_path / "v.ppm"))
    assert rgb.shape == (16, 16, 3)
    assert np.array_equal(rgb, np.round(img.rgb * 255).astype(np.uint8))
    depth_mm = np.asarray(Image.open(tmp_path / "v.pgm"), dtype=np.int64)
    assert np.array_equal(depth_mm, np.round(img.depth.astype(np.float64) * 1000).astype(np.int64))
