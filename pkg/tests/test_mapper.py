"""
语义地图生成与地图信息消融测试
"""
import math

import numpy as np
import pytest

from config import CameraConfig, MapConfig
from services.oracles import random_free_point, random_grid, visibility_oracle
from sim.mapper import (
    LABEL_OPEN,
    LABEL_TRAJECTORY,
    LABEL_VOID,
    LABEL_WALL,
    MASKED_SPACE_RGB,
    OPEN_RGB,
    MapAblation,
    UnknownAblationError,
    ablate_rgb,
    apply_ablation,
    build_semantic_map,
    observation_poses,
    observe_cells,
)
from sim.sampler import Action, Path, TripletSpec, OrientedView
from sim.render import RgbdImage
from sim.world import OBJECT_BASE, Point, Pose, World
from conftest import make_round_room

CENTER = Point(2.5, 2.5)


def _stop_path(p: Point = CENTER, heading: float = 0.0) -> Path:
    return Path(poses=[Pose(p, heading)], actions=[Action.STOP])


def _pixel_col(offset_m: float, cfg: MapConfig) -> int:
    """中心行上距 p_s 向东 offset_m 米的像素列"""
    return int((offset_m + cfg.extent) / (2 * cfg.extent / cfg.size))


@pytest.fixture
def round_room_map():
    w = make_round_room(2.0)
    cfg = MapConfig()
    return w, cfg, build_semantic_map(w, _stop_path(), CameraConfig(), cfg)


@pytest.mark.unit
def test_stop_only_path_observation_poses():
    poses = observation_poses(_stop_path(), MapConfig())
    assert len(poses) == 1 + 24
    headings = sorted(round(p.heading, 6) for p in poses[1:])
    assert len(set(headings)) == 24


@pytest.mark.unit
def test_round_room_sweep_fills_open_disc(round_room_map):
    _, cfg, m = round_room_map
    c = cfg.size // 2
    assert m.labels.shape == (cfg.size, cfg.size) and m.rgb.shape == (cfg.size, cfg.size, 3)
    inside = m.labels[c, _pixel_col(1.5, cfg)]
    outside = m.labels[c, _pixel_col(3.0, cfg)]
    assert inside == LABEL_OPEN
    assert outside == LABEL_VOID
    assert np.any(m.labels == LABEL_WALL)
    assert np.allclose(m.rgb[c, _pixel_col(1.5, cfg)], np.array(OPEN_RGB) / 255.0)


@pytest.mark.unit
def test_open_disc_radius(round_room_map):
    _, cfg, m = round_room_map
    delta = 2 * cfg.extent / cfg.size
    centers = (np.arange(cfg.size) + 0.5) * delta - cfg.extent
    yy, xx = np.meshgrid(-centers, centers, indexing="ij")
    radius = np.hypot(xx, yy)[m.labels == LABEL_OPEN]
    assert radius.max() == pytest.approx(2.0, abs=2 * delta)


@pytest.mark.unit
def test_center_pixel_on_trajectory(round_room_map):
    _, cfg, m = round_room_map
    assert m.labels[cfg.size // 2, cfg.size // 2] == LABEL_TRAJECTORY


@pytest.mark.unit
def test_observed_cells_match_visibility_oracle():
    rng = np.random.default_rng(17)
    cam = CameraConfig(depth_max=3.0)
    for _ in range(8):
        w = World(cells=random_grid(rng, 14, classes=3), scale=0.25)
        p = random_free_point(w, rng)
        if p is None:
            continue
        poses = [Pose(p, float(h)) for h in rng.uniform(-math.pi, math.pi, size=2)]
        assert np.array_equal(observe_cells(w, poses, cam), visibility_oracle(w, poses, cam))


def _three_class_map():
    w_cells = make_round_room(2.0).cells.copy()
    for k, (r, c) in enumerate([(40, 40), (60, 40), (50, 62)]):
        w_cells[r:r + 4, c:c + 4] = OBJECT_BASE + k
    w = World(cells=w_cells, scale=0.05)
    return build_semantic_map(w, Path(poses=[Pose(CENTER, 0.0), Pose(Point(2.6, 2.5), 0.0)],
                                      actions=[Action.FORWARD, Action.STOP]))


def _colors(rgb: np.ndarray, mask: np.ndarray) -> set:
    return {tuple(v) for v in rgb[mask].reshape(-1, 3)}


@pytest.mark.unit
def test_no_semantics_leaves_few_colors():
    m = _three_class_map()
    rgb = np.round(m.rgb * 255).astype(np.uint8)
    assert len(_colors(rgb, m.labels != LABEL_TRAJECTORY)) >= 5
    ablated = ablate_rgb(rgb, m.labels, "no_semantics")
    assert len(_colors(ablated, m.labels != LABEL_TRAJECTORY)) <= 4


@pytest.mark.unit
def test_no_space_removes_open_color():
    m = _three_class_map()
    rgb = np.round(m.rgb * 255).astype(np.uint8)
    ablated = ablate_rgb(rgb, m.labels, MapAblation.NO_SPACE)
    assert not np.any(np.all(ablated == np.array(OPEN_RGB, np.uint8), axis=-1))
    assert np.all(ablated[m.labels == LABEL_OPEN] == np.array(MASKED_SPACE_RGB, np.uint8))
    assert np.array_equal(ablated[m.labels == LABEL_TRAJECTORY], rgb[m.labels == LABEL_TRAJECTORY])


@pytest.mark.unit
def test_no_target_keeps_map_and_flags_triplet():
    m = _three_class_map()
    blank = RgbdImage(rgb=np.zeros((2, 2, 3), np.float32), depth=np.ones((2, 2), np.float32))
    view = OrientedView(view_id=0, heading=0.0, image=blank, d_star=1.0, classes=np.zeros(12, bool))
    triplet = TripletSpec(source=view, target=view, path=_stop_path(), source_viewpoint=0, target_viewpoint=1)
    flagged, same = apply_ablation(triplet, m, "no_target")
    assert flagged.no_target and not triplet.no_target
    assert np.array_equal(same.rgb, m.rgb)


@pytest.mark.unit
def test_unknown_ablation_rejected():
    with pytest.raises(UnknownAblationError):
        MapAblation.parse("no_walls")


@pytest.mark.unit
def test_map_export(tmp_path, round_room_map):
    from PIL import Image
    from sim.mapper import export_map_ppm

    _, cfg, m = round_room_map
    export_map_ppm(m, str(tmp_path / "m.ppm"))
    rgb = np.asarray(Image.open(tmp_path / "m.ppm"))
    assert rgb.shape == (cfg.size, cfg.size, 3)
    assert tuple(rgb[cfg.size // 2, _pixel_col(1.5, cfg)]) == OPEN_RGB
