"""
视点采样、视图对、最短路跟随器与三元组测试
"""
import math

import numpy as np
import pytest

from config import CameraConfig, SamplerConfig, WorldGenConfig
from services.oracles import sampling_violations
from sim.render import RgbdImage
from sim.sampler import (
    Action,
    OrientedView,
    Viewpoint,
    angular_offset,
    make_view_pairs,
    replay_path,
    sample_triplets,
    sample_viewpoint_positions,
    sample_world_dataset,
    shortest_path_follow,
    viewpoint_target_count,
)
from sim.world import Point, Pose, generate_world, geodesic_distance
from conftest import make_room

SMALL_CAM = CameraConfig(width=8, height=8)


def _viewpoint(vp_id: int, position: Point, headings) -> Viewpoint:
    blank = RgbdImage(rgb=np.zeros((4, 4, 3), np.float32), depth=np.ones((4, 4), np.float32))
    views = [
        OrientedView(view_id=vp_id * 4 + k, heading=Pose(position, h).heading, image=blank,
                     d_star=1.0, classes=np.zeros(12, dtype=bool))
        for k, h in enumerate(headings)
    ]
    return Viewpoint(id=vp_id, position=position, views=views)


@pytest.mark.unit
@pytest.mark.parametrize("area,expected", [(10.0, 40), (200.0, 500), (0.3, 2)])
def test_viewpoint_target_count(area, expected):
    assert viewpoint_target_count(area, SamplerConfig()) == expected


@pytest.mark.unit
def test_angular_offset_takes_shorter_rotation():
    assert angular_offset(math.radians(350), math.radians(10)) == pytest.approx(0.3491, abs=1e-4)
    assert angular_offset(1.3, 1.3) == 0.0
    assert angular_offset(0.0, math.pi) == math.pi


@pytest.mark.unit
def test_view_pair_offsets():
    vp = _viewpoint(0, Point(1.0, 1.0), (0.1, 1.1, -2.0, 2.0))
    first, second = make_view_pairs(vp)
    assert first.theta_star == pytest.approx(1.0)
    assert second.theta_star == pytest.approx(4.0 - 2 * math.pi)
    assert second.theta_star == pytest.approx(-2.2832, abs=1e-4)


@pytest.mark.unit
def test_swapping_pair_negates_offset():
    rng = np.random.default_rng(2)
    for h0, h1 in rng.uniform(-math.pi, math.pi, size=(50, 2)):
        forward, backward = angular_offset(h0, h1), angular_offset(h1, h0)
        if abs(forward) < math.pi - 1e-12:
            assert backward == pytest.approx(-forward)


@pytest.mark.unit
def test_positions_respect_pairwise_geodesic_distance():
    w = make_room(62, 62, scale=0.1)   # 6 × 6 米
    cfg = SamplerConfig(max_viewpoints=60)
    positions, target = sample_viewpoint_positions(w, np.random.default_rng(0), cfg)
    assert target == 60 and 0 < len(positions) <= target
    for i, a in enumerate(positions):
        for b in positions[i + 1:]:
            assert geodesic_distance(w, a, b) > cfg.min_pair_distance


@pytest.mark.unit
def test_follower_already_at_target(corridor):
    start = Pose(Point(1.0, 0.525), 0.0)
    path = shortest_path_follow(corridor, start, Point(1.3, 0.525))
    assert path.actions == [Action.STOP]
    assert path.num_moves == 0


@pytest.mark.unit
def test_follower_straight_corridor(corridor):
    start = Pose(Point(1.0, 0.525), 0.0)
    path = shortest_path_follow(corridor, start, Point(4.0, 0.525))
    assert path.actions == [Action.FORWARD] * 30 + [Action.STOP]
    assert path.final_pose.position.x == pytest.approx(4.0)
    assert path.length == pytest.approx(3.0)


@pytest.mark.unit
def test_follower_turns_then_reaches_target():
    w = make_room(62, 62, scale=0.05)
    cfg = SamplerConfig()
    rng = np.random.default_rng(9)
    for _ in range(10):
        start = Point(*rng.uniform(0.4, 2.6, size=2))
        target = Point(*rng.uniform(0.4, 2.6, size=2))
        path = shortest_path_follow(w, Pose(start, float(rng.uniform(-math.pi, math.pi))), target, cfg)
        assert path.actions[-1] == Action.STOP
        assert path.num_moves <= cfg.max_actions
        assert geodesic_distance(w, path.final_pose.position, target) <= cfg.success_radius
        assert replay_path(w, path, cfg) == path.poses


@pytest.mark.unit
def test_two_close_viewpoints_form_at_most_one_triplet():
    w = make_room(62, 82, scale=0.05)  # 4 × 3 米
    vps = [_viewpoint(0, Point(0.5, 1.5), (0.0, 1.0, 2.0, 3.0)),
           _viewpoint(1, Point(3.5, 1.5), (0.5, 1.5, 2.5, -1.0))]
    triplets = sample_triplets(w, vps, np.random.default_rng(1))
    assert len(triplets) <= 1
    for t in triplets:
        assert {t.source_viewpoint, t.target_viewpoint} == {0, 1}


@pytest.mark.unit
def test_far_viewpoints_form_no_triplets(corridor):
    vps = [_viewpoint(0, Point(1.0, 0.525), (0.0, 1.0, 2.0, 3.0)),
           _viewpoint(1, Point(9.0, 0.525), (0.0, 1.0, 2.0, 3.0))]
    stats = {}
    assert sample_triplets(corridor, vps, np.random.default_rng(1), stats=stats) == []
    assert stats["unpaired_sources"] == 2


@pytest.mark.slow
def test_world_samples_satisfy_all_constraints():
    w = generate_world(5, WorldGenConfig(extent_min=6.0, extent_max=7.0, scale=0.1, min_rooms=1, max_rooms=2))
    cfg = SamplerConfig(max_viewpoints=24)
    samples = sample_world_dataset(w, np.random.default_rng(0), cfg, SMALL_CAM)
    assert samples.viewpoints and samples.triplets
    assert sampling_violations(w, samples, cfg, SMALL_CAM) == []
