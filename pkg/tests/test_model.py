"""
编码器与 Ego²-Map 模型测试
"""
import math

import pytest
import torch

from config import ModelConfig
from models.ego2map import (
    Ego2MapModel,
    expected_parameter_count,
    export_encoder,
    load_encoder,
    parameter_count,
)
from models.encoders import ShapeMismatchError
from services.verify import MINI_MODEL, synthetic_batch


def _inputs(cfg: ModelConfig, n: int = 2, seed: int = 0):
    batch = synthetic_batch(cfg, n, seed, dtype=torch.float32)
    return batch["triplet_rgb"][:, 0], batch["triplet_depth"][:, 0], batch["map_rgb"]


@pytest.fixture
def mini_model():
    torch.manual_seed(0)
    return Ego2MapModel(MINI_MODEL).eval()


@pytest.mark.unit
def test_default_token_counts_and_embedding_size():
    torch.manual_seed(0)
    model = Ego2MapModel().eval()
    assert model.rgbd_encoder.num_tokens == 64
    assert model.rgbd_encoder.pos_embedding.shape == (1, 65, 128)
    assert model.map_encoder.num_tokens == 64
    rgb, depth, map_rgb = _inputs(model.cfg)
    with torch.no_grad():
        f_s = model.encode_rgbd(rgb, depth)
        c_i = model.pair_embed(f_s, f_s)
        c_m = model.map_embed(model.encode_map(map_rgb))
    assert f_s.shape == (2, 128)
    assert c_i.shape == c_m.shape == (2, 64)


@pytest.mark.unit
def test_encoding_is_deterministic(mini_model):
    rgb, depth, _ = _inputs(MINI_MODEL)
    with torch.no_grad():
        assert torch.equal(mini_model.encode_rgbd(rgb, depth), mini_model.encode_rgbd(rgb, depth))


@pytest.mark.unit
def test_single_pixel_changes_feature(mini_model):
    rgb, depth, _ = _inputs(MINI_MODEL)
    changed = rgb.clone()
    changed[0, 3, 5, 1] = 1.0 - changed[0, 3, 5, 1]
    with torch.no_grad():
        before = mini_model.encode_rgbd(rgb, depth)
        after = mini_model.encode_rgbd(changed, depth)
    assert not torch.allclose(before[0], after[0])
    assert torch.allclose(before[1], after[1])


@pytest.mark.unit
def test_no_target_ignores_target_view(mini_model):
    rgb, depth, _ = _inputs(MINI_MODEL, n=3)
    with torch.no_grad():
        f = mini_model.encode_rgbd(rgb, depth)
        a = mini_model.pair_embed(f, f.roll(1, dims=0), no_target=True)
        b = mini_model.pair_embed(f, torch.randn_like(f), no_target=True)
        mask = torch.tensor([True, False, False])
        c = mini_model.pair_embed(f, torch.randn_like(f), no_target=mask)
    assert torch.equal(a, b)
    assert torch.equal(c[0], a[0]) and not torch.equal(c[1], a[1])


@pytest.mark.unit
def test_head_output_ranges(mini_model):
    f = torch.randn(64, MINI_MODEL.embed_dim) * 50
    with torch.no_grad():
        theta = mini_model.predict_angle(f, f.flip(0))
        d = mini_model.predict_distance(f)
    assert torch.all(theta.abs() <= math.pi)
    assert torch.all((d >= 0.5) & (d <= 5.0))


@pytest.mark.unit
def test_zeroed_head_outputs(mini_model):
    with torch.no_grad():
        for head in (mini_model.angle_head, mini_model.distance_head):
            head[2].weight.zero_()
            head[2].bias.zero_()
        f = torch.randn(4, MINI_MODEL.embed_dim)
        assert torch.all(mini_model.predict_angle(f, f) == 0)
        assert torch.allclose(mini_model.predict_distance(f), torch.full((4,), 2.75))


@pytest.mark.unit
@pytest.mark.parametrize("cfg", [ModelConfig(), MINI_MODEL, ModelConfig(embed_dim=64, depth=2, conv_channels=16)])
def test_parameter_count_matches_formula(cfg):
    assert parameter_count(Ego2MapModel(cfg)) == expected_parameter_count(cfg)


@pytest.mark.unit
def test_shape_mismatch_rejected(mini_model):
    with pytest.raises(ShapeMismatchError):
        mini_model.encode_rgbd(torch.zeros(1, 16, 16, 3), torch.ones(1, 16, 16))
    with pytest.raises(ShapeMismatchError):
        mini_model.encode_map(torch.zeros(1, 8, 8, 3))


@pytest.mark.unit
def test_void_map_differs_from_populated_map(mini_model):
    _, _, map_rgb = _inputs(MINI_MODEL, n=1)
    with torch.no_grad():
        void = mini_model.encode_map(torch.zeros_like(map_rgb))
        populated = mini_model.encode_map(map_rgb)
    assert torch.isfinite(void).all()
    assert not torch.allclose(void, populated)


@pytest.mark.unit
def test_encoder_export_round_trip(mini_model, tmp_path):
    path = str(tmp_path / "enc" / "rgbd.pt")
    export_encoder(mini_model, path)
    encoder = load_encoder(path).eval()
    rgb, depth, _ = _inputs(MINI_MODEL)
    with torch.no_grad():
        assert torch.equal(encoder(rgb, depth), mini_model.encode_rgbd(rgb, depth))


@pytest.mark.unit
def test_temperature_clamped_at_minimum(mini_model):
    assert mini_model.tau.item() == pytest.approx(0.07)
    with torch.no_grad():
        mini_model.log_tau.fill_(math.log(0.001))
    mini_model.clamp_tau()
    assert mini_model.tau.item() == pytest.approx(0.01)
