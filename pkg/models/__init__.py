"""
模型与预训练目标
"""
from .encoders import RGBDEncoder, MapEncoder, ShapeMismatchError
from .ego2map import Ego2MapModel, expected_parameter_count, parameter_count, export_encoder, load_encoder
from .objectives import (
    BatchLosses,
    cosine_score,
    cosine_matrix,
    infonce_loss,
    angular_loss,
    distance_loss,
    total_loss,
    DegenerateEmbeddingError,
    NonFiniteLossError,
    NoLossEnabledError,
)

__all__ = [
    'RGBDEncoder',
    'MapEncoder',
    'ShapeMismatchError',
    'Ego2MapModel',
    'expected_parameter_count',
    'parameter_count',
    'export_encoder',
    'load_encoder',
    'BatchLosses',
    'cosine_score',
    'cosine_matrix',
    'infonce_loss',
    'angular_loss',
    'distance_loss',
    'total_loss',
    'DegenerateEmbeddingError',
    'NonFiniteLossError',
    'NoLossEnabledError',
]
