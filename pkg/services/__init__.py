"""
Services模块
数据集、训练、评估、绘图与 oracle 验证
"""
from .dataset import (
    TrainingRecord,
    ShardWriter,
    write_shards,
    load_manifest,
    stream_records,
    select_records,
    ShardFormatError,
    ShardIOError,
    EmptySelectionError,
)
from .trainer import fit, train_step, augment, grad_check, CheckpointError
from .evaluator import alignment_accuracy, head_errors, linear_probe, evaluate, EvaluationError

__all__ = [
    "TrainingRecord",
    "ShardWriter",
    "write_shards",
    "load_manifest",
    "stream_records",
    "select_records",
    "ShardFormatError",
    "ShardIOError",
    "EmptySelectionError",
    "fit",
    "train_step",
    "augment",
    "grad_check",
    "CheckpointError",
    "alignment_accuracy",
    "head_errors",
    "linear_probe",
    "evaluate",
    "EvaluationError",
]
