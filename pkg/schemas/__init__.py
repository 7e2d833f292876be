"""
文本产物的统一数据模型
清单、评估/验证报告与运行配置回显
"""
from .kv_schema import KeyValueModel
from .manifest_schema import (
    SHARD_FORMAT_VERSION,
    Split,
    WorldManifestEntry,
    ShardEntry,
    ShardManifest,
)
from .report_schema import (
    ProbeScores,
    EvalReport,
    SuiteResult,
    VerifyReport,
)
from .run_schema import RunConfig, SUBCOMMANDS

__all__ = [
    'KeyValueModel',

    # Manifest Schemas
    'SHARD_FORMAT_VERSION',
    'Split',
    'WorldManifestEntry',
    'ShardEntry',
    'ShardManifest',

    # Report Schemas
    'ProbeScores',
    'EvalReport',
    'SuiteResult',
    'VerifyReport',

    # Run Schemas
    'RunConfig',
    'SUBCOMMANDS',
]
