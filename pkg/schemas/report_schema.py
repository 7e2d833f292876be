"""
评估与验证报告Schema
"""
from typing import List, Optional

from pydantic import BaseModel, Field

from schemas.kv_schema import KeyValueModel


class ProbeScores(KeyValueModel):
    """冻结特征线性探针结果"""
    d_mae: float = Field(..., ge=0, description="d* 回归平均绝对误差（米）")
    d_baseline_mae: float = Field(..., ge=0, description="预测训练集均值时的平均绝对误差")
    class_accuracy: float = Field(..., ge=0, le=100, description="各类别存在性平均准确率（百分比）")
    class_prior_accuracy: float = Field(..., ge=0, le=100, description="按训练集多数类预测的准确率")
    ridge: float = Field(..., gt=0, description="最终使用的岭系数")
    train_samples: int = Field(..., ge=1)
    val_samples: int = Field(..., ge=1)
    feature_dim: int = Field(..., ge=1)


class EvalReport(KeyValueModel):
    """验证指标：对齐准确率、Δθ、Δd 与探针得分"""
    acc_i2m: float = Field(..., ge=0, le=100, description="视图→地图对齐准确率（百分比）")
    acc_m2i: float = Field(..., ge=0, le=100, description="地图→视图对齐准确率（百分比）")
    delta_theta: float = Field(..., ge=0, description="平均角度误差（弧度）")
    delta_d: float = Field(..., ge=0, description="平均可探索距离误差（米）")
    batch_size: int = Field(..., ge=2, description="评估批大小 B")
    triplets: int = Field(..., ge=0, description="参与对齐评估的三元组数")
    pairs: int = Field(0, ge=0, description="参与角度评估的视图对数")
    views: int = Field(0, ge=0, description="参与距离评估的图像数")
    probe_d_mae: Optional[float] = Field(None, ge=0, description="探针 d* 误差")
    probe_class_accuracy: Optional[float] = Field(None, ge=0, le=100, description="探针类别准确率")
    config_hash: str = Field("", description="训练配置哈希")
    checkpoint: str = Field("", description="评估的检查点")
    violations: List[str] = Field(default_factory=list, description="未通过的验收阈值")

    @property
    def passed(self) -> bool:
        return not self.violations


class SuiteResult(BaseModel):
    """单个 oracle 套件的结果"""
    name: str = Field(..., description="套件名称")
    passed: bool = Field(..., description="是否通过")
    seconds: float = Field(0.0, ge=0, description="耗时（秒）")
    detail: str = Field("", description="诊断信息")

    def to_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name} | {status} | {self.seconds:.2f}s | {self.detail}"

    @classmethod
    def from_line(cls, line: str) -> "SuiteResult":
        name, status, seconds, detail = (part.strip() for part in line.split("|", 3))
        return cls(name=name, passed=status == "PASS", seconds=float(seconds.rstrip("s")), detail=detail)


class VerifyReport(BaseModel):
    """verify 子命令的汇总报告"""
    suites: List[SuiteResult] = Field(default_factory=list, description="各套件结果")

    @property
    def passed(self) -> bool:
        return bool(self.suites) and all(s.passed for s in self.suites)

    def to_text(self) -> str:
        lines = [s.to_line() for s in self.suites]
        lines.append(f"overall | {'PASS' if self.passed else 'FAIL'} | "
                     f"{sum(s.seconds for s in self.suites):.2f}s | {len(self.suites)} suites")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "VerifyReport":
        suites = [SuiteResult.from_line(line) for line in text.splitlines()
                  if line.strip() and not line.startswith("overall")]
        return cls(suites=suites)
