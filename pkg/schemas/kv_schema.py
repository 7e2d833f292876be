"""
纯文本键值格式的公共基类
所有落盘的小型文本产物（清单、报告、运行配置回显）都使用 `key = value` 行
"""
import math
import os
import typing
from enum import Enum
from typing import Any, Dict, List

from pydantic import BaseModel, ConfigDict


def format_value(value: Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if math.isinf(value) and value > 0 else repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return ""
    return str(value)


def parse_pairs(text: str, sep: str = "\n") -> Dict[str, str]:
    """解析 `key = value`（按行）或 `key=value`（按空白分隔）"""
    values: Dict[str, str] = {}
    chunks = text.splitlines() if sep == "\n" else text.split()
    for chunk in chunks:
        chunk = chunk.split("#", 1)[0].strip() if sep == "\n" else chunk.strip()
        if not chunk:
            continue
        if "=" not in chunk:
            raise ValueError(f"缺少 '=': {chunk!r}")
        key, value = chunk.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _is_list_field(annotation: Any) -> bool:
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        return any(_is_list_field(a) for a in typing.get_args(annotation))
    return origin in (list, List)


class KeyValueModel(BaseModel):
    """可与 `key = value` 文本互转的模型，未知键直接拒绝"""
    model_config = ConfigDict(extra="forbid")

    def as_pairs(self) -> Dict[str, str]:
        return {name: format_value(getattr(self, name)) for name in type(self).model_fields}

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.as_pairs().items())

    def to_line(self) -> str:
        """单行形式（清单中一条记录一行），值中不得含空白"""
        return " ".join(f"{k}={v}" for k, v in self.as_pairs().items())

    @classmethod
    def from_pairs(cls, pairs: Dict[str, str]):
        values: Dict[str, Any] = {}
        for key, raw in pairs.items():
            field = cls.model_fields.get(key)
            if field is not None and _is_list_field(field.annotation):
                values[key] = [v for v in raw.split(",") if v]
            elif field is not None and raw == "" and not field.is_required():
                values[key] = field.get_default(call_default_factory=True)
            else:
                values[key] = raw
        return cls.model_validate(values)

    @classmethod
    def from_text(cls, text: str):
        return cls.from_pairs(parse_pairs(text))

    @classmethod
    def from_line(cls, line: str):
        return cls.from_pairs(parse_pairs(line, sep=" "))

    def save(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path: str):
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_text(f.read())
