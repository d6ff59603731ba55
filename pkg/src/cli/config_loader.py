from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional

import yaml
from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.core.errors import ConfigError
from src.data.dataset import DataConfig
from src.data.synthetic import SynthConfig
from src.models.config import ModelConfig
from src.training.config import TrainConfig

logger = logging.getLogger(__name__)

CONFIG_ENV = "FUSION_CONFIG"


class RunConfig(BaseModel):
    """一次运行的完整配置。"""

    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig, description="网络结构")
    train: TrainConfig = Field(default_factory=TrainConfig, description="训练配方")
    data: DataConfig = Field(default_factory=DataConfig, description="数据集与划分")
    synth: SynthConfig = Field(default_factory=SynthConfig, description="合成数据生成")


def _default_tree() -> Dict[str, Any]:
    tree = RunConfig().model_dump()
    # 特征维度缺省由宽度系数推出
    tree["model"]["pose_feature_dim"] = None
    tree["model"]["ir_feature_dim"] = None
    return tree


def _check_keys(payload: Mapping[str, Any], reference: Mapping[str, Any], prefix: str = "") -> None:
    for key, value in payload.items():
        dotted = f"{prefix}{key}"
        if key not in reference:
            raise ConfigError(f"未知配置项：{dotted}")
        if isinstance(value, Mapping) and isinstance(reference[key], Mapping):
            _check_keys(value, reference[key], dotted + ".")


def _merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def read_config_file(path: str | Path) -> Dict[str, Any]:
    """读取YAML配置；运行目录里的 manifest.json 也可以直接作为配置（取其中的 config 部分）。"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在：{path}")
    try:
        payload = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"配置文件无法解析：{path}（{exc}）") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"配置文件顶层必须是键值映射：{path}")
    if "config" in payload and "code_version" in payload:
        payload = payload["config"]
    return payload


def parse_override(text: str) -> tuple:
    if "=" not in text:
        raise ConfigError(f"覆盖项需要 key=value 形式：{text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"覆盖项缺少键名：{text!r}")
    return key, yaml.safe_load(raw) if raw.strip() else ""


def apply_override(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for index, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"未知配置项：{'.'.join(parts[:index + 1])}")
        if index == len(parts) - 1:
            node[part] = value
        else:
            node = node[part]


def default_config_path() -> Optional[str]:
    load_dotenv(find_dotenv(usecwd=True))
    return os.environ.get(CONFIG_ENV) or None


def resolve_config(
    config_path: str | Path | None = None,
    overrides: Iterable[str] = (),
    flags: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """优先级：默认值 < 配置文件 < --set 覆盖 < 专用命令行参数。"""
    tree = _default_tree()
    path = config_path or default_config_path()
    if path:
        payload = read_config_file(path)
        _check_keys(payload, tree)
        _merge(tree, payload)
        logger.debug("读取配置文件 %s", path)
    for text in overrides:
        key, value = parse_override(text)
        apply_override(tree, key, value)
    for key, value in (flags or {}).items():
        if value is not None:
            apply_override(tree, key, value)
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors())
        raise ConfigError(f"配置不合法：{problems}") from exc
