from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.core.errors import DataError
from src.data.ntu_format import SampleMeta, sample_paths
from src.data.splits import TEST, TRAIN, VALIDATION

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class SampleEntry(BaseModel):
    sample_id: str = Field(description="NTU风格样本名，例如 S001C002P003R001A004")
    skeleton_path: str = Field(description="骨架文件路径（相对数据集根目录）")
    ir_path: Optional[str] = Field(default=None, description="IR帧目录或 .irraw 文件路径（相对数据集根目录）")
    label: int = Field(ge=0, description="从0开始的类别下标")

    @property
    def meta(self) -> SampleMeta:
        return SampleMeta.decode(self.sample_id)


class DatasetManifest(BaseModel):
    """数据集清单：样本列表、类别名、投影参数和划分结果。"""

    model_config = ConfigDict(extra="forbid")

    name: str = Field(default="dataset", description="数据集名称")
    version: int = Field(default=1, description="清单格式版本")
    class_names: List[str] = Field(default_factory=list, description="类别名，下标即label")
    projection: Dict[str, float] = Field(default_factory=dict, description="针孔投影参数 fx/fy/cx/cy/width/height")
    generator: Dict[str, Any] = Field(default_factory=dict, description="合成数据的生成配置")
    samples: List[SampleEntry] = Field(default_factory=list)
    splits: Dict[str, str] = Field(default_factory=dict, description="sample_id → train/validation/test")
    root: Optional[str] = Field(default=None, exclude=True, description="加载时的根目录，不写回文件")

    @model_validator(mode="after")
    def _check(self) -> "DatasetManifest":
        ids = [s.sample_id for s in self.samples]
        if len(ids) != len(set(ids)):
            raise ValueError("清单中存在重复的 sample_id")
        unknown = set(self.splits) - set(ids)
        if unknown:
            raise ValueError(f"划分中出现清单外的样本：{sorted(unknown)[:5]}")
        bad = {v for v in self.splits.values() if v not in (TRAIN, VALIDATION, TEST)}
        if bad:
            raise ValueError(f"未知划分标签：{sorted(bad)}")
        return self

    # ------------------------------------------------------------ 查询
    def entry(self, sample_id: str) -> SampleEntry:
        for sample in self.samples:
            if sample.sample_id == sample_id:
                return sample
        raise DataError(f"清单中不存在样本 {sample_id}")

    def metas(self) -> List[tuple]:
        return [(s.sample_id, s.meta) for s in self.samples]

    def resolve(self, relative: str) -> Path:
        path = Path(relative)
        if path.is_absolute() or self.root is None:
            return path
        return Path(self.root) / path

    @property
    def class_count(self) -> int:
        return len(self.class_names) if self.class_names else (max((s.label for s in self.samples), default=-1) + 1)

    # ------------------------------------------------------------ 读写
    def save(self, path: str | Path) -> Path:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = self.model_dump(mode="json")
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise DataError(f"数据集清单不存在：{path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"数据集清单不是合法JSON：{path}（{exc}）") from exc
        try:
            manifest = cls.model_validate(payload)
        except ValidationError as exc:
            raise DataError(f"数据集清单格式错误：{path}（{exc.error_count()} 处问题）") from exc
        manifest.root = str(path.parent)
        return manifest


def scan_ntu_directory(root: str | Path, ir_dirname: str = "ir", skeleton_dirname: str = "skeletons") -> DatasetManifest:
    """从 NTU 目录结构建清单：skeletons/*.skeleton，ir/<样本名>/ 或 ir/<样本名>.irraw。"""
    root = Path(root)
    skeleton_dir = root / skeleton_dirname
    if not skeleton_dir.is_dir():
        raise DataError(f"找不到骨架目录：{skeleton_dir}")
    samples = []
    for sample_id, path in sample_paths(skeleton_dir):
        ir_path = None
        for candidate in (root / ir_dirname / sample_id, root / ir_dirname / f"{sample_id}.irraw"):
            if candidate.exists():
                ir_path = str(candidate.relative_to(root))
                break
        if ir_path is None:
            logger.warning("样本 %s 没有IR数据", sample_id)
        meta = SampleMeta.decode(sample_id)
        samples.append(SampleEntry(
            sample_id=sample_id,
            skeleton_path=str(path.relative_to(root)),
            ir_path=ir_path,
            label=meta.action_class - 1,
        ))
    if not samples:
        raise DataError(f"{skeleton_dir} 中没有NTU命名的骨架文件")
    manifest = DatasetManifest(name=root.name, samples=samples)
    manifest.root = str(root)
    return manifest
