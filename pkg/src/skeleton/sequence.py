from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from src.core.errors import DataError

NUM_JOINTS = 25
MAX_SUBJECTS = 2
# Kinect v2 关节序号（0起）：1 为脊柱中点
SPINE_MID = 1


@dataclass
class SkeletonSequence:
    """多主体骨架序列。

    joints3d: (M, J, T, 3) 米制坐标；joints2d: (M, J, T, 2) IR/深度像平面像素坐标（可缺省）；
    presence: (M, T) 该主体在该帧是否被追踪。主体0为主主体。
    """

    joints3d: np.ndarray
    joints2d: np.ndarray | None = None
    presence: np.ndarray | None = None
    spine_mid_index: int = SPINE_MID
    sample_id: str = ""

    def __post_init__(self):
        self.joints3d = np.asarray(self.joints3d, dtype=np.float64)
        if self.joints3d.ndim != 4 or self.joints3d.shape[-1] != 3:
            raise DataError(f"joints3d 需要 (M, J, T, 3)，实际为 {self.joints3d.shape}")
        subjects, joints, frames, _ = self.joints3d.shape
        if frames < 1:
            raise DataError(f"骨架序列 {self.sample_id or '<unnamed>'} 帧数为0")
        if subjects > MAX_SUBJECTS:
            raise DataError(f"最多支持{MAX_SUBJECTS}个主体，实际为{subjects}")
        if self.joints2d is not None:
            self.joints2d = np.asarray(self.joints2d, dtype=np.float64)
            if self.joints2d.shape != (subjects, joints, frames, 2):
                raise DataError(f"joints2d 形状{self.joints2d.shape}与joints3d的(M, J, T)不一致")
        if self.presence is None:
            self.presence = np.ones((subjects, frames), dtype=bool)
        else:
            self.presence = np.asarray(self.presence, dtype=bool)
            if self.presence.shape != (subjects, frames):
                raise DataError(f"presence 形状{self.presence.shape}应为{(subjects, frames)}")

    @property
    def subject_count(self) -> int:
        return int(self.joints3d.shape[0])

    @property
    def joint_count(self) -> int:
        return int(self.joints3d.shape[1])

    @property
    def frame_count(self) -> int:
        return int(self.joints3d.shape[2])

    def with_joints3d(self, joints3d: np.ndarray) -> "SkeletonSequence":
        return replace(self, joints3d=joints3d)

    def swap_subjects(self) -> "SkeletonSequence":
        order = [1, 0] if self.subject_count == 2 else [0]
        return replace(
            self,
            joints3d=self.joints3d[order],
            joints2d=None if self.joints2d is None else self.joints2d[order],
            presence=self.presence[order],
        )


@dataclass
class SkeletonMap:
    """骨架图：3通道，行=关节（两个主体上下堆叠，共2J行），列=帧，取值[0,1]。"""

    pixels: np.ndarray
    subject_count: int = 1
    sample_id: str = ""

    @property
    def height(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[2])


@dataclass
class CoordinateExtrema:
    c_min: float
    c_max: float
    train_split_id: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (np.isfinite(self.c_min) and np.isfinite(self.c_max)):
            raise DataError(f"坐标极值必须为有限值：c_min={self.c_min}, c_max={self.c_max}")
        if not self.c_min < self.c_max:
            raise DataError(f"坐标极值退化：c_min={self.c_min} 不小于 c_max={self.c_max}")

    def to_dict(self) -> dict:
        return {"c_min": float(self.c_min), "c_max": float(self.c_max), "train_split_id": self.train_split_id, **self.extra}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "CoordinateExtrema":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        extra = {k: v for k, v in payload.items() if k not in {"c_min", "c_max", "train_split_id"}}
        return cls(float(payload["c_min"]), float(payload["c_max"]), payload.get("train_split_id", ""), extra)
