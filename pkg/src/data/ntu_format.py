from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from src.core.errors import DataError, SkeletonParseError
from src.skeleton.sequence import MAX_SUBJECTS, NUM_JOINTS, SkeletonSequence

logger = logging.getLogger(__name__)

NAME_PATTERN = re.compile(r"^S(\d{3})C(\d{3})P(\d{3})R(\d{3})A(\d{3})$")
BODY_INFO_KEYS = (
    "bodyID", "clipedEdges", "handLeftConfidence", "handLeftState", "handRightConfidence",
    "handRightState", "isResticted", "leanX", "leanY", "trackingState",
)
JOINT_INFO_KEYS = (
    "x", "y", "z", "depthX", "depthY", "colorX", "colorY",
    "orientationW", "orientationX", "orientationY", "orientationZ", "trackingState",
)
# 深度图到彩色图的近似缩放（1920/512），只用于写出的 colorX/colorY 字段
COLOR_SCALE = 3.75


@dataclass(frozen=True)
class SampleMeta:
    """NTU 文件名 S{sss}C{ccc}P{ppp}R{rrr}A{aaa} 中的五个编号。"""

    setup_id: int
    camera_id: int
    performer_id: int
    replication_id: int
    action_class: int

    def __post_init__(self):
        for key, value in self.__dict__.items():
            if not 1 <= value <= 999:
                raise DataError(f"SampleMeta.{key}={value} 超出范围[1, 999]")

    @classmethod
    def decode(cls, name: str) -> "SampleMeta":
        stem = Path(name).name.split(".")[0]
        match = NAME_PATTERN.match(stem)
        if match is None:
            raise DataError(f"无法解析的NTU样本名：{name}")
        return cls(*(int(g) for g in match.groups()))

    def encode(self) -> str:
        return (
            f"S{self.setup_id:03d}C{self.camera_id:03d}P{self.performer_id:03d}"
            f"R{self.replication_id:03d}A{self.action_class:03d}"
        )


class _LineReader:
    def __init__(self, path: Path):
        self.path = path
        self.lines = path.read_text(encoding="utf-8").splitlines()
        self.line_number = 0

    def next_fields(self, what: str) -> List[str]:
        if self.line_number >= len(self.lines):
            raise SkeletonParseError(str(self.path), self.line_number + 1, f"文件在读取{what}时提前结束")
        fields = self.lines[self.line_number].split()
        self.line_number += 1
        return fields

    def next_int(self, what: str) -> int:
        fields = self.next_fields(what)
        if len(fields) != 1:
            raise SkeletonParseError(str(self.path), self.line_number, f"{what}行应只有一个整数，实际为 {fields}")
        try:
            value = int(fields[0])
        except ValueError:
            raise SkeletonParseError(str(self.path), self.line_number, f"{what}不是整数：{fields[0]!r}") from None
        if value < 0:
            raise SkeletonParseError(str(self.path), self.line_number, f"{what}为负数：{value}")
        return value

    def next_floats(self, what: str, count: int) -> np.ndarray:
        fields = self.next_fields(what)
        if len(fields) < count:
            raise SkeletonParseError(str(self.path), self.line_number, f"{what}需要{count}个字段，实际为{len(fields)}个")
        try:
            return np.array([float(v) for v in fields[:count]], dtype=np.float64)
        except ValueError as exc:
            raise SkeletonParseError(str(self.path), self.line_number, f"{what}含有非数值字段（{exc}）") from None


def _body_displacement(joints: np.ndarray, tracked: np.ndarray) -> float:
    frames = joints[:, tracked, :]
    if frames.shape[1] < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(frames, axis=1), axis=-1).sum())


def parse_skeleton_file(path: str | Path, max_subjects: int = MAX_SUBJECTS) -> SkeletonSequence:
    """读取NTU骨架文本文件。

    按 bodyID 跨帧追踪主体；总关节位移最大的主体为主主体，最多保留两个位移最大的主体。
    2D坐标取 depthX/depthY（IR与深度共用同一像平面）。
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"骨架文件不存在：{path}")
    reader = _LineReader(path)
    frame_count = reader.next_int("帧数")
    if frame_count == 0:
        raise DataError(f"骨架文件帧数为0：{path}")

    bodies: Dict[str, Dict[str, np.ndarray]] = {}
    order: List[str] = []
    for frame in range(frame_count):
        body_count = reader.next_int(f"第{frame}帧的主体数")
        seen_in_frame = set()
        for _ in range(body_count):
            info = reader.next_fields("主体信息")
            if len(info) != len(BODY_INFO_KEYS):
                raise SkeletonParseError(
                    str(path), reader.line_number, f"主体信息应有{len(BODY_INFO_KEYS)}个字段，实际为{len(info)}个"
                )
            body_id = info[0]
            if body_id in seen_in_frame:
                raise SkeletonParseError(str(path), reader.line_number, f"第{frame}帧中 bodyID {body_id} 重复出现")
            seen_in_frame.add(body_id)
            joint_count = reader.next_int("关节数")
            if joint_count != NUM_JOINTS:
                raise SkeletonParseError(str(path), reader.line_number, f"关节数应为{NUM_JOINTS}，实际为{joint_count}")
            if body_id not in bodies:
                bodies[body_id] = {
                    "joints3d": np.zeros((NUM_JOINTS, frame_count, 3)),
                    "joints2d": np.zeros((NUM_JOINTS, frame_count, 2)),
                    "tracked": np.zeros(frame_count, dtype=bool),
                }
                order.append(body_id)
            body = bodies[body_id]
            for joint in range(joint_count):
                values = reader.next_floats(f"关节{joint}", len(JOINT_INFO_KEYS))
                body["joints3d"][joint, frame] = values[0:3]
                body["joints2d"][joint, frame] = values[3:5]
            body["tracked"][frame] = True

    if not bodies:
        raise DataError(f"骨架文件中没有任何被追踪的主体：{path}")
    ranked = sorted(
        order,
        key=lambda b: (-_body_displacement(bodies[b]["joints3d"], bodies[b]["tracked"]), order.index(b)),
    )
    kept = ranked[:max_subjects]
    if len(ranked) > max_subjects:
        logger.debug("%s: %d 个主体，保留位移最大的 %d 个", path.name, len(ranked), max_subjects)
    return SkeletonSequence(
        joints3d=np.stack([bodies[b]["joints3d"] for b in kept]),
        joints2d=np.stack([bodies[b]["joints2d"] for b in kept]),
        presence=np.stack([bodies[b]["tracked"] for b in kept]),
        sample_id=path.name.split(".")[0],
    )


def _format_floats(values: Sequence[float]) -> str:
    return " ".join(f"{v:.6f}" for v in values)


def write_skeleton_file(path: str | Path, seq: SkeletonSequence, body_ids: Sequence[str] | None = None) -> Path:
    """按NTU文本格式写出。未追踪的主体帧不写出；方向四元数写为单位四元数。"""
    if seq.joints2d is None:
        raise DataError(f"序列 {seq.sample_id} 缺少2D坐标，无法写出NTU格式")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body_ids = list(body_ids) if body_ids is not None else [f"{72057594037930000 + m}" for m in range(seq.subject_count)]
    lines: List[str] = [str(seq.frame_count)]
    for frame in range(seq.frame_count):
        present = [m for m in range(seq.subject_count) if seq.presence[m, frame]]
        lines.append(str(len(present)))
        for m in present:
            lines.append(f"{body_ids[m]} 0 1 1 1 1 0 0.000000 0.000000 2")
            lines.append(str(seq.joint_count))
            for joint in range(seq.joint_count):
                xyz = seq.joints3d[m, joint, frame]
                uv = seq.joints2d[m, joint, frame]
                lines.append(f"{_format_floats(xyz)} {_format_floats(uv)} {_format_floats(uv * COLOR_SCALE)} 1 0 0 0 2")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def sample_paths(root: str | Path) -> List[Tuple[str, Path]]:
    """列出目录中所有 NTU 命名的 .skeleton 文件。"""
    root = Path(root)
    found = []
    for candidate in sorted(root.glob("*.skeleton")):
        stem = candidate.name.split(".")[0]
        if NAME_PATTERN.match(stem):
            found.append((stem, candidate))
    return found
