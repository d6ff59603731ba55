from __future__ import annotations

import logging
from typing import Iterable, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from src.core.errors import DataError
from src.skeleton.sequence import MAX_SUBJECTS, CoordinateExtrema, SkeletonMap, SkeletonSequence
from src.utils.imaging import bilinear_resize

logger = logging.getLogger(__name__)

MAP_SIZE = (224, 224)
MAX_ROTATION_DEGREES = 20.0


def normalize_sequence(seq: SkeletonSequence) -> SkeletonSequence:
    """序列级平移归一化：以主主体首个被追踪帧的脊柱中点为原点，平移所有主体、关节和帧。"""
    if seq.subject_count < 1:
        raise DataError(f"序列 {seq.sample_id} 缺少主主体")
    if not np.all(np.isfinite(seq.joints3d)):
        raise DataError(f"序列 {seq.sample_id} 含有NaN/inf坐标")
    tracked = np.flatnonzero(seq.presence[0])
    if tracked.size == 0:
        raise DataError(f"序列 {seq.sample_id} 的主主体在任何帧中都未被追踪")
    origin = seq.joints3d[0, seq.spine_mid_index, tracked[0], :].copy()
    return seq.with_joints3d(seq.joints3d - origin)


def _tracked_coordinates(seq: SkeletonSequence) -> np.ndarray:
    # (M, J, T, 3) → 只保留被追踪的主体帧
    mask = np.broadcast_to(seq.presence[:, None, :, None], seq.joints3d.shape)
    return seq.joints3d[mask]


def compute_extrema(training_sequences: Iterable[SkeletonSequence], train_split_id: str = "") -> CoordinateExtrema:
    """数据集级 min/max，只在训练集（已归一化）上计算。"""
    c_min, c_max, count = np.inf, -np.inf, 0
    for seq in training_sequences:
        values = _tracked_coordinates(seq)
        if values.size == 0:
            continue
        c_min = min(c_min, float(values.min()))
        c_max = max(c_max, float(values.max()))
        count += 1
    if count == 0:
        raise DataError("compute_extrema 至少需要一个有效的训练序列")
    logger.info("坐标极值: c_min=%.4f c_max=%.4f（%d 个序列）", c_min, c_max, count)
    return CoordinateExtrema(c_min=c_min, c_max=c_max, train_split_id=train_split_id)


def encode_skeleton_map(seq: SkeletonSequence, extrema: CoordinateExtrema) -> SkeletonMap:
    """M = (S' − c_min) / (c_max − c_min)，超出范围的评估坐标截断到[0,1]。

    输出 (3, 2J, T)：前J行为主主体，后J行为第二主体；缺席的主体（或其未追踪帧）像素为0。
    """
    if seq.frame_count == 0:
        raise DataError(f"序列 {seq.sample_id} 帧数为0")
    joints, frames = seq.joint_count, seq.frame_count
    pixels = np.zeros((3, MAX_SUBJECTS * joints, frames), dtype=np.float64)
    span = extrema.c_max - extrema.c_min
    for subject in range(min(seq.subject_count, MAX_SUBJECTS)):
        block = (seq.joints3d[subject] - extrema.c_min) / span
        block = np.clip(block, 0.0, 1.0) * seq.presence[subject][None, :, None]
        pixels[:, subject * joints:(subject + 1) * joints, :] = np.transpose(block, (2, 0, 1))
    return SkeletonMap(pixels=pixels, subject_count=seq.subject_count, sample_id=seq.sample_id)


def decode_skeleton_map(skeleton_map: SkeletonMap, extrema: CoordinateExtrema, subject: int = 0, joints: int = 25) -> np.ndarray:
    """encode 的逆映射（仅在未resize、未截断时精确），返回 (J, T, 3)。"""
    block = skeleton_map.pixels[:, subject * joints:(subject + 1) * joints, :]
    return np.transpose(block, (1, 2, 0)) * (extrema.c_max - extrema.c_min) + extrema.c_min


def resize_map(skeleton_map: SkeletonMap, target: Tuple[int, int] = MAP_SIZE) -> SkeletonMap:
    resized = np.clip(bilinear_resize(skeleton_map.pixels, target), 0.0, 1.0)
    return SkeletonMap(pixels=resized, subject_count=skeleton_map.subject_count, sample_id=skeleton_map.sample_id)


def sample_rotation_angles(rng: np.random.Generator, max_degrees: float = MAX_ROTATION_DEGREES) -> np.ndarray:
    return rng.uniform(-max_degrees, max_degrees, size=3)


def rotation_matrix(angles_degrees) -> np.ndarray:
    # 小写 "xyz" 为外旋：先绕X，再绕Y，最后绕Z，即 R = Rz·Ry·Rx
    return Rotation.from_euler("xyz", np.asarray(angles_degrees, dtype=np.float64), degrees=True).as_matrix()


def rotate_sequence(seq: SkeletonSequence, matrix: np.ndarray) -> SkeletonSequence:
    return seq.with_joints3d(seq.joints3d @ np.asarray(matrix).T)


def augment_rotation(
    seq: SkeletonSequence,
    rng: np.random.Generator,
    max_degrees: float = MAX_ROTATION_DEGREES,
) -> SkeletonSequence:
    """每个序列一次随机旋转（三轴各自均匀采样于[−20°, 20°]），绕局部原点作用于所有主体和帧。"""
    return rotate_sequence(seq, rotation_matrix(sample_rotation_angles(rng, max_degrees)))


def build_pose_input(
    normalized: SkeletonSequence,
    extrema: CoordinateExtrema,
    rng: np.random.Generator | None = None,
    augment: bool = False,
    target: Tuple[int, int] = MAP_SIZE,
) -> np.ndarray:
    """归一化序列 → (可选)旋转增强 → 编码 → resize，返回 (3, H, W) float32。"""
    seq = normalized
    if augment:
        if rng is None:
            raise ValueError("旋转增强需要随机数生成器")
        seq = augment_rotation(seq, rng)
    return resize_map(encode_skeleton_map(seq, extrema), target).pixels.astype(np.float32)
