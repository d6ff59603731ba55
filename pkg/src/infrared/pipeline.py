from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from src.core.errors import DataError
from src.utils.imaging import bilinear_resize

logger = logging.getLogger(__name__)

CLIP_SIZE = (112, 112)
CROP_OFFSET = 20
FLIP_PROBABILITY = 0.5


@dataclass
class IrSequence:
    """单通道IR帧序列 (F, H, W)，已按原生最大码值归一化到[0,1]。"""

    frames: np.ndarray
    sample_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise DataError(f"IR序列需要 (F, H, W)，实际为 {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise DataError(f"IR序列 {self.sample_id} 帧数为0")

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])

    @property
    def height(self) -> int:
        return int(self.frames.shape[1])

    @property
    def width(self) -> int:
        return int(self.frames.shape[2])


@dataclass(frozen=True)
class CropBox:
    """整段序列共用的固定裁剪框，右/下边界为开区间，可以超出画面（由零填充处理）。"""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DataError(f"非法裁剪框：{self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass
class IrClip:
    """IR模块输入 (3, T, 112, 112)，三个通道逐位相同。"""

    tensor: np.ndarray
    frame_indices: List[int] = field(default_factory=list)
    flipped: bool = False

    @property
    def length(self) -> int:
        return int(self.tensor.shape[1])


def compute_crop_box(joints2d: np.ndarray, offset: int = CROP_OFFSET, presence: np.ndarray | None = None) -> CropBox:
    """所有主体、关节、帧上的2D投影 min/max，向外扩 offset 像素。

    joints2d 末轴为 (x, y)；presence 形如 (M, T) 时忽略未追踪的主体帧。非有限值视为无效关节。
    """
    coords = np.asarray(joints2d, dtype=np.float64)
    valid = np.all(np.isfinite(coords), axis=-1)
    if presence is not None and coords.ndim == 4:
        valid &= np.asarray(presence, dtype=bool)[:, None, :]
    points = coords[valid]
    if points.size == 0:
        raise DataError("compute_crop_box 没有任何有效的2D关节")
    x_lo, y_lo = points.min(axis=0)
    x_hi, y_hi = points.max(axis=0)
    return CropBox(
        x_min=int(np.floor(x_lo - offset)),
        y_min=int(np.floor(y_lo - offset)),
        x_max=int(np.ceil(x_hi + offset)),
        y_max=int(np.ceil(y_hi + offset)),
    )


def crop_frames(frames: np.ndarray, box: CropBox) -> np.ndarray:
    """裁剪 (..., H, W) 帧，框外区域补零。"""
    height, width = frames.shape[-2:]
    out = np.zeros(frames.shape[:-2] + (box.height, box.width), dtype=frames.dtype)
    src_y0, src_y1 = max(box.y_min, 0), min(box.y_max, height)
    src_x0, src_x1 = max(box.x_min, 0), min(box.x_max, width)
    if src_y0 < src_y1 and src_x0 < src_x1:
        out[..., src_y0 - box.y_min:src_y1 - box.y_min, src_x0 - box.x_min:src_x1 - box.x_min] = frames[
            ..., src_y0:src_y1, src_x0:src_x1
        ]
    return out


def crop_sequence(seq: IrSequence, box: CropBox) -> IrSequence:
    return IrSequence(frames=crop_frames(seq.frames, box), sample_id=seq.sample_id)


def window_bounds(frame_count: int, clip_length: int, window: int) -> Tuple[int, int]:
    """窗口 [w·F/T, (w+1)·F/T) 内的整数帧闭区间 [lo, hi]；窗口内没有整数帧时 hi < lo。"""
    lo = -((-window * frame_count) // clip_length)
    hi = -((-(window + 1) * frame_count) // clip_length) - 1
    return lo, hi


def sample_windows(
    frame_count: int,
    clip_length: int,
    rng: np.random.Generator | None = None,
    mode: str = "random",
) -> List[int]:
    """把 F 帧等分为 T 个窗口，每个窗口取一帧。

    mode="random" 在窗口内均匀采样（训练增强）；mode="midpoint" 取窗口中点（评估）。
    窄于一帧的窗口退化为窗口起点向下取整，F < T 时会重复帧。
    """
    if frame_count < 1 or clip_length < 1:
        raise DataError(f"sample_windows 需要 F ≥ 1 且 T ≥ 1，实际 F={frame_count}, T={clip_length}")
    if mode not in {"random", "midpoint"}:
        raise ValueError(f"未知采样方式：{mode}")
    if mode == "random" and rng is None:
        raise ValueError("随机窗口采样需要随机数生成器")

    indices: List[int] = []
    for window in range(clip_length):
        lo, hi = window_bounds(frame_count, clip_length, window)
        if hi < lo:
            indices.append((window * frame_count) // clip_length)
        elif mode == "random":
            indices.append(int(rng.integers(lo, hi + 1)))
        else:
            midpoint = ((2 * window + 1) * frame_count) // (2 * clip_length)
            indices.append(int(min(max(midpoint, lo), hi)))
    return indices


def resize_frames(frames: np.ndarray, target: Tuple[int, int] = CLIP_SIZE) -> np.ndarray:
    return np.clip(bilinear_resize(frames, target), 0.0, 1.0)


def augment_hflip(clip: np.ndarray, rng: np.random.Generator, probability: float = FLIP_PROBABILITY) -> np.ndarray:
    """以 probability 的概率把整段clip的所有帧左右镜像（同一次决定）。"""
    if rng.random() < probability:
        return np.ascontiguousarray(clip[..., ::-1])
    return clip


def to_three_channels(clip: np.ndarray) -> np.ndarray:
    """(T, H, W) 灰度 → (3, T, H, W)，三个通道逐位相同。"""
    clip = np.asarray(clip)
    return np.ascontiguousarray(np.broadcast_to(clip[None], (3,) + clip.shape))


def prepare_frames(
    seq: IrSequence,
    joints2d: np.ndarray | None,
    presence: np.ndarray | None = None,
    crop: bool = True,
    offset: int = CROP_OFFSET,
    target: Tuple[int, int] = CLIP_SIZE,
) -> Tuple[np.ndarray, CropBox | None]:
    """原生分辨率裁剪后再resize到 112×112（逐帧独立，可先于窗口采样完成）。"""
    box = None
    frames = seq.frames
    if crop:
        if joints2d is None:
            raise DataError(f"样本 {seq.sample_id} 缺少2D关节，无法计算裁剪框")
        box = compute_crop_box(joints2d, offset=offset, presence=presence)
        frames = crop_frames(frames, box)
    return resize_frames(frames.astype(np.float32), target).astype(np.float32), box


def assemble_clip(
    prepared_frames: np.ndarray,
    clip_length: int,
    rng: np.random.Generator | None,
    training: bool,
    augment: bool = True,
    sampling: str | None = None,
    flip_probability: float = FLIP_PROBABILITY,
) -> IrClip:
    """从已裁剪/resize的帧中按窗口采样 T 帧，训练时可水平翻转，最后复制为三通道。"""
    mode = sampling or ("random" if training else "midpoint")
    indices = sample_windows(prepared_frames.shape[0], clip_length, rng, mode=mode)
    clip = prepared_frames[indices]
    flipped = False
    if training and augment:
        if rng is None:
            raise ValueError("训练增强需要随机数生成器")
        before = clip
        clip = augment_hflip(clip, rng, flip_probability)
        flipped = clip is not before
    return IrClip(tensor=to_three_channels(clip).astype(np.float32), frame_indices=indices, flipped=flipped)
