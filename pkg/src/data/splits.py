from __future__ import annotations

import math
from typing import Dict, Iterable, List, Sequence, Tuple

from src.core.errors import ConfigError, DataError
from src.data.ntu_format import SampleMeta
from src.utils.seeding import derive_rng

TRAIN = "train"
TEST = "test"
VALIDATION = "validation"

CROSS_VIEW_TRAIN_CAMERAS = (2, 3)
# NTU RGB+D 文档中的 cross-subject 训练组
DEFAULT_TRAIN_SUBJECTS = [1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38]


def split_cross_view(samples: Iterable[Tuple[str, SampleMeta]]) -> Dict[str, str]:
    """相机2、3的样本用于训练，相机1用于测试。"""
    assignment = {}
    for sample_id, meta in samples:
        if meta.camera_id not in (1, 2, 3):
            raise DataError(f"样本 {sample_id} 的相机编号 {meta.camera_id} 不在 {{1, 2, 3}} 中")
        assignment[sample_id] = TRAIN if meta.camera_id in CROSS_VIEW_TRAIN_CAMERAS else TEST
    return assignment


def split_cross_subject(samples: Iterable[Tuple[str, SampleMeta]], train_subject_ids: Sequence[int]) -> Dict[str, str]:
    if not train_subject_ids:
        raise ConfigError("cross-subject 划分需要非空的训练演员编号列表")
    train_ids = set(int(i) for i in train_subject_ids)
    return {sample_id: TRAIN if meta.performer_id in train_ids else TEST for sample_id, meta in samples}


def validation_size(count: int, fraction: float) -> int:
    return int(math.floor(fraction * count + 0.5))


def validation_split(train_ids: Sequence[str], fraction: float = 0.05, seed: int = 0) -> Tuple[List[str], List[str]]:
    """从训练集中按固定种子无放回均匀抽取 round(fraction·N) 个样本作为验证集。"""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"验证集比例必须在(0, 1)内，实际为 {fraction}")
    ordered = sorted(train_ids)
    if not ordered:
        raise DataError("训练集为空，无法划分验证集")
    size = validation_size(len(ordered), fraction)
    picked = derive_rng(seed, "validation-split").permutation(len(ordered))[:size]
    validation = sorted(ordered[i] for i in picked)
    chosen = set(validation)
    return [s for s in ordered if s not in chosen], validation


def assign_splits(
    samples: Sequence[Tuple[str, SampleMeta]],
    protocol: str,
    train_subject_ids: Sequence[int] | None = None,
    validation_fraction: float = 0.05,
    seed: int = 0,
) -> Dict[str, str]:
    """完整划分：train / validation（⊂ 原训练集）/ test。"""
    if protocol == "cross_view":
        assignment = split_cross_view(samples)
    elif protocol == "cross_subject":
        assignment = split_cross_subject(samples, train_subject_ids if train_subject_ids is not None else DEFAULT_TRAIN_SUBJECTS)
    else:
        raise ConfigError(f"未知划分协议 {protocol}，可选 cross_view / cross_subject")
    train = [s for s, split in assignment.items() if split == TRAIN]
    if train:
        _, validation = validation_split(train, validation_fraction, seed)
        for sample_id in validation:
            assignment[sample_id] = VALIDATION
    return assignment
