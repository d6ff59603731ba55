from __future__ import annotations

import hashlib
import json
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.core.errors import DataError
from src.data.manifest import DatasetManifest, SampleEntry
from src.data.ntu_format import parse_skeleton_file
from src.data.splits import DEFAULT_TRAIN_SUBJECTS, TEST, TRAIN, VALIDATION, assign_splits
from src.infrared.frames_io import load_ir_sequence
from src.infrared.pipeline import CROP_OFFSET, CropBox, assemble_clip, prepare_frames
from src.skeleton.pipeline import build_pose_input, compute_extrema, normalize_sequence
from src.skeleton.sequence import CoordinateExtrema, SkeletonSequence
from src.utils.seeding import derive_rng

logger = logging.getLogger(__name__)

PREPARED_INFO = "prepared.json"


class DataConfig(BaseModel):
    """数据集位置、划分协议与读取策略。"""

    model_config = ConfigDict(extra="forbid")

    root: str = Field(default="data/synthetic", description="数据集目录（包含 manifest.json）")
    protocol: Literal["cross_subject", "cross_view"] = Field(default="cross_subject", description="基准划分协议")
    train_subject_ids: List[int] = Field(default_factory=lambda: list(DEFAULT_TRAIN_SUBJECTS),
                                         description="cross-subject 训练组演员编号")
    validation_fraction: float = Field(default=0.05, gt=0.0, lt=1.0, description="从训练集抽取的验证集比例")
    crop_offset: int = Field(default=CROP_OFFSET, ge=0, description="姿态裁剪框外扩像素")
    skip_corrupt: bool = Field(default=True, description="损坏样本记WARNING后跳过；False 时直接报错")
    cache_dir: Optional[str] = Field(default=None, description="prep 缓存目录，存在时训练直接读取")
    prefetch: int = Field(default=2, ge=0, description="预取的batch数（有界队列长度）")


@dataclass
class PreparedSample:
    """预处理后的样本：归一化骨架 + 已裁剪/resize的IR帧。"""

    sample_id: str
    label: int
    skeleton: SkeletonSequence
    ir_frames: Optional[np.ndarray] = None
    crop_box: Optional[CropBox] = None


@dataclass
class PreparedDataset:
    samples: Dict[str, PreparedSample]
    splits: Dict[str, str]
    extrema: CoordinateExtrema
    class_count: int
    crop: bool = True
    clip_size: int = 112
    skipped: List[str] = field(default_factory=list)
    crop_offset: int = CROP_OFFSET

    def ids(self, split: str) -> List[str]:
        return sorted(s for s, v in self.splits.items() if v == split and s in self.samples)

    def labels(self, sample_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.samples[s].label for s in sample_ids], dtype=np.int64)


def prepare_sample(
    entry: SampleEntry,
    manifest: DatasetManifest,
    crop: bool = True,
    offset: int = CROP_OFFSET,
    clip_size: int = 112,
    need_ir: bool = True,
) -> PreparedSample:
    raw = parse_skeleton_file(manifest.resolve(entry.skeleton_path))
    skeleton = normalize_sequence(raw)
    ir_frames, box = None, None
    if need_ir:
        if entry.ir_path is None:
            raise DataError(f"样本 {entry.sample_id} 没有IR数据")
        ir = load_ir_sequence(manifest.resolve(entry.ir_path), sample_id=entry.sample_id)
        if ir.frame_count != raw.frame_count:
            logger.debug("%s: IR帧数%d与骨架帧数%d不同", entry.sample_id, ir.frame_count, raw.frame_count)
        ir_frames, box = prepare_frames(ir, raw.joints2d, raw.presence, crop=crop, offset=offset,
                                        target=(clip_size, clip_size))
    return PreparedSample(entry.sample_id, entry.label, skeleton, ir_frames, box)


def split_identifier(config: DataConfig, seed: int, manifest: DatasetManifest) -> str:
    """划分的指纹：协议、种子、训练组演员、验证比例与样本集合任一变化都会改变它。"""
    payload = {
        "protocol": config.protocol,
        "seed": int(seed),
        "train_subject_ids": sorted(int(s) for s in config.train_subject_ids),
        "validation_fraction": float(config.validation_fraction),
        "samples": sorted(s.sample_id for s in manifest.samples),
        "splits": dict(sorted(manifest.splits.items())),
    }
    digest = hashlib.sha1(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:12]
    return f"{config.protocol}:seed{seed}:{digest}"


def prepare_dataset(
    manifest: DatasetManifest,
    config: DataConfig,
    crop: bool = True,
    clip_size: int = 112,
    need_ir: bool = True,
    seed: int = 0,
    workers: int = 1,
) -> PreparedDataset:
    """解析、归一化、裁剪所有样本，并只在有效训练集上计算坐标极值。"""
    splits = dict(manifest.splits) or assign_splits(
        manifest.metas(), config.protocol, config.train_subject_ids, config.validation_fraction, seed
    )

    def load(entry: SampleEntry):
        try:
            return prepare_sample(entry, manifest, crop, config.crop_offset, clip_size, need_ir)
        except DataError as exc:
            if not config.skip_corrupt:
                raise
            logger.warning("跳过损坏样本 %s：%s", entry.sample_id, exc)
            return None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(load, manifest.samples))
    samples = {r.sample_id: r for r in results if r is not None}
    skipped = [e.sample_id for e, r in zip(manifest.samples, results) if r is None]
    if not samples:
        raise DataError("没有任何可用样本")

    train_ids = sorted(s for s, v in splits.items() if v == TRAIN and s in samples)
    if not train_ids:
        raise DataError("训练集为空，无法计算坐标极值")
    extrema = compute_extrema(
        (samples[s].skeleton for s in train_ids), train_split_id=split_identifier(config, seed, manifest)
    )
    logger.info(
        "数据准备完成：train=%d validation=%d test=%d skipped=%d",
        sum(1 for s in splits.values() if s == TRAIN), sum(1 for s in splits.values() if s == VALIDATION),
        sum(1 for s in splits.values() if s == TEST), len(skipped),
    )
    return PreparedDataset(samples, splits, extrema, manifest.class_count, crop, clip_size, skipped,
                           crop_offset=config.crop_offset)


# ---------------------------------------------------------------- prep 缓存

def save_prepared(dataset: PreparedDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    (directory / "samples").mkdir(parents=True, exist_ok=True)
    for sample in dataset.samples.values():
        arrays = {
            "joints3d": sample.skeleton.joints3d,
            "presence": sample.skeleton.presence,
            "label": np.array(sample.label),
        }
        if sample.skeleton.joints2d is not None:
            arrays["joints2d"] = sample.skeleton.joints2d
        if sample.ir_frames is not None:
            arrays["ir_frames"] = sample.ir_frames
        if sample.crop_box is not None:
            arrays["crop_box"] = np.array(sample.crop_box.as_tuple())
        np.savez(directory / "samples" / f"{sample.sample_id}.npz", **arrays)
    dataset.extrema.save(directory / "extrema.json")
    info = {
        "splits": dataset.splits,
        "class_count": dataset.class_count,
        "crop": dataset.crop,
        "clip_size": dataset.clip_size,
        "crop_offset": dataset.crop_offset,
        "skipped": dataset.skipped,
    }
    (directory / PREPARED_INFO).write_text(json.dumps(info, indent=2, sort_keys=True), encoding="utf-8")
    return directory


def load_prepared(directory: str | Path) -> PreparedDataset:
    directory = Path(directory)
    info_path = directory / PREPARED_INFO
    if not info_path.exists():
        raise DataError(f"不是 prep 缓存目录：{directory}")
    info = json.loads(info_path.read_text(encoding="utf-8"))
    samples = {}
    for path in sorted((directory / "samples").glob("*.npz")):
        with np.load(path) as payload:
            skeleton = SkeletonSequence(
                joints3d=payload["joints3d"],
                joints2d=payload["joints2d"] if "joints2d" in payload else None,
                presence=payload["presence"],
                sample_id=path.stem,
            )
            box = CropBox(*(int(v) for v in payload["crop_box"])) if "crop_box" in payload else None
            frames = payload["ir_frames"].astype(np.float32) if "ir_frames" in payload else None
            samples[path.stem] = PreparedSample(path.stem, int(payload["label"]), skeleton, frames, box)
    return PreparedDataset(
        samples=samples,
        splits=info["splits"],
        extrema=CoordinateExtrema.load(directory / "extrema.json"),
        class_count=int(info["class_count"]),
        crop=bool(info["crop"]),
        clip_size=int(info["clip_size"]),
        skipped=list(info.get("skipped", [])),
        crop_offset=int(info.get("crop_offset", CROP_OFFSET)),
    )


# ---------------------------------------------------------------- batch

@dataclass
class Batch:
    sample_ids: List[str]
    labels: np.ndarray
    maps: Optional[np.ndarray] = None
    clips: Optional[np.ndarray] = None
    windows: Dict[str, List[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sample_ids)


def make_batches(sample_ids: Sequence[str], batch_size: int) -> List[List[str]]:
    """按顺序切分；末尾只剩1个样本时并入前一个batch（训练态BN需要 ≥ 2）。"""
    chunks = [list(sample_ids[i:i + batch_size]) for i in range(0, len(sample_ids), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2].extend(chunks.pop())
    return chunks


class BatchLoader:
    """把预处理样本组装成网络输入。

    每个样本的增强随机流由 (seed, epoch, sample_id) 派生，与线程调度和batch组成无关；
    线程池按有界的预取深度提前构建后续batch。
    """

    def __init__(
        self,
        dataset: PreparedDataset,
        mode: str,
        clip_length: int,
        map_size: int = 224,
        seed: int = 0,
        augment: bool = True,
        eval_sampling: str = "midpoint",
        workers: int = 1,
        prefetch: int = 2,
    ):
        self.dataset = dataset
        self.mode = mode
        self.clip_length = clip_length
        self.map_size = map_size
        self.seed = seed
        self.augment = augment
        self.eval_sampling = eval_sampling
        self.workers = max(1, workers)
        self.prefetch = max(0, prefetch)

    def epoch_order(self, sample_ids: Sequence[str], epoch: int) -> List[str]:
        ordered = sorted(sample_ids)
        permutation = derive_rng(self.seed, "shuffle", epoch).permutation(len(ordered))
        return [ordered[i] for i in permutation]

    def sample_inputs(self, sample_id: str, epoch: int, training: bool):
        sample = self.dataset.samples[sample_id]
        augment = training and self.augment
        pose_map, clip, windows = None, None, []
        if self.mode in ("fusion", "pose_only"):
            rotation_rng = derive_rng(self.seed, "augment", epoch, sample_id, "rotation") if augment else None
            pose_map = build_pose_input(sample.skeleton, self.dataset.extrema, rotation_rng, augment,
                                        (self.map_size, self.map_size))
        if self.mode in ("fusion", "ir_only"):
            if sample.ir_frames is None:
                raise DataError(f"样本 {sample_id} 没有预处理的IR帧")
            if training:
                ir_rng = derive_rng(self.seed, "augment", epoch, sample_id, "ir")
                sampling = None if self.augment else "midpoint"
            else:
                ir_rng = derive_rng(self.seed, "eval-windows", sample_id)
                sampling = self.eval_sampling
            assembled = assemble_clip(sample.ir_frames, self.clip_length, ir_rng, training,
                                      augment=self.augment, sampling=sampling)
            clip, windows = assembled.tensor, assembled.frame_indices
        return pose_map, clip, windows

    def _collate(self, sample_ids: List[str], results) -> Batch:
        maps = [r[0] for r in results]
        clips = [r[1] for r in results]
        return Batch(
            sample_ids=list(sample_ids),
            labels=self.dataset.labels(sample_ids),
            maps=np.stack(maps).astype(np.float32) if maps[0] is not None else None,
            clips=np.stack(clips).astype(np.float32) if clips[0] is not None else None,
            windows={sid: list(r[2]) for sid, r in zip(sample_ids, results)},
        )

    def build(self, sample_ids: Sequence[str], epoch: int = 0, training: bool = False) -> Batch:
        results = [self.sample_inputs(sid, epoch, training) for sid in sample_ids]
        return self._collate(list(sample_ids), results)

    def iterate(
        self,
        batches: Sequence[Sequence[str]],
        epoch: int,
        training: bool,
        start: int = 0,
    ) -> Iterator[Tuple[int, Batch]]:
        pending: deque = deque()
        todo = iter(list(enumerate(batches))[start:])
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            def submit_next() -> bool:
                item = next(todo, None)
                if item is None:
                    return False
                index, ids = item
                futures = [pool.submit(self.sample_inputs, sid, epoch, training) for sid in ids]
                pending.append((index, list(ids), futures))
                return True

            for _ in range(self.prefetch + 1):
                if not submit_next():
                    break
            while pending:
                index, ids, futures = pending.popleft()
                results = [f.result() for f in futures]
                submit_next()
                yield index, self._collate(ids, results)
