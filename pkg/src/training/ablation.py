from __future__ import annotations

import itertools
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from src.data.dataset import DataConfig, PreparedDataset, prepare_dataset
from src.data.manifest import DatasetManifest
from src.data.splits import TEST, TRAIN
from src.models.config import MODES, ModelConfig
from src.models.fusion import build_network
from src.training.config import TrainConfig
from src.training.trainer import Trainer

logger = logging.getLogger(__name__)

TABLE_COLUMNS = [
    "mode", "T", "crop", "augment", "seed", "feature_dims", "parameters",
    "train_loss", "train_acc", "val_acc", "test_acc",
]


class AblationGrid(BaseModel):
    """消融网格：模式 × 序列长度 T，另可扫描裁剪与增强开关。"""

    model_config = ConfigDict(extra="forbid")

    modes: List[str] = Field(default_factory=lambda: list(MODES), description="pose_only / ir_only / fusion")
    clip_lengths: List[int] = Field(default_factory=lambda: [8, 12, 16, 20], description="IR序列长度 T")
    crops: List[bool] = Field(default_factory=lambda: [True], description="姿态条件裁剪开关")
    augments: List[bool] = Field(default_factory=lambda: [True], description="训练增强开关")
    seeds: List[int] = Field(default_factory=lambda: [0], description="共享的根种子")

    def cells(self):
        return itertools.product(self.seeds, self.crops, self.augments, self.clip_lengths, self.modes)


def feature_dims_label(dims: Dict[str, int]) -> str:
    return "+".join(str(dims[k]) for k in ("pose", "ir") if k in dims)


def run_ablation(
    grid: AblationGrid,
    manifest: DatasetManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    data_config: DataConfig,
    out_dir: str | Path | None = None,
    on_cell: Optional[Callable[[Dict], None]] = None,
) -> pd.DataFrame:
    """每个格子独立训练一次，在测试划分上评估，输出与序列长度消融表同结构的 DataFrame。"""
    for mode in grid.modes:
        if mode not in MODES:
            raise ValueError(f"未知模式 {mode}")
    prepared: Dict[tuple, PreparedDataset] = {}
    rows = []
    for seed, crop, augment, clip_length, mode in grid.cells():
        key = (crop, seed)
        if key not in prepared:
            prepared[key] = prepare_dataset(
                manifest, data_config, crop=crop, clip_size=model_config.clip_size, seed=seed,
                workers=train_config.effective_workers,
            )
        dataset = prepared[key]
        cell_model = model_config.model_copy(update={"clip_length": clip_length, "class_count": dataset.class_count})
        cell_train = train_config.model_copy(update={"mode": mode, "seed": seed, "crop": crop, "augment": augment})
        cell_dir = None
        if out_dir is not None:
            cell_dir = Path(out_dir) / f"{mode}_T{clip_length}_crop{int(crop)}_aug{int(augment)}_seed{seed}"
        net = build_network(cell_model, mode, seed)
        trainer = Trainer(net, dataset, cell_train, out_dir=cell_dir, prefetch=data_config.prefetch)
        reports = trainer.fit()
        test_ids = dataset.ids(TEST) or dataset.ids(TRAIN)
        result = trainer.evaluate(test_ids, split=TEST)
        last = reports[-1]
        row = {
            "mode": mode,
            "T": clip_length,
            "crop": crop,
            "augment": augment,
            "seed": seed,
            "feature_dims": feature_dims_label(net.feature_dims()),
            "parameters": net.parameter_count(),
            "train_loss": last.train_loss,
            "train_acc": last.train_acc,
            "val_acc": last.val_acc,
            "test_acc": result.accuracy,
        }
        logger.info("消融 %s T=%d crop=%s augment=%s seed=%d: test_acc=%.3f", mode, clip_length, crop, augment, seed,
                    result.accuracy)
        rows.append(row)
        if on_cell is not None:
            on_cell(row)
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)


def length_table(table: pd.DataFrame) -> pd.DataFrame:
    """按 (mode, T) 汇总平均测试准确率，行为模式、列为 T。"""
    return table.pivot_table(index="mode", columns="T", values="test_acc", aggfunc="mean")


def fusion_trend(table: pd.DataFrame, tolerance: float = 0.02) -> pd.DataFrame:
    """逐种子比较：融合准确率是否 ≥ max(单模块) − tolerance。"""
    rows = []
    for (seed, clip_length), group in table.groupby(["seed", "T"]):
        scores = group.groupby("mode")["test_acc"].mean()
        if not {"fusion", "pose_only", "ir_only"} <= set(scores.index):
            continue
        best_single = max(scores["pose_only"], scores["ir_only"])
        rows.append({
            "seed": seed,
            "T": clip_length,
            "fusion": scores["fusion"],
            "best_single": best_single,
            "holds": bool(scores["fusion"] >= best_single - tolerance),
        })
    return pd.DataFrame(rows, columns=["seed", "T", "fusion", "best_single", "holds"])
