from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List, Sequence

import numpy as np
import pandas as pd

EPOCH_COLUMNS = ["epoch", "train_loss", "train_acc", "val_acc", "seconds"]


def append_epoch_row(path: str | Path, row: Dict[str, Any]) -> Path:
    """追加一行到 epochs.csv（首次写入时带表头）。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([{column: row.get(column) for column in EPOCH_COLUMNS}], columns=EPOCH_COLUMNS)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False, float_format="%.8f")
    return path


def read_epochs(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path)


def truncate_epochs(path: str | Path, completed_epochs: int) -> None:
    """续训时丢弃 checkpoint 之后写入的行，保证 epochs.csv 与不间断训练一致。"""
    path = Path(path)
    if not path.exists():
        return
    frame = pd.read_csv(path)
    frame = frame[frame["epoch"] < completed_epochs]
    frame.to_csv(path, index=False, float_format="%.8f")


def write_json(path: str | Path, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")
    return path


def confusion_frame(confusion: np.ndarray, class_names: Sequence[str] | None = None) -> pd.DataFrame:
    count = confusion.shape[0]
    names = list(class_names) if class_names and len(class_names) == count else [str(i) for i in range(count)]
    frame = pd.DataFrame(confusion.astype(np.int64), index=names, columns=names)
    frame.index.name = "true"
    return frame


def write_confusion(path: str | Path, confusion: np.ndarray, class_names: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    confusion_frame(confusion, class_names).to_csv(path)
    return path


def per_class_table(per_class: List[float | None], counts: Sequence[int], class_names: Sequence[str] | None = None) -> pd.DataFrame:
    names = list(class_names) if class_names and len(class_names) == len(per_class) else [str(i) for i in range(len(per_class))]
    return pd.DataFrame({"class": names, "samples": list(counts), "accuracy": per_class})
