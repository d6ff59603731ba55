import json
import time
from pathlib import Path
from typing import Any, Dict, List, Optional


class TrainingLogHandler:
    """训练过程的结构化事件记录器，结束时写出 events.json。"""

    def __init__(self, record_batches: bool = True):
        self.logs = []
        self.start_time = None
        self.record_batches = record_batches

    def on_train_start(self, config: Dict[str, Any], **kwargs: Any) -> None:
        """训练开始时记录"""
        self.start_time = time.time()
        self.logs.append({
            "type": "train_start",
            "config": config,
            "timestamp": time.time()
        })

    def on_epoch_start(self, epoch: int, batches: int, **kwargs: Any) -> None:
        self.logs.append({
            "type": "epoch_start",
            "epoch": epoch,
            "batches": batches,
            "timestamp": time.time()
        })

    def on_batch_end(
        self, epoch: int, batch: int, loss: float, grad_norm: float, sample_ids: List[str], **kwargs: Any
    ) -> None:
        """每个batch结束时记录损失与裁剪前梯度范数"""
        if not self.record_batches:
            return
        self.logs.append({
            "type": "batch_end",
            "epoch": epoch,
            "batch": batch,
            "loss": loss,
            "grad_norm": grad_norm,
            "sample_ids": sample_ids,
            "timestamp": time.time()
        })

    def on_sample_windows(self, epoch: int, split: str, windows: Dict[str, List[int]], **kwargs: Any) -> None:
        """记录IR窗口采样得到的帧下标，供 inspect 交叉核对"""
        self.logs.append({
            "type": "sample_windows",
            "epoch": epoch,
            "split": split,
            "windows": windows,
            "timestamp": time.time()
        })

    def on_epoch_end(self, report: Dict[str, Any], **kwargs: Any) -> None:
        elapsed = time.time() - self.start_time if self.start_time else 0.0
        self.logs.append({
            "type": "epoch_end",
            "report": report,
            "elapsed_time": elapsed,
            "timestamp": time.time()
        })

    def on_error(self, error: Exception, diagnostics: Optional[Dict[str, Any]] = None, **kwargs: Any) -> None:
        """错误时记录"""
        self.logs.append({
            "type": "error",
            "error": str(error),
            "diagnostics": diagnostics or {},
            "timestamp": time.time()
        })

    def events(self, kind: str) -> List[Dict[str, Any]]:
        return [entry for entry in self.logs if entry["type"] == kind]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.logs, indent=2, ensure_ascii=False, default=str), encoding="utf-8")
        return path
