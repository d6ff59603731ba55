from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from src.callbacks.log_handler import TrainingLogHandler
from src.core import functional as F
from src.core.checkpoint import load_archive, save_archive
from src.core.errors import CheckpointError, DataError, NumericalError
from src.core.optim import AdamState, adam_step, clip_gradients, global_grad_norm
from src.core.tensor import backward
from src.data.dataset import BatchLoader, PreparedDataset, make_batches
from src.data.splits import TRAIN, VALIDATION
from src.models.fusion import FusionNetwork
from src.training import reporting
from src.training.config import TrainConfig
from src.utils.seeding import derive_rng

logger = logging.getLogger(__name__)

MODEL_PREFIX = "model."


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: Optional[float] = None
    seconds: float = 0.0
    rng_checkpoint: Dict[str, int] = field(default_factory=dict)

    def to_row(self, deterministic: bool = False) -> Dict[str, Any]:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "val_acc": self.val_acc,
            "seconds": 0.0 if deterministic else round(self.seconds, 3),
        }


@dataclass
class EvaluationResult:
    accuracy: float
    per_class_accuracy: List[Optional[float]]
    confusion: np.ndarray
    class_counts: List[int]
    predictions: Dict[str, int] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "class_counts": self.class_counts,
            "samples": self.count,
        }


@dataclass
class TrainingPosition:
    """续训位置：下一个要训练的 (epoch, batch) 以及当前 epoch 已累计的统计量。"""

    epoch: int = 0
    batch: int = 0
    loss_sum: float = 0.0
    correct: int = 0
    count: int = 0
    seconds: float = 0.0


def confusion_matrix(labels: Sequence[int], predictions: Sequence[int], class_count: int) -> np.ndarray:
    matrix = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(matrix, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return matrix


def summarize_predictions(labels: Sequence[int], predictions: Sequence[int], class_count: int) -> EvaluationResult:
    if len(labels) == 0:
        raise DataError("评估集为空")
    confusion = confusion_matrix(labels, predictions, class_count)
    counts = confusion.sum(axis=1)
    per_class = [float(confusion[c, c] / counts[c]) if counts[c] else None for c in range(class_count)]
    return EvaluationResult(
        accuracy=float(np.trace(confusion) / confusion.sum()),
        per_class_accuracy=per_class,
        confusion=confusion,
        class_counts=[int(c) for c in counts],
    )


class Trainer:
    """持有模型的唯一训练线程：前向 → 交叉熵 → 反向 → 梯度裁剪 → Adam。"""

    def __init__(
        self,
        net: FusionNetwork,
        dataset: PreparedDataset,
        config: TrainConfig,
        handler: TrainingLogHandler | None = None,
        out_dir: str | Path | None = None,
        prefetch: int = 2,
    ):
        self.net = net
        self.dataset = dataset
        self.config = config
        self.handler = handler or TrainingLogHandler()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.params = dict(net.named_parameters())
        self.optimizer = AdamState(learning_rate=config.learning_rate)
        self.loss_trace: List[float] = []
        self.best_val: float = -1.0
        self.position = TrainingPosition()
        self._last_grad_norm: float | None = None
        self.loader = BatchLoader(
            dataset,
            mode=config.mode,
            clip_length=net.config.clip_length,
            map_size=net.config.map_size,
            seed=config.seed,
            augment=config.augment,
            eval_sampling=config.eval_sampling,
            workers=config.effective_workers,
            prefetch=prefetch,
        )

    # ------------------------------------------------------------ 训练
    def _step(self, batch, epoch: int, index: int) -> tuple:
        self.net.train()
        self.net.zero_grad()
        dropout_rng = derive_rng(self.config.seed, "dropout", epoch, index)
        logits = self.net.logits(batch.maps, batch.clips, rng=dropout_rng)
        loss = F.softmax_cross_entropy(logits, batch.labels)
        loss_value = float(loss.item())
        if not math.isfinite(loss_value):
            raise NumericalError(
                f"第{epoch}轮第{index}个batch的损失为 {loss_value}",
                {"epoch": epoch, "batch": index, "sample_ids": batch.sample_ids,
                 "last_grad_norm": self._last_grad_norm},
            )
        backward(loss)
        norm, _ = clip_gradients(self.params, self.config.clip_norm)
        if not math.isfinite(norm):
            raise NumericalError(
                f"第{epoch}轮第{index}个batch的梯度范数为 {norm}",
                {"epoch": epoch, "batch": index, "sample_ids": batch.sample_ids, "grad_norm": norm},
            )
        self._last_grad_norm = norm
        adam_step(self.optimizer, self.params)
        correct = int((logits.data.argmax(axis=1) == batch.labels).sum())
        return loss_value, correct, norm

    def train_epoch(self, epoch: int, stop_after: int | None = None) -> EpochReport | None:
        """训练一个 epoch。stop_after 给定时在该batch数后中断（用于测试续训），返回 None。"""
        position = self.position
        if position.epoch != epoch:
            position = self.position = TrainingPosition(epoch=epoch)
        batches = make_batches(self.loader.epoch_order(self.dataset.ids(TRAIN), epoch), self.config.batch_size)
        if not batches:
            raise DataError("训练集为空")
        if position.batch == 0:
            self.handler.on_epoch_start(epoch=epoch, batches=len(batches))
        started = time.time() - position.seconds
        windows: Dict[str, List[int]] = {}
        for index, batch in self.loader.iterate(batches, epoch, training=True, start=position.batch):
            try:
                loss_value, correct, norm = self._step(batch, epoch, index)
            except NumericalError as exc:
                self.handler.on_error(exc, exc.diagnostics)
                logger.error("数值异常，终止训练：%s %s", exc, exc.diagnostics)
                raise
            self.loss_trace.append(loss_value)
            position.loss_sum += loss_value * len(batch)
            position.correct += correct
            position.count += len(batch)
            position.batch = index + 1
            position.seconds = time.time() - started
            windows.update(batch.windows)
            self.handler.on_batch_end(epoch=epoch, batch=index, loss=loss_value, grad_norm=norm, sample_ids=batch.sample_ids)
            logger.debug("epoch %d batch %d loss=%.6f grad_norm=%.4f", epoch, index, loss_value, norm)
            if self.config.checkpoint_every and position.batch % self.config.checkpoint_every == 0 and self.out_dir:
                self.checkpoint(self.out_dir / "last.ckpt")
            if stop_after is not None and position.batch >= stop_after and position.batch < len(batches):
                return None
        if any(windows.values()):
            self.handler.on_sample_windows(epoch=epoch, split=TRAIN, windows=windows)

        report = EpochReport(
            epoch=epoch,
            train_loss=position.loss_sum / position.count,
            train_acc=position.correct / position.count,
            seconds=time.time() - started,
            rng_checkpoint={"seed": self.config.seed, "epoch": epoch},
        )
        self.position = TrainingPosition(epoch=epoch + 1)
        return report

    # ------------------------------------------------------------ 评估
    def evaluate(self, sample_ids: Sequence[str], split: str = "test") -> EvaluationResult:
        """冻结BN统计量的前向评估，不修改任何参数或running统计量。"""
        sample_ids = sorted(sample_ids)
        if not sample_ids:
            raise DataError(f"评估集 {split} 为空")
        was_training = self.net.training
        self.net.eval()
        labels, predictions, windows = [], [], {}
        try:
            for _, batch in self.loader.iterate(make_batches(sample_ids, self.config.batch_size), 0, training=False):
                probs = self.net.forward_fusion(batch.maps, batch.clips)
                labels.extend(batch.labels.tolist())
                predictions.extend(probs.data.argmax(axis=1).tolist())
                windows.update(batch.windows)
        finally:
            self.net.train(was_training)
        if any(windows.values()):
            self.handler.on_sample_windows(epoch=-1, split=split, windows=windows)
        result = summarize_predictions(labels, predictions, self.net.config.class_count)
        result.predictions = dict(zip(sample_ids, predictions))
        return result

    # ------------------------------------------------------------ 完整训练
    def fit(self, epochs: int | None = None) -> List[EpochReport]:
        epochs = epochs or self.config.epochs
        csv_path = self.out_dir / "epochs.csv" if self.out_dir else None
        if csv_path is not None:
            reporting.truncate_epochs(csv_path, self.position.epoch)
        self.handler.on_train_start(config={"train": self.config.model_dump(), "model": self.net.config.model_dump(),
                                            "start_epoch": self.position.epoch, "start_batch": self.position.batch})
        validation_ids = self.dataset.ids(VALIDATION)
        reports = []
        for epoch in range(self.position.epoch, epochs):
            report = self.train_epoch(epoch)
            if validation_ids:
                report.val_acc = self.evaluate(validation_ids, split=VALIDATION).accuracy
            reports.append(report)
            self.handler.on_epoch_end(report=asdict(report))
            logger.info("epoch %d: loss=%.4f train_acc=%.3f val_acc=%s (%.1fs)", epoch, report.train_loss,
                        report.train_acc, "n/a" if report.val_acc is None else f"{report.val_acc:.3f}", report.seconds)
            if self.out_dir is not None:
                reporting.append_epoch_row(csv_path, report.to_row(self.config.deterministic))
                score = report.val_acc if report.val_acc is not None else report.train_acc
                if score > self.best_val:
                    self.best_val = score
                    self.checkpoint(self.out_dir / "best.ckpt")
                self.checkpoint(self.out_dir / "last.ckpt")
        return reports

    # ------------------------------------------------------------ checkpoint
    def checkpoint(self, path: str | Path) -> Path:
        arrays = {MODEL_PREFIX + k: v for k, v in self.net.state_dict().items()}
        arrays.update(self.optimizer.to_arrays())
        metadata = {
            "position": asdict(self.position),
            "loss_trace": self.loss_trace,
            "best_val": self.best_val,
            "adam": self.optimizer.hyperparameters(),
            "mode": self.net.mode,
            "model_config": self.net.config.model_dump(),
            "train_config": self.config.model_dump(),
        }
        return save_archive(path, arrays, metadata)

    def restore(self, path: str | Path) -> TrainingPosition:
        arrays, metadata = load_archive(path)
        if metadata.get("mode") not in (None, self.net.mode):
            raise CheckpointError(f"checkpoint 的模式 {metadata.get('mode')} 与当前模式 {self.net.mode} 不一致")
        model_state = {k[len(MODEL_PREFIX):]: v for k, v in arrays.items() if k.startswith(MODEL_PREFIX)}
        self.net.load_state_dict(model_state, strict=True)
        self.optimizer = AdamState.from_arrays(metadata["adam"], {k: v for k, v in arrays.items() if k.startswith("adam.")})
        self.optimizer.learning_rate = self.config.learning_rate
        self.loss_trace = [float(v) for v in metadata.get("loss_trace", [])]
        self.best_val = float(metadata.get("best_val", -1.0))
        self.position = TrainingPosition(**metadata.get("position", {}))
        logger.info("从 %s 恢复：epoch=%d batch=%d", path, self.position.epoch, self.position.batch)
        return self.position

    def gradient_norm(self) -> float:
        return global_grad_norm(self.params)


def restore_network(path: str | Path, net: FusionNetwork) -> Dict[str, Any]:
    """只把 checkpoint 中的模型参数写回网络（评估用）。"""
    arrays, metadata = load_archive(path)
    state = {k[len(MODEL_PREFIX):]: v for k, v in arrays.items() if k.startswith(MODEL_PREFIX)}
    net.load_state_dict(state, strict=True)
    return metadata
