from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field


class TrainConfig(BaseModel):
    """训练配方：batch 16、恒定学习率 1e-4 的 Adam、全局梯度裁剪 10。"""

    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(default=16, ge=2, description="batch大小（batch norm 要求 ≥ 2）")
    learning_rate: float = Field(default=1e-4, ge=0.0, description="Adam学习率，训练全程不变")
    clip_norm: float = Field(default=10.0, gt=0.0, description="全局梯度L2范数上限")
    epochs: int = Field(default=50, ge=1, description="训练轮数")
    seed: int = Field(default=0, description="根随机种子")
    mode: Literal["fusion", "pose_only", "ir_only"] = Field(default="fusion", description="网络模式")
    eval_sampling: Literal["random", "midpoint"] = Field(default="midpoint", description="评估时IR窗口采样方式")
    deterministic: bool = Field(default=False, description="确定性模式：单线程预处理，epochs.csv 不写墙钟时间")
    workers: int = Field(default=2, ge=1, description="预处理线程数")
    crop: bool = Field(default=True, description="是否使用姿态条件裁剪")
    augment: bool = Field(default=True, description="是否使用训练增强（骨架旋转、IR翻转与随机窗口）")
    checkpoint_every: int = Field(default=0, ge=0, description="每隔多少个batch写一次 last.ckpt（0 表示只在epoch结束时写）")

    @property
    def effective_workers(self) -> int:
        return 1 if self.deterministic else self.workers
