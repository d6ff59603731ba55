from __future__ import annotations

from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

BASE_FEATURE_DIM = 512
STAGE_WIDTHS = (64, 128, 256, 512)
MODES = ("fusion", "pose_only", "ir_only")


def scaled(channels: int, width_multiplier: float) -> int:
    """按宽度系数缩放通道数，四舍五入且至少为1。"""
    return max(1, int(round(channels * width_multiplier)))


class ModelConfig(BaseModel):
    """FUSION 网络结构配置。特征维度默认由宽度系数推出（w=1 时为 512）。"""

    model_config = ConfigDict(extra="forbid")

    class_count: int = Field(default=4, ge=2, description="类别数")
    width_multiplier: float = Field(default=1.0, gt=0.0, description="两个backbone的通道宽度系数（玩具规模用）")
    clip_length: int = Field(default=8, ge=1, description="IR clip 的帧数 T")
    pose_feature_dim: Optional[int] = Field(default=None, ge=1, description="姿态模块输出维度，缺省为 round(512·w)")
    ir_feature_dim: Optional[int] = Field(default=None, ge=1, description="IR模块输出维度，缺省为 round(512·w)")
    pose_stage_depths: List[int] = Field(default_factory=lambda: [2, 2, 2, 2], description="ResNet 四个stage的BasicBlock数")
    ir_stage_depths: List[int] = Field(default_factory=lambda: [2, 2, 2, 2], description="R(2+1)D 四个stage的block数")
    head_hidden: List[int] = Field(default_factory=lambda: [256, 128], description="融合MLP隐藏层宽度")
    map_size: int = Field(default=224, ge=16, description="骨架图边长")
    clip_size: int = Field(default=112, ge=16, description="IR帧边长")
    fusion: Literal["concat", "logit_average"] = Field(default="concat", description="特征拼接或logits加权平均")
    head_regularization: Literal["batchnorm", "dropout"] = Field(default="batchnorm", description="MLP层前的正则化方式")
    dropout: float = Field(default=0.5, ge=0.0, lt=1.0, description="head_regularization=dropout 时的丢弃概率")

    @field_validator("pose_stage_depths", "ir_stage_depths")
    @classmethod
    def _four_stages(cls, value: List[int]) -> List[int]:
        if len(value) != 4 or any(d < 1 for d in value):
            raise ValueError(f"需要四个 ≥ 1 的stage深度，实际为 {value}")
        return value

    @field_validator("head_hidden")
    @classmethod
    def _positive_hidden(cls, value: List[int]) -> List[int]:
        if not value or any(h < 1 for h in value):
            raise ValueError(f"MLP隐藏层宽度必须 ≥ 1：{value}")
        return value

    @model_validator(mode="after")
    def _derive_feature_dims(self) -> "ModelConfig":
        expected = scaled(BASE_FEATURE_DIM, self.width_multiplier)
        for name in ("pose_feature_dim", "ir_feature_dim"):
            value = getattr(self, name)
            if value is None:
                setattr(self, name, expected)
            elif value != expected:
                raise ValueError(f"{name}={value} 与宽度系数 {self.width_multiplier} 推出的 {expected} 不一致")
        return self

    def stage_widths(self) -> List[int]:
        return [scaled(c, self.width_multiplier) for c in STAGE_WIDTHS]

    def head_input_dim(self, mode: str = "fusion") -> int:
        if mode == "pose_only":
            return self.pose_feature_dim
        if mode == "ir_only":
            return self.ir_feature_dim
        return self.pose_feature_dim + self.ir_feature_dim
