from __future__ import annotations

import logging
from typing import Dict, List

import numpy as np

from src.core import functional as F
from src.core.errors import ShapeError
from src.core.layers import BatchNorm, Linear, Module, ModuleList, Parameter
from src.core.tensor import DiffTensor, as_tensor
from src.models.config import MODES, ModelConfig
from src.models.ir_net import IrNet
from src.models.pose_net import PoseNet
from src.utils.seeding import derive_rng

logger = logging.getLogger(__name__)


class ClassifierHead(Module):
    """MLP：每个全连接层前做 BN（或dropout），隐藏层后接 ReLU，最后一层输出 logits。"""

    def __init__(self, in_features: int, hidden: List[int], class_count: int, rng: np.random.Generator,
                 regularization: str = "batchnorm", dropout: float = 0.5):
        super().__init__()
        self.in_features = in_features
        self.regularization = regularization
        self.dropout = dropout
        sizes = [in_features] + list(hidden) + [class_count]
        self.norms = ModuleList()
        self.linears = ModuleList()
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            if regularization == "batchnorm":
                self.norms.append(BatchNorm(n_in))
            self.linears.append(Linear(n_in, n_out, rng))

    def forward(self, features: DiffTensor, rng: np.random.Generator | None = None) -> DiffTensor:
        if features.ndim != 2 or features.shape[1] != self.in_features:
            raise ShapeError(f"MLP输入应为 (N, {self.in_features})，实际为 {features.shape}")
        x = features
        last = len(self.linears) - 1
        for index, linear in enumerate(self.linears):
            if self.regularization == "batchnorm":
                x = self.norms[index](x)
            else:
                x = F.dropout(x, self.dropout, rng, self.training)
            x = linear(x)
            if index < last:
                x = F.relu(x)
        return x


class FusionNetwork(Module):
    """端到端 FUSION 网络：姿态模块 + IR模块 + 融合MLP。

    mode=pose_only / ir_only 时只构建对应的单模块和 512·w 输入的MLP；
    fusion="logit_average" 时两个模块各有一个分类头，logits 按可学习的 softmax 权重加权。
    """

    def __init__(self, config: ModelConfig, mode: str = "fusion", rng: np.random.Generator | None = None):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"未知模式 {mode}，可选 {MODES}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.mode = mode
        head_args = dict(
            hidden=config.head_hidden,
            class_count=config.class_count,
            rng=rng,
            regularization=config.head_regularization,
            dropout=config.dropout,
        )
        if mode in ("fusion", "pose_only"):
            self.pose = PoseNet(config, rng)
        if mode in ("fusion", "ir_only"):
            self.ir = IrNet(config, rng)

        if mode == "fusion" and config.fusion == "logit_average":
            self.pose_head = ClassifierHead(config.pose_feature_dim, **head_args)
            self.ir_head = ClassifierHead(config.ir_feature_dim, **head_args)
            self.branch_logits = Parameter(np.zeros(2))
        else:
            self.head = ClassifierHead(config.head_input_dim(mode), **head_args)
        logger.debug("构建 FusionNetwork mode=%s fusion=%s 参数量=%d", mode, config.fusion, self.parameter_count())

    # ------------------------------------------------------------ 分模块前向
    def pose_forward(self, maps) -> DiffTensor:
        if "pose" not in self._modules:
            raise ShapeError(f"mode={self.mode} 没有姿态模块")
        return self.pose(as_tensor(maps, dtype=np.float32))

    def ir_forward(self, clips) -> DiffTensor:
        if "ir" not in self._modules:
            raise ShapeError(f"mode={self.mode} 没有IR模块")
        return self.ir(as_tensor(clips, dtype=np.float32))

    def classify_logits(self, s: DiffTensor | None, i: DiffTensor | None, rng: np.random.Generator | None = None) -> DiffTensor:
        if self.mode == "pose_only":
            return self.head(s, rng)
        if self.mode == "ir_only":
            return self.head(i, rng)
        if s.shape[1] != self.config.pose_feature_dim or i.shape[1] != self.config.ir_feature_dim:
            raise ShapeError(
                f"特征维度不匹配：s={s.shape} i={i.shape}，"
                f"期望 {self.config.pose_feature_dim}/{self.config.ir_feature_dim}"
            )
        if self.config.fusion == "logit_average":
            weights = F.softmax(self.branch_logits, axis=0)
            return F.add(
                F.mul(self.pose_head(s, rng), F.take(weights, 0)),
                F.mul(self.ir_head(i, rng), F.take(weights, 1)),
            )
        return self.head(F.concat([i, s], axis=1), rng)

    def fuse_and_classify(self, s: DiffTensor, i: DiffTensor, rng: np.random.Generator | None = None) -> DiffTensor:
        return F.softmax(self.classify_logits(s, i, rng), axis=1)

    # ------------------------------------------------------------ 端到端
    def logits(self, maps=None, clips=None, rng: np.random.Generator | None = None) -> DiffTensor:
        s = self.pose_forward(maps) if self.mode in ("fusion", "pose_only") else None
        i = self.ir_forward(clips) if self.mode in ("fusion", "ir_only") else None
        return self.classify_logits(s, i, rng)

    def forward_fusion(self, maps=None, clips=None, rng: np.random.Generator | None = None) -> DiffTensor:
        return F.softmax(self.logits(maps, clips, rng), axis=1)

    def forward(self, maps=None, clips=None, rng: np.random.Generator | None = None) -> DiffTensor:
        return self.forward_fusion(maps, clips, rng)

    def parameter_groups(self) -> Dict[str, List[str]]:
        groups: Dict[str, List[str]] = {"pose": [], "ir": [], "head": []}
        for name, _ in self.named_parameters():
            root = name.split(".", 1)[0]
            groups["pose" if root == "pose" else "ir" if root == "ir" else "head"].append(name)
        return {k: v for k, v in groups.items() if v}

    def feature_dims(self) -> Dict[str, int]:
        dims = {}
        if self.mode in ("fusion", "pose_only"):
            dims["pose"] = self.pose.feature_dim
        if self.mode in ("fusion", "ir_only"):
            dims["ir"] = self.ir.feature_dim
        return dims


def build_network(config: ModelConfig, mode: str, seed: int) -> FusionNetwork:
    return FusionNetwork(config, mode, derive_rng(seed, "model-init", mode))
