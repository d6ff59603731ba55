from __future__ import annotations

from typing import Dict, List

import numpy as np

from src.core import functional as F
from src.core.errors import ShapeError
from src.core.functional import ConvSpec
from src.core.layers import BatchNorm, Conv3d, FactorizedConv3d, Module, ModuleList
from src.core.tensor import DiffTensor
from src.models.config import ModelConfig


class BasicBlock3d(Module):
    """R(2+1)D 残差块：两个 (2+1)D 卷积（3×3×3 的分解），下采样时时空步长均为2。"""

    def __init__(self, n_in: int, n_out: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = FactorizedConv3d(ConvSpec(n_in, n_out, 3, 3, (stride,) * 3, (1, 1, 1)), rng)
        self.bn1 = BatchNorm(n_out)
        self.conv2 = FactorizedConv3d(ConvSpec(n_out, n_out, 3, 3, (1, 1, 1), (1, 1, 1)), rng)
        self.bn2 = BatchNorm(n_out)
        if stride != 1 or n_in != n_out:
            self.downsample_conv = Conv3d(ConvSpec(n_in, n_out, 1, 1, (stride,) * 3, (0, 0, 0)), rng)
            self.downsample_bn = BatchNorm(n_out)
        else:
            object.__setattr__(self, "downsample_conv", None)

    def forward(self, x: DiffTensor) -> DiffTensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        shortcut = x if self.downsample_conv is None else self.downsample_bn(self.downsample_conv(x))
        return F.relu(out + shortcut)


class IrNet(Module):
    """IR模块 f_IR：18层 R(2+1)D，输入 (N, 3, T, H, W)，时空全局平均池化后输出 (N, 512·w)。"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.clip_length = config.clip_length
        self.input_size = config.clip_size
        widths = config.stage_widths()
        self.stem = FactorizedConv3d(ConvSpec(3, widths[0], 3, 7, (1, 2, 2), (1, 3, 3)), rng)
        self.stem_bn = BatchNorm(widths[0])
        n_in = widths[0]
        self.layers = ModuleList()
        for index, (width, depth) in enumerate(zip(widths, config.ir_stage_depths)):
            stage = ModuleList()
            for block in range(depth):
                stride = 2 if index > 0 and block == 0 else 1
                stage.append(BasicBlock3d(n_in, width, stride, rng))
                n_in = width
            self.layers.append(stage)
        self.feature_dim = n_in

    def factorized_blocks(self) -> Dict[str, FactorizedConv3d]:
        blocks = {"stem": self.stem}
        for i, stage in enumerate(self.layers):
            for j, block in enumerate(stage):
                blocks[f"layers.{i}.{j}.conv1"] = block.conv1
                blocks[f"layers.{i}.{j}.conv2"] = block.conv2
        return blocks

    def forward(self, clips: DiffTensor) -> DiffTensor:
        expected = (3, self.clip_length, self.input_size, self.input_size)
        if clips.ndim != 5 or tuple(clips.shape[1:]) != expected:
            raise ShapeError(f"IR模块输入应为 (N, {', '.join(map(str, expected))})，实际为 {clips.shape}")
        x = F.relu(self.stem_bn(self.stem(clips)))
        for stage in self.layers:
            for block in stage:
                x = block(x)
        return F.global_average_pool(x)


def parameter_audit(net: IrNet) -> List[Dict[str, object]]:
    """逐个 (2+1)D 块对比分解后与完整3D卷积的参数量。"""
    rows = []
    for name, block in net.factorized_blocks().items():
        spec = block.spec
        full = F.full_conv3d_param_count(spec.in_channels, spec.out_channels, spec.kernel_time, spec.kernel_space)
        factorized = block.conv_param_count()
        rows.append({
            "block": name,
            "in_channels": spec.in_channels,
            "out_channels": spec.out_channels,
            "mid_channels": block.mid,
            "full_params": full,
            "factorized_params": factorized,
            "relative_gap": (full - factorized) / full,
        })
    return rows
