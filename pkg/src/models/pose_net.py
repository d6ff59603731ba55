from __future__ import annotations

import numpy as np

from src.core import functional as F
from src.core.errors import ShapeError
from src.core.functional import ConvSpec
from src.core.layers import BatchNorm, Conv2d, Module, ModuleList
from src.core.tensor import DiffTensor
from src.models.config import ModelConfig


def conv2d_spec(n_in: int, n_out: int, kernel: int, stride: int = 1, padding: int = 0) -> ConvSpec:
    return ConvSpec(n_in, n_out, kernel_time=1, kernel_space=kernel, stride=(1, stride, stride), padding=(0, padding, padding))


class BasicBlock2d(Module):
    """conv3×3 → BN → ReLU → conv3×3 → BN，加上恒等（或1×1投影）捷径后再 ReLU。"""

    def __init__(self, n_in: int, n_out: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(conv2d_spec(n_in, n_out, 3, stride, 1), rng)
        self.bn1 = BatchNorm(n_out)
        self.conv2 = Conv2d(conv2d_spec(n_out, n_out, 3, 1, 1), rng)
        self.bn2 = BatchNorm(n_out)
        if stride != 1 or n_in != n_out:
            self.downsample_conv = Conv2d(conv2d_spec(n_in, n_out, 1, stride, 0), rng)
            self.downsample_bn = BatchNorm(n_out)
        else:
            object.__setattr__(self, "downsample_conv", None)

    def forward(self, x: DiffTensor) -> DiffTensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        shortcut = x if self.downsample_conv is None else self.downsample_bn(self.downsample_conv(x))
        return F.relu(out + shortcut)


class PoseNet(Module):
    """姿态模块 f_S：18层残差2D网络，输入 (N, 3, H, W) 骨架图，输出 (N, 512·w) 特征。"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.input_size = config.map_size
        widths = config.stage_widths()
        self.stem_conv = Conv2d(conv2d_spec(3, widths[0], 7, 2, 3), rng)
        self.stem_bn = BatchNorm(widths[0])
        n_in = widths[0]
        self.layers = ModuleList()
        for index, (width, depth) in enumerate(zip(widths, config.pose_stage_depths)):
            stage = ModuleList()
            for block in range(depth):
                stride = 2 if index > 0 and block == 0 else 1
                stage.append(BasicBlock2d(n_in, width, stride, rng))
                n_in = width
            self.layers.append(stage)
        self.feature_dim = n_in

    def forward(self, maps: DiffTensor) -> DiffTensor:
        expected = (3, self.input_size, self.input_size)
        if maps.ndim != 4 or tuple(maps.shape[1:]) != expected:
            raise ShapeError(f"姿态模块输入应为 (N, {expected[0]}, {expected[1]}, {expected[2]})，实际为 {maps.shape}")
        x = F.relu(self.stem_bn(self.stem_conv(maps)))
        x = F.max_pool(x, (3, 3), (2, 2), (1, 1))
        for stage in self.layers:
            for block in stage:
                x = block(x)
        return F.global_average_pool(x)
