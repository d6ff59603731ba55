from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from src.core import functional as F
from src.core.errors import CheckpointError
from src.core.functional import ConvSpec
from src.core.tensor import DiffTensor


class Parameter(DiffTensor):
    def __init__(self, data, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=True)


class Module:
    """参数树。子模块与参数按属性名注册，完整名称为点分路径（例如 layer1.0.conv1.spatial）。"""

    def __init__(self) -> None:
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        self._modules[name] = module
        object.__setattr__(self, name, module)

    # ------------------------------------------------------------ 遍历
    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for name, module in self._modules.items():
            yield from module.named_buffers(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for module in self._modules.values():
            module.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    # ------------------------------------------------------------ 状态
    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> Dict[str, List[str]]:
        """按名称写回参数与缓冲区。strict=False 时允许部分导入（用于外部权重），返回差异。"""
        targets: Dict[str, np.ndarray] = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))

        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        mismatched = sorted(
            f"{name}: {tuple(state[name].shape)} != {targets[name].shape}"
            for name in set(targets) & set(state)
            if tuple(state[name].shape) != targets[name].shape
        )
        if mismatched or (strict and (missing or unexpected)):
            raise CheckpointError("参数与当前模型结构不一致", missing, unexpected, mismatched)

        for name in set(targets) & set(state):
            targets[name][...] = state[name]
        return {"missing": missing, "unexpected": unexpected}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules: List[Module] | None = None) -> None:
        super().__init__()
        self._items: List[Module] = []
        for module in modules or []:
            self.append(module)

    def append(self, module: Module) -> None:
        self.add_module(str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, index: int) -> Module:
        return self._items[index]


def kaiming_normal(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    std = np.sqrt(2.0 / max(fan_in, 1))
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, bias: bool = False, dtype=np.float32):
        super().__init__()
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel_space ** 2
        self.weight = Parameter(kaiming_normal(spec.weight_shape_2d, fan_in, rng), dtype=dtype)
        if bias:
            self.bias = Parameter(np.zeros(spec.out_channels), dtype=dtype)
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x: DiffTensor) -> DiffTensor:
        return F.conv2d_forward(x, self.spec, self.weight, self.bias)


class Conv3d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, bias: bool = False, dtype=np.float32):
        super().__init__()
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel_time * spec.kernel_space ** 2
        self.weight = Parameter(kaiming_normal(spec.weight_shape_3d, fan_in, rng), dtype=dtype)
        if bias:
            self.bias = Parameter(np.zeros(spec.out_channels), dtype=dtype)
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x: DiffTensor) -> DiffTensor:
        return F.conv3d_forward(x, self.spec, self.weight, self.bias)


class BatchNorm(Module):
    """逐通道批归一化，适用于 [N,C] 以及带空间轴的输入。"""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels), dtype=dtype)
        self.beta = Parameter(np.zeros(channels), dtype=dtype)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: DiffTensor) -> DiffTensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class FactorizedConv3d(Module):
    """(2+1)D 卷积：1×d×d 空间卷积 → BN → ReLU → t×1×1 时间卷积。

    中间通道数默认取 mid_channels 的参数持平值；mid_norm=False 时与 F.factorized_conv_block 完全一致。
    """

    def __init__(
        self,
        spec: ConvSpec,
        rng: np.random.Generator,
        mid: int | None = None,
        mid_norm: bool = True,
        dtype=np.float32,
    ):
        super().__init__()
        self.spec = spec
        spatial_spec, temporal_spec = F.factorized_specs(spec, mid)
        self.mid = spatial_spec.out_channels
        self.spatial = Conv3d(spatial_spec, rng, dtype=dtype)
        self.temporal = Conv3d(temporal_spec, rng, dtype=dtype)
        if mid_norm:
            self.mid_bn = BatchNorm(self.mid, dtype=dtype)
        else:
            object.__setattr__(self, "mid_bn", None)

    def conv_param_count(self) -> int:
        return self.spatial.weight.size + self.temporal.weight.size

    def forward(self, x: DiffTensor) -> DiffTensor:
        if self.mid_bn is None:
            return F.factorized_conv_block(x, self.spec, {"spatial": self.spatial.weight, "temporal": self.temporal.weight})
        hidden = self.spatial(x)
        hidden = F.relu(self.mid_bn(hidden))
        return self.temporal(hidden)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(out_features, in_features)), dtype=dtype)
        self.bias = Parameter(rng.uniform(-bound, bound, size=(out_features,)), dtype=dtype)

    def forward(self, x: DiffTensor) -> DiffTensor:
        return F.linear(x, self.weight, self.bias)
