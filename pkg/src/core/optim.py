from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from src.core.errors import ShapeError
from src.core.tensor import DiffTensor


@dataclass
class AdamState:
    """Adam 的一阶/二阶矩与步数。moment 字典以参数的点分名称为键。"""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"adam.m.{k}": v for k, v in self.first_moment.items()}
        arrays.update({f"adam.v.{k}": v for k, v in self.second_moment.items()})
        return arrays

    def hyperparameters(self) -> Dict[str, float]:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "step_count": self.step_count,
        }

    @classmethod
    def from_arrays(cls, hyper: Mapping[str, float], arrays: Mapping[str, np.ndarray]) -> "AdamState":
        state = cls(
            learning_rate=float(hyper["learning_rate"]),
            beta1=float(hyper["beta1"]),
            beta2=float(hyper["beta2"]),
            epsilon=float(hyper["epsilon"]),
            step_count=int(hyper["step_count"]),
        )
        for key, value in arrays.items():
            if key.startswith("adam.m."):
                state.first_moment[key[len("adam.m."):]] = np.array(value)
            elif key.startswith("adam.v."):
                state.second_moment[key[len("adam.v."):]] = np.array(value)
        return state


def global_grad_norm(params: Mapping[str, DiffTensor]) -> float:
    total = 0.0
    for name in sorted(params):
        grad = params[name].grad
        if grad is not None:
            total += float(np.sum(np.square(grad, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_gradients(params: Mapping[str, DiffTensor], max_norm: float = 10.0) -> Tuple[float, float]:
    """全局L2范数裁剪。返回 (裁剪前范数, 缩放系数)；范数不超过 max_norm 时梯度保持原样。"""
    norm = global_grad_norm(params)
    if norm <= max_norm + 1e-6 or norm == 0.0:
        return norm, 1.0
    scale = max_norm / norm
    for param in params.values():
        if param.grad is not None:
            param.grad *= param.grad.dtype.type(scale)
    return norm, scale


def adam_step(state: AdamState, params: Mapping[str, DiffTensor], grads: Mapping[str, np.ndarray] | None = None) -> None:
    """带偏差修正的标准Adam更新（原地修改参数）。grads 缺省时读取 param.grad。"""
    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        param = params[name]
        grad = grads[name] if grads is not None else param.grad
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeError(f"参数{name}的梯度形状{grad.shape}与参数形状{param.shape}不一致")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        elif m.shape != param.shape:
            raise ShapeError(f"参数{name}的Adam矩形状{m.shape}与参数形状{param.shape}不一致")
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m.astype(param.dtype)
        state.second_moment[name] = v.astype(param.dtype)
        m_hat = m / correction1
        v_hat = v / correction2
        update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        param.data -= update.astype(param.dtype)
