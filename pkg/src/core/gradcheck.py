from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

from src.core.tensor import DiffTensor, backward


def numerical_gradient(
    fn: Callable[[], DiffTensor],
    tensor: DiffTensor,
    eps: float = 1e-5,
    indices: Sequence[tuple] | None = None,
) -> Dict[tuple, float]:
    """中心差分。fn 每次重新构图并返回标量。"""
    results: Dict[tuple, float] = {}
    flat_indices = indices if indices is not None else list(np.ndindex(*tensor.shape))
    for index in flat_indices:
        original = tensor.data[index]
        tensor.data[index] = original + eps
        plus = float(fn().data)
        tensor.data[index] = original - eps
        minus = float(fn().data)
        tensor.data[index] = original
        results[index] = (plus - minus) / (2.0 * eps)
    return results


def gradient_check(
    fn: Callable[[], DiffTensor],
    tensors: Sequence[DiffTensor],
    eps: float = 1e-5,
    max_checks: int | None = None,
    seed: int = 0,
) -> float:
    """返回解析梯度与数值梯度之间的最大相对误差（按张量的无穷范数归一）。

    max_checks 限制每个张量抽查的元素个数，用于较大的形状。
    """
    for tensor in tensors:
        tensor.grad = None
    loss = fn()
    backward(loss)
    analytic = {id(t): (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for t in tensors}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor in tensors:
        all_indices = list(np.ndindex(*tensor.shape))
        if max_checks is not None and len(all_indices) > max_checks:
            picks = rng.choice(len(all_indices), size=max_checks, replace=False)
            all_indices = [all_indices[i] for i in sorted(picks)]
        numeric = numerical_gradient(fn, tensor, eps=eps, indices=all_indices)
        a = np.array([analytic[id(tensor)][i] for i in all_indices])
        n = np.array([numeric[i] for i in all_indices])
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
        worst = max(worst, float(np.abs(a - n).max(initial=0.0) / scale))
    return worst
