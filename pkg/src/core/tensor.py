from __future__ import annotations

import itertools
from typing import Callable, List, Sequence, Tuple

import numpy as np

from src.core.errors import ShapeError

_node_counter = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class DiffTensor:
    """参与反向自动微分图的n维数组。

    data 为行优先的稠密 numpy 数组；grad 在首次回传时按 data 的形状分配。
    parents/backward_fn 描述该节点如何由父节点计算得到，叶子节点两者为空。
    """

    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Tuple["DiffTensor", ...] = (),
        backward_fn: BackwardFn | None = None,
        name: str = "",
        dtype=None,
    ):
        array = np.asarray(data, dtype=dtype)
        if array.dtype.kind not in "fc":
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.parents = parents if self.requires_grad else ()
        self.backward_fn = backward_fn if self.requires_grad else None
        self.node_id = next(_node_counter)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError(f"梯度形状{grad.shape}与张量形状{self.data.shape}不一致（node {self.node_id}）")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"DiffTensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # 运算符委托给 functional，避免循环导入
    def __add__(self, other):
        from src.core import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from src.core import functional as F

        return F.sub(self, other)

    def __mul__(self, other):
        from src.core import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from src.core import functional as F

        return F.mul(self, -1.0)

    def sum(self):
        from src.core import functional as F

        return F.sum(self)

    def reshape(self, *shape):
        from src.core import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


def as_tensor(value, dtype=None) -> DiffTensor:
    if isinstance(value, DiffTensor):
        return value
    return DiffTensor(value, dtype=dtype)


def topological_order(root: DiffTensor) -> List[DiffTensor]:
    """迭代式后序遍历，避免深网络触发递归上限。"""
    order: List[DiffTensor] = []
    visited: set[int] = set()
    stack: List[Tuple[DiffTensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and parent.node_id not in visited:
                stack.append((parent, False))
    return order


def backward(loss: DiffTensor) -> None:
    """从标量 loss 出发按逆拓扑序累积梯度，每个节点只访问一次。

    中间节点的梯度在回传后释放，叶子节点（参数/输入）保留 grad。
    """
    if loss.size != 1:
        raise ShapeError(f"backward 需要标量loss，实际形状为{loss.shape}")
    if not loss.requires_grad:
        return

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        grad = grads.pop(node.node_id, None)
        if grad is None:
            continue
        if node.backward_fn is None:
            node.accumulate_grad(grad)
            continue
        parent_grads = node.backward_fn(grad)
        for parent, parent_grad in zip(node.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise ShapeError(
                    f"节点{node.node_id}回传给父节点{parent.node_id}的梯度形状{parent_grad.shape}"
                    f"与父节点形状{parent.shape}不一致"
                )
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + parent_grad
            else:
                grads[parent.node_id] = parent_grad
