from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from src.core.errors import ShapeError
from src.core.tensor import DiffTensor, as_tensor


def _make(data: np.ndarray, parents: Tuple[DiffTensor, ...], backward_fn) -> DiffTensor:
    return DiffTensor(data, parents=parents, backward_fn=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度按求和还原到原始形状。"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- 逐元素运算

def _coerce_pair(a, b) -> Tuple[DiffTensor, DiffTensor]:
    # Python 标量跟随张量的dtype，避免float32计算被提升为float64
    if isinstance(a, DiffTensor) and not isinstance(b, DiffTensor) and np.ndim(b) == 0:
        return a, DiffTensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, DiffTensor) and not isinstance(a, DiffTensor) and np.ndim(a) == 0:
        return DiffTensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> DiffTensor:
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def backward_fn(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _make(out, (a, b), backward_fn)


def sub(a, b) -> DiffTensor:
    a, b = _coerce_pair(a, b)
    out = a.data - b.data

    def backward_fn(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return _make(out, (a, b), backward_fn)


def mul(a, b) -> DiffTensor:
    a, b = _coerce_pair(a, b)
    out = a.data * b.data

    def backward_fn(grad):
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return _make(out, (a, b), backward_fn)


def sum(x: DiffTensor) -> DiffTensor:  # noqa: A001
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward_fn(grad):
        return (np.broadcast_to(grad, x.shape).astype(x.dtype),)

    return _make(out, (x,), backward_fn)


def mean(x: DiffTensor) -> DiffTensor:
    count = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def backward_fn(grad):
        return (np.full(x.shape, grad / count, dtype=x.dtype),)

    return _make(out, (x,), backward_fn)


def reshape(x: DiffTensor, shape: Sequence[int]) -> DiffTensor:
    out = x.data.reshape(shape)

    def backward_fn(grad):
        return (grad.reshape(x.shape),)

    return _make(out, (x,), backward_fn)


def concat(tensors: Sequence[DiffTensor], axis: int = 1) -> DiffTensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(grad):
        return tuple(np.split(grad, bounds, axis=axis))

    return _make(out, tensors, backward_fn)


def take(x: DiffTensor, index: int, axis: int = 0) -> DiffTensor:
    """沿 axis 取出单个位置（保留该轴，长度为1）。"""
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(index, index + 1)
    sl = tuple(sl)
    out = x.data[sl].copy()

    def backward_fn(grad):
        full = np.zeros(x.shape, dtype=grad.dtype)
        full[sl] = grad
        return (full,)

    return _make(out, (x,), backward_fn)


def relu(x: DiffTensor) -> DiffTensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward_fn(grad):
        return (grad * mask,)

    return _make(out, (x,), backward_fn)


def dropout(x: DiffTensor, p: float, rng: np.random.Generator | None, training: bool) -> DiffTensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("训练模式下的dropout需要显式的随机数生成器")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    out = x.data * keep

    def backward_fn(grad):
        return (grad * keep,)

    return _make(out, (x,), backward_fn)


# ---------------------------------------------------------------- 卷积

@dataclass(frozen=True)
class ConvSpec:
    """卷积超参数。2D卷积只使用空间部分（stride/padding 的后两项）。"""

    in_channels: int
    out_channels: int
    kernel_time: int = 1
    kernel_space: int = 3
    stride: Tuple[int, int, int] = (1, 1, 1)
    padding: Tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        extents = (self.in_channels, self.out_channels, self.kernel_time, self.kernel_space, *self.stride)
        if any(int(v) < 1 for v in extents):
            raise ValueError(f"ConvSpec 的通道/卷积核/步长必须 ≥ 1：{self}")
        if any(int(p) < 0 for p in self.padding):
            raise ValueError(f"ConvSpec 的padding必须 ≥ 0：{self}")

    @property
    def weight_shape_2d(self) -> Tuple[int, ...]:
        return (self.out_channels, self.in_channels, self.kernel_space, self.kernel_space)

    @property
    def weight_shape_3d(self) -> Tuple[int, ...]:
        return (self.out_channels, self.in_channels, self.kernel_time, self.kernel_space, self.kernel_space)


def _window_slices(offset: Tuple[int, ...], stride: Tuple[int, ...], out_extents: Tuple[int, ...]):
    return (slice(None), slice(None)) + tuple(
        slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_extents)
    )


def _output_extents(spatial: Tuple[int, ...], kernel: Tuple[int, ...], stride: Tuple[int, ...]) -> Tuple[int, ...]:
    extents = tuple((s - k) // st + 1 for s, k, st in zip(spatial, kernel, stride))
    if any(e < 1 for e in extents):
        raise ShapeError(f"输入空间尺寸{spatial}（含padding）小于卷积核{kernel}")
    return extents


def conv_nd(
    x: DiffTensor,
    weight: DiffTensor,
    bias: DiffTensor | None,
    stride: Tuple[int, ...],
    padding: Tuple[int, ...],
) -> DiffTensor:
    """任意空间维数的互相关。按卷积核偏移逐项 tensordot 累加，归约顺序固定。"""
    k = weight.ndim - 2
    if x.ndim != k + 2:
        raise ShapeError(f"输入维数{x.ndim}与{k}D卷积核不匹配")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"输入通道{x.shape[1]}与卷积核输入通道{weight.shape[1]}不一致")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias形状{bias.shape}应为({weight.shape[0]},)")

    pad_width = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    padded = np.pad(x.data, pad_width) if any(padding) else x.data
    kernel = weight.shape[2:]
    out_extents = _output_extents(padded.shape[2:], kernel, stride)
    dtype = np.result_type(x.dtype, weight.dtype)

    acc = np.zeros((x.shape[0],) + out_extents + (weight.shape[0],), dtype=dtype)
    for offset in np.ndindex(*kernel):
        window = padded[_window_slices(offset, stride, out_extents)]
        acc += np.tensordot(window, weight.data[(slice(None), slice(None)) + offset], axes=([1], [1]))
    out = np.moveaxis(acc, -1, 1)
    if bias is not None:
        out = out + bias.data.reshape((1, -1) + (1,) * k)
    out = np.ascontiguousarray(out, dtype=dtype)

    parents = (x, weight) if bias is None else (x, weight, bias)
    spatial_axes = tuple(range(1, k + 1))

    def backward_fn(grad):
        grad_last = np.moveaxis(grad, 1, -1)
        grad_padded = np.zeros(padded.shape, dtype=dtype) if x.requires_grad else None
        grad_weight = np.zeros(weight.shape, dtype=dtype)
        for offset in np.ndindex(*kernel):
            sl = _window_slices(offset, stride, out_extents)
            window = padded[sl]
            grad_weight[(slice(None), slice(None)) + offset] = np.tensordot(
                grad_last, window, axes=((0,) + spatial_axes, (0,) + tuple(a + 1 for a in spatial_axes))
            )
            if grad_padded is not None:
                contrib = np.tensordot(grad_last, weight.data[(slice(None), slice(None)) + offset], axes=([-1], [0]))
                grad_padded[sl] += np.moveaxis(contrib, -1, 1)
        grad_x = None
        if grad_padded is not None:
            unpad = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, x.shape[2:]))
            grad_x = grad_padded[unpad]
        grads = [grad_x, grad_weight]
        if bias is not None:
            grads.append(grad.sum(axis=(0,) + tuple(range(2, k + 2))))
        return tuple(grads)

    return _make(out, parents, backward_fn)


def conv2d_forward(input: DiffTensor, spec: ConvSpec, weight: DiffTensor, bias: DiffTensor | None = None) -> DiffTensor:
    if input.ndim != 4:
        raise ShapeError(f"conv2d 需要[N,C,H,W]输入，实际为{input.shape}")
    if weight.shape != spec.weight_shape_2d:
        raise ShapeError(f"conv2d 权重形状{weight.shape}与ConvSpec期望{spec.weight_shape_2d}不一致")
    if input.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d 输入通道{input.shape[1]}与ConvSpec.in_channels={spec.in_channels}不一致")
    return conv_nd(input, weight, bias, tuple(spec.stride[1:]), tuple(spec.padding[1:]))


def conv3d_forward(input: DiffTensor, spec: ConvSpec, weight: DiffTensor, bias: DiffTensor | None = None) -> DiffTensor:
    if input.ndim != 5:
        raise ShapeError(f"conv3d 需要[N,C,T,H,W]输入，实际为{input.shape}")
    if weight.shape != spec.weight_shape_3d:
        raise ShapeError(f"conv3d 权重形状{weight.shape}与ConvSpec期望{spec.weight_shape_3d}不一致")
    if input.shape[1] != spec.in_channels:
        raise ShapeError(f"conv3d 输入通道{input.shape[1]}与ConvSpec.in_channels={spec.in_channels}不一致")
    return conv_nd(input, weight, bias, tuple(spec.stride), tuple(spec.padding))


def mid_channels(n_in: int, n_out: int, t: int, d: int) -> int:
    """(2+1)D 分解的中间通道数，使参数量与完整3D卷积持平（向下取整，最小为1）。"""
    return max(1, (t * d * d * n_in * n_out) // (d * d * n_in + t * n_out))


def full_conv3d_param_count(n_in: int, n_out: int, t: int, d: int) -> int:
    return t * d * d * n_in * n_out


def factorized_param_count(n_in: int, n_out: int, t: int, d: int, m: int | None = None) -> int:
    m = mid_channels(n_in, n_out, t, d) if m is None else m
    return d * d * n_in * m + t * m * n_out


def factorized_specs(spec: ConvSpec, mid: int | None = None) -> Tuple[ConvSpec, ConvSpec]:
    """把 t×d×d 卷积拆成 1×d×d 空间卷积和 t×1×1 时间卷积，步长/padding 各取对应轴。"""
    m = mid_channels(spec.in_channels, spec.out_channels, spec.kernel_time, spec.kernel_space) if mid is None else mid
    spatial = ConvSpec(
        in_channels=spec.in_channels,
        out_channels=m,
        kernel_time=1,
        kernel_space=spec.kernel_space,
        stride=(1, spec.stride[1], spec.stride[2]),
        padding=(0, spec.padding[1], spec.padding[2]),
    )
    temporal = ConvSpec(
        in_channels=m,
        out_channels=spec.out_channels,
        kernel_time=spec.kernel_time,
        kernel_space=1,
        stride=(spec.stride[0], 1, 1),
        padding=(spec.padding[0], 0, 0),
    )
    return spatial, temporal


def factorized_conv_block(input: DiffTensor, spec: ConvSpec, weights: Dict[str, DiffTensor]) -> DiffTensor:
    """空间卷积 → ReLU → 时间卷积。weights 需要 spatial/temporal，可选 spatial_bias/temporal_bias。

    中间通道数由 spatial 权重的输出通道决定，可与 mid_channels 的默认值不同。
    """
    spatial_w, temporal_w = weights["spatial"], weights["temporal"]
    spatial_spec, temporal_spec = factorized_specs(spec, mid=spatial_w.shape[0])
    if temporal_w.shape[1] != spatial_w.shape[0]:
        raise ShapeError(f"时间卷积输入通道{temporal_w.shape[1]}与空间卷积输出通道{spatial_w.shape[0]}不一致")
    hidden = conv3d_forward(input, spatial_spec, spatial_w, weights.get("spatial_bias"))
    hidden = relu(hidden)
    return conv3d_forward(hidden, temporal_spec, temporal_w, weights.get("temporal_bias"))


# ---------------------------------------------------------------- 池化

def max_pool(x: DiffTensor, kernel: Tuple[int, ...], stride: Tuple[int, ...], padding: Tuple[int, ...]) -> DiffTensor:
    k = len(kernel)
    if x.ndim != k + 2:
        raise ShapeError(f"max_pool 输入维数{x.ndim}与{k}D池化核不匹配")
    pad_width = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    padded = np.pad(x.data, pad_width, constant_values=-np.inf) if any(padding) else x.data
    out_extents = _output_extents(padded.shape[2:], tuple(kernel), tuple(stride))
    out = np.full(x.shape[:2] + out_extents, -np.inf, dtype=x.dtype)
    for offset in np.ndindex(*kernel):
        np.maximum(out, padded[_window_slices(offset, stride, out_extents)], out=out)

    def backward_fn(grad):
        grad_padded = np.zeros(padded.shape, dtype=x.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for offset in np.ndindex(*kernel):
            sl = _window_slices(offset, stride, out_extents)
            # 并列最大值只回传给第一个命中的位置
            hit = (padded[sl] == out) & ~taken
            grad_padded[sl] += grad * hit
            taken |= hit
        unpad = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, x.shape[2:]))
        return (grad_padded[unpad],)

    return _make(out, (x,), backward_fn)


def global_average_pool(x: DiffTensor) -> DiffTensor:
    axes = tuple(range(2, x.ndim))
    count = int(np.prod(x.shape[2:])) if axes else 1
    out = x.data.mean(axis=axes) if axes else x.data

    def backward_fn(grad):
        expanded = grad.reshape(grad.shape + (1,) * len(axes))
        return (np.broadcast_to(expanded / count, x.shape).astype(x.dtype),)

    return _make(out, (x,), backward_fn)


# ---------------------------------------------------------------- 归一化与全连接

def batch_norm(
    x: DiffTensor,
    gamma: DiffTensor,
    beta: DiffTensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> DiffTensor:
    """逐通道批归一化。训练模式原地更新 running_mean/running_var，评估模式只读取。"""
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm 输入{x.shape}与通道数{gamma.shape[0]}不一致")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)

    if training:
        if x.shape[0] < 2:
            raise ShapeError("训练模式下batch_norm要求batch大小 ≥ 2")
        count = x.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        count = 0
        mu, var = running_mean, running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = ((x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)).astype(x.dtype)
    out = x_hat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward_fn(grad):
        grad_gamma = (grad * x_hat).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        grad_xhat = grad * gamma.data.reshape(bshape)
        if training:
            grad_x = (inv_std.reshape(bshape) / count) * (
                count * grad_xhat
                - grad_xhat.sum(axis=axes).reshape(bshape)
                - x_hat * (grad_xhat * x_hat).sum(axis=axes).reshape(bshape)
            )
        else:
            grad_x = grad_xhat * inv_std.reshape(bshape)
        return grad_x.astype(x.dtype), grad_gamma, grad_beta

    return _make(out.astype(x.dtype), (x, gamma, beta), backward_fn)


def linear(x: DiffTensor, weight: DiffTensor, bias: DiffTensor | None = None) -> DiffTensor:
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear 输入{x.shape}与权重{weight.shape}（out, in）不匹配")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(grad):
        grads = [grad @ weight.data, grad.T @ x.data]
        if bias is not None:
            grads.append(grad.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward_fn)


# ---------------------------------------------------------------- softmax 与损失

def _stable_softmax(values: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = values - values.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def softmax(x: DiffTensor, axis: int = -1) -> DiffTensor:
    probs = _stable_softmax(x.data, axis=axis)

    def backward_fn(grad):
        return (probs * (grad - (grad * probs).sum(axis=axis, keepdims=True)),)

    return _make(probs, (x,), backward_fn)


def softmax_cross_entropy(logits: DiffTensor, labels) -> DiffTensor:
    """数值稳定的 log-softmax 交叉熵，对 batch 取平均。"""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy 需要[N,C] logits，实际为{logits.shape}")
    n, c = logits.shape
    if n == 0:
        raise ShapeError("softmax_cross_entropy 的batch为空")
    if labels.shape[0] != n:
        raise ShapeError(f"标签数量{labels.shape[0]}与batch大小{n}不一致")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"标签超出范围[0, {c})：{labels.tolist()}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = np.asarray(-log_probs[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward_fn(grad):
        probs = np.exp(log_probs)
        probs[np.arange(n), labels] -= 1.0
        return ((probs * (grad / n)).astype(logits.dtype),)

    return _make(loss, (logits,), backward_fn)
