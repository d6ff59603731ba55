from __future__ import annotations

from typing import Tuple

import numpy as np
from scipy import ndimage


def bilinear_resize(array: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """对最后两个轴做双线性插值（角点对齐），前导轴逐张处理。

    角点对齐保证：常数图保持常数，线性斜坡保持线性，源尺寸等于目标尺寸时为恒等映射。
    """
    array = np.asarray(array)
    height, width = array.shape[-2:]
    out_h, out_w = int(target[0]), int(target[1])
    if height < 1 or width < 1 or out_h < 1 or out_w < 1:
        raise ValueError(f"插值尺寸必须 ≥ 1：源{(height, width)} 目标{(out_h, out_w)}")
    if (height, width) == (out_h, out_w):
        return array.astype(np.result_type(array.dtype, np.float32), copy=True)

    lead = array.shape[:-2]
    stack = array.reshape((-1, height, width)).astype(np.float64)
    rows = np.linspace(0.0, height - 1, out_h)
    cols = np.linspace(0.0, width - 1, out_w)
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    out = np.empty((stack.shape[0], out_h, out_w), dtype=np.float64)
    for index, plane in enumerate(stack):
        out[index] = ndimage.map_coordinates(plane, [grid_r, grid_c], order=1, mode="nearest")
    return out.reshape(lead + (out_h, out_w))
