from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import List

import numpy as np
from matplotlib import image as mpimg

from src.core.errors import DataError
from src.infrared.pipeline import IrSequence

logger = logging.getLogger(__name__)

PACKED_SUFFIX = ".irraw"
HEADER_BYTES = 16
MAGIC_16 = int.from_bytes(b"IR16", "little")
MAGIC_8 = int.from_bytes(b"IR08", "little")
FRAME_SUFFIXES = (".png", ".pgm")


def _frame_sort_key(path: Path):
    digits = re.findall(r"\d+", path.stem)
    return (int(digits[-1]) if digits else -1, path.name)


def read_packed(path: str | Path) -> np.ndarray:
    """打包格式：16字节头（magic, H, W, F，小端uint32）+ 行优先的帧数据。返回[0,1]的float32。"""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_BYTES:
        raise DataError(f"IR打包文件过短：{path}")
    magic, height, width, frames = np.frombuffer(raw[:HEADER_BYTES], dtype="<u4")
    if magic == MAGIC_16:
        dtype, max_code = np.dtype("<u2"), 65535.0
    elif magic == MAGIC_8:
        dtype, max_code = np.dtype("u1"), 255.0
    else:
        raise DataError(f"IR打包文件magic无法识别：{path}（0x{int(magic):08x}）")
    expected = int(height) * int(width) * int(frames) * dtype.itemsize
    payload = raw[HEADER_BYTES:]
    if len(payload) != expected:
        raise DataError(f"IR打包文件长度不符：{path}，期望{expected}字节，实际{len(payload)}")
    data = np.frombuffer(payload, dtype=dtype).reshape(int(frames), int(height), int(width))
    return (data.astype(np.float32) / max_code).astype(np.float32)


def write_packed(path: str | Path, frames: np.ndarray, bits: int = 16) -> Path:
    """frames 为[0,1]浮点或整数码值，写出为16位（默认）或8位打包文件。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames)
    if bits == 16:
        magic, dtype, max_code = MAGIC_16, np.dtype("<u2"), 65535
    elif bits == 8:
        magic, dtype, max_code = MAGIC_8, np.dtype("u1"), 255
    else:
        raise ValueError(f"不支持的位深：{bits}")
    if frames.dtype.kind == "f":
        codes = np.round(np.clip(frames, 0.0, 1.0) * max_code).astype(dtype)
    else:
        codes = frames.astype(dtype)
    f, h, w = codes.shape
    header = np.array([magic, h, w, f], dtype="<u4").tobytes()
    path.write_bytes(header + np.ascontiguousarray(codes).tobytes())
    return path


def _read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens: List[bytes] = []
    cursor = 0
    while len(tokens) < 4:
        match = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(raw, cursor)
        if match is None:
            raise DataError(f"PGM头部不完整：{path}")
        tokens.append(match.group(2))
        cursor = match.end()
    if tokens[0] != b"P5":
        raise DataError(f"只支持二进制PGM（P5）：{path}")
    width, height, max_value = int(tokens[1]), int(tokens[2]), int(tokens[3])
    cursor += 1
    dtype = np.dtype("u1") if max_value < 256 else np.dtype(">u2")
    data = np.frombuffer(raw[cursor:cursor + width * height * dtype.itemsize], dtype=dtype)
    if data.size != width * height:
        raise DataError(f"PGM像素数据截断：{path}")
    max_code = 255.0 if max_value < 256 else 65535.0
    return data.reshape(height, width).astype(np.float32) / max_code


def write_pgm(path: str | Path, frame: np.ndarray, bits: int = 16) -> Path:
    path = Path(path)
    max_code = 65535 if bits == 16 else 255
    codes = np.round(np.clip(frame, 0.0, 1.0) * max_code)
    dtype = np.dtype(">u2") if bits == 16 else np.dtype("u1")
    header = f"P5\n{frame.shape[1]} {frame.shape[0]}\n{max_code}\n".encode("ascii")
    path.write_bytes(header + codes.astype(dtype).tobytes())
    return path


def _read_png(path: Path) -> np.ndarray:
    image = mpimg.imread(path)
    if image.ndim == 3:
        image = image[..., 0]
    if image.dtype.kind != "f":
        image = image.astype(np.float32) / (65535.0 if image.dtype.itemsize > 1 else 255.0)
    return image.astype(np.float32)


def read_frame_directory(directory: str | Path) -> np.ndarray:
    directory = Path(directory)
    paths = sorted((p for p in directory.iterdir() if p.suffix.lower() in FRAME_SUFFIXES), key=_frame_sort_key)
    if not paths:
        raise DataError(f"目录中没有PNG/PGM帧：{directory}")
    frames = [_read_pgm(p) if p.suffix.lower() == ".pgm" else _read_png(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise DataError(f"帧尺寸不一致：{directory} {sorted(shapes)}")
    return np.stack(frames).astype(np.float32)


def load_ir_sequence(path: str | Path, sample_id: str = "") -> IrSequence:
    """按扩展名自动识别：目录 → 逐帧PNG/PGM；.irraw → 打包文件。"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"IR数据不存在：{path}")
    if path.is_dir():
        frames = read_frame_directory(path)
    elif path.suffix.lower() == PACKED_SUFFIX:
        frames = read_packed(path)
    else:
        raise DataError(f"无法识别的IR数据格式：{path}")
    return IrSequence(frames=frames, sample_id=sample_id or path.stem)
