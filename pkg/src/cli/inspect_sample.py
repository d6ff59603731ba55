from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from src.data.dataset import BatchLoader, PreparedDataset  # noqa: E402
from src.data.manifest import DatasetManifest  # noqa: E402
from src.data.ntu_format import parse_skeleton_file  # noqa: E402
from src.infrared.frames_io import load_ir_sequence  # noqa: E402
from src.infrared.pipeline import CropBox, compute_crop_box  # noqa: E402
from src.skeleton.pipeline import encode_skeleton_map, resize_map  # noqa: E402

logger = logging.getLogger(__name__)


def save_map_png(pixels: np.ndarray, path: Path) -> Path:
    """(3, H, W) → RGB PNG，行=关节，列=帧。"""
    image = np.clip(np.transpose(pixels, (1, 2, 0)), 0.0, 1.0)
    plt.imsave(path, image)
    return path


def save_crop_overlay(frame: np.ndarray, box: CropBox, joints2d: np.ndarray, path: Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4, 4 * frame.shape[0] / frame.shape[1]))
    ax.imshow(frame, cmap="gray", vmin=0.0, vmax=1.0)
    ax.add_patch(Rectangle((box.x_min, box.y_min), box.width, box.height, fill=False, edgecolor="red", linewidth=1.5))
    if joints2d is not None and joints2d.size:
        ax.scatter(joints2d[..., 0].ravel(), joints2d[..., 1].ravel(), s=4, c="yellow")
    ax.set_xlim(min(0, box.x_min) - 2, max(frame.shape[1], box.x_max) + 2)
    ax.set_ylim(max(frame.shape[0], box.y_max) + 2, min(0, box.y_min) - 2)
    ax.set_title(title, fontsize=8)
    ax.axis("off")
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def inspect_sample(
    manifest: DatasetManifest,
    dataset: PreparedDataset,
    sample_id: str,
    loader: BatchLoader,
    out_dir: str | Path,
    crop_offset: int = 20,
    epoch: int = 0,
) -> Dict[str, Any]:
    """导出单个样本的骨架图、裁剪框叠加帧和窗口采样下标。"""
    entry = manifest.entry(sample_id)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts: Dict[str, Any] = {}

    sample = dataset.samples[sample_id]
    raw_map = encode_skeleton_map(sample.skeleton, dataset.extrema)
    artifacts["map_raw"] = str(save_map_png(raw_map.pixels, out_dir / f"{sample_id}_map_raw.png"))
    artifacts["map"] = str(save_map_png(resize_map(raw_map).pixels, out_dir / f"{sample_id}_map.png"))

    raw = parse_skeleton_file(manifest.resolve(entry.skeleton_path))
    train_windows: List[int] = []
    eval_windows: List[int] = []
    if entry.ir_path is not None and sample.ir_frames is not None:
        _, _, train_windows = loader.sample_inputs(sample_id, epoch, training=True)
        _, _, eval_windows = loader.sample_inputs(sample_id, epoch, training=False)
        ir = load_ir_sequence(manifest.resolve(entry.ir_path), sample_id=sample_id)
        box = compute_crop_box(raw.joints2d, offset=crop_offset, presence=raw.presence)
        overlays = []
        for index in sorted(set(train_windows)):
            frame_index = min(index, ir.frame_count - 1, raw.frame_count - 1)
            path = out_dir / f"{sample_id}_crop_{index:04d}.png"
            save_crop_overlay(ir.frames[frame_index], box, raw.joints2d[:, :, frame_index], path, f"frame {index}")
            overlays.append(str(path))
        artifacts["crop_overlays"] = overlays
        artifacts["crop_box"] = list(box.as_tuple())

    windows = {
        "sample_id": sample_id,
        "epoch": epoch,
        "frame_count": raw.frame_count,
        "clip_length": loader.clip_length,
        "train": train_windows,
        "eval": eval_windows,
        "crop_box": artifacts.get("crop_box"),
    }
    windows_path = out_dir / f"{sample_id}_windows.json"
    windows_path.write_text(json.dumps(windows, indent=2), encoding="utf-8")
    artifacts["windows"] = str(windows_path)
    logger.info("已导出样本 %s 的调试文件到 %s", sample_id, out_dir)
    return artifacts
