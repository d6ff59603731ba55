from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from src.core.errors import CheckpointError

ARCHIVE_FORMAT = "fusion-tensor-archive"
ARCHIVE_VERSION = 1
_FIXED_TIMESTAMP = (1980, 1, 1, 0, 0, 0)


def _write_entry(archive: zipfile.ZipFile, name: str, payload: bytes) -> None:
    # 固定时间戳，保证同样内容得到逐字节一致的归档
    info = zipfile.ZipInfo(name, date_time=_FIXED_TIMESTAMP)
    info.compress_type = zipfile.ZIP_STORED
    archive.writestr(info, payload)


def save_archive(path: str | Path, arrays: Dict[str, np.ndarray], metadata: Dict[str, Any] | None = None) -> Path:
    """扁平归档：manifest.json 记录 名称→形状/dtype/文件，张量以小端原始字节存放。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest: Dict[str, Any] = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "tensors": {},
        "metadata": metadata or {},
    }
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp_path, "w") as archive:
        for index, name in enumerate(sorted(arrays)):
            array = np.asarray(arrays[name])
            if array.dtype.kind == "f":
                dtype = np.dtype(array.dtype).newbyteorder("<")
            elif array.dtype.kind in "iub":
                dtype = np.dtype("<i8")
            else:
                raise CheckpointError(f"不支持的张量类型 {name}: {array.dtype}")
            entry = f"tensors/{index:05d}.bin"
            manifest["tensors"][name] = {
                "shape": list(array.shape),
                "dtype": dtype.str,
                "file": entry,
            }
            _write_entry(archive, entry, np.ascontiguousarray(array, dtype=dtype).tobytes())
        _write_entry(archive, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))
    tmp_path.replace(path)
    return path


def load_archive(path: str | Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"归档不存在：{path}")
    try:
        with zipfile.ZipFile(path, "r") as archive:
            names = set(archive.namelist())
            if "manifest.json" not in names:
                raise CheckpointError(f"归档缺少 manifest.json：{path}")
            manifest = json.loads(archive.read("manifest.json").decode("utf-8"))
            if manifest.get("format") != ARCHIVE_FORMAT:
                raise CheckpointError(f"未知归档格式 {manifest.get('format')!r}：{path}")

            arrays: Dict[str, np.ndarray] = {}
            missing, corrupt = [], []
            for name, entry in manifest["tensors"].items():
                if entry["file"] not in names:
                    missing.append(name)
                    continue
                dtype = np.dtype(entry["dtype"])
                shape = tuple(entry["shape"])
                payload = archive.read(entry["file"])
                expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
                if len(payload) != expected:
                    corrupt.append(f"{name}: {len(payload)} bytes != {expected}")
                    continue
                arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    except (zipfile.BadZipFile, zipfile.LargeZipFile, json.JSONDecodeError, KeyError, OSError) as exc:
        raise CheckpointError(f"归档损坏：{path}（{exc}）") from exc

    if missing or corrupt:
        raise CheckpointError(f"归档内容与manifest不一致：{path}", missing=missing, mismatched=corrupt)
    return arrays, manifest.get("metadata", {})


def save_weights(path: str | Path, module, metadata: Dict[str, Any] | None = None) -> Path:
    return save_archive(path, module.state_dict(), metadata)


def load_weights(path: str | Path, module, strict: bool = True) -> Dict[str, Any]:
    """通用权重导入接口。strict=False 用于部分导入（例如只导入某个backbone），返回缺失/多余名称。"""
    arrays, metadata = load_archive(path)
    diff = module.load_state_dict(arrays, strict=strict)
    return {"metadata": metadata, **diff}
