from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def derive_seed_sequence(root_seed: int, *keys) -> np.random.SeedSequence:
    """根种子 → 模块 → 样本 的分层派生。同样的键序列永远得到同样的随机流。"""
    entropy = [int(root_seed) & 0xFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.SeedSequence(entropy)


def derive_rng(root_seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(root_seed, *keys))
