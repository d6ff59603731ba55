from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Literal, Sequence, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src import __version__
from src.core.errors import DataError
from src.data.manifest import DatasetManifest, SampleEntry
from src.data.ntu_format import SampleMeta, write_skeleton_file
from src.infrared.frames_io import write_packed, write_pgm
from src.skeleton.pipeline import normalize_sequence
from src.skeleton.sequence import NUM_JOINTS, SkeletonSequence
from src.utils.seeding import derive_rng

logger = logging.getLogger(__name__)

GENERATOR_CONFIG = "generator.yaml"

# Kinect v2 关节顺序
(SPINE_BASE, SPINE_MID, NECK, HEAD, SHOULDER_L, ELBOW_L, WRIST_L, HAND_L, SHOULDER_R, ELBOW_R, WRIST_R, HAND_R,
 HIP_L, KNEE_L, ANKLE_L, FOOT_L, HIP_R, KNEE_R, ANKLE_R, FOOT_R, SPINE_SHOULDER, HANDTIP_L, THUMB_L,
 HANDTIP_R, THUMB_R) = range(NUM_JOINTS)

BONES = (
    (SPINE_BASE, SPINE_MID), (SPINE_MID, SPINE_SHOULDER), (SPINE_SHOULDER, NECK), (NECK, HEAD),
    (SPINE_SHOULDER, SHOULDER_L), (SHOULDER_L, ELBOW_L), (ELBOW_L, WRIST_L), (WRIST_L, HAND_L),
    (HAND_L, HANDTIP_L), (WRIST_L, THUMB_L),
    (SPINE_SHOULDER, SHOULDER_R), (SHOULDER_R, ELBOW_R), (ELBOW_R, WRIST_R), (WRIST_R, HAND_R),
    (HAND_R, HANDTIP_R), (WRIST_R, THUMB_R),
    (SPINE_BASE, HIP_L), (HIP_L, KNEE_L), (KNEE_L, ANKLE_L), (ANKLE_L, FOOT_L),
    (SPINE_BASE, HIP_R), (HIP_R, KNEE_R), (KNEE_R, ANKLE_R), (ANKLE_R, FOOT_R),
)

# 身体局部坐标：y 向上，x 指向主体左侧，-z 为面朝相机的前方（米）
TORSO = {
    SPINE_BASE: (0.0, 0.0, 0.0),
    SPINE_MID: (0.0, 0.28, 0.0),
    SPINE_SHOULDER: (0.0, 0.50, 0.0),
    NECK: (0.0, 0.56, 0.0),
    HEAD: (0.0, 0.72, 0.0),
    SHOULDER_L: (0.18, 0.47, 0.0),
    SHOULDER_R: (-0.18, 0.47, 0.0),
    HIP_L: (0.09, -0.02, 0.0),
    HIP_R: (-0.09, -0.02, 0.0),
}
UPPER_ARM, FOREARM, HAND, HANDTIP, THUMB = 0.28, 0.26, 0.08, 0.06, 0.05
THIGH, SHIN, FOOT = 0.42, 0.42, 0.12
FORWARD = np.array([0.0, 0.0, -1.0])
UP = np.array([0.0, 1.0, 0.0])
CAMERA_YAW = {1: -45.0, 2: 0.0, 3: 45.0}


class SynthConfig(BaseModel):
    """合成数据集的生成配置。"""

    model_config = ConfigDict(extra="forbid")

    classes: int = Field(default=4, ge=2, description="类别数（取动作目录的前N项）")
    per_class: int = Field(default=32, ge=1, description="每类样本数")
    seed: int = Field(default=0, description="生成种子")
    performers: int = Field(default=8, ge=1, le=40, description="演员数（体型各不相同）")
    frames_min: int = Field(default=24, ge=2, description="最短帧数")
    frames_max: int = Field(default=40, ge=2, description="最长帧数")
    image_width: int = Field(default=160, ge=32, description="IR原生宽度")
    image_height: int = Field(default=128, ge=32, description="IR原生高度")
    focal: float = Field(default=120.0, gt=0, description="针孔焦距（像素）")
    noise_sigma: float = Field(default=0.02, ge=0.0, description="IR加性高斯噪声标准差")
    ir_format: Literal["irraw", "pgm"] = Field(default="irraw", description="IR写出格式")
    workers: int = Field(default=1, ge=1, description="并行生成线程数")

    @model_validator(mode="after")
    def _check(self) -> "SynthConfig":
        if self.classes > len(ACTION_CATALOG):
            raise ValueError(f"最多支持{len(ACTION_CATALOG)}个合成类别，实际为{self.classes}")
        if self.frames_min > self.frames_max:
            raise ValueError("frames_min 不能大于 frames_max")
        return self

    @property
    def projection(self) -> Dict[str, float]:
        return {
            "fx": self.focal, "fy": self.focal,
            "cx": self.image_width / 2.0, "cy": self.image_height / 2.0,
            "width": float(self.image_width), "height": float(self.image_height),
        }


# ---------------------------------------------------------------- 骨架运动学

@dataclass
class Pose:
    """一帧的关节角（度）与根节点偏移。"""

    root: np.ndarray
    arm_l: Tuple[float, float, float] = (8.0, 0.0, 10.0)
    arm_r: Tuple[float, float, float] = (8.0, 0.0, 10.0)
    leg_l: Tuple[float, float] = (0.0, 0.0)
    leg_r: Tuple[float, float] = (0.0, 0.0)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _bend_axis(direction: np.ndarray) -> np.ndarray:
    axis = FORWARD - direction * float(FORWARD @ direction)
    if np.linalg.norm(axis) < 1e-6:
        axis = UP - direction * float(UP @ direction)
    return _unit(axis)


def _arm(joints: np.ndarray, shoulder: int, side: float, angles: Tuple[float, float, float], chain: Tuple[int, ...]) -> None:
    abduction, flexion, elbow = np.radians(angles)
    lateral = np.array([side * np.sin(abduction), -np.cos(abduction), 0.0])
    upper = _unit(np.cos(flexion) * lateral + np.sin(flexion) * FORWARD)
    fore = _unit(np.cos(elbow) * upper + np.sin(elbow) * _bend_axis(upper))
    elbow_j, wrist_j, hand_j, tip_j, thumb_j = chain
    joints[elbow_j] = joints[shoulder] + UPPER_ARM * upper
    joints[wrist_j] = joints[elbow_j] + FOREARM * fore
    joints[hand_j] = joints[wrist_j] + HAND * fore
    joints[tip_j] = joints[hand_j] + HANDTIP * fore
    joints[thumb_j] = joints[wrist_j] + THUMB * _unit(fore + 0.8 * _bend_axis(fore))


def _leg(joints: np.ndarray, hip: int, angles: Tuple[float, float], chain: Tuple[int, int, int]) -> None:
    flexion, knee = np.radians(angles)
    thigh = np.array([0.0, -np.cos(flexion), -np.sin(flexion)])
    shin = np.array([0.0, -np.cos(flexion - knee), -np.sin(flexion - knee)])
    knee_j, ankle_j, foot_j = chain
    joints[knee_j] = joints[hip] + THIGH * thigh
    joints[ankle_j] = joints[knee_j] + SHIN * shin
    joints[foot_j] = joints[ankle_j] + FOOT * FORWARD


def armature(pose: Pose, scale: float) -> np.ndarray:
    """由关节角求出 25 个关节的局部坐标 (J, 3)。"""
    joints = np.zeros((NUM_JOINTS, 3))
    for index, position in TORSO.items():
        joints[index] = position
    _arm(joints, SHOULDER_L, 1.0, pose.arm_l, (ELBOW_L, WRIST_L, HAND_L, HANDTIP_L, THUMB_L))
    _arm(joints, SHOULDER_R, -1.0, pose.arm_r, (ELBOW_R, WRIST_R, HAND_R, HANDTIP_R, THUMB_R))
    _leg(joints, HIP_L, pose.leg_l, (KNEE_L, ANKLE_L, FOOT_L))
    _leg(joints, HIP_R, pose.leg_r, (KNEE_R, ANKLE_R, FOOT_R))
    return joints * scale + pose.root


# ---------------------------------------------------------------- 动作目录

def _smoothstep(p: float) -> float:
    return p * p * (3.0 - 2.0 * p)


def _raise_arm(p: float, style: Dict[str, float], subject: int) -> Pose:
    return Pose(root=np.zeros(3), arm_r=(style["amplitude"] * 160.0 * _smoothstep(p), 5.0, 10.0))


def _squat(p: float, style: Dict[str, float], subject: int) -> Pose:
    theta = style["amplitude"] * 70.0 * np.sin(np.pi * p)
    drop = 2 * THIGH * (1.0 - np.cos(np.radians(theta)))
    arms = (15.0, theta, 10.0)
    return Pose(root=np.array([0.0, -drop, 0.0]), arm_l=arms, arm_r=arms, leg_l=(theta, 2 * theta), leg_r=(theta, 2 * theta))


def _wave(p: float, style: Dict[str, float], subject: int) -> Pose:
    elbow = 45.0 + 35.0 * np.sin(2 * np.pi * style["frequency"] * p)
    return Pose(root=np.zeros(3), arm_r=(140.0, 10.0, elbow))


def _approach(p: float, style: Dict[str, float], subject: int) -> Pose:
    side = 1.0 if subject == 0 else -1.0
    x = side * (0.9 - 0.55 * style["amplitude"] * p)
    swing = 25.0 * np.sin(2 * np.pi * style["frequency"] * p + subject * np.pi)
    return Pose(
        root=np.array([x, 0.0, 0.0]),
        arm_l=(8.0, -swing, 10.0), arm_r=(8.0, swing, 10.0),
        leg_l=(swing, 5.0), leg_r=(-swing, 5.0),
    )


def _kick(p: float, style: Dict[str, float], subject: int) -> Pose:
    flexion = style["amplitude"] * 75.0 * np.sin(np.pi * p) ** 2
    return Pose(root=np.zeros(3), arm_l=(30.0, 0.0, 20.0), arm_r=(30.0, 0.0, 20.0), leg_r=(flexion, 10.0))


def _clap(p: float, style: Dict[str, float], subject: int) -> Pose:
    spread = 10.0 + 30.0 * (0.5 + 0.5 * np.cos(2 * np.pi * style["frequency"] * p))
    return Pose(root=np.zeros(3), arm_l=(spread, 75.0, 30.0), arm_r=(spread, 75.0, 30.0))


@dataclass(frozen=True)
class ActionSpec:
    name: str
    motion: Callable[[float, Dict[str, float], int], Pose]
    subjects: int = 1
    held_object: bool = False


# 成对的“持物”类别与原类别骨架运动完全相同，只在IR中可见差异
ACTION_CATALOG: Tuple[ActionSpec, ...] = (
    ActionSpec("raise_arm", _raise_arm),
    ActionSpec("squat", _squat),
    ActionSpec("approach", _approach, subjects=2),
    ActionSpec("raise_arm_holding", _raise_arm, held_object=True),
    ActionSpec("wave", _wave),
    ActionSpec("wave_holding", _wave, held_object=True),
    ActionSpec("kick", _kick),
    ActionSpec("clap", _clap),
)


# ---------------------------------------------------------------- 相机与渲染

def yaw_matrix(degrees: float) -> np.ndarray:
    angle = np.radians(degrees)
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def project(points: np.ndarray, projection: Dict[str, float]) -> np.ndarray:
    """相机坐标 (..., 3) → 像素坐标 (..., 2)，u 向右，v 向下。"""
    z = points[..., 2]
    u = projection["cx"] + projection["fx"] * points[..., 0] / z
    v = projection["cy"] - projection["fy"] * points[..., 1] / z
    return np.stack([u, v], axis=-1)


def draw_segment(canvas: np.ndarray, a: np.ndarray, b: np.ndarray, thickness: float, intensity: float) -> None:
    """抗锯齿线段：像素覆盖率 = clip(r + 0.5 − 距离, 0, 1)，只在线段包围盒内计算。"""
    height, width = canvas.shape
    radius = thickness / 2.0
    pad = radius + 1.0
    x0 = max(int(np.floor(min(a[0], b[0]) - pad)), 0)
    x1 = min(int(np.ceil(max(a[0], b[0]) + pad)) + 1, width)
    y0 = max(int(np.floor(min(a[1], b[1]) - pad)), 0)
    y1 = min(int(np.ceil(max(a[1], b[1]) + pad)) + 1, height)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    d = b - a
    length_sq = float(d @ d)
    if length_sq < 1e-12:
        t = np.zeros_like(xs)
    else:
        t = np.clip(((xs - a[0]) * d[0] + (ys - a[1]) * d[1]) / length_sq, 0.0, 1.0)
    dist = np.hypot(xs - (a[0] + t * d[0]), ys - (a[1] + t * d[1]))
    coverage = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    region = canvas[y0:y1, x0:x1]
    np.maximum(region, coverage * intensity, out=region)


def render_frame(
    subjects_cam: Sequence[np.ndarray],
    projection: Dict[str, float],
    held_object: Sequence[bool],
    rng: np.random.Generator,
    noise_sigma: float,
) -> np.ndarray:
    height, width = int(projection["height"]), int(projection["width"])
    rows = np.linspace(0.10, 0.18, height)[:, None]
    canvas = np.broadcast_to(rows, (height, width)).copy()
    focal = projection["fx"]
    for index, joints in enumerate(subjects_cam):
        pixels = project(joints, projection)
        depth = float(joints[SPINE_MID, 2])
        intensity = 0.75 - 0.1 * index
        for start, end in BONES:
            draw_segment(canvas, pixels[start], pixels[end], focal * 0.07 / depth, intensity)
        draw_segment(canvas, pixels[HEAD], pixels[HEAD], focal * 0.2 / depth, intensity)
        if held_object[index]:
            # 手中的棒状物体：沿前臂方向伸出 0.25 米，比身体更亮
            direction = _unit(joints[HAND_R] - joints[WRIST_R])
            tip = project(joints[HAND_R] + 0.25 * direction, projection)
            draw_segment(canvas, pixels[HAND_R], tip, focal * 0.05 / depth, 1.0)
    if noise_sigma > 0:
        canvas = canvas + rng.normal(0.0, noise_sigma, size=canvas.shape)
    return np.clip(canvas, 0.0, 1.0)


# ---------------------------------------------------------------- 样本生成

def performer_scale(seed: int, performer_id: int) -> float:
    return float(derive_rng(seed, "performer", performer_id).uniform(0.85, 1.15))


def sample_plan(config: SynthConfig) -> List[SampleMeta]:
    """每类 per_class 个样本：依次轮换相机，再轮换演员，最后增加重复编号。"""
    plan = []
    for label in range(config.classes):
        for k in range(config.per_class):
            camera = k % 3 + 1
            performer = (k // 3) % config.performers + 1
            replication = k // (3 * config.performers) + 1
            plan.append(SampleMeta(1, camera, performer, replication, label + 1))
    return plan


def synthesize_sample(meta: SampleMeta, config: SynthConfig) -> Tuple[SkeletonSequence, np.ndarray]:
    """返回 (骨架序列, IR帧 (F, H, W) ∈ [0,1])。同样的 (seed, 样本名) 永远得到同样的结果。"""
    action = ACTION_CATALOG[meta.action_class - 1]
    rng = derive_rng(config.seed, "synth", meta.encode())
    projection = config.projection
    frames = int(rng.integers(config.frames_min, config.frames_max + 1))
    scale = performer_scale(config.seed, meta.performer_id)
    style = {"amplitude": float(rng.uniform(0.85, 1.0)), "frequency": float(rng.uniform(1.5, 2.5))}
    rotation = yaw_matrix(CAMERA_YAW[meta.camera_id])
    placement = np.array([rng.uniform(-0.2, 0.2), -0.1, rng.uniform(3.0, 3.4)])

    joints3d = np.zeros((action.subjects, NUM_JOINTS, frames, 3))
    for t in range(frames):
        p = t / (frames - 1)
        for subject in range(action.subjects):
            local = armature(action.motion(p, style, subject), scale)
            local = local + rng.normal(0.0, 0.003, size=local.shape)
            joints3d[subject, :, t] = local @ rotation.T + placement
    joints2d = project(joints3d, projection)

    held = [action.held_object and subject == 0 for subject in range(action.subjects)]
    ir = np.stack([
        render_frame([joints3d[m, :, t] for m in range(action.subjects)], projection, held, rng, config.noise_sigma)
        for t in range(frames)
    ]).astype(np.float32)
    seq = SkeletonSequence(joints3d=joints3d, joints2d=joints2d, sample_id=meta.encode())
    return seq, ir


def _write_sample(meta: SampleMeta, config: SynthConfig, out_dir: Path) -> SampleEntry:
    seq, ir = synthesize_sample(meta, config)
    name = meta.encode()
    skeleton_rel = Path("skeletons") / f"{name}.skeleton"
    write_skeleton_file(out_dir / skeleton_rel, seq, body_ids=[f"{72057594037930000 + 10 * meta.performer_id + m}"
                                                              for m in range(seq.subject_count)])
    if config.ir_format == "irraw":
        ir_rel = Path("ir") / f"{name}.irraw"
        write_packed(out_dir / ir_rel, ir, bits=16)
    else:
        ir_rel = Path("ir") / name
        (out_dir / ir_rel).mkdir(parents=True, exist_ok=True)
        for index, frame in enumerate(ir):
            write_pgm(out_dir / ir_rel / f"frame_{index:04d}.pgm", frame)
    return SampleEntry(sample_id=name, skeleton_path=skeleton_rel.as_posix(), ir_path=ir_rel.as_posix(),
                       label=meta.action_class - 1)


def generate_synthetic_dataset(config: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """生成 NTU 兼容格式的合成数据集并写出 manifest.json。"""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "skeletons").mkdir(exist_ok=True)
        (out_dir / "ir").mkdir(exist_ok=True)
    except OSError as exc:
        raise DataError(f"无法写入输出目录 {out_dir}：{exc}") from exc

    plan = sample_plan(config)
    logger.info("生成合成数据集：%d 类 × %d 个样本 → %s", config.classes, config.per_class, out_dir)
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        entries = list(pool.map(lambda meta: _write_sample(meta, config, out_dir), plan))

    manifest = DatasetManifest(
        name=out_dir.name,
        class_names=[a.name for a in ACTION_CATALOG[:config.classes]],
        projection=config.projection,
        generator={**config.model_dump(mode="json"), "code_version": __version__},
        samples=entries,
    )
    manifest.save(out_dir)
    (out_dir / GENERATOR_CONFIG).write_text(yaml.safe_dump(manifest.generator, sort_keys=True), encoding="utf-8")
    manifest.root = str(out_dir)
    return manifest


# ---------------------------------------------------------------- 可分性基线

def joint_statistics(seq: SkeletonSequence) -> np.ndarray:
    """归一化后主主体每个关节坐标的时间均值与标准差，加上主体数。"""
    normalized = normalize_sequence(seq)
    main = normalized.joints3d[0][:, normalized.presence[0], :]
    return np.concatenate([main.mean(axis=1).ravel(), main.std(axis=1).ravel(), [float(seq.subject_count)]])


def nearest_centroid_accuracy(
    train_features: np.ndarray,
    train_labels: Sequence[int],
    test_features: np.ndarray,
    test_labels: Sequence[int],
) -> float:
    train_features = np.asarray(train_features, dtype=np.float64)
    test_features = np.asarray(test_features, dtype=np.float64)
    train_labels = np.asarray(train_labels)
    classes = np.unique(train_labels)
    centroids = np.stack([train_features[train_labels == c].mean(axis=0) for c in classes])
    distances = np.linalg.norm(test_features[:, None, :] - centroids[None, :, :], axis=-1)
    predicted = classes[distances.argmin(axis=1)]
    return float((predicted == np.asarray(test_labels)).mean())

