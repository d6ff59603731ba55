from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from src.core.errors import DataError
from src.skeleton.pipeline import (
    augment_rotation,
    build_pose_input,
    compute_extrema,
    decode_skeleton_map,
    encode_skeleton_map,
    normalize_sequence,
    resize_map,
    rotate_sequence,
    rotation_matrix,
    sample_rotation_angles,
)
from src.skeleton.sequence import CoordinateExtrema, SkeletonMap, SkeletonSequence


def make_sequence(rng, subjects=1, frames=10, offset=(1.0, 0.5, 3.0), presence=None) -> SkeletonSequence:
    joints = rng.uniform(-0.8, 0.8, size=(subjects, 25, frames, 3)) + np.asarray(offset)
    return SkeletonSequence(joints3d=joints, presence=presence, sample_id="S001C001P001R001A001")


# ---------------------------------------------------------------- 平移归一化

def test_spine_mid_of_first_frame_becomes_origin(rng):
    seq = make_sequence(rng)
    seq.joints3d[0, 1, 0] = [1.0, 0.5, 3.0]
    normalized = normalize_sequence(seq)
    np.testing.assert_array_equal(normalized.joints3d[0, 1, 0], [0.0, 0.0, 0.0])
    np.testing.assert_allclose(normalized.joints3d, seq.joints3d - np.array([1.0, 0.5, 3.0]))


def test_normalization_is_idempotent(rng):
    once = normalize_sequence(make_sequence(rng))
    twice = normalize_sequence(once)
    np.testing.assert_array_equal(once.joints3d, twice.joints3d)


def test_two_subject_distances_preserved(rng):
    seq = make_sequence(rng, subjects=2)
    normalized = normalize_sequence(seq)
    before = pdist(seq.joints3d.reshape(-1, 3))
    after = pdist(normalized.joints3d.reshape(-1, 3))
    np.testing.assert_allclose(before, after, atol=1e-12)


def test_origin_uses_first_tracked_frame(rng):
    presence = np.ones((1, 10), dtype=bool)
    presence[0, :3] = False
    seq = make_sequence(rng, presence=presence)
    normalized = normalize_sequence(seq)
    np.testing.assert_allclose(normalized.joints3d[0, 1, 3], 0.0, atol=1e-15)


def test_normalize_rejects_nan(rng):
    seq = make_sequence(rng)
    seq.joints3d[0, 4, 2, 1] = np.nan
    with pytest.raises(DataError, match="NaN"):
        normalize_sequence(seq)


def test_normalize_rejects_untracked_main_subject(rng):
    with pytest.raises(DataError, match="未被追踪"):
        normalize_sequence(make_sequence(rng, presence=np.zeros((1, 10), dtype=bool)))


# ---------------------------------------------------------------- 坐标极值

def test_extrema_of_single_sequence():
    joints = np.zeros((1, 25, 4, 3))
    joints[0, 3, 1, 0] = -1.0
    joints[0, 7, 2, 2] = 2.0
    extrema = compute_extrema([SkeletonSequence(joints3d=joints)])
    assert (extrema.c_min, extrema.c_max) == (-1.0, 2.0)


def test_extrema_degenerate_and_empty():
    with pytest.raises(DataError):
        compute_extrema([SkeletonSequence(joints3d=np.full((1, 25, 3, 3), 0.5))])
    with pytest.raises(DataError, match="至少需要"):
        compute_extrema([])


def test_extrema_match_exhaustive_scan(rng):
    corpus = [normalize_sequence(make_sequence(rng, subjects=1 + i % 2, frames=5 + i % 7)) for i in range(100)]
    extrema = compute_extrema(corpus)
    everything = np.concatenate([s.joints3d.ravel() for s in corpus])
    assert extrema.c_min == everything.min()
    assert extrema.c_max == everything.max()


def test_extrema_ignore_untracked_frames(rng):
    seq = make_sequence(rng, subjects=2, frames=6)
    seq.presence[1, 2] = False
    seq.joints3d[1, :, 2, :] = 100.0
    assert compute_extrema([seq]).c_max < 100.0


def test_extrema_persist_round_trip(tmp_path):
    extrema = CoordinateExtrema(-1.25, 2.5, train_split_id="cross_subject:seed0")
    path = extrema.save(tmp_path / "extrema.json")
    loaded = CoordinateExtrema.load(path)
    assert (loaded.c_min, loaded.c_max, loaded.train_split_id) == (-1.25, 2.5, "cross_subject:seed0")


# ---------------------------------------------------------------- 编码

def test_encode_endpoints_and_shape():
    joints = np.zeros((1, 25, 3, 3))
    joints[0, 0, 0] = [-1.0, -1.0, -1.0]
    joints[0, 0, 1] = [2.0, 2.0, 2.0]
    skeleton_map = encode_skeleton_map(SkeletonSequence(joints3d=joints), CoordinateExtrema(-1.0, 2.0))
    assert skeleton_map.pixels.shape == (3, 50, 3)
    np.testing.assert_array_equal(skeleton_map.pixels[:, 0, 0], 0.0)
    np.testing.assert_array_equal(skeleton_map.pixels[:, 0, 1], 1.0)


def test_single_subject_lower_rows_are_zero(rng):
    skeleton_map = encode_skeleton_map(make_sequence(rng, offset=(0, 0, 0)), CoordinateExtrema(-1.0, 1.0))
    assert not skeleton_map.pixels[:, 25:, :].any()
    assert skeleton_map.pixels[:, :25, :].any()


def test_out_of_range_coordinates_clamp(rng):
    seq = make_sequence(rng, offset=(0, 0, 0))
    seq.joints3d *= 10.0
    pixels = encode_skeleton_map(seq, CoordinateExtrema(-1.0, 1.0)).pixels
    assert pixels.min() >= 0.0 and pixels.max() <= 1.0
    assert (pixels == 1.0).any() and (pixels[:, :25] == 0.0).any()


def test_decode_recovers_coordinates(rng):
    seq = normalize_sequence(make_sequence(rng, subjects=2))
    extrema = compute_extrema([seq])
    skeleton_map = encode_skeleton_map(seq, extrema)
    np.testing.assert_allclose(decode_skeleton_map(skeleton_map, extrema, subject=0), seq.joints3d[0], atol=1e-6)
    np.testing.assert_allclose(decode_skeleton_map(skeleton_map, extrema, subject=1), seq.joints3d[1], atol=1e-6)


def test_swapping_subjects_swaps_row_blocks(rng):
    seq = normalize_sequence(make_sequence(rng, subjects=2))
    extrema = CoordinateExtrema(-3.0, 3.0)
    original = encode_skeleton_map(seq, extrema).pixels
    swapped = encode_skeleton_map(seq.swap_subjects(), extrema).pixels
    np.testing.assert_array_equal(swapped[:, :25], original[:, 25:])
    np.testing.assert_array_equal(swapped[:, 25:], original[:, :25])


def test_absent_subject_frames_encode_as_zero(rng):
    presence = np.ones((2, 10), dtype=bool)
    presence[1, 6:] = False
    seq = make_sequence(rng, subjects=2, presence=presence, offset=(0, 0, 0))
    pixels = encode_skeleton_map(seq, CoordinateExtrema(-1.0, 1.0)).pixels
    assert not pixels[:, 25:, 6:].any()


# ---------------------------------------------------------------- resize

def test_resize_constant_map_stays_constant():
    skeleton_map = SkeletonMap(pixels=np.full((3, 50, 17), 0.37))
    resized = resize_map(skeleton_map, (224, 224))
    assert resized.pixels.shape == (3, 224, 224)
    np.testing.assert_allclose(resized.pixels, 0.37, atol=1e-12)


def test_resize_identity_when_sizes_match(rng):
    pixels = rng.uniform(0, 1, size=(3, 50, 224))
    np.testing.assert_array_equal(resize_map(SkeletonMap(pixels=pixels), (50, 224)).pixels, pixels)


def test_resize_keeps_linear_ramp():
    ramp = np.tile(np.linspace(0.0, 1.0, 20), (3, 8, 1))
    resized = resize_map(SkeletonMap(pixels=ramp), (16, 40)).pixels
    np.testing.assert_allclose(resized[0, 5], np.linspace(0.0, 1.0, 40), atol=1e-6)


def test_resized_values_stay_in_unit_interval(rng):
    resized = resize_map(SkeletonMap(pixels=rng.uniform(0, 1, size=(3, 50, 31))), (224, 224)).pixels
    assert resized.min() >= 0.0 and resized.max() <= 1.0


# ---------------------------------------------------------------- 旋转增强

def test_zero_angles_give_identity():
    np.testing.assert_allclose(rotation_matrix([0.0, 0.0, 0.0]), np.eye(3), atol=1e-15)


def test_rotation_about_z_closed_form():
    point = rotation_matrix([0.0, 0.0, 20.0]) @ np.array([1.0, 0.0, 0.0])
    np.testing.assert_allclose(point, [np.cos(np.radians(20)), np.sin(np.radians(20)), 0.0], atol=1e-12)
    np.testing.assert_allclose(point, [0.9397, 0.3420, 0.0], atol=1e-4)


def test_rotation_order_is_z_after_y_after_x():
    rx = rotation_matrix([10.0, 0.0, 0.0])
    ry = rotation_matrix([0.0, 15.0, 0.0])
    rz = rotation_matrix([0.0, 0.0, -5.0])
    np.testing.assert_allclose(rotation_matrix([10.0, 15.0, -5.0]), rz @ ry @ rx, atol=1e-12)


def test_augmented_rotation_preserves_distances(rng):
    seq = normalize_sequence(make_sequence(rng, subjects=2))
    rotated = augment_rotation(seq, np.random.default_rng(5))
    before = pdist(seq.joints3d.reshape(-1, 3))
    after = pdist(rotated.joints3d.reshape(-1, 3))
    np.testing.assert_allclose(after, before, rtol=1e-9)


def test_one_rotation_per_sequence(rng):
    seq = normalize_sequence(make_sequence(rng, subjects=2, frames=6))
    rotated = augment_rotation(seq, np.random.default_rng(11))
    # 同一个矩阵作用于所有帧和主体：用第一帧解出的矩阵能复现全部坐标
    source = seq.joints3d.reshape(-1, 3)
    target = rotated.joints3d.reshape(-1, 3)
    matrix, *_ = np.linalg.lstsq(source, target, rcond=None)
    np.testing.assert_allclose(source @ matrix, target, atol=1e-9)


def test_rotation_angles_stay_within_twenty_degrees():
    angles = np.stack([sample_rotation_angles(np.random.default_rng(i)) for i in range(500)])
    assert np.abs(angles).max() <= 20.0


def test_pose_input_is_deterministic_under_seed(rng):
    seq = normalize_sequence(make_sequence(rng, subjects=2))
    extrema = CoordinateExtrema(-3.0, 3.0)
    first = build_pose_input(seq, extrema, np.random.default_rng(3), augment=True, target=(64, 64))
    second = build_pose_input(seq, extrema, np.random.default_rng(3), augment=True, target=(64, 64))
    assert first.shape == (3, 64, 64) and first.dtype == np.float32
    np.testing.assert_array_equal(first, second)
    plain = build_pose_input(seq, extrema, None, augment=False, target=(64, 64))
    identity = resize_map(encode_skeleton_map(rotate_sequence(seq, np.eye(3)), extrema), (64, 64)).pixels
    np.testing.assert_array_equal(plain, identity.astype(np.float32))
