from __future__ import annotations

import json
import shutil

import numpy as np
import pytest

from src.core.errors import ConfigError, DataError, SkeletonParseError
from src.data.dataset import (
    BatchLoader,
    DataConfig,
    load_prepared,
    make_batches,
    prepare_dataset,
    save_prepared,
    split_identifier,
)
from src.data.manifest import DatasetManifest, scan_ntu_directory
from src.data.ntu_format import SampleMeta, parse_skeleton_file, write_skeleton_file
from src.data.splits import (
    TEST,
    TRAIN,
    VALIDATION,
    assign_splits,
    split_cross_subject,
    split_cross_view,
    validation_size,
    validation_split,
)
from src.data.synthetic import (
    GENERATOR_CONFIG,
    SynthConfig,
    joint_statistics,
    nearest_centroid_accuracy,
    synthesize_sample,
)
from src.infrared.frames_io import load_ir_sequence
from src.infrared.pipeline import compute_crop_box
from src.skeleton.pipeline import compute_extrema
from src.skeleton.sequence import SkeletonSequence

BODY_INFO = "0 1 1 1 1 0 0.1 0.2 2"


def body_lines(body_id: str, joints: np.ndarray, uv: np.ndarray) -> list:
    lines = [f"{body_id} {BODY_INFO}", "25"]
    for (x, y, z), (u, v) in zip(joints, uv):
        lines.append(f"{x} {y} {z} {u} {v} {u * 3.75} {v * 3.75} 1 0 0 0 2")
    return lines


def write_ntu(path, frames) -> None:
    """frames: 每帧一个 [(body_id, joints (25,3), uv (25,2)), ...] 列表。"""
    lines = [str(len(frames))]
    for bodies in frames:
        lines.append(str(len(bodies)))
        for body in bodies:
            lines.extend(body_lines(*body))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def still_body(value: float):
    return np.full((25, 3), value), np.full((25, 2), 10.0 * value)


# ---------------------------------------------------------------- NTU 文本格式

def test_parse_single_body_file(tmp_path):
    joints0, uv0 = still_body(1.0)
    joints1, uv1 = still_body(2.0)
    path = tmp_path / "S001C002P003R001A004.skeleton"
    write_ntu(path, [[("7", joints0, uv0)], [("7", joints1, uv1)]])
    seq = parse_skeleton_file(path)
    assert seq.joints3d.shape == (1, 25, 2, 3)
    assert seq.sample_id == "S001C002P003R001A004"
    np.testing.assert_array_equal(seq.joints3d[0, :, 1], joints1)
    np.testing.assert_array_equal(seq.joints2d[0, :, 0], uv0)
    assert seq.presence.all()


def test_parser_keeps_two_most_moving_bodies(tmp_path):
    frames = []
    for t in range(4):
        frames.append([
            ("still", *still_body(0.5)),
            ("walker", np.full((25, 3), 0.1 * t), np.zeros((25, 2))),
            ("runner", np.full((25, 3), 0.5 * t), np.zeros((25, 2))),
        ])
    path = tmp_path / "S001C001P001R001A050.skeleton"
    write_ntu(path, frames)
    seq = parse_skeleton_file(path)
    assert seq.subject_count == 2
    np.testing.assert_allclose(seq.joints3d[0, 0, :, 0], [0.0, 0.5, 1.0, 1.5])
    np.testing.assert_allclose(seq.joints3d[1, 0, :, 0], [0.0, 0.1, 0.2, 0.3])


def test_parser_marks_untracked_frames(tmp_path):
    a = ("1", *still_body(1.0))
    b = ("2", np.arange(75, dtype=float).reshape(25, 3), np.zeros((25, 2)))
    path = tmp_path / "S001C001P001R001A050.skeleton"
    write_ntu(path, [[a, b], [a], [a, b]])
    seq = parse_skeleton_file(path)
    np.testing.assert_array_equal(seq.presence[1], [True, False, True])
    assert not seq.joints3d[1, :, 1].any()


def test_truncated_file_reports_line_number(tmp_path):
    joints, uv = still_body(1.0)
    lines = ["2", "1"] + body_lines("7", joints, uv) + ["1"] + body_lines("7", joints, uv)[:5]
    path = tmp_path / "S001C001P001R001A001.skeleton"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(SkeletonParseError) as info:
        parse_skeleton_file(path)
    assert info.value.line_number == 36
    assert "36" in str(info.value)


def test_repeated_body_id_within_frame_is_rejected(tmp_path):
    body = ("7", *still_body(1.0))
    path = tmp_path / "S001C001P001R001A001.skeleton"
    write_ntu(path, [[body, body]])
    with pytest.raises(SkeletonParseError, match="重复") as info:
        parse_skeleton_file(path)
    assert info.value.line_number == 30


def test_non_numeric_joint_field_reports_line_number(tmp_path):
    joints, uv = still_body(1.0)
    lines = ["1", "1"] + body_lines("7", joints, uv)
    lines[6] = "0.1 oops 0.3 1 2 3 4 1 0 0 0 2"
    path = tmp_path / "S001C001P001R001A001.skeleton"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(SkeletonParseError) as info:
        parse_skeleton_file(path)
    assert info.value.line_number == 7


def test_wrong_joint_count_is_rejected(tmp_path):
    joints, uv = still_body(1.0)
    lines = ["1", "1"] + body_lines("7", joints, uv)
    lines[3] = "24"
    path = tmp_path / "S001C001P001R001A001.skeleton"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(SkeletonParseError) as info:
        parse_skeleton_file(path)
    assert info.value.line_number == 4


def test_missing_and_empty_files(tmp_path):
    with pytest.raises(DataError, match="不存在"):
        parse_skeleton_file(tmp_path / "nope.skeleton")
    empty = tmp_path / "S001C001P001R001A001.skeleton"
    empty.write_text("0\n", encoding="utf-8")
    with pytest.raises(DataError):
        parse_skeleton_file(empty)


def test_writer_output_parses_back(tmp_path, rng):
    seq = SkeletonSequence(
        joints3d=rng.uniform(-1, 3, size=(2, 25, 5, 3)),
        joints2d=rng.uniform(0, 500, size=(2, 25, 5, 2)),
        sample_id="S001C001P001R001A001",
    )
    seq.presence[1, 3] = False
    path = write_skeleton_file(tmp_path / "S001C001P001R001A001.skeleton", seq)
    parsed = parse_skeleton_file(path)
    assert parsed.subject_count == 2
    # 解析后主体顺序按位移排序，逐一匹配
    order = [0, 1] if np.allclose(parsed.joints3d[0, 0, 0], seq.joints3d[0, 0, 0], atol=1e-5) else [1, 0]
    tracked = seq.presence[order]
    np.testing.assert_array_equal(parsed.presence, tracked)
    by_frame = (0, 2, 1, 3)
    np.testing.assert_allclose(parsed.joints3d.transpose(by_frame)[tracked],
                               seq.joints3d[order].transpose(by_frame)[tracked], atol=1e-5)
    np.testing.assert_allclose(parsed.joints2d.transpose(by_frame)[tracked],
                               seq.joints2d[order].transpose(by_frame)[tracked], atol=1e-5)


def test_sample_meta_decode_and_encode():
    meta = SampleMeta.decode("ntu/S017C003P020R002A060.skeleton")
    assert (meta.setup_id, meta.camera_id, meta.performer_id, meta.replication_id, meta.action_class) == (17, 3, 20, 2, 60)
    assert meta.encode() == "S017C003P020R002A060"
    with pytest.raises(DataError):
        SampleMeta.decode("S17C3P20R2A60")
    with pytest.raises(DataError):
        SampleMeta.decode("S000C001P001R001A001")


# ---------------------------------------------------------------- 划分

def metas(*names):
    return [(n, SampleMeta.decode(n)) for n in names]


def test_cross_view_uses_cameras_two_and_three_for_training():
    samples = metas("S001C001P001R001A001", "S001C002P001R001A001", "S001C003P001R001A001")
    assert split_cross_view(samples) == {
        "S001C001P001R001A001": TEST,
        "S001C002P001R001A001": TRAIN,
        "S001C003P001R001A001": TRAIN,
    }
    with pytest.raises(DataError):
        split_cross_view(metas("S001C004P001R001A001"))


def test_cross_subject_uses_performer_ids():
    samples = metas("S001C001P001R001A001", "S001C001P003R001A001", "S001C002P004R001A002")
    assignment = split_cross_subject(samples, [1, 4])
    assert assignment["S001C001P003R001A001"] == TEST
    assert assignment["S001C001P001R001A001"] == assignment["S001C002P004R001A002"] == TRAIN
    with pytest.raises(ConfigError):
        split_cross_subject(samples, [])


@pytest.mark.parametrize("count, expected", [(100, 5), (10, 1), (9, 0), (40, 2), (1000, 50)])
def test_validation_size_rounds_half_up(count, expected):
    assert validation_size(count, 0.05) == expected


def test_validation_split_is_seeded_and_disjoint():
    ids = [f"S001C002P{p:03d}R001A001" for p in range(1, 41)]
    train, validation = validation_split(ids, 0.1, seed=3)
    assert len(validation) == 4
    assert not set(train) & set(validation)
    assert sorted(train + validation) == sorted(ids)
    assert validation_split(list(reversed(ids)), 0.1, seed=3)[1] == validation
    with pytest.raises(ConfigError):
        validation_split(ids, 0.0)


def test_validation_split_depends_on_seed():
    ids = [f"S001C002P001R{r:03d}A{a:03d}" for r in range(1, 101) for a in range(1, 11)]
    first = validation_split(ids, 0.05, seed=0)[1]
    second = validation_split(ids, 0.05, seed=1)[1]
    assert len(first) == len(second) == 50
    assert first != second
    assert validation_split(ids, 0.05, seed=0)[1] == first


def test_assign_splits_carves_validation_from_training():
    samples = metas(*[f"S001C00{c}P001R{r:03d}A001" for c in (1, 2, 3) for r in range(1, 11)])
    assignment = assign_splits(samples, "cross_view", validation_fraction=0.1, seed=0)
    validation = [s for s, v in assignment.items() if v == VALIDATION]
    assert len(validation) == 2
    assert all(SampleMeta.decode(s).camera_id in (2, 3) for s in validation)
    assert sum(v == TEST for v in assignment.values()) == 10
    with pytest.raises(ConfigError):
        assign_splits(samples, "cross_setup")


# ---------------------------------------------------------------- 合成数据

def test_synthesis_is_deterministic(tiny_synth_config):
    meta = SampleMeta(1, 2, 1, 1, 3)
    seq_a, ir_a = synthesize_sample(meta, tiny_synth_config)
    seq_b, ir_b = synthesize_sample(meta, tiny_synth_config)
    np.testing.assert_array_equal(seq_a.joints3d, seq_b.joints3d)
    np.testing.assert_array_equal(ir_a, ir_b)
    assert seq_a.subject_count == 2
    assert ir_a.shape == (seq_a.frame_count, 80, 96)
    assert 0.0 <= ir_a.min() and ir_a.max() <= 1.0


def test_generated_dataset_layout(tiny_dataset, tiny_synth_config):
    assert len(tiny_dataset.samples) == 24
    assert tiny_dataset.class_names == ["raise_arm", "squat", "approach", "raise_arm_holding"]
    assert tiny_dataset.generator["seed"] == tiny_synth_config.seed
    assert "code_version" in tiny_dataset.generator
    root = tiny_dataset.resolve(".")
    assert (root / GENERATOR_CONFIG).exists()
    reloaded = DatasetManifest.load(root)
    assert [s.sample_id for s in reloaded.samples] == [s.sample_id for s in tiny_dataset.samples]


def test_generated_files_match_synthesized_sample(tiny_dataset, tiny_synth_config):
    entry = tiny_dataset.samples[5]
    seq, ir = synthesize_sample(entry.meta, tiny_synth_config)
    parsed = parse_skeleton_file(tiny_dataset.resolve(entry.skeleton_path))
    np.testing.assert_allclose(parsed.joints3d, seq.joints3d, atol=1e-5)
    loaded = load_ir_sequence(tiny_dataset.resolve(entry.ir_path))
    assert loaded.frame_count == seq.frame_count
    np.testing.assert_allclose(loaded.frames, ir, atol=1.0 / 65535)


def test_crop_box_contains_every_projected_joint(tiny_dataset):
    for entry in tiny_dataset.samples:
        seq = parse_skeleton_file(tiny_dataset.resolve(entry.skeleton_path))
        box = compute_crop_box(seq.joints2d, offset=20, presence=seq.presence)
        points = seq.joints2d.transpose(0, 2, 1, 3)[seq.presence].reshape(-1, 2)
        assert all(box.contains(x, y) for x, y in points)
        assert points[:, 0].min() - box.x_min >= 20
        assert box.x_max - points[:, 0].max() >= 20


def test_synthetic_classes_beat_chance_for_nearest_centroid(tiny_dataset):
    features, labels = [], []
    for entry in tiny_dataset.samples:
        features.append(joint_statistics(parse_skeleton_file(tiny_dataset.resolve(entry.skeleton_path))))
        labels.append(entry.label)
    accuracy = nearest_centroid_accuracy(np.stack(features), labels, np.stack(features), labels)
    assert accuracy > 0.4


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(classes=99)
    with pytest.raises(ValueError):
        SynthConfig(frames_min=30, frames_max=20)


# ---------------------------------------------------------------- 清单

def test_manifest_load_errors(tmp_path):
    with pytest.raises(DataError, match="不存在"):
        DatasetManifest.load(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(DataError, match="JSON"):
        DatasetManifest.load(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"samples": "oops"}), encoding="utf-8")
    with pytest.raises(DataError, match="格式错误"):
        DatasetManifest.load(tmp_path)


def test_manifest_rejects_duplicates_and_unknown_splits():
    sample = {"sample_id": "S001C001P001R001A001", "skeleton_path": "a.skeleton", "label": 0}
    with pytest.raises(ValueError):
        DatasetManifest(samples=[sample, sample])
    with pytest.raises(ValueError):
        DatasetManifest(samples=[sample], splits={"S001C001P001R001A001": "holdout"})


def test_scan_ntu_directory_finds_generated_samples(tiny_dataset):
    scanned = scan_ntu_directory(tiny_dataset.resolve("."))
    assert len(scanned.samples) == 24
    assert all(s.ir_path is not None for s in scanned.samples)
    assert {s.label for s in scanned.samples} == {0, 1, 2, 3}
    with pytest.raises(DataError):
        scanned.entry("S999C001P001R001A001")


# ---------------------------------------------------------------- 预处理与缓存

@pytest.fixture(scope="module")
def prepared(tiny_dataset):
    config = DataConfig(root=str(tiny_dataset.resolve(".")), protocol="cross_view")
    return prepare_dataset(tiny_dataset, config, crop=True, clip_size=32, seed=0)


def test_prepared_splits_and_extrema(prepared):
    assert len(prepared.ids(TRAIN)) + len(prepared.ids(VALIDATION)) == 16
    assert len(prepared.ids(VALIDATION)) == 1
    assert len(prepared.ids(TEST)) == 8
    assert prepared.extrema.train_split_id.startswith("cross_view:seed0:")
    expected = compute_extrema(prepared.samples[s].skeleton for s in prepared.ids(TRAIN))
    assert (prepared.extrema.c_min, prepared.extrema.c_max) == (expected.c_min, expected.c_max)
    sample = prepared.samples[prepared.ids(TEST)[0]]
    assert sample.ir_frames.shape[1:] == (32, 32)
    assert sample.crop_box is not None


def test_prepared_cache_round_trip(prepared, tmp_path):
    save_prepared(prepared, tmp_path / "cache")
    loaded = load_prepared(tmp_path / "cache")
    assert loaded.splits == prepared.splits
    assert (loaded.extrema.c_min, loaded.extrema.c_max) == (prepared.extrema.c_min, prepared.extrema.c_max)
    sid = prepared.ids(TRAIN)[0]
    np.testing.assert_array_equal(loaded.samples[sid].skeleton.joints3d, prepared.samples[sid].skeleton.joints3d)
    np.testing.assert_array_equal(loaded.samples[sid].ir_frames, prepared.samples[sid].ir_frames)
    assert loaded.samples[sid].crop_box == prepared.samples[sid].crop_box
    assert loaded.crop_offset == prepared.crop_offset == 20
    with pytest.raises(DataError):
        load_prepared(tmp_path)


def test_corrupt_sample_is_skipped_or_raised(tiny_dataset, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(tiny_dataset.resolve("."), root)
    manifest = DatasetManifest.load(root)
    victim = manifest.samples[0]
    (root / victim.skeleton_path).write_text("3\n1\n", encoding="utf-8")

    config = DataConfig(root=str(root), protocol="cross_view")
    dataset = prepare_dataset(manifest, config, clip_size=32, need_ir=False)
    assert dataset.skipped == [victim.sample_id]
    assert victim.sample_id not in dataset.samples
    with pytest.raises(SkeletonParseError):
        prepare_dataset(manifest, config.model_copy(update={"skip_corrupt": False}), clip_size=32, need_ir=False)


# ---------------------------------------------------------------- batch

def test_trailing_single_sample_joins_previous_batch():
    assert make_batches(list("abcde"), 2) == [["a", "b"], ["c", "d", "e"]]
    assert make_batches(list("abcd"), 2) == [["a", "b"], ["c", "d"]]
    assert make_batches(["a"], 4) == [["a"]]


def test_batch_loader_shapes_and_order(prepared):
    loader = BatchLoader(prepared, "fusion", clip_length=4, map_size=32, seed=5)
    ids = prepared.ids(TRAIN)
    assert loader.epoch_order(ids, 0) == loader.epoch_order(list(reversed(ids)), 0)
    assert sorted(loader.epoch_order(ids, 1)) == sorted(ids)
    batch = loader.build(ids[:3], epoch=0, training=True)
    assert batch.maps.shape == (3, 3, 32, 32)
    assert batch.clips.shape == (3, 3, 4, 32, 32)
    assert batch.labels.tolist() == prepared.labels(ids[:3]).tolist()


def test_augmentation_does_not_depend_on_batch_composition(prepared):
    loader = BatchLoader(prepared, "fusion", clip_length=4, map_size=32, seed=5)
    a, b, c = prepared.ids(TRAIN)[:3]
    first = loader.build([a, b], epoch=2, training=True)
    second = loader.build([c, a], epoch=2, training=True)
    np.testing.assert_array_equal(first.maps[0], second.maps[1])
    np.testing.assert_array_equal(first.clips[0], second.clips[1])
    assert first.windows[a] == second.windows[a]


def test_prefetching_iterator_matches_direct_build(prepared):
    loader = BatchLoader(prepared, "ir_only", clip_length=4, map_size=32, seed=1, workers=2, prefetch=1)
    batches = make_batches(prepared.ids(TRAIN), 4)
    seen = list(loader.iterate(batches, epoch=0, training=True, start=1))
    assert [index for index, _ in seen] == list(range(1, len(batches)))
    direct = loader.build(batches[1], epoch=0, training=True)
    assert seen[0][1].maps is None
    np.testing.assert_array_equal(seen[0][1].clips, direct.clips)


def test_split_identifier_tracks_every_split_setting(tiny_dataset):
    config = DataConfig(protocol="cross_subject", train_subject_ids=[1, 3])
    base = split_identifier(config, 0, tiny_dataset)
    assert base.startswith("cross_subject:seed0:")
    assert split_identifier(config.model_copy(update={"train_subject_ids": [3, 1]}), 0, tiny_dataset) == base
    variants = [
        split_identifier(config, 1, tiny_dataset),
        split_identifier(config.model_copy(update={"train_subject_ids": [1, 2]}), 0, tiny_dataset),
        split_identifier(config.model_copy(update={"validation_fraction": 0.5}), 0, tiny_dataset),
        split_identifier(config.model_copy(update={"protocol": "cross_view"}), 0, tiny_dataset),
        split_identifier(config, 0, tiny_dataset.model_copy(update={"samples": tiny_dataset.samples[1:]})),
    ]
    assert base not in variants
    assert len(set(variants)) == len(variants)
