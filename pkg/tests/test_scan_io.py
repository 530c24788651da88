"""Leitura/escrita de scans KITTI e mapas de rótulos."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import random_scan
from data.errors import ConfigError, DimensionError, LabelMappingError, ScanFormatError, ScanIOError
from data.registry import RegistryEntry
from data.scan_io import (
    IGNORE,
    IGNORE_WORD,
    NUM_CLASSES,
    LabelMap,
    PointScan,
    attach_ambient,
    dropped_point_count,
    ensure_ambient,
    label_path_for,
    load_scan,
    remap_labels,
    reset_dropped_point_count,
    save_scan,
    target_id,
)


def entry(*, ambient: bool = False, label_map: LabelMap | None = None, dataset_id: int = 0) -> RegistryEntry:
    return RegistryEntry(
        name="teste",
        dataset_id=dataset_id,
        has_ambient=ambient,
        label_map=label_map or LabelMap.identity(),
    )


def as_float32(values: np.ndarray) -> np.ndarray:
    return values.astype(np.float32).astype(np.float64)


@pytest.mark.parametrize("ambient", [False, True])
def test_save_then_load_preserves_scan(tmp_path, rng, ambient):
    scan = random_scan(rng, 40, ambient=ambient, dataset_id=2)
    bin_path = tmp_path / "velodyne" / "000001.bin"
    save_scan(scan, bin_path, label_path_for(bin_path))

    loaded = load_scan(bin_path, label_path_for(bin_path), entry(ambient=ambient, dataset_id=2))
    np.testing.assert_array_equal(loaded.xyz, as_float32(scan.xyz))
    np.testing.assert_array_equal(loaded.intensity, as_float32(scan.intensity))
    np.testing.assert_array_equal(loaded.labels, scan.labels)
    assert loaded.dataset_id == 2
    if ambient:
        np.testing.assert_array_equal(loaded.ambient, as_float32(scan.ambient))
    else:
        assert loaded.ambient is None


def test_label_words_on_disk(tmp_path, rng):
    scan = random_scan(rng, 10, ignore_fraction=0.5)
    bin_path = tmp_path / "velodyne" / "000000.bin"
    save_scan(scan, bin_path, label_path_for(bin_path))
    words = np.frombuffer(label_path_for(bin_path).read_bytes(), dtype="<u4")
    np.testing.assert_array_equal(words, np.where(scan.labels == IGNORE, IGNORE_WORD, scan.labels))
    assert bin_path.stat().st_size == 10 * 4 * 4


def test_instance_bits_are_ignored(tmp_path):
    bin_path = tmp_path / "velodyne" / "000000.bin"
    bin_path.parent.mkdir(parents=True)
    np.zeros((2, 4), dtype="<f4").tofile(bin_path)
    label_path = label_path_for(bin_path)
    label_path.parent.mkdir(parents=True)
    np.array([(7 << 16) | 3, (1 << 16) | 0], dtype="<u4").tofile(label_path)
    scan = load_scan(bin_path, label_path, entry())
    np.testing.assert_array_equal(scan.labels, [3, 0])


def test_missing_label_file_means_unlabeled(tmp_path, rng):
    bin_path = tmp_path / "velodyne" / "000000.bin"
    save_scan(random_scan(rng, 8), bin_path, None)
    scan = load_scan(bin_path, label_path_for(bin_path), entry())
    assert np.all(scan.labels == IGNORE)
    assert not scan.is_labeled


def test_truncated_point_file(tmp_path):
    bin_path = tmp_path / "000000.bin"
    bin_path.write_bytes(b"\x00" * 18)
    with pytest.raises(ScanFormatError) as info:
        load_scan(bin_path, None, entry())
    assert info.value.expected_bytes == 32
    assert info.value.actual_bytes == 18


def test_four_channel_file_read_as_five_channels_fails(tmp_path):
    bin_path = tmp_path / "000000.bin"
    np.zeros((3, 4), dtype="<f4").tofile(bin_path)
    with pytest.raises(ScanFormatError):
        load_scan(bin_path, None, entry(ambient=True))


def test_label_count_mismatch(tmp_path):
    bin_path = tmp_path / "velodyne" / "000000.bin"
    bin_path.parent.mkdir(parents=True)
    np.zeros((3, 4), dtype="<f4").tofile(bin_path)
    label_path = label_path_for(bin_path)
    label_path.parent.mkdir(parents=True)
    np.zeros(2, dtype="<u4").tofile(label_path)
    with pytest.raises(ScanFormatError):
        load_scan(bin_path, label_path, entry())


def test_unreadable_file_raises_io_error(tmp_path):
    with pytest.raises(ScanIOError):
        load_scan(tmp_path / "nao_existe.bin", None, entry())


def test_non_finite_points_are_dropped(tmp_path):
    bin_path = tmp_path / "velodyne" / "000000.bin"
    bin_path.parent.mkdir(parents=True)
    points = np.array([[1, 2, 3, 0.5], [np.nan, 0, 0, 0.1], [4, 5, 6, 0.2]], dtype="<f4")
    points.tofile(bin_path)
    reset_dropped_point_count()
    scan = load_scan(bin_path, None, entry())
    assert scan.num_points == 2
    assert dropped_point_count() == 1


def test_unmapped_source_class(tmp_path):
    bin_path = tmp_path / "velodyne" / "000000.bin"
    bin_path.parent.mkdir(parents=True)
    np.zeros((1, 4), dtype="<f4").tofile(bin_path)
    label_path = label_path_for(bin_path)
    label_path.parent.mkdir(parents=True)
    np.array([42], dtype="<u4").tofile(label_path)
    with pytest.raises(LabelMappingError) as info:
        load_scan(bin_path, label_path, entry())
    assert info.value.class_id == 42


def test_builtin_maps_are_total_over_their_sources():
    kitti = LabelMap.builtin("semantic_kitti")
    mapped = remap_labels(np.array(sorted(kitti.source_to_target)), kitti)
    assert np.all((mapped == IGNORE) | ((mapped >= 0) & (mapped < NUM_CLASSES)))
    with pytest.raises(ConfigError):
        LabelMap.builtin("nao_existe")


def test_label_map_from_dict_formats():
    by_rows = LabelMap.from_dict({"classes": [{"id": 10, "target": "vehicle"}, {"id": 0, "target": "ignore"}]})
    by_table = LabelMap.from_dict({"table": {"10": "vehicle", "0": "ignore"}})
    np.testing.assert_array_equal(by_rows.remap(np.array([10, 0])), [4, IGNORE])
    np.testing.assert_array_equal(by_table.remap(np.array([10, 0])), [4, IGNORE])
    with pytest.raises(ConfigError):
        LabelMap.from_dict({"nada": []})
    with pytest.raises(ConfigError):
        target_id("bicicleta")


def test_point_scan_validation():
    with pytest.raises(DimensionError):
        PointScan(xyz=np.zeros((3, 3)), intensity=np.zeros(2), ambient=None, labels=np.zeros(3))
    with pytest.raises(LabelMappingError):
        PointScan(xyz=np.zeros((1, 3)), intensity=np.zeros(1), ambient=None, labels=np.array([9]))


def test_ambient_helpers(rng):
    scan = random_scan(rng, 5)
    filled = ensure_ambient(scan)
    np.testing.assert_array_equal(filled.ambient, np.zeros(5))
    assert scan.ambient is None
    with pytest.raises(DimensionError):
        attach_ambient(scan, [1.0, 2.0])


def test_attach_ambient_installs_zeros_for_sensors_without_the_channel(rng):
    scan = random_scan(rng, 6)
    values = rng.uniform(0.5, 1.0, size=6)
    np.testing.assert_array_equal(attach_ambient(scan, values, entry=entry(ambient=True)).ambient, values)
    np.testing.assert_array_equal(attach_ambient(scan, values, entry=entry(ambient=False)).ambient, np.zeros(6))
    np.testing.assert_array_equal(attach_ambient(scan).ambient, np.zeros(6))

    with_ambient = attach_ambient(scan, values)
    assert ensure_ambient(with_ambient) is with_ambient
    np.testing.assert_array_equal(ensure_ambient(with_ambient, entry(ambient=False)).ambient, np.zeros(6))
    with pytest.raises(DimensionError):
        attach_ambient(scan, values[:3], entry=entry(ambient=False))
