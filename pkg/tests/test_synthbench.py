"""Benchmark sintético: determinismo, splits, classes e separabilidade dos domínios."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from data.registry import load_registry
from data.run_settings import BenchConfig
from data.scan_io import NUM_CLASSES
from data.synthbench import (
    GROUND,
    OUTLIER,
    PSEUDO_A,
    PSEUDO_B,
    PSEUDO_TARGET,
    ROAD,
    VEGETATION,
    VEHICLE,
    class_frequencies,
    default_scene_specs,
    domain_probe_accuracy,
    generate_scan,
    generate_scene,
    make_benchmark,
)
from engine.projection import SensorSpec

SPECS = default_scene_specs(0)


def test_scene_generation_is_deterministic():
    first, second = generate_scan(SPECS[PSEUDO_B], 5), generate_scan(SPECS[PSEUDO_B], 5)
    np.testing.assert_array_equal(first.xyz, second.xyz)
    np.testing.assert_array_equal(first.labels, second.labels)
    other = generate_scan(SPECS[PSEUDO_B], 6)
    assert other.num_points != first.num_points or not np.array_equal(other.xyz, first.xyz)


@pytest.mark.parametrize("name", [PSEUDO_A, PSEUDO_B, PSEUDO_TARGET])
def test_scans_respect_sensor_and_budget(name):
    spec = SPECS[name]
    scan = generate_scan(spec, 0)
    assert 0 < scan.num_points <= spec.max_points
    assert (scan.ambient is not None) == (spec.ambient_model is not None)
    labels = scan.labels
    assert np.all((labels >= 0) & (labels < NUM_CLASSES))
    assert np.all(np.isfinite(scan.xyz))


def test_road_labels_follow_the_strip():
    scan, road = generate_scene(SPECS[PSEUDO_TARGET], 2)
    flat = (scan.labels == ROAD) | (scan.labels == GROUND)
    x, y = scan.xyz[flat, 0], scan.xyz[flat, 1]
    inside = road.contains(x, y)
    np.testing.assert_array_equal(inside, scan.labels[flat] == ROAD)


def test_common_classes_are_present():
    scans = [generate_scan(SPECS[PSEUDO_TARGET], i) for i in range(6)]
    freq = class_frequencies(scans)
    assert sum(freq.values()) == pytest.approx(1.0)
    present = {index for index, value in enumerate(freq.values()) if value > 0}
    for cls in (ROAD, GROUND, VEGETATION, VEHICLE, OUTLIER):
        assert cls in present


def test_domains_are_separable():
    scans_a = [generate_scan(SPECS[PSEUDO_A], i) for i in range(8)]
    scans_t = [generate_scan(SPECS[PSEUDO_TARGET], i) for i in range(8)]
    assert domain_probe_accuracy(scans_a, scans_t) > 0.9


@pytest.mark.parametrize("name", [PSEUDO_A, PSEUDO_B, PSEUDO_TARGET])
def test_every_scan_has_road_and_ground(name):
    for index in range(5):
        labels = generate_scan(SPECS[name], index).labels
        assert np.any(labels == ROAD) and np.any(labels == GROUND), (name, index)


def test_road_and_ground_survive_a_blind_or_tight_sensor():
    blind = replace(SPECS[PSEUDO_B], sensor=SensorSpec(8, 64, 10.0, 30.0))
    scan, road = generate_scene(blind, 0)
    assert {ROAD, GROUND} <= set(scan.labels.tolist())
    flat = (scan.labels == ROAD) | (scan.labels == GROUND)
    np.testing.assert_array_equal(road.contains(scan.xyz[flat, 0], scan.xyz[flat, 1]), scan.labels[flat] == ROAD)

    tight = replace(SPECS[PSEUDO_TARGET], max_points=2)
    scan = generate_scan(tight, 1)
    assert scan.num_points == 2
    assert sorted(scan.labels.tolist()) == [ROAD, GROUND]


def test_source_a_uses_the_dense_sensor():
    sensor = SPECS[PSEUDO_A].sensor
    assert (sensor.height, sensor.width) == (64, 1024)
    assert SPECS[PSEUDO_A].ambient_model is None


def test_mini_benchmark_registry(mini_bench):
    registry = load_registry(mini_bench)
    assert registry.names == [PSEUDO_A, PSEUDO_B, PSEUDO_TARGET]
    assert registry.target == PSEUDO_TARGET
    for name in (PSEUDO_A, PSEUDO_B):
        entry = registry.get(name)
        assert (len(entry.train), len(entry.val)) == (3, 1)
        assert not entry.has_ambient
    target = registry.target_entry()
    assert (len(target.train), len(target.val)) == (3, 2)
    assert target.has_ambient
    assert [e.sensor for e in registry] == [SPECS[n].sensor for n in registry.names]

    scan = target.load(target.val[0])
    assert scan.dataset_id == 2
    assert scan.ambient is not None


@pytest.mark.slow
def test_default_target_split(tmp_path):
    bench = BenchConfig()
    path = make_benchmark(
        tmp_path,
        scans_per_source=1,
        target_train=bench.target_train,
        target_val=bench.target_val,
        source_val_fraction=0.0,
    )
    target = load_registry(path).target_entry()
    assert (len(target.train), len(target.val)) == (37, 13)
    assert target.train[-1].name == "000036.bin"
    assert target.val[0].name == "000037.bin"


def test_same_seed_same_bytes(tmp_path):
    kwargs = dict(seed=3, scans_per_source=1, target_train=1, target_val=1, source_val_fraction=0.0)
    first = make_benchmark(tmp_path / "a", **kwargs)
    second = make_benchmark(tmp_path / "b", **kwargs)
    for sub in (PSEUDO_A, PSEUDO_B, PSEUDO_TARGET):
        left = (first.parent / sub / "velodyne" / "000000.bin").read_bytes()
        right = (second.parent / sub / "velodyne" / "000000.bin").read_bytes()
        assert left == right
