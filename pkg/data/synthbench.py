"""Benchmark sintético com três domínios (pseudo-A, pseudo-B, pseudo-alvo).

Cada cena coloca uma faixa de rua curva sobre um plano de chão com ruído,
aglomerados de vegetação, caixas (veículos, estruturas, objetos), colunas
raras de pessoas e outliers uniformes. O sensor é simulado projetando as
amostras na grade do `SensorSpec` e mantendo o ponto mais próximo por
célula. Os domínios diferem em FOV, resolução, altura de montagem,
escala/decaimento da intensidade e presença do canal de ambiente.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from data.errors import ConfigError
from data.registry import DatasetRegistry, RegistryEntry, save_registry
from data.runtime_log import log_event
from data.scan_io import NUM_CLASSES, TARGET_CLASSES, LabelMap, PointScan, save_scan
from engine.projection import SensorSpec, project

ROAD, GROUND, VEGETATION, PEOPLE, VEHICLE, STRUCTURE, OBJECT, OUTLIER = range(NUM_CLASSES)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ChannelModel:
    """Média/desvio por classe (em [0, 1]) antes de escala e decaimento."""

    mean: tuple[float, ...]
    sigma: float = 0.08
    scale: float = 1.0
    range_decay: float = 0.0


@dataclass(frozen=True)
class SceneLayout:
    road_width: tuple[float, float] = (6.0, 10.0)
    road_offset: tuple[float, float] = (-3.0, 3.0)
    curvature: tuple[float, float] = (-0.004, 0.004)
    ground_extent: tuple[float, float] = (2.0, 60.0)
    height_noise: float = 0.03
    vegetation_rate: float = 6.0
    vehicle_rate: float = 3.0
    structure_rate: float = 2.0
    object_rate: float = 5.0
    people_prob: float = 0.45
    outlier_rate: float = 0.004
    samples_per_cell: float = 4.0


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    sensor: SensorSpec
    intensity_model: ChannelModel
    ambient_model: Optional[ChannelModel] = None
    layout: SceneLayout = field(default_factory=SceneLayout)
    mount_height: float = 1.8
    max_points: int = 2048
    domain_code: int = 0

    def __post_init__(self) -> None:
        rates = (
            self.layout.vegetation_rate,
            self.layout.vehicle_rate,
            self.layout.structure_rate,
            self.layout.object_rate,
            self.layout.people_prob,
            self.layout.outlier_rate,
        )
        if any(rate < 0 for rate in rates):
            raise ConfigError("SceneSpec com taxas negativas")
        if self.max_points < 2:
            raise ConfigError("SceneSpec.max_points deve ser >= 2")
        if len(self.intensity_model.mean) != NUM_CLASSES:
            raise ConfigError("intensity_model precisa de uma média por classe")


@dataclass(frozen=True)
class RoadGeometry:
    offset: float
    curvature: float
    width: float

    def center_y(self, x: np.ndarray) -> np.ndarray:
        return self.offset + self.curvature * x * x

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.abs(y - self.center_y(x)) <= self.width / 2.0


# ----------------------------------------------------------------------
# Domínios padrão
# ----------------------------------------------------------------------
PSEUDO_A, PSEUDO_B, PSEUDO_TARGET = "pseudo_a", "pseudo_b", "pseudo_target"


def default_scene_specs(seed: int = 0) -> dict[str, SceneSpec]:
    return {
        PSEUDO_A: SceneSpec(
            seed=seed,
            sensor=SensorSpec(64, 1024, -25.0, 3.0),
            layout=SceneLayout(samples_per_cell=1.0),
            intensity_model=ChannelModel(
                mean=(0.18, 0.32, 0.45, 0.38, 0.72, 0.50, 0.85, 0.10), scale=1.0, range_decay=0.01
            ),
            mount_height=1.73,
            max_points=4096,
            domain_code=1,
        ),
        PSEUDO_B: SceneSpec(
            seed=seed,
            sensor=SensorSpec(20, 400, -17.6, 2.4),
            intensity_model=ChannelModel(
                mean=(0.10, 0.25, 0.55, 0.30, 0.65, 0.40, 0.90, 0.15), sigma=0.1, scale=255.0, range_decay=0.02
            ),
            layout=SceneLayout(road_width=(7.0, 12.0), vegetation_rate=4.0, structure_rate=3.0),
            mount_height=2.0,
            max_points=3072,
            domain_code=2,
        ),
        PSEUDO_TARGET: SceneSpec(
            seed=seed,
            sensor=SensorSpec(16, 256, -22.5, 22.5),
            intensity_model=ChannelModel(
                mean=(0.22, 0.35, 0.40, 0.45, 0.60, 0.55, 0.70, 0.12), sigma=0.12, scale=2000.0, range_decay=0.04
            ),
            ambient_model=ChannelModel(
                mean=(0.15, 0.55, 0.65, 0.45, 0.35, 0.50, 0.40, 0.30), sigma=0.06, scale=1000.0
            ),
            layout=SceneLayout(road_width=(5.0, 8.0), ground_extent=(1.5, 40.0), vegetation_rate=8.0),
            mount_height=2.4,
            max_points=2048,
            domain_code=3,
        ),
    }


# ----------------------------------------------------------------------
# Geração
# ----------------------------------------------------------------------
def generate_scene(spec: SceneSpec, scan_index: int) -> tuple[PointScan, RoadGeometry]:
    rng = np.random.default_rng([spec.seed, spec.domain_code, scan_index])
    layout = spec.layout
    road = RoadGeometry(
        offset=float(rng.uniform(*layout.road_offset)),
        curvature=float(rng.uniform(*layout.curvature)),
        width=float(rng.uniform(*layout.road_width)),
    )
    budget = int(layout.samples_per_cell * spec.sensor.num_cells)
    ground_z = -spec.mount_height

    parts: list[tuple[np.ndarray, np.ndarray]] = []
    parts.append(_ground(rng, road, layout, budget, ground_z))
    parts += [
        _ellipsoid(rng, _off_road(rng, road, layout), ground_z, budget // 40, VEGETATION)
        for _ in range(rng.poisson(layout.vegetation_rate))
    ]
    for _ in range(rng.poisson(layout.vehicle_rate)):
        x = rng.uniform(-40.0, 40.0)
        y = road.center_y(np.array([x]))[0] + rng.uniform(-road.width / 4, road.width / 4)
        parts.append(_box(rng, (x, y), (4.2, 1.8, 1.5), ground_z, budget // 60, VEHICLE))
    for _ in range(rng.poisson(layout.structure_rate)):
        parts.append(_box(rng, _off_road(rng, road, layout, margin=6.0), (8.0, 6.0, 5.0), ground_z, budget // 25, STRUCTURE))
    for _ in range(rng.poisson(layout.object_rate)):
        parts.append(_box(rng, _off_road(rng, road, layout, margin=0.5), (0.25, 0.25, 3.0), ground_z, budget // 200, OBJECT))
    if rng.random() < layout.people_prob:
        for _ in range(int(rng.integers(1, 3))):
            edge = road.width / 2 + rng.uniform(0.3, 1.5)
            x = rng.uniform(-15.0, 15.0)
            y = road.center_y(np.array([x]))[0] + edge * rng.choice([-1.0, 1.0])
            parts.append(_box(rng, (x, y), (0.5, 0.5, 1.7), ground_z, budget // 150, PEOPLE))
    n_out = max(1, rng.poisson(layout.outlier_rate * budget))
    direction = rng.normal(size=(n_out, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    parts.append((direction * rng.uniform(1.0, layout.ground_extent[1], size=(n_out, 1)),
                  np.full(n_out, OUTLIER, dtype=np.int64)))

    xyz = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])
    xyz, labels = _simulate_sensor(rng, xyz, labels, spec)
    xyz, labels = _ensure_road_and_ground(xyz, labels, road, ground_z, spec.max_points)

    rng_dist = np.linalg.norm(xyz, axis=1)
    intensity = _sample_channel(rng, spec.intensity_model, labels, rng_dist)
    ambient = None
    if spec.ambient_model is not None:
        ambient = _sample_channel(rng, spec.ambient_model, labels, rng_dist)
    scan = PointScan(xyz=xyz, intensity=intensity, ambient=ambient, labels=labels, dataset_id=0)
    return scan, road


def generate_scan(spec: SceneSpec, scan_index: int) -> PointScan:
    return generate_scene(spec, scan_index)[0]


def _off_road(rng: np.random.Generator, road: RoadGeometry, layout: SceneLayout, *, margin: float = 2.0) -> tuple[float, float]:
    x = rng.uniform(-45.0, 45.0)
    side = rng.choice([-1.0, 1.0])
    y = road.center_y(np.array([x]))[0] + side * (road.width / 2 + margin + rng.uniform(0.0, 20.0))
    return float(x), float(y)


def _ground(
    rng: np.random.Generator, road: RoadGeometry, layout: SceneLayout, count: int, ground_z: float
) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = layout.ground_extent
    radius = np.exp(rng.uniform(np.log(lo), np.log(hi), size=count))
    angle = rng.uniform(-np.pi, np.pi, size=count)
    x, y = radius * np.cos(angle), radius * np.sin(angle)
    z = ground_z + rng.normal(0.0, layout.height_noise, size=count)
    labels = np.where(road.contains(x, y), ROAD, GROUND).astype(np.int64)
    return np.stack([x, y, z], axis=1), labels


def _ellipsoid(
    rng: np.random.Generator, center: tuple[float, float], ground_z: float, count: int, label: int
) -> tuple[np.ndarray, np.ndarray]:
    radii = rng.uniform([1.0, 1.0, 1.0], [3.0, 3.0, 2.5])
    direction = rng.normal(size=(max(count, 1), 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    base = np.array([center[0], center[1], ground_z + radii[2] + rng.uniform(0.0, 1.5)])
    return base + direction * radii, np.full(direction.shape[0], label, dtype=np.int64)


def _box(
    rng: np.random.Generator,
    center: tuple[float, float],
    size: tuple[float, float, float],
    ground_z: float,
    count: int,
    label: int,
) -> tuple[np.ndarray, np.ndarray]:
    count = max(count, 1)
    half = np.asarray(size) / 2.0
    local = rng.uniform(-half, half, size=(count, 3))
    face = rng.integers(0, 3, size=count)
    sign = rng.choice([-1.0, 1.0], size=count)
    local[np.arange(count), face] = sign * half[face]
    heading = rng.uniform(-np.pi, np.pi)
    cos_h, sin_h = np.cos(heading), np.sin(heading)
    xyz = np.empty_like(local)
    xyz[:, 0] = center[0] + cos_h * local[:, 0] - sin_h * local[:, 1]
    xyz[:, 1] = center[1] + sin_h * local[:, 0] + cos_h * local[:, 1]
    xyz[:, 2] = ground_z + half[2] + local[:, 2]
    return xyz, np.full(count, label, dtype=np.int64)


def _simulate_sensor(
    rng: np.random.Generator, xyz: np.ndarray, labels: np.ndarray, spec: SceneSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Mantém, por célula, a amostra mais próxima dentro do FOV vertical."""

    dist = np.linalg.norm(xyz, axis=1)
    elevation = np.degrees(np.arcsin(np.clip(xyz[:, 2] / np.maximum(dist, 1e-9), -1.0, 1.0)))
    visible = (dist > 0.5) & (elevation >= spec.sensor.fov_down_deg) & (elevation <= spec.sensor.fov_up_deg)
    xyz, labels, dist = xyz[visible], labels[visible], dist[visible]
    cells = project(xyz, spec.sensor).cell_id
    order = np.lexsort((dist, cells))
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = cells[order][1:] != cells[order][:-1]
    keep = np.sort(order[first])
    if keep.shape[0] > spec.max_points:
        keep = np.sort(rng.choice(keep, size=spec.max_points, replace=False))
    return xyz[keep], labels[keep]


def _ensure_road_and_ground(
    xyz: np.ndarray, labels: np.ndarray, road: RoadGeometry, ground_z: float, max_points: int
) -> tuple[np.ndarray, np.ndarray]:
    """Garante ao menos um ponto de rua e um de chão, a 12 m à frente do sensor."""

    missing = [label for label in (ROAD, GROUND) if not np.any(labels == label)]
    if not missing:
        return xyz, labels
    x = 12.0
    center = float(road.center_y(np.array([x]))[0])
    lateral = {ROAD: center, GROUND: center + road.width / 2.0 + 2.0}
    anchors = np.array([[x, lateral[label], ground_z] for label in missing])
    excess = labels.shape[0] + len(missing) - max_points
    if excess > 0:
        # descarta primeiro pontos das demais classes
        order = np.argsort(np.isin(labels, (ROAD, GROUND)), kind="stable")
        keep = np.sort(order[excess:])
        xyz, labels = xyz[keep], labels[keep]
    return (
        np.concatenate([xyz, anchors]),
        np.concatenate([labels, np.asarray(missing, dtype=np.int64)]),
    )


def _sample_channel(
    rng: np.random.Generator, model: ChannelModel, labels: np.ndarray, dist: np.ndarray
) -> np.ndarray:
    mean = np.asarray(model.mean)[labels]
    value = np.clip(rng.normal(mean, model.sigma), 0.01, 1.0)
    if model.range_decay:
        value = value * np.exp(-model.range_decay * dist)
    return model.scale * value


# ----------------------------------------------------------------------
# Corpus
# ----------------------------------------------------------------------
def make_benchmark(
    out_dir: PathLike,
    *,
    seed: int = 0,
    scans_per_source: int = 800,
    target_train: int = 37,
    target_val: int = 13,
    source_val_fraction: float = 0.05,
    on_progress: Optional[Callable[[str, int, int], None]] = None,
) -> Path:
    """Grava os três domínios no layout KITTI e devolve o caminho do registro."""

    out_dir = Path(out_dir)
    specs = default_scene_specs(seed)
    counts = {PSEUDO_A: scans_per_source, PSEUDO_B: scans_per_source, PSEUDO_TARGET: target_train + target_val}
    entries: list[RegistryEntry] = []
    for dataset_id, name in enumerate((PSEUDO_A, PSEUDO_B, PSEUDO_TARGET)):
        spec = specs[name]
        total = counts[name]
        paths: list[Path] = []
        for index in range(total):
            scan = generate_scan(spec, index)
            bin_path = out_dir / name / "velodyne" / f"{index:06d}.bin"
            save_scan(scan, bin_path, out_dir / name / "labels" / f"{index:06d}.label")
            paths.append(bin_path)
            if on_progress is not None:
                on_progress(name, index + 1, total)
        if name == PSEUDO_TARGET:
            train, val = paths[:target_train], paths[target_train:]
        else:
            n_val = int(round(total * source_val_fraction))
            train, val = paths[: total - n_val], paths[total - n_val :]
        entries.append(RegistryEntry(
            name=name,
            dataset_id=dataset_id,
            has_ambient=spec.ambient_model is not None,
            label_map=LabelMap.identity(),
            sensor=spec.sensor,
            train=train,
            val=val,
            builtin_map="identity",
        ))
        log_event(f"{name}: {len(train)} treino / {len(val)} validação gravados em {out_dir / name}")
    registry = DatasetRegistry(entries=entries, target=PSEUDO_TARGET, root=out_dir.resolve())
    return save_registry(registry, out_dir / "registry.json")


def class_frequencies(scans: Sequence[PointScan]) -> dict[str, float]:
    counts = np.zeros(NUM_CLASSES)
    for scan in scans:
        counts += np.bincount(scan.labels[scan.labels < NUM_CLASSES], minlength=NUM_CLASSES)
    total = max(counts.sum(), 1.0)
    return {name: float(counts[i] / total) for i, name in enumerate(TARGET_CLASSES)}


def domain_probe_accuracy(
    scans_a: Sequence[PointScan],
    scans_b: Sequence[PointScan],
    *,
    seed: int = 0,
    max_points: int = 4000,
    iterations: int = 300,
) -> float:
    """Acurácia de uma regressão logística que separa pontos dos dois domínios."""

    rng = np.random.default_rng(seed)
    feats, target = [], []
    for label, scans in ((0.0, scans_a), (1.0, scans_b)):
        block = np.concatenate([_probe_features(scan) for scan in scans])
        if block.shape[0] > max_points:
            block = block[rng.choice(block.shape[0], size=max_points, replace=False)]
        feats.append(block)
        target.append(np.full(block.shape[0], label))
    x = np.concatenate(feats)
    y = np.concatenate(target)
    order = rng.permutation(x.shape[0])
    x, y = x[order], y[order]
    half = x.shape[0] // 2
    mean, std = x[:half].mean(axis=0), x[:half].std(axis=0) + 1e-9
    x = np.concatenate([(x - mean) / std, np.ones((x.shape[0], 1))], axis=1)
    weights = np.zeros(x.shape[1])
    for _ in range(iterations):
        logits = x[:half] @ weights
        probs = 1.0 / (1.0 + np.exp(-logits))
        weights -= 0.5 * x[:half].T @ (probs - y[:half]) / half
    predicted = (x[half:] @ weights) > 0.0
    return float(np.mean(predicted == (y[half:] > 0.5)))


def _probe_features(scan: PointScan) -> np.ndarray:
    dist = np.linalg.norm(scan.xyz, axis=1)
    return np.stack([np.log1p(np.abs(scan.intensity)), scan.xyz[:, 2], np.log1p(dist)], axis=1)
