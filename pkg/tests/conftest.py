"""Fixtures compartilhadas: scans aleatórios, benchmark reduzido e configuração mínima."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pytest

# Garante a raiz do projeto no sys.path para importações locais
PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from data.registry import DatasetRegistry, load_registry  # noqa: E402
from data.run_settings import RunConfig  # noqa: E402
from data.scan_io import IGNORE, NUM_CLASSES, PointScan  # noqa: E402
from data.synthbench import PSEUDO_A, PSEUDO_B, PSEUDO_TARGET, make_benchmark  # noqa: E402
from engine.model import ModelConfig, SegmentationModel  # noqa: E402
from engine.projection import SensorSpec  # noqa: E402
from engine.tensor import DTensor, backward  # noqa: E402


TINY_SENSOR = {"height": 8, "width": 64}


def random_scan(
    rng: np.random.Generator,
    n: int = 64,
    *,
    ambient: bool = False,
    dataset_id: int = 0,
    ignore_fraction: float = 0.1,
) -> PointScan:
    xyz = rng.uniform(-20.0, 20.0, size=(n, 3))
    xyz[:, 2] = rng.uniform(-2.0, 2.0, size=n)
    labels = rng.integers(0, NUM_CLASSES, size=n)
    labels[rng.random(n) < ignore_fraction] = IGNORE
    return PointScan(
        xyz=xyz,
        intensity=rng.uniform(0.0, 1.0, size=n),
        ambient=rng.uniform(0.0, 1.0, size=n) if ambient else None,
        labels=labels,
        dataset_id=dataset_id,
    )


def tiny_config(registry: Path, out_dir: Path, *, seed: int = 0) -> RunConfig:
    """Modelo e estágios mínimos para rodar treino completo em segundos."""

    config = RunConfig(registry=str(registry), output_dir=str(out_dir), seed=seed)
    config.extractor.point_dim = 8
    config.extractor.cell_dim = 8
    config.extractor.rounds = 1
    config.head.embed_dim = 8
    config.head.expansion = 2
    config.head.residual_dim = 8
    config.head.ambient_dim = 4
    config.head.ctx_dim = 4
    config.pretrain.steps = 6
    config.pretrain.early_stop.eval_every = 3
    config.finetune.steps = 4
    config.finetune.early_stop.eval_every = 2
    config.sensors = {name: dict(TINY_SENSOR) for name in (PSEUDO_A, PSEUDO_B, PSEUDO_TARGET)}
    return config.validate()


def tiny_registry(path: Path) -> DatasetRegistry:
    """Registro do benchmark com grades reduzidas, como em `tiny_config`."""

    registry = load_registry(path)
    for entry in registry:
        entry.sensor = SensorSpec.from_dict({**entry.sensor.as_dict(), **TINY_SENSOR})
    return registry

@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mini_bench(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Benchmark de três domínios com poucos scans; devolve o caminho do registro."""

    out = tmp_path_factory.mktemp("bench")
    return make_benchmark(
        out,
        seed=0,
        scans_per_source=4,
        target_train=3,
        target_val=2,
        source_val_fraction=0.25,
    )


def numeric_grad(fn: Callable[[], float], array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Diferenças centrais sobre cada entrada de ``array`` (alterado no lugar e restaurado)."""

    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = array[idx]
        array[idx] = old + eps
        up = fn()
        array[idx] = old - eps
        down = fn()
        array[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad


def assert_gradcheck(build: Callable[[], DTensor], params: Sequence[DTensor], tol: float = 1e-4) -> None:
    for p in params:
        p.zero_grad()
    backward(build())
    for p in params:
        expected = numeric_grad(lambda: build().item(), p.data)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        denom = np.maximum(np.abs(expected) + np.abs(analytic), 1e-8)
        rel = np.abs(expected - analytic) / denom
        assert np.all((rel < tol) | (np.abs(expected - analytic) < 1e-7)), (expected, analytic)


def small_model(*, ppt: bool = True, datasets: int = 2, mixup: bool = False, ambient_dim: int = 3) -> SegmentationModel:
    """Modelo com grade 4×16 por sensor e larguras mínimas."""

    config = ModelConfig(
        sensors=[SensorSpec(height=4, width=16)] * datasets,
        point_dim=6,
        cell_dim=6,
        rounds=1,
        embed_dim=6,
        expansion=2,
        residual_dim=6,
        ambient_dim=ambient_dim,
        ctx_dim=4,
        ppt=ppt,
        mixup=mixup,
    )
    return SegmentationModel(config)
