"""Laço de treino: amostragem, parada antecipada, estágios e divergência."""

from __future__ import annotations

import csv
from collections import Counter

import numpy as np
import pytest

import engine.train as train_module
from app.pipeline_service import PipelineService
from conftest import random_scan, tiny_config, tiny_registry
from data.errors import ConfigError, TrainingDivergedError
from data.registry import RegistryEntry
from data.run_settings import AugmentConfig, ExtractorConfig, GlobalAugmentConfig, HeadConfig, StageConfig
from data.scan_io import LabelMap, label_path_for, save_scan
from data.synthbench import PSEUDO_A, make_benchmark
from engine.checkpoint import load_checkpoint, parameter_digest
from engine.metrics import SegMetrics
from engine.model import ModelConfig, SegmentationModel
from engine.train import (
    HISTORY_COLUMNS,
    EarlyStopping,
    ScanCache,
    run_stage,
    sample_batch,
    sample_indices,
    stage_datasets,
)


class EventLog:
    def __init__(self) -> None:
        self.events: list[tuple[str, dict]] = []

    def __call__(self, event: str, details: dict) -> None:
        self.events.append((event, details))

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.events]


def build(mini_bench, tmp_path, **overrides):
    config = tiny_config(mini_bench, tmp_path)
    for key, value in overrides.items():
        setattr(config.pretrain, key, value)
    registry = tiny_registry(mini_bench)
    model = SegmentationModel(ModelConfig.from_run_config(config, registry.sensors()))
    return config, registry, model


def test_early_stopping_counts_bad_evaluations():
    early = EarlyStopping(patience=2)
    assert early.update(0.3, 10)
    assert not early.update(0.3, 20)
    assert not early.should_stop
    assert not early.update(0.1, 30)
    assert early.should_stop
    assert (early.best, early.best_step) == (0.3, 10)


def test_uniform_sampling_over_the_union():
    picks = sample_indices([1, 3], None, 8000, np.random.default_rng(0))
    counts = Counter(ds for ds, _ in picks)
    assert counts[1] / len(picks) == pytest.approx(0.75, abs=0.03)
    assert all(0 <= index < [1, 3][ds] for ds, index in picks)


def test_weighted_sampling_skips_empty_datasets():
    picks = sample_indices([5, 0, 5], [1.0, 10.0, 3.0], 4000, np.random.default_rng(1))
    counts = Counter(ds for ds, _ in picks)
    assert counts[1] == 0
    assert counts[2] / len(picks) == pytest.approx(0.75, abs=0.03)
    with pytest.raises(ConfigError):
        sample_indices([0, 0], None, 3, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        sample_indices([4, 0], [0.0, 1.0], 3, np.random.default_rng(0))


def test_sample_batch_draws_in_proportion_to_scan_counts(tmp_path, rng):
    entries = []
    for dataset_id, copies in enumerate((9900, 100)):
        bin_path = tmp_path / f"ds{dataset_id}" / "velodyne" / "000000.bin"
        save_scan(random_scan(rng, 8, ignore_fraction=0.0), bin_path, label_path_for(bin_path))
        entries.append(RegistryEntry(
            name=f"ds{dataset_id}", dataset_id=dataset_id, has_ambient=False,
            label_map=LabelMap.identity(), train=[bin_path] * copies,
        ))
    cfg = StageConfig(stage="pretrain", batch=50)
    augment = AugmentConfig(dropout_prob=0.0, yaw_limit_deg=0.0, global_aug=GlobalAugmentConfig.disabled())
    cache = ScanCache()
    counts = Counter(
        scan.dataset_id
        for step in range(1, 201)
        for scan in sample_batch(entries, cfg, augment, 0, step, cache=cache)
    )
    assert sum(counts.values()) == 10000
    assert counts[1] / 10000 == pytest.approx(0.01, abs=0.004)


def test_finetune_takes_only_the_target(mini_bench):
    registry = tiny_registry(mini_bench)
    cfg = StageConfig(stage="finetune")
    assert [e.name for e in stage_datasets(cfg, registry)] == [registry.target]
    cfg.datasets = [PSEUDO_A]
    with pytest.raises(ConfigError):
        stage_datasets(cfg, registry)
    pretrain = StageConfig(stage="pretrain")
    assert [e.name for e in stage_datasets(pretrain, registry)] == registry.names


def test_batches_depend_only_on_seed_and_step(mini_bench, tmp_path):
    config = tiny_config(mini_bench, tmp_path)
    entries = stage_datasets(config.pretrain, tiny_registry(mini_bench))
    first = sample_batch(entries, config.pretrain, config.augment, 7, 4, cache=ScanCache())
    second = sample_batch(entries, config.pretrain, config.augment, 7, 4)
    other = sample_batch(entries, config.pretrain, config.augment, 7, 5)
    assert len(first) == config.pretrain.batch
    for left, right in zip(first, second):
        np.testing.assert_array_equal(left.xyz, right.xyz)
        np.testing.assert_array_equal(left.intensity, right.intensity)
    assert any(a.num_points != b.num_points or not np.array_equal(a.xyz, b.xyz) for a, b in zip(first, other))


def test_run_stage_writes_checkpoint_and_history(mini_bench, tmp_path):
    config, registry, model = build(mini_bench, tmp_path)
    log = EventLog()
    result = run_stage(
        config.pretrain,
        model,
        registry,
        augment=config.augment,
        optimizer=config.optimizer,
        seed=config.seed,
        out_dir=tmp_path,
        on_event=log,
    )
    assert log.names[0] == "stage_started"
    assert log.names.count("step") == 6
    assert log.names.count("evaluation") == 2
    assert log.names[-2:] == ["checkpoint_saved", "stage_finished"]
    assert result.steps_run == 6
    assert [row.step for row in result.history] == [3, 6]
    assert result.best_step in (3, 6)
    assert result.best_miou == max(row.val_miou for row in result.history)

    with (tmp_path / "pretrain_history.csv").open(encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    assert tuple(rows[0]) == HISTORY_COLUMNS
    assert [r[0] for r in rows[1:]] == ["3", "6"]

    restored = load_checkpoint(result.checkpoint)
    assert restored.meta["best_step"] == result.best_step
    assert parameter_digest(restored.model) == parameter_digest(model)


def test_early_stop_ends_the_stage(mini_bench, tmp_path, monkeypatch):
    config, registry, model = build(mini_bench, tmp_path, steps=12)
    config.pretrain.early_stop.eval_every = 1
    config.pretrain.early_stop.patience = 1
    flat = SegMetrics(per_class_iou=np.full(8, 0.5), miou=0.5, acc=0.5, macc=0.5)
    monkeypatch.setattr(train_module, "evaluate", lambda _model, _scans: (flat, 1.0, None))
    log = EventLog()
    result = run_stage(
        config.pretrain, model, registry, augment=config.augment, optimizer=config.optimizer,
        seed=0, out_dir=tmp_path, on_event=log,
    )
    assert result.stopped_early
    assert result.steps_run == 2
    assert result.best_step == 1
    assert log.names.count("early_stop") == 1


def test_decreasing_miou_stops_after_patience_bad_evaluations(mini_bench, tmp_path, monkeypatch):
    config, registry, model = build(mini_bench, tmp_path, steps=40)
    config.pretrain.early_stop.eval_every = 2
    config.pretrain.early_stop.patience = 3
    values = iter([0.9, 0.8, 0.7, 0.6, 0.5, 0.4])

    def falling(_model, _scans):
        value = next(values)
        return SegMetrics(per_class_iou=np.full(8, value), miou=value, acc=value, macc=value), 1.0, None

    monkeypatch.setattr(train_module, "evaluate", falling)
    result = run_stage(
        config.pretrain, model, registry, augment=config.augment, optimizer=config.optimizer,
        seed=0, out_dir=tmp_path,
    )
    assert [row.step for row in result.history] == [2, 4, 6, 8]
    assert result.stopped_early
    assert result.steps_run == 8
    assert (result.best_step, result.best_miou) == (2, 0.9)


def test_divergence_keeps_last_good_state(mini_bench, tmp_path):
    config, registry, model = build(mini_bench, tmp_path)
    clean = parameter_digest(model)

    def poisoned(make, steps):
        for step in steps:
            if step == 2:
                model.params["head.classifier.bias"].data[...] = np.nan
            yield step, make(step)

    log = EventLog()
    with pytest.raises(TrainingDivergedError) as info:
        run_stage(
            config.pretrain, model, registry, augment=config.augment, optimizer=config.optimizer,
            seed=0, out_dir=tmp_path, batch_source=poisoned, on_event=log,
        )
    assert info.value.step == 2
    assert info.value.checkpoint_path == tmp_path / "pretrain_last_good.dsck"
    assert log.names[-1] == "divergence"
    saved = load_checkpoint(tmp_path / "pretrain_last_good.dsck")
    assert parameter_digest(saved.model) == clean
    assert np.all(np.isfinite(saved.model.params["head.classifier.bias"].data))


def test_finetune_leaves_frozen_tensors_untouched(mini_bench, tmp_path):
    config = tiny_config(mini_bench, tmp_path)
    service = PipelineService(config, prefetch=False)
    pretrained = service.pretrain()
    names = pretrained.model.params.names
    extractor = [name for name in names if name.startswith("extractor.")]
    generators = [name for name in names if ".scale_gen." in name or ".shift_gen." in name]
    assert any(name.startswith("head.") for name in generators)
    before = {name: pretrained.model.params[name].data.copy() for name in names}

    tuned = service.finetune()
    for name in [*extractor, *generators]:
        np.testing.assert_array_equal(tuned.model.params[name].data, before[name], err_msg=name)
    assert not np.array_equal(tuned.model.params["ctx_table"].data, before["ctx_table"])
    assert not np.array_equal(tuned.model.params["head.classifier.weight"].data, before["head.classifier.weight"])

    frozen = set(tuned.model.params.frozen_names())
    assert set(extractor) | set(generators) <= frozen
    assert "ctx_table" not in frozen
    assert "head.classifier.weight" not in frozen
    assert (tmp_path / "finetune.dsck").exists()


def test_finetune_needs_a_pretrain_checkpoint(mini_bench, tmp_path):
    service = PipelineService(tiny_config(mini_bench, tmp_path), prefetch=False)
    with pytest.raises(ConfigError):
        service.finetune()
    outcome = service.finetune(from_scratch=True)
    assert outcome.model.params.frozen_names() == []


@pytest.mark.slow
def test_overfits_four_target_scans(tmp_path):
    bench = make_benchmark(tmp_path / "bench", seed=3, scans_per_source=1, target_train=4, target_val=1)
    config = tiny_config(bench, tmp_path)
    config.extractor = ExtractorConfig()
    config.head = HeadConfig()
    config.augment = AugmentConfig(
        dropout_prob=0.0,
        eq_low_range=[2.0, 2.0],
        eq_high_range=[95.0, 95.0],
        yaw_limit_deg=0.0,
        global_aug=GlobalAugmentConfig.disabled(),
    )
    registry = tiny_registry(bench)
    target = registry.target_entry()
    target.val = list(target.train)
    model = SegmentationModel(ModelConfig.from_run_config(config, registry.sensors()))

    cfg = config.finetune
    cfg.steps = 500
    cfg.batch = 4
    cfg.max_lr = 0.005
    cfg.early_stop.eval_every = 50
    cfg.early_stop.patience = 100
    result = run_stage(
        cfg, model, registry, augment=config.augment, optimizer=config.optimizer, seed=0, out_dir=tmp_path,
    )
    assert len(target.train) == 4
    assert result.history[-1].train_loss < result.history[0].train_loss
    assert max(row.val_acc for row in result.history) >= 0.99
