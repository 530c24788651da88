"""Estágios de treino: amostragem mista, laço AdamW + one-cycle, parada antecipada.

Guia de edição
--------------
* Cada lote depende só de (semente, estágio, passo): o produtor pode rodar
  adiantado em outra thread sem mudar o resultado.
* O melhor estado (parâmetros + buffers) pela mIoU de validação é mantido
  em memória e restaurado ao final do estágio.
* Divergência (perda ou gradiente não finito) restaura o último estado bom,
  grava checkpoint e levanta `TrainingDivergedError`.
"""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from data.augment import augment_for_training, derive_rng, eval_normalize
from data.errors import ConfigError, NonFiniteGradientError, TrainingDivergedError
from data.registry import DatasetRegistry, RegistryEntry
from data.run_settings import AugmentConfig, OptimizerConfig, StageConfig
from data.runtime_log import log_event
from data.scan_io import PointScan
from engine.checkpoint import save_checkpoint
from engine.metrics import ConfusionMatrix, SegMetrics, compute_metrics
from engine.model import Batch, SegmentationModel, prepare_batch
from engine.optim import AdamW, Schedule, one_cycle_lr
from engine.tensor import backward, log_softmax

HISTORY_COLUMNS = ("step", "lr", "train_loss", "val_mIoU", "val_Acc", "val_loss")
_STAGE_CODES = {"pretrain": 1, "finetune": 2}

StageCallback = Callable[[str, dict[str, Any]], None]
BatchSourceFactory = Callable[[Callable[[int], Batch], Sequence[int]], Iterable[tuple[int, Batch]]]


# ----------------------------------------------------------------------
# Dados
# ----------------------------------------------------------------------
class ScanCache:
    """Cache de scans carregados do disco, seguro para threads."""

    def __init__(self) -> None:
        self._scans: dict[Path, PointScan] = {}
        self._lock = threading.Lock()

    def get(self, entry: RegistryEntry, path: Path) -> PointScan:
        with self._lock:
            cached = self._scans.get(path)
        if cached is not None:
            return cached
        scan = entry.load(path)
        with self._lock:
            self._scans.setdefault(path, scan)
        return scan


def stage_datasets(cfg: StageConfig, registry: DatasetRegistry) -> list[RegistryEntry]:
    """Resolve os datasets do estágio; o ajuste fino aceita só o alvo."""

    if cfg.stage == "finetune":
        target = registry.target_entry()
        if cfg.datasets and cfg.datasets != [target.name]:
            raise ConfigError(
                f"finetune inclui apenas o dataset alvo '{target.name}'; recebido {cfg.datasets}"
            )
        return [target]
    names = cfg.datasets or registry.names
    if not names:
        raise ConfigError("Estágio sem datasets.")
    return [registry.get(name) for name in names]


def sample_indices(
    sizes: Sequence[int],
    weights: Optional[Sequence[float]],
    count: int,
    rng: np.random.Generator,
) -> list[tuple[int, int]]:
    """Sorteia (dataset, índice) da união; sem pesos, uniforme sobre a união."""

    sizes = [int(s) for s in sizes]
    if not sizes or sum(sizes) == 0:
        raise ConfigError("Estágio sem scans de treino.")
    picks: list[tuple[int, int]] = []
    if weights is None:
        offsets = np.cumsum([0] + sizes)
        for flat in rng.integers(0, offsets[-1], size=count):
            ds = int(np.searchsorted(offsets, flat, side="right") - 1)
            picks.append((ds, int(flat - offsets[ds])))
        return picks
    probs = np.asarray(weights, dtype=np.float64) * (np.asarray(sizes) > 0)
    if probs.sum() <= 0:
        raise ConfigError("Pesos de amostragem zerados para todos os datasets com scans.")
    probs = probs / probs.sum()
    for ds in rng.choice(len(sizes), size=count, p=probs):
        picks.append((int(ds), int(rng.integers(0, sizes[ds]))))
    return picks


def sample_batch(
    entries: Sequence[RegistryEntry],
    cfg: StageConfig,
    augment: AugmentConfig,
    seed: int,
    step: int,
    *,
    cache: Optional[ScanCache] = None,
) -> list[PointScan]:
    cache = cache or ScanCache()
    code = _STAGE_CODES.get(cfg.stage, 0)
    rng = derive_rng(seed, code, step)
    picks = sample_indices([len(e.train) for e in entries], cfg.weights, cfg.batch, rng)
    scans = []
    for slot, (ds, index) in enumerate(picks):
        entry = entries[ds]
        scan = cache.get(entry, entry.train[index])
        scans.append(augment_for_training(scan, augment, derive_rng(seed, code, step, slot + 1)))
    return scans


def synchronous_batches(make: Callable[[int], Batch], steps: Sequence[int]) -> Iterator[tuple[int, Batch]]:
    for step in steps:
        yield step, make(step)


# ----------------------------------------------------------------------
# Parada antecipada e histórico
# ----------------------------------------------------------------------
@dataclass
class EarlyStopping:
    """Para após ``patience`` avaliações seguidas sem melhora.

    A primeira avaliação sempre melhora sobre ``-inf``; com mIoU sempre em
    queda o estágio termina na avaliação ``patience + 1``.
    """

    patience: int
    best: float = -math.inf
    best_step: int = 0
    bad_evals: int = 0

    def update(self, value: float, step: int) -> bool:
        """Registra uma avaliação; devolve True quando é a melhor até agora."""
        if value > self.best:
            self.best, self.best_step, self.bad_evals = value, step, 0
            return True
        self.bad_evals += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_evals >= self.patience


@dataclass
class HistoryRow:
    step: int
    lr: float
    train_loss: float
    val_miou: float
    val_acc: float
    val_loss: float

    def as_csv(self) -> list[str]:
        return [
            str(self.step),
            f"{self.lr:.8g}",
            f"{self.train_loss:.6f}",
            f"{self.val_miou:.6f}",
            f"{self.val_acc:.6f}",
            f"{self.val_loss:.6f}",
        ]


def write_history(rows: Sequence[HistoryRow], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv())
    return path


@dataclass
class StageResult:
    stage: str
    history: list[HistoryRow] = field(default_factory=list)
    best_miou: float = 0.0
    best_step: int = 0
    steps_run: int = 0
    stopped_early: bool = False
    checkpoint: Optional[Path] = None


# ----------------------------------------------------------------------
# Avaliação
# ----------------------------------------------------------------------
def prepare_eval_scans(
    entry: RegistryEntry, augment: AugmentConfig, split: str = "val", cache: Optional[ScanCache] = None
) -> list[PointScan]:
    cache = cache or ScanCache()
    return [
        eval_normalize(cache.get(entry, path), augment.eval_low, augment.eval_high)
        for path in entry.split(split)
    ]


def evaluate(
    model: SegmentationModel, scans: Sequence[PointScan], *, chunk: int = 4
) -> tuple[SegMetrics, float, ConfusionMatrix]:
    """Forward em modo eval; devolve métricas, perda média e a matriz."""

    cm = ConfusionMatrix()
    loss_sum, counted = 0.0, 0
    for start in range(0, len(scans), chunk):
        batch = prepare_batch(scans[start : start + chunk], model.config.sensors)
        logits = model.forward(batch, "eval").logits.data
        cm.accumulate(batch.labels, logits.argmax(axis=1))
        valid = batch.valid
        if valid.any():
            logp = log_softmax(logits[valid])
            loss_sum -= float(logp[np.arange(logp.shape[0]), batch.labels[valid]].sum())
            counted += int(valid.sum())
    return compute_metrics(cm), loss_sum / max(counted, 1), cm


# ----------------------------------------------------------------------
# Laço do estágio
# ----------------------------------------------------------------------
def run_stage(
    cfg: StageConfig,
    model: SegmentationModel,
    registry: DatasetRegistry,
    *,
    augment: AugmentConfig,
    optimizer: OptimizerConfig,
    seed: int,
    out_dir: Path,
    batch_source: Optional[BatchSourceFactory] = None,
    on_event: Optional[StageCallback] = None,
    cache: Optional[ScanCache] = None,
) -> StageResult:
    notify = on_event or (lambda _event, _details: None)
    cache = cache or ScanCache()
    entries = stage_datasets(cfg, registry)
    target = registry.target_entry()
    val_scans = prepare_eval_scans(target, augment, cache=cache)
    if not val_scans:
        raise ConfigError(f"Dataset alvo '{target.name}' sem scans de validação.")

    model.sync_norm_modes(cfg.freeze_norm_stats)
    opt = AdamW(
        model.params,
        beta1=optimizer.beta1,
        beta2=optimizer.beta2,
        eps=optimizer.eps,
        weight_decay=optimizer.weight_decay,
    )
    sched = Schedule(cfg.max_lr, cfg.steps, cfg.pct_start, cfg.div_factor, cfg.final_div_factor)
    early = EarlyStopping(cfg.early_stop.patience)
    result = StageResult(stage=cfg.stage)
    best_state = model.snapshot()
    code = _STAGE_CODES.get(cfg.stage, 0)

    def make_batch(step: int) -> Batch:
        return prepare_batch(
            sample_batch(entries, cfg, augment, seed, step, cache=cache), model.config.sensors
        )

    source = (batch_source or synchronous_batches)(make_batch, range(1, cfg.steps + 1))
    notify("stage_started", {"stage": cfg.stage, "steps": cfg.steps, "datasets": [e.name for e in entries]})
    log_event(
        f"Estágio {cfg.stage}: {cfg.steps} passos, lr máx {cfg.max_lr}, datasets {[e.name for e in entries]}, "
        f"congelados {len(model.params.frozen_names())}/{len(model.params)}"
    )

    running_loss, loss_count = 0.0, 0
    for step, batch in source:
        lr = one_cycle_lr(step - 1, sched)
        model.params.zero_grad()
        loss, _ = model.loss(batch, "train", rng=derive_rng(seed, code, step, 0))
        value = loss.item()
        try:
            if not math.isfinite(value):
                raise NonFiniteGradientError(("loss",))
            backward(loss)
            opt.step(lr)
        except NonFiniteGradientError as exc:
            _diverge(model, best_state, cfg.stage, step, out_dir, str(exc), notify)
        running_loss += value
        loss_count += 1
        result.steps_run = step
        notify("step", {"stage": cfg.stage, "step": step, "lr": lr, "train_loss": value})

        if step % cfg.early_stop.eval_every == 0 or step == cfg.steps:
            metrics, val_loss, _ = evaluate(model, val_scans)
            row = HistoryRow(step, lr, running_loss / loss_count, metrics.miou, metrics.acc, val_loss)
            result.history.append(row)
            running_loss, loss_count = 0.0, 0
            improved = early.update(metrics.miou, step)
            if improved:
                best_state = model.snapshot()
            log_event(
                f"[{cfg.stage}] passo {step}/{cfg.steps} lr {lr:.2e} perda {row.train_loss:.4f} "
                f"val mIoU {100 * metrics.miou:.2f} Acc {100 * metrics.acc:.2f}{' *' if improved else ''}"
            )
            notify("evaluation", {
                "stage": cfg.stage, "step": step, "train_loss": row.train_loss,
                "val_miou": metrics.miou, "best_miou": max(early.best, 0.0),
            })
            if early.should_stop:
                result.stopped_early = True
                log_event(f"[{cfg.stage}] parada antecipada no passo {step} (melhor: passo {early.best_step})")
                notify("early_stop", {"stage": cfg.stage, "step": step, "best_step": early.best_step})
                break

    model.restore(best_state)
    result.best_miou = max(early.best, 0.0)
    result.best_step = early.best_step
    result.checkpoint = save_checkpoint(
        model, out_dir / f"{cfg.stage}.dsck", {"stage": cfg.stage, "best_step": early.best_step}
    )
    write_history(result.history, out_dir / f"{cfg.stage}_history.csv")
    notify("checkpoint_saved", {"stage": cfg.stage, "path": str(result.checkpoint)})
    notify("stage_finished", {
        "stage": cfg.stage, "step": result.steps_run, "best_miou": result.best_miou,
        "best_step": early.best_step, "stopped_early": result.stopped_early,
    })
    return result


def _diverge(
    model: SegmentationModel,
    best_state: dict,
    stage: str,
    step: int,
    out_dir: Path,
    details: str,
    notify: StageCallback,
) -> None:
    model.restore(best_state)
    path = save_checkpoint(model, out_dir / f"{stage}_last_good.dsck", {"stage": stage, "diverged_at": step})
    log_event(f"[{stage}] divergência no passo {step}: {details}", level="error")
    notify("divergence", {"stage": stage, "step": step, "checkpoint": str(path)})
    raise TrainingDivergedError(step, path, details)
