"""Matriz de confusão e métricas de segmentação (IoU, mIoU, Acc, mAcc)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from data.errors import EmptyEvaluationError, IndexRangeError
from data.scan_io import IGNORE, NUM_CLASSES, TARGET_CLASSES

# Ordem das colunas do relatório final.
REPORT_CLASS_ORDER: tuple[str, ...] = (
    "ground",
    "road",
    "vegetation",
    "structure",
    "vehicle",
    "people",
    "object",
    "outlier",
)
REPORT_HEADERS: tuple[str, ...] = (
    "mIoU",
    "Acc",
    "mAcc",
    "Ground",
    "Road",
    "Vegetation",
    "Structure",
    "Vehicle",
    "People",
    "Object",
    "Outliers",
)


@dataclass
class ConfusionMatrix:
    """Contagens K×K (linhas = verdade, colunas = predição)."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64))
    ignored: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, truth: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        truth = np.asarray(truth, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        if truth.shape != pred.shape:
            raise IndexRangeError(f"accumulate: {truth.shape[0]} rótulos e {pred.shape[0]} predições")
        k = self.counts.shape[0]
        bad_truth = (truth != IGNORE) & ((truth < 0) | (truth >= k))
        if np.any(bad_truth):
            raise IndexRangeError(f"Rótulo verdadeiro fora do intervalo: {int(truth[bad_truth][0])}")
        if np.any((pred < 0) | (pred >= k)):
            raise IndexRangeError(f"Predição fora do intervalo: {int(pred[(pred < 0) | (pred >= k)][0])}")
        keep = truth != IGNORE
        self.ignored += int((~keep).sum())
        np.add.at(self.counts, (truth[keep], pred[keep]), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)

    __add__ = merge


@dataclass
class SegMetrics:
    per_class_iou: np.ndarray
    miou: float
    acc: float
    macc: float

    def class_iou(self, name: str) -> float:
        return float(self.per_class_iou[TARGET_CLASSES.index(name)])

    def report_row(self) -> list[float]:
        """Valores em % na ordem de `REPORT_HEADERS`."""
        row = [self.miou, self.acc, self.macc]
        row += [self.class_iou(name) for name in REPORT_CLASS_ORDER]
        return [100.0 * value for value in row]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(REPORT_HEADERS, self.report_row()))


def accumulate(cm: ConfusionMatrix, truth: np.ndarray, pred: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(truth, pred)


def merge_all(matrices: Iterable[ConfusionMatrix]) -> ConfusionMatrix:
    out = ConfusionMatrix()
    for cm in matrices:
        out = out.merge(cm)
    return out


def compute_metrics(cm: ConfusionMatrix) -> SegMetrics:
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise EmptyEvaluationError("Nenhum ponto rotulado foi avaliado.")
    tp = np.diag(counts)
    gt = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    union = gt + predicted - tp
    iou = np.divide(tp, union, out=np.zeros_like(tp), where=union > 0)
    present = gt > 0
    recall = np.divide(tp, gt, out=np.zeros_like(tp), where=present)
    return SegMetrics(
        per_class_iou=iou,
        miou=float(iou.mean()),
        acc=float(tp.sum() / total),
        macc=float(recall[present].mean()),
    )


def format_report_csv(rows: Iterable[tuple[str, SegMetrics]]) -> str:
    lines = [",".join(("name",) + REPORT_HEADERS)]
    for name, metrics in rows:
        lines.append(",".join([name] + [f"{value:.2f}" for value in metrics.report_row()]))
    return "\n".join(lines) + "\n"


def format_summary(metrics: SegMetrics, *, title: str = "") -> str:
    lines = [title] if title else []
    lines.append(f"mIoU {100 * metrics.miou:6.2f} | Acc {100 * metrics.acc:6.2f} | mAcc {100 * metrics.macc:6.2f}")
    for name in REPORT_CLASS_ORDER:
        lines.append(f"  {name:<11s} IoU {100 * metrics.class_iou(name):6.2f}")
    return "\n".join(lines)
