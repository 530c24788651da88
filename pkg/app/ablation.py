"""Grades de ablação (datasets de pré-treino, PPT, mixup, ambiente) e linha final.

Cada grade é uma tabela com a variação relativa à primeira linha entre
parênteses, por exemplo ``42.48 (+8.97)``. Execuções repetidas entre grades
compartilham a mesma chave (`RunKey`) e rodam uma única vez; o relatório não
carrega horários, então a mesma semente gera bytes idênticos.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from data import telemetry
from data.registry import DatasetRegistry
from data.run_settings import RunConfig
from data.runtime_log import log_event
from engine.metrics import SegMetrics, format_report_csv, format_summary

from .pipeline_service import PipelineService

AXES = ("dataset", "ppt", "mm", "ambient")
_GRID_HEADERS = {
    "dataset": "Pre-training Dataset",
    "ppt": "PPT Enabled",
    "mm": "MM Enabled",
    "ambient": "Uses Ambient",
}


@dataclass(frozen=True)
class RunKey:
    datasets: tuple[str, ...]
    ppt: bool
    mixup: bool
    ambient: bool
    finetuned: bool

    @property
    def pretrain_key(self) -> "RunKey":
        return replace(self, finetuned=False)

    @property
    def slug(self) -> str:
        flags = "".join(
            flag for flag, on in (("p", self.ppt), ("m", self.mixup), ("a", self.ambient)) if on
        )
        stage = "ft" if self.finetuned else "pt"
        return f"{'+'.join(self.datasets)}_{flags or 'none'}_{stage}"


@dataclass
class GridRow:
    label: str
    key: RunKey
    metrics: SegMetrics


@dataclass
class AblationTable:
    axis: str
    rows: list[GridRow]

    def to_csv(self) -> str:
        header = [_GRID_HEADERS[self.axis], "Fine-Tuned", "mIoU (%)", "Acc (%)"]
        base = self.rows[0].metrics
        lines = [",".join(header)]
        for index, row in enumerate(self.rows):
            tuned = "yes" if row.key.finetuned else "no"
            if index == 0:
                miou, acc = f"{100 * row.metrics.miou:.2f}", f"{100 * row.metrics.acc:.2f}"
            else:
                miou = format_delta(row.metrics.miou, base.miou)
                acc = format_delta(row.metrics.acc, base.acc)
            lines.append(",".join([row.label, tuned, miou, acc]))
        return "\n".join(lines) + "\n"


def format_delta(value: float, baseline: float) -> str:
    """``valor (+delta)`` em pontos percentuais, duas casas."""
    delta = 100 * (value - baseline)
    if abs(delta) < 0.005:
        delta = 0.0
    return f"{100 * value:.2f} ({delta:+.2f})"


class AblationRunner:
    def __init__(self, config: RunConfig, *, out_dir: Path, prefetch: bool = True) -> None:
        self.config = config
        self.out_dir = Path(out_dir)
        self.prefetch = prefetch
        self._base = PipelineService(config, out_dir=self.out_dir, prefetch=prefetch)
        self.registry: DatasetRegistry = self._base.load_registry()
        self._results: dict[RunKey, SegMetrics] = {}

    # ------------------------------------------------------------------
    # API pública
    # ------------------------------------------------------------------
    @property
    def target(self) -> str:
        return self.registry.target_entry().name

    @property
    def sources(self) -> list[str]:
        return [name for name in self.registry.names if name != self.target]

    @property
    def combined(self) -> tuple[str, ...]:
        return tuple(self.registry.names)

    def final_key(self) -> RunKey:
        return RunKey(self.combined, ppt=True, mixup=False, ambient=True, finetuned=True)

    def grid(self, axis: str) -> AblationTable:
        if axis == "dataset":
            rows = self._dataset_rows()
        else:
            rows = self._toggle_rows(axis)
        return AblationTable(axis, rows)

    def run(self, axes: Sequence[str]) -> str:
        sections: list[str] = []
        for axis in axes:
            table = self.grid(axis)
            csv_text = table.to_csv()
            self._write(f"ablation_{axis}.csv", csv_text)
            sections.append(f"## {axis}\n{csv_text}")
        final = self.metrics_for(self.final_key())
        final_csv = format_report_csv([("final", final)])
        self._write("ablation_final.csv", final_csv)
        sections.append(f"## final\n{final_csv}\n{format_summary(final)}\n")
        report = "\n".join(sections)
        self._write("ablation_report.txt", report)
        return report

    def metrics_for(self, key: RunKey) -> SegMetrics:
        cached = self._results.get(key)
        if cached is not None:
            return cached
        service = PipelineService(
            self._config_for(key),
            out_dir=self._run_dir(key),
            prefetch=self.prefetch,
            cache=self._base.cache,
            telemetry_file=self.out_dir / telemetry.TELEMETRY_FILE_NAME,
        )
        log_event(f"Ablação: execução {key.slug}")
        if key.finetuned:
            self.metrics_for(key.pretrain_key)
            outcome = service.finetune(
                checkpoint=self._run_dir(key.pretrain_key) / "pretrain.dsck", registry=self.registry
            )
        else:
            outcome = service.pretrain(registry=self.registry)
        assert outcome.metrics is not None
        self._results[key] = outcome.metrics
        telemetry.record_event("ablation_row", {
            "run": key.slug, "mIoU": outcome.metrics.miou, "Acc": outcome.metrics.acc,
        })
        return outcome.metrics

    # ------------------------------------------------------------------
    # Auxiliares internos
    # ------------------------------------------------------------------
    def _dataset_rows(self) -> list[GridRow]:
        final = self.final_key()
        plans: list[tuple[str, tuple[str, ...], bool]] = [("Target Only", (self.target,), False)]
        plans += [(f"{name} Only", (name,), False) for name in self.sources]
        plans.append(("Combined", self.combined, False))
        plans += [(f"{name} Only", (name,), True) for name in self.sources]
        plans.append(("Combined", self.combined, True))
        rows = []
        for label, datasets, tuned in plans:
            key = replace(final, datasets=datasets, finetuned=tuned)
            rows.append(GridRow(label, key, self.metrics_for(key)))
        return rows

    def _toggle_rows(self, axis: str) -> list[GridRow]:
        # Demais chaves fixadas como nas tabelas de cada eixo.
        fixed = {
            "ppt": dict(mixup=True, ambient=True),
            "mm": dict(ppt=True, ambient=True),
            "ambient": dict(ppt=True, mixup=False),
        }[axis]
        field_name = {"ppt": "ppt", "mm": "mixup", "ambient": "ambient"}[axis]
        rows = []
        for tuned in (False, True):
            for enabled in (False, True):
                toggles = {"ppt": True, "mixup": False, "ambient": True, **fixed, field_name: enabled}
                key = RunKey(self.combined, finetuned=tuned, **toggles)
                rows.append(GridRow("yes" if enabled else "no", key, self.metrics_for(key)))
        return rows

    def _config_for(self, key: RunKey) -> RunConfig:
        config = self.config.copy()
        config.toggles.ppt = key.ppt
        config.toggles.mixup = key.mixup
        config.toggles.ambient = key.ambient
        config.pretrain.datasets = list(key.datasets)
        return config.validate()

    def _run_dir(self, key: RunKey) -> Path:
        return self.out_dir / "runs" / key.slug

    def _write(self, name: str, text: str) -> Path:
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return path
