"""Coordenação dos comandos: conversão, benchmark, estágios de treino e avaliação.

Guia de edição (resumido)
- Modificável pelo usuário:
    - Parâmetros vindos de `data/run_settings.json` (ou `--set`), nunca constantes aqui.
- Requer atenção:
    - A ordem carregar checkpoint → congelar → sincronizar modos de normalização
      define o contrato do ajuste fino; altere só com os testes de congelamento.
- Apenas para devs:
    - Ligação entre telemetria, progresso, pré-carregamento de lotes e o motor.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from data import telemetry
from data.errors import ConfigError, ScanFormatError
from data.progress_manager import ProgressManager
from data.registry import DatasetRegistry, RegistryEntry, load_registry, save_registry, split_paths
from data.run_settings import RunConfig
from data.runtime_log import log_event
from data.scan_io import LabelMap, label_path_for, load_scan, save_scan
from data.synthbench import PSEUDO_A, PSEUDO_TARGET, default_scene_specs, domain_probe_accuracy, generate_scan, make_benchmark
from engine.checkpoint import load_checkpoint
from engine.metrics import SegMetrics, format_report_csv, format_summary
from engine.model import ModelConfig, SegmentationModel
from engine.projection import SensorSpec
from engine.train import ScanCache, StageResult, evaluate, prepare_eval_scans, run_stage

from .runner import BatchPrefetcher

# Eventos de estágio que também vão para a telemetria (o "step" fica só no progresso).
_TELEMETRY_EVENTS = {"stage_started", "stage_finished", "early_stop", "divergence", "checkpoint_saved"}


@dataclass
class StageOutcome:
    result: StageResult
    model: SegmentationModel
    metrics: Optional[SegMetrics] = None


@dataclass
class ConvertRequest:
    source: Path
    name: str
    label_map: str = "semantic_kitti"
    channels: int = 4
    val_fraction: float = 0.2
    target: bool = False


class PipelineService:
    """Executa cada comando a partir de uma `RunConfig` já validada."""

    def __init__(
        self,
        config: RunConfig,
        *,
        out_dir: Optional[Path] = None,
        prefetch: bool = True,
        cache: Optional[ScanCache] = None,
        telemetry_file: Optional[Path] = None,
    ) -> None:
        self.config = config
        self.out_dir = Path(out_dir or config.output_dir)
        self.prefetch = prefetch
        self.cache = cache or ScanCache()
        telemetry.set_destination(telemetry_file or self.out_dir / telemetry.TELEMETRY_FILE_NAME)

    # ------------------------------------------------------------------
    # Registro e modelo
    # ------------------------------------------------------------------
    def load_registry(self) -> DatasetRegistry:
        registry = load_registry(self.config.registry)
        for name, overrides in self.config.sensors.items():
            entry = registry.get(name)
            entry.sensor = SensorSpec.from_dict({**entry.sensor.as_dict(), **overrides})
        return registry

    def build_model(self, registry: DatasetRegistry) -> SegmentationModel:
        return SegmentationModel(ModelConfig.from_run_config(self.config, registry.sensors()))

    def load_model(self, checkpoint: Path, registry: DatasetRegistry) -> SegmentationModel:
        model = load_checkpoint(checkpoint).model
        if model.config.num_datasets != len(registry):
            raise ConfigError(
                f"Checkpoint treinado com {model.config.num_datasets} datasets; registro tem {len(registry)}."
            )
        toggles, head = self.config.toggles, self.config.head
        if model.config.ppt != toggles.ppt or (model.config.ambient_dim > 0) != toggles.ambient:
            log_event(
                "toggles.ppt/toggles.ambient diferem do checkpoint; a arquitetura do checkpoint prevalece.",
                level="warning",
            )
        # Mixup não altera a arquitetura: segue a configuração da execução.
        model.config.mixup = toggles.mixup
        model.config.mixup_alpha = head.mixup.alpha
        model.config.mixup_site = head.mixup.site
        return model

    # ------------------------------------------------------------------
    # Comandos
    # ------------------------------------------------------------------
    def bench(self, out_dir: Optional[Path] = None, *, scans_per_source: Optional[int] = None) -> Path:
        bench = self.config.bench
        target_dir = Path(out_dir) if out_dir is not None else Path(self.config.registry).parent
        count = scans_per_source or bench.scans_per_source
        last_logged: dict[str, int] = {}

        def on_progress(name: str, done: int, total: int) -> None:
            decile = 10 * done // total
            if decile != last_logged.get(name):
                last_logged[name] = decile
                log_event(f"{name}: {done}/{total} scans", level="debug")

        path = make_benchmark(
            target_dir,
            seed=self.config.seed,
            scans_per_source=count,
            target_train=bench.target_train,
            target_val=bench.target_val,
            source_val_fraction=bench.source_val_fraction,
            on_progress=on_progress,
        )
        specs = default_scene_specs(self.config.seed)
        probe_n = min(count, 8)
        probe = domain_probe_accuracy(
            [generate_scan(specs[PSEUDO_A], i) for i in range(probe_n)],
            [generate_scan(specs[PSEUDO_TARGET], i) for i in range(probe_n)],
            seed=self.config.seed,
        )
        log_event(f"Auditoria de domínio {PSEUDO_A} x {PSEUDO_TARGET}: acurácia do classificador {100 * probe:.1f}%")
        if probe <= 0.9:
            log_event("Diferença de domínio abaixo de 90% de separabilidade.", level="warning")
        telemetry.record_event("benchmark_written", {
            "registry": path, "scans_per_source": count, "probe_accuracy": probe,
        })
        return path

    def pretrain(
        self,
        *,
        registry: Optional[DatasetRegistry] = None,
        out_dir: Optional[Path] = None,
    ) -> StageOutcome:
        registry = registry or self.load_registry()
        model = self.build_model(registry)
        return self._run(self.config.pretrain, model, registry, Path(out_dir or self.out_dir))

    def finetune(
        self,
        *,
        checkpoint: Optional[Path] = None,
        from_scratch: bool = False,
        registry: Optional[DatasetRegistry] = None,
        out_dir: Optional[Path] = None,
    ) -> StageOutcome:
        registry = registry or self.load_registry()
        out_dir = Path(out_dir or self.out_dir)
        cfg = self.config.finetune
        if from_scratch:
            model = self.build_model(registry)
            log_event("Ajuste fino sem pré-treino: nenhum parâmetro congelado.")
        else:
            checkpoint = Path(checkpoint) if checkpoint is not None else out_dir / "pretrain.dsck"
            if not checkpoint.exists():
                raise ConfigError(
                    f"Checkpoint de pré-treino não encontrado: {checkpoint}. "
                    "Rode 'pretrain' antes ou use --from-scratch."
                )
            model = self.load_model(checkpoint, registry)
            model.params.unfreeze_all()
            frozen = model.apply_freeze(cfg.freeze, freeze_norm_stats=cfg.freeze_norm_stats)
            log_event(f"Congelados {len(frozen)} tensores de {len(model.params)} ({', '.join(cfg.freeze) or 'nenhum padrão'}).")
        return self._run(cfg, model, registry, out_dir)

    def evaluate(
        self,
        checkpoint: Path,
        *,
        dataset: Optional[str] = None,
        split: str = "val",
        registry: Optional[DatasetRegistry] = None,
        report_path: Optional[Path] = None,
    ) -> tuple[SegMetrics, str]:
        """Avalia em modo eval; grava o CSV no formato da tabela final e devolve o resumo."""

        registry = registry or self.load_registry()
        model = self.load_model(Path(checkpoint), registry)
        model.sync_norm_modes(True)
        entry = registry.get(dataset) if dataset else registry.target_entry()
        metrics = self.evaluate_model(model, entry, split=split)
        csv_text = format_report_csv([(entry.name, metrics)])
        report_path = Path(report_path or self.out_dir / f"eval_{entry.name}_{split}.csv")
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(csv_text, encoding="utf-8")
        summary = format_summary(metrics, title=f"{entry.name} ({split}) - {Path(checkpoint).name}")
        telemetry.record_event("eval_finished", {"dataset": entry.name, "split": split, **metrics.as_dict()})
        return metrics, summary

    def evaluate_model(self, model: SegmentationModel, entry: RegistryEntry, *, split: str = "val") -> SegMetrics:
        scans = prepare_eval_scans(entry, self.config.augment, split, cache=self.cache)
        if not scans:
            raise ConfigError(f"Dataset '{entry.name}' sem scans no split '{split}'.")
        metrics, _, _ = evaluate(model, scans)
        return metrics

    def convert(self, request: ConvertRequest, out_dir: Optional[Path] = None) -> Path:
        """Reescreve um diretório KITTI (``velodyne/``, ``labels/``) no layout do registro."""

        out_dir = Path(out_dir or self.out_dir)
        sources = sorted((request.source / "velodyne").glob("*.bin"))
        if not sources:
            raise ScanFormatError("Nenhum arquivo .bin encontrado", request.source / "velodyne")
        if request.channels not in (4, 5):
            raise ConfigError(f"--channels deve ser 4 ou 5: {request.channels}")
        reader = RegistryEntry(
            name=request.name,
            dataset_id=0,
            has_ambient=request.channels == 5,
            label_map=_resolve_label_map(request.label_map),
        )
        written: list[Path] = []
        for index, src in enumerate(sources):
            scan = load_scan(src, label_path_for(src), reader)
            dst = out_dir / request.name / "velodyne" / f"{index:06d}.bin"
            save_scan(scan, dst, label_path_for(dst), channels=request.channels)
            written.append(dst)
        train, val = split_paths(written, request.val_fraction)

        registry_path = out_dir / "registry.json"
        if registry_path.exists():
            registry = load_registry(registry_path)
        else:
            registry = DatasetRegistry(entries=[], root=out_dir.resolve())
        sensor = self.config.sensors.get(request.name)
        registry.upsert(RegistryEntry(
            name=request.name,
            dataset_id=len(registry),
            has_ambient=request.channels == 5,
            label_map=LabelMap.identity(),
            sensor=SensorSpec.from_dict(sensor) if sensor else SensorSpec(),
            train=train,
            val=val,
            builtin_map="identity",
        ))
        if request.target:
            registry.target = request.name
        registry.validate()
        save_registry(registry, registry_path)
        log_event(f"{request.name}: {len(written)} scans convertidos ({len(train)} treino / {len(val)} validação).")
        return registry_path

    # ------------------------------------------------------------------
    # Auxiliares internos
    # ------------------------------------------------------------------
    def _run(self, cfg: Any, model: SegmentationModel, registry: DatasetRegistry, out_dir: Path) -> StageOutcome:
        progress = ProgressManager(out_dir=out_dir)
        result = run_stage(
            cfg,
            model,
            registry,
            augment=self.config.augment,
            optimizer=self.config.optimizer,
            seed=self.config.seed,
            out_dir=out_dir,
            batch_source=BatchPrefetcher() if self.prefetch else None,
            on_event=self._stage_listener(progress),
            cache=self.cache,
        )
        metrics = self.evaluate_model(model, registry.target_entry())
        return StageOutcome(result=result, model=model, metrics=metrics)

    @staticmethod
    def _stage_listener(progress: ProgressManager) -> Callable[[str, dict[str, Any]], None]:
        def listener(event: str, details: dict[str, Any]) -> None:
            progress.handle_event(event, details)
            if event in _TELEMETRY_EVENTS:
                telemetry.record_event(event, details)

        return listener


def _resolve_label_map(value: str) -> LabelMap:
    path = Path(value)
    if path.suffix == ".json" and path.exists():
        return LabelMap.load(path)
    return LabelMap.builtin(value)


def parse_axes(raw: Optional[str], known: Sequence[str]) -> list[str]:
    if not raw:
        return list(known)
    axes = [part.strip() for part in raw.split(",") if part.strip()]
    unknown = [axis for axis in axes if axis not in known]
    if unknown:
        raise ConfigError(f"Eixos de ablação desconhecidos: {unknown}. Válidos: {list(known)}")
    return axes
