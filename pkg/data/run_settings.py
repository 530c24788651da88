"""Persistência e validação da configuração de execução.

Guia de edição
--------------
* Todos os blocos são dataclasses com ``from_dict``/``as_dict``; chaves
  desconhecidas em arquivos são ignoradas com aviso, mas em ``--set`` são
  erro de configuração.
* Ordem de resolução do arquivo: ``--config`` → ``DESKSEG_CONFIG_FILE`` →
  ``data/run_settings.json``.
* ``validate()`` concentra as invariantes; chame-o depois de aplicar
  sobrescritas.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Type, TypeVar, get_type_hints

from data.errors import ConfigError
from data.runtime_log import log_event

_SETTINGS_ENV_VAR = "DESKSEG_CONFIG_FILE"
_MODULE_DIR = Path(__file__).resolve().parent
DEFAULT_SETTINGS_PATH = _MODULE_DIR / "run_settings.json"
BENCH_SETTINGS_PATH = _MODULE_DIR / "bench_settings.json"

DEFAULT_FINETUNE_FREEZE: tuple[str, ...] = ("extractor.*", "*.scale_gen.*", "*.shift_gen.*")
MIXUP_SITES = ("head_input", "hidden")

T = TypeVar("T")


@dataclass
class GlobalAugmentConfig:
    rotation: bool = True
    rotation_deg: float = 180.0
    flip: bool = True
    flip_prob: float = 0.5
    scale: bool = True
    scale_range: list[float] = field(default_factory=lambda: [0.95, 1.05])
    jitter: bool = True
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05

    @classmethod
    def disabled(cls) -> "GlobalAugmentConfig":
        return cls(rotation=False, flip=False, scale=False, jitter=False)


@dataclass
class AugmentConfig:
    dropout_prob: float = 0.2
    dropout_mode: str = "scan"
    eq_low_range: list[float] = field(default_factory=lambda: [0.0, 5.0])
    eq_high_range: list[float] = field(default_factory=lambda: [92.0, 97.0])
    eval_low: float = 2.0
    eval_high: float = 95.0
    yaw_limit_deg: float = 1.5
    global_aug: GlobalAugmentConfig = field(default_factory=GlobalAugmentConfig)

    def validate(self) -> None:
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ConfigError(f"augment.dropout_prob fora de [0, 1]: {self.dropout_prob}")
        if self.dropout_mode not in ("scan", "point"):
            raise ConfigError(f"augment.dropout_mode inválido: {self.dropout_mode!r}")
        for label, pair in (("eq_low_range", self.eq_low_range), ("eq_high_range", self.eq_high_range)):
            if len(pair) != 2 or not 0.0 <= pair[0] <= pair[1] <= 100.0:
                raise ConfigError(f"augment.{label} inválido: {pair}")
        if not self.eq_low_range[1] < self.eq_high_range[0]:
            raise ConfigError("augment: faixas de corte baixa e alta se sobrepõem")
        if not 0.0 <= self.eval_low < self.eval_high <= 100.0:
            raise ConfigError(f"augment: cortes de avaliação inválidos ({self.eval_low}, {self.eval_high})")
        scale = self.global_aug.scale_range
        if len(scale) != 2 or not 0.0 < scale[0] <= scale[1]:
            raise ConfigError(f"augment.global_aug.scale_range inválido: {scale}")


@dataclass
class MixupConfig:
    alpha: float = 2.0
    site: str = "head_input"


@dataclass
class HeadConfig:
    embed_dim: int = 64
    expansion: int = 4
    residual_dim: int = 64
    ambient_dim: int = 8
    num_classes: int = 8
    ctx_dim: int = 64
    mixup: MixupConfig = field(default_factory=MixupConfig)

    def validate(self) -> None:
        if self.expansion < 1:
            raise ConfigError(f"head.expansion deve ser >= 1: {self.expansion}")
        if self.ambient_dim < 0:
            raise ConfigError(f"head.ambient_dim deve ser >= 0: {self.ambient_dim}")
        if min(self.embed_dim, self.residual_dim, self.ctx_dim) < 1:
            raise ConfigError("head: larguras devem ser positivas")
        if self.num_classes != 8:
            raise ConfigError(f"head.num_classes deve ser 8: {self.num_classes}")
        if self.mixup.alpha <= 0:
            raise ConfigError(f"head.mixup.alpha deve ser positivo: {self.mixup.alpha}")
        if self.mixup.site not in MIXUP_SITES:
            raise ConfigError(f"head.mixup.site inválido: {self.mixup.site!r} (use {MIXUP_SITES})")


@dataclass
class ExtractorConfig:
    point_dim: int = 32
    cell_dim: int = 32
    window: int = 3
    rounds: int = 2

    def validate(self) -> None:
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"extractor.window deve ser ímpar: {self.window}")
        if self.rounds < 0 or min(self.point_dim, self.cell_dim) < 1:
            raise ConfigError("extractor: larguras/rodadas inválidas")


@dataclass
class EarlyStopConfig:
    metric: str = "mIoU"
    patience: int = 10
    eval_every: int = 200


@dataclass
class StageConfig:
    stage: str = "pretrain"
    steps: int = 100000
    max_lr: float = 0.002
    batch: int = 2
    datasets: list[str] = field(default_factory=list)
    weights: Optional[list[float]] = None
    freeze: list[str] = field(default_factory=list)
    freeze_norm_stats: bool = True
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)

    def validate(self) -> None:
        label = self.stage
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"Estágio desconhecido: {self.stage!r}")
        if self.steps < 1 or self.batch < 1:
            raise ConfigError(f"{label}: steps e batch devem ser >= 1")
        if self.max_lr <= 0:
            raise ConfigError(f"{label}.max_lr deve ser positivo: {self.max_lr}")
        if not 0.0 < self.pct_start < 1.0:
            raise ConfigError(f"{label}.pct_start fora de (0, 1): {self.pct_start}")
        if self.div_factor <= 1 or self.final_div_factor <= 1:
            raise ConfigError(f"{label}: div_factor e final_div_factor devem ser > 1")
        if self.weights is not None:
            if len(self.weights) != len(self.datasets) or any(w < 0 for w in self.weights):
                raise ConfigError(f"{label}.weights deve ter um peso >= 0 por dataset")
            if sum(self.weights) <= 0:
                raise ConfigError(f"{label}.weights soma zero")
        if self.early_stop.metric != "mIoU":
            raise ConfigError(f"{label}.early_stop.metric suportado: 'mIoU'")
        if self.early_stop.patience < 1 or self.early_stop.eval_every < 1:
            raise ConfigError(f"{label}.early_stop: patience e eval_every devem ser >= 1")


def _finetune_defaults() -> StageConfig:
    return StageConfig(
        stage="finetune",
        steps=7600,
        max_lr=0.001,
        freeze=list(DEFAULT_FINETUNE_FREEZE),
    )


@dataclass
class Toggles:
    ppt: bool = True
    mixup: bool = False
    ambient: bool = True


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class BenchConfig:
    scans_per_source: int = 800
    target_train: int = 37
    target_val: int = 13
    source_val_fraction: float = 0.05


@dataclass
class RunConfig:
    registry: str = "bench/registry.json"
    output_dir: str = "runs"
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    sensors: dict[str, dict[str, Any]] = field(default_factory=dict)
    pretrain: StageConfig = field(default_factory=StageConfig)
    finetune: StageConfig = field(default_factory=_finetune_defaults)
    toggles: Toggles = field(default_factory=Toggles)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("Configuração deve ser um objeto JSON.")
        return _build(cls, data, prefix="")

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def copy(self) -> "RunConfig":
        return copy.deepcopy(self)

    def validate(self) -> "RunConfig":
        self.augment.validate()
        self.head.validate()
        self.extractor.validate()
        if self.pretrain.stage != "pretrain" or self.finetune.stage != "finetune":
            raise ConfigError("Blocos 'pretrain' e 'finetune' com campo 'stage' trocado.")
        self.pretrain.validate()
        self.finetune.validate()
        if len(self.finetune.datasets) > 1:
            raise ConfigError("finetune inclui apenas o dataset alvo.")
        if not 0.0 <= self.bench.source_val_fraction < 1.0:
            raise ConfigError("bench.source_val_fraction fora de [0, 1)")
        if min(self.bench.scans_per_source, self.bench.target_train, self.bench.target_val) < 1:
            raise ConfigError("bench: quantidades de scans devem ser >= 1")
        return self


# ----------------------------------------------------------------------
# Public API
# ----------------------------------------------------------------------
def resolve_config_path(explicit: Optional[str | Path] = None) -> Path:
    if explicit is not None:
        path = Path(explicit).expanduser()
        if not path.exists():
            raise ConfigError(f"Arquivo de configuração não encontrado: {path}")
        return path
    if env_value := os.environ.get(_SETTINGS_ENV_VAR):
        path = Path(env_value).expanduser()
        if not path.exists():
            raise ConfigError(f"{_SETTINGS_ENV_VAR} aponta para arquivo inexistente: {path}")
        return path
    return DEFAULT_SETTINGS_PATH


def load_run_config(path: Optional[str | Path] = None) -> RunConfig:
    resolved = resolve_config_path(path)
    try:
        with resolved.open("r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except FileNotFoundError:
        if path is None:
            log_event(f"{resolved} ausente; usando padrões embutidos.", level="warning")
            return RunConfig()
        raise ConfigError(f"Arquivo de configuração não encontrado: {resolved}")
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"Configuração ilegível ({resolved}): {exc}") from exc
    return RunConfig.from_dict(raw)


def save_run_config(config: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        json.dump(config.as_dict(), handle, ensure_ascii=False, indent=2)
        handle.write("\n")
    return path


def parse_override(raw: str) -> tuple[str, Any]:
    if "=" not in raw:
        raise ConfigError(f"Sobrescrita sem '=': {raw!r} (use chave.pontilhada=valor)")
    key, _, text = raw.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"Sobrescrita sem chave: {raw!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key, value


def apply_overrides(config: RunConfig, overrides: Iterable[str]) -> RunConfig:
    """Aplica ``chave.pontilhada=valor``; chaves desconhecidas são erro."""

    payload = config.as_dict()
    for raw in overrides:
        key, value = parse_override(raw)
        parts = key.split(".")
        # Sensores são um mapa livre por nome de dataset.
        free_map = parts[0] == "sensors"
        node: Any = payload
        for part in parts[:-1]:
            if isinstance(node.get(part), dict):
                node = node[part]
            elif free_map and part not in node:
                node = node.setdefault(part, {})
            else:
                raise ConfigError(f"Chave de configuração desconhecida: {key!r}")
        if parts[-1] not in node and not free_map:
            raise ConfigError(f"Chave de configuração desconhecida: {key!r}")
        node[parts[-1]] = value
    return RunConfig.from_dict(payload)


# ----------------------------------------------------------------------
# Internal helpers
# ----------------------------------------------------------------------
def _build(cls: Type[T], data: Mapping[str, Any], *, prefix: str) -> T:
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    for key in data:
        if key not in known:
            log_event(f"Chave de configuração ignorada: {prefix}{key}", level="warning")
    values: dict[str, Any] = {}
    for f in fields(cls):  # type: ignore[arg-type]
        if f.name not in data:
            continue
        raw = data[f.name]
        hint = hints[f.name]
        if is_dataclass(hint) and isinstance(hint, type):
            if not isinstance(raw, Mapping):
                raise ConfigError(f"Bloco '{prefix}{f.name}' deve ser um objeto.")
            values[f.name] = _build(hint, raw, prefix=f"{prefix}{f.name}.")
        else:
            values[f.name] = _coerce(raw, f, prefix)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"Bloco '{prefix or 'raiz'}' inválido: {exc}") from exc


def _coerce(raw: Any, f: dataclasses.Field, prefix: str) -> Any:
    default = f.default if f.default is not dataclasses.MISSING else (
        f.default_factory() if f.default_factory is not dataclasses.MISSING else None  # type: ignore[misc]
    )
    name = f"{prefix}{f.name}"
    if default is None or raw is None:
        return raw
    try:
        if isinstance(default, bool):
            if not isinstance(raw, bool):
                raise TypeError
            return raw
        if isinstance(default, int):
            if isinstance(raw, bool) or float(raw) != int(raw):
                raise TypeError
            return int(raw)
        if isinstance(default, float):
            if isinstance(raw, bool):
                raise TypeError
            return float(raw)
        if isinstance(default, str):
            return str(raw)
        if isinstance(default, list):
            if not isinstance(raw, list):
                raise TypeError
            return list(raw)
        if isinstance(default, dict):
            if not isinstance(raw, dict):
                raise TypeError
            return dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Valor inválido para '{name}': {raw!r}") from exc
    return raw
