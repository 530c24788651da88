"""Rede de segmentação em dois estágios: extrator, PromptNorm, cabeça MLP.

Guia de edição
--------------
* O extrator é trocável: qualquer objeto com ``register`` e
  ``__call__(batch, mode) -> DTensor N×D`` serve. O padrão aqui faz
  MLP por ponto → max por célula → médias de janela → volta aos pontos.
* A cabeça é um MLP de gargalo invertido: ``linear → relu → PromptNorm →
  linear`` com atalho residual, seguido do classificador de 8 classes.
* A manifold mixup só roda em modo treino e só sobre linhas rotuladas.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from data.errors import ConfigError, DimensionError, RegistryError
from data.run_settings import RunConfig
from data.runtime_log import log_event
from data.scan_io import IGNORE, NUM_CLASSES, PointScan, ensure_ambient
from engine.layers import Linear, ParameterRegistry, PromptNorm
from engine.projection import SensorSpec, project, window_mean_segments
from engine.tensor import (
    DTensor,
    add,
    concat_cols,
    constant,
    gather_rows,
    parameter,
    relu,
    scale,
    scatter_max,
    softmax,
    softmax_cross_entropy,
)

INPUT_DIM = 4


@dataclass
class ModelConfig:
    sensors: list[SensorSpec] = field(default_factory=lambda: [SensorSpec()])
    point_dim: int = 32
    cell_dim: int = 32
    window: int = 3
    rounds: int = 2
    embed_dim: int = 64
    expansion: int = 4
    residual_dim: int = 64
    ambient_dim: int = 8
    ctx_dim: int = 64
    num_classes: int = NUM_CLASSES
    ppt: bool = True
    mixup: bool = False
    mixup_alpha: float = 2.0
    mixup_site: str = "head_input"
    seed: int = 0

    @property
    def num_datasets(self) -> int:
        return len(self.sensors)

    @classmethod
    def from_run_config(cls, config: RunConfig, sensors: Sequence[SensorSpec]) -> "ModelConfig":
        head, ext, toggles = config.head, config.extractor, config.toggles
        return cls(
            sensors=list(sensors),
            point_dim=ext.point_dim,
            cell_dim=ext.cell_dim,
            window=ext.window,
            rounds=ext.rounds,
            embed_dim=head.embed_dim,
            expansion=head.expansion,
            residual_dim=head.residual_dim,
            ambient_dim=head.ambient_dim if toggles.ambient else 0,
            ctx_dim=head.ctx_dim,
            num_classes=head.num_classes,
            ppt=toggles.ppt,
            mixup=toggles.mixup,
            mixup_alpha=head.mixup.alpha,
            mixup_site=head.mixup.site,
            seed=config.seed,
        )

    def as_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["sensors"] = [spec.as_dict() for spec in self.sensors]
        return payload

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        values = dict(data)
        values["sensors"] = [SensorSpec.from_dict(s) for s in values.get("sensors", [])]
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(f"Configuração de modelo inválida: {exc}") from exc


@dataclass
class Batch:
    """Scans concatenados com projeções deslocadas por segmento."""

    features: np.ndarray
    ambient: np.ndarray
    labels: np.ndarray
    point_dataset: np.ndarray
    cell_ids: np.ndarray
    cell_dataset: np.ndarray
    segments: list[tuple[int, int]]
    point_slices: list[slice]

    @property
    def num_points(self) -> int:
        return int(self.features.shape[0])

    @property
    def num_cells(self) -> int:
        return int(sum(h * w for h, w in self.segments))

    @property
    def valid(self) -> np.ndarray:
        return self.labels != IGNORE

    def one_hot(self, num_classes: int = NUM_CLASSES) -> np.ndarray:
        targets = np.zeros((self.num_points, num_classes))
        valid = self.valid
        targets[np.flatnonzero(valid), self.labels[valid]] = 1.0
        return targets


def prepare_batch(scans: Sequence[PointScan], sensors: Sequence[SensorSpec]) -> Batch:
    if not scans:
        raise DimensionError("prepare_batch sem scans")
    features, ambient, labels, point_ds, cell_ids, cell_ds = [], [], [], [], [], []
    segments: list[tuple[int, int]] = []
    slices: list[slice] = []
    cell_offset = point_offset = 0
    for scan in scans:
        if not 0 <= scan.dataset_id < len(sensors):
            raise RegistryError(f"dataset_id {scan.dataset_id} sem sensor registrado")
        spec = sensors[scan.dataset_id]
        image = project(scan, spec)
        n = scan.num_points
        features.append(np.concatenate([scan.xyz, scan.intensity[:, None]], axis=1))
        ambient.append(ensure_ambient(scan).ambient)
        labels.append(scan.labels)
        point_ds.append(np.full(n, scan.dataset_id, dtype=np.int64))
        cell_ids.append(image.cell_id + cell_offset)
        cell_ds.append(np.full(spec.num_cells, scan.dataset_id, dtype=np.int64))
        segments.append((spec.height, spec.width))
        slices.append(slice(point_offset, point_offset + n))
        cell_offset += spec.num_cells
        point_offset += n
    return Batch(
        features=np.concatenate(features),
        ambient=np.concatenate(ambient),
        labels=np.concatenate(labels),
        point_dataset=np.concatenate(point_ds),
        cell_ids=np.concatenate(cell_ids),
        cell_dataset=np.concatenate(cell_ds),
        segments=segments,
        point_slices=slices,
    )


# ----------------------------------------------------------------------
# Manifold mixup
# ----------------------------------------------------------------------
@dataclass
class MixupPlan:
    lam: float
    partner: np.ndarray


def plan_mixup(
    valid: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    *,
    lam: Optional[float] = None,
) -> Optional[MixupPlan]:
    """Sorteia λ ~ Beta(α, α) e uma permutação dos parceiros entre linhas válidas."""

    rows = np.flatnonzero(valid)
    if rows.shape[0] < 2:
        log_event("Mixup ignorada: menos de duas linhas rotuladas no lote.", level="debug")
        return None
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    partner = np.arange(valid.shape[0])
    partner[rows] = rows[rng.permutation(rows.shape[0])]
    return MixupPlan(lam=float(lam), partner=partner)


def mix_features(h: DTensor, plan: MixupPlan) -> DTensor:
    return add(scale(h, plan.lam), scale(gather_rows(h, plan.partner), 1.0 - plan.lam))


def mix_labels(y: np.ndarray, plan: MixupPlan) -> np.ndarray:
    return plan.lam * y + (1.0 - plan.lam) * y[plan.partner]


def manifold_mixup(
    h: DTensor,
    y: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    *,
    valid: Optional[np.ndarray] = None,
    lam: Optional[float] = None,
) -> tuple[DTensor, np.ndarray]:
    """``h̃ = λh + (1−λ)h[π]`` e ``ỹ = λy + (1−λ)y[π]`` com um λ por lote."""

    y = np.asarray(y, dtype=np.float64)
    if h.shape[0] != y.shape[0]:
        raise DimensionError(f"mixup: {h.shape[0]} linhas de atributo e {y.shape[0]} de rótulo")
    if valid is None:
        valid = np.ones(h.shape[0], dtype=bool)
    plan = plan_mixup(valid, alpha, rng, lam=lam)
    if plan is None:
        return h, y
    return mix_features(h, plan), mix_labels(y, plan)


# ----------------------------------------------------------------------
# Extrator e cabeça
# ----------------------------------------------------------------------
class FrustumExtractor:
    def __init__(self, config: ModelConfig, ctx_table: DTensor, rng: np.random.Generator) -> None:
        self.config = config
        ppt = config.ppt
        self.point_in = Linear("extractor.point_in.linear", INPUT_DIM, config.point_dim, rng)
        self.point_norm = PromptNorm("extractor.point_in.norm", config.point_dim, ctx_table, rng, enabled=ppt)
        self.cell_layers: list[tuple[Linear, PromptNorm]] = []
        width = config.point_dim
        for index in range(config.rounds):
            linear = Linear(f"extractor.cell{index}.linear", width, config.cell_dim, rng)
            norm = PromptNorm(f"extractor.cell{index}.norm", config.cell_dim, ctx_table, rng, enabled=ppt)
            self.cell_layers.append((linear, norm))
            width = config.cell_dim
        self.fuse = Linear("extractor.fuse.linear", config.point_dim + width, config.embed_dim, rng)
        self.fuse_norm = PromptNorm("extractor.fuse.norm", config.embed_dim, ctx_table, rng, enabled=ppt)
        self.out = Linear("extractor.out", config.embed_dim, config.embed_dim, rng)

    @property
    def norms(self) -> list[PromptNorm]:
        return [self.point_norm, *(norm for _, norm in self.cell_layers), self.fuse_norm]

    def register(self, registry: ParameterRegistry) -> None:
        self.point_in.register(registry)
        self.point_norm.register(registry)
        for linear, norm in self.cell_layers:
            linear.register(registry)
            norm.register(registry)
        self.fuse.register(registry)
        self.fuse_norm.register(registry)
        self.out.register(registry)

    def __call__(self, batch: Batch, mode: str) -> DTensor:
        points = relu(self.point_norm(self.point_in(constant(batch.features)), batch.point_dataset, mode))
        cells, _ = scatter_max(points, batch.cell_ids, batch.num_cells)
        for linear, norm in self.cell_layers:
            pooled = window_mean_segments(cells, batch.segments, self.config.window)
            cells = relu(norm(linear(pooled), batch.cell_dataset, mode))
        back = gather_rows(cells, batch.cell_ids)
        fused = relu(self.fuse_norm(self.fuse(concat_cols([points, back])), batch.point_dataset, mode))
        return self.out(fused)


class InvertedBottleneckHead:
    def __init__(self, config: ModelConfig, ctx_table: DTensor, rng: np.random.Generator) -> None:
        self.config = config
        self.ambient = (
            Linear("head.ambient", 1, config.ambient_dim, rng) if config.ambient_dim > 0 else None
        )
        in_dim = config.embed_dim + config.ambient_dim
        hidden = config.expansion * config.residual_dim
        self.expand = Linear("head.expand", in_dim, hidden, rng)
        self.norm = PromptNorm("head.norm", hidden, ctx_table, rng, enabled=config.ppt)
        self.contract = Linear("head.contract", hidden, config.residual_dim, rng)
        self.shortcut = (
            Linear("head.shortcut", in_dim, config.residual_dim, rng)
            if in_dim != config.residual_dim
            else None
        )
        self.classifier = Linear("head.classifier", config.residual_dim, config.num_classes, rng)

    @property
    def norms(self) -> list[PromptNorm]:
        return [self.norm]

    def register(self, registry: ParameterRegistry) -> None:
        for layer in (self.ambient, self.expand):
            if layer is not None:
                layer.register(registry)
        self.norm.register(registry)
        for layer in (self.contract, self.shortcut, self.classifier):
            if layer is not None:
                layer.register(registry)

    def inject_ambient(self, embed: DTensor, ambient: np.ndarray) -> DTensor:
        return ambient_inject(embed, ambient, self.ambient)

    def __call__(
        self,
        feat: DTensor,
        dataset_ids: np.ndarray,
        mode: str,
        plan: Optional[MixupPlan] = None,
    ) -> DTensor:
        site = self.config.mixup_site
        if plan is not None and site == "head_input":
            feat = mix_features(feat, plan)
        hidden = self.norm(relu(self.expand(feat)), dataset_ids, mode)
        if plan is not None and site == "hidden":
            hidden = mix_features(hidden, plan)
            feat = mix_features(feat, plan)
        residual = self.shortcut(feat) if self.shortcut is not None else feat
        return self.classifier(add(self.contract(hidden), residual))


def ambient_inject(embed: DTensor, ambient: np.ndarray, layer: Optional[Linear]) -> DTensor:
    """Concatena ao embedding a projeção linear 1→A do ambiente de cada ponto."""

    if layer is None:
        return embed
    ambient = np.asarray(ambient, dtype=np.float64).reshape(-1, 1)
    if ambient.shape[0] != embed.shape[0]:
        raise DimensionError(
            f"ambient_inject: {ambient.shape[0]} valores para {embed.shape[0]} pontos"
        )
    return concat_cols([embed, layer(constant(ambient))])


# ----------------------------------------------------------------------
# Modelo
# ----------------------------------------------------------------------
@dataclass
class ForwardResult:
    logits: DTensor
    targets: Optional[np.ndarray] = None


class SegmentationModel:
    def __init__(self, config: ModelConfig) -> None:
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.ctx_table = parameter(rng.normal(0.0, 1.0, size=(config.num_datasets, config.ctx_dim)))
        self.extractor = FrustumExtractor(config, self.ctx_table, rng)
        self.head = InvertedBottleneckHead(config, self.ctx_table, rng)
        self.params = ParameterRegistry()
        self.params.register("ctx_table", self.ctx_table)
        self.extractor.register(self.params)
        self.head.register(self.params)

    @property
    def norms(self) -> list[PromptNorm]:
        return [*self.extractor.norms, *self.head.norms]

    # ------------------------------------------------------------------
    # Congelamento e estado
    # ------------------------------------------------------------------
    def apply_freeze(self, patterns: Sequence[str], *, freeze_norm_stats: bool = True) -> list[str]:
        matched = self.params.apply_freeze(patterns)
        self.sync_norm_modes(freeze_norm_stats)
        return matched

    def sync_norm_modes(self, freeze_norm_stats: bool) -> None:
        for norm in self.norms:
            frozen = self.params.is_frozen(f"{norm.name}.gamma") and self.params.is_frozen(f"{norm.name}.beta")
            norm.mode_override = "eval" if (freeze_norm_stats and frozen) else None

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for norm in self.norms:
            out[f"{norm.name}.running_mean"] = norm.state.running_mean.copy()
            out[f"{norm.name}.running_var"] = norm.state.running_var.copy()
        return out

    def load_buffers(self, values: Mapping[str, np.ndarray]) -> None:
        for norm in self.norms:
            norm.state.running_mean[...] = values[f"{norm.name}.running_mean"]
            norm.state.running_var[...] = values[f"{norm.name}.running_var"]

    def snapshot(self) -> dict[str, dict[str, np.ndarray]]:
        return {"params": self.params.snapshot(), "buffers": self.buffers()}

    def restore(self, state: Mapping[str, Mapping[str, np.ndarray]]) -> None:
        self.params.restore(dict(state["params"]))
        self.load_buffers(state["buffers"])

    # ------------------------------------------------------------------
    # Forward
    # ------------------------------------------------------------------
    def forward(
        self,
        batch: Batch,
        mode: str = "eval",
        *,
        rng: Optional[np.random.Generator] = None,
        mixup_lam: Optional[float] = None,
    ) -> ForwardResult:
        embed = self.extractor(batch, mode)
        feat = self.head.inject_ambient(embed, batch.ambient)
        targets = batch.one_hot(self.config.num_classes)
        plan = None
        if mode == "train" and self.config.mixup and rng is not None:
            plan = plan_mixup(batch.valid, self.config.mixup_alpha, rng, lam=mixup_lam)
            if plan is not None:
                targets = mix_labels(targets, plan)
        logits = self.head(feat, batch.point_dataset, mode, plan)
        return ForwardResult(logits=logits, targets=targets)

    def loss(
        self,
        batch: Batch,
        mode: str = "train",
        *,
        rng: Optional[np.random.Generator] = None,
    ) -> tuple[DTensor, ForwardResult]:
        result = self.forward(batch, mode, rng=rng)
        loss = softmax_cross_entropy(result.logits, result.targets, ~batch.valid)
        return loss, result


def predict(
    scan: PointScan | Batch,
    model: SegmentationModel,
    dataset_id: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward em modo eval: ids por ponto e probabilidades N×8."""

    if isinstance(scan, Batch):
        batch = scan
    else:
        if dataset_id is not None and dataset_id != scan.dataset_id:
            scan = scan.copy()
            scan.dataset_id = int(dataset_id)
        batch = prepare_batch([scan], model.config.sensors)
    logits = model.forward(batch, "eval").logits.data
    probs = softmax(logits)
    return probs.argmax(axis=1), probs
