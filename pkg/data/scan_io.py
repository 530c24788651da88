"""Leitura e escrita de scans no formato SemanticKITTI.

Arquivo de pontos: registros float32 little-endian ``x, y, z, intensidade``
(4 canais) ou ``x, y, z, intensidade, ambiente`` (5 canais). Arquivo de
rótulos: uma palavra uint32 little-endian por ponto; os 16 bits baixos são
a classe semântica e os 16 altos a instância (ignorada na leitura, zerada
na escrita). O rótulo IGNORE é gravado como 0xFFFF.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Protocol, Sequence, Union

import numpy as np

from data.errors import (
    ConfigError,
    DimensionError,
    LabelMappingError,
    ScanFormatError,
    ScanIOError,
)
from data.runtime_log import log_event

TARGET_CLASSES: tuple[str, ...] = (
    "road",
    "ground",
    "vegetation",
    "people",
    "vehicle",
    "structure",
    "object",
    "outlier",
)
NUM_CLASSES = len(TARGET_CLASSES)
IGNORE = 255
IGNORE_WORD = 0xFFFF

_POINT_DTYPE = np.dtype("<f4")
_LABEL_DTYPE = np.dtype("<u4")
_LABEL_MAPS_DIR = Path(__file__).resolve().parent / "label_maps"

PathLike = Union[str, Path]


@dataclass
class PointScan:
    xyz: np.ndarray
    intensity: np.ndarray
    ambient: Optional[np.ndarray]
    labels: np.ndarray
    dataset_id: int = 0

    def __post_init__(self) -> None:
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if self.ambient is not None:
            self.ambient = np.asarray(self.ambient, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        count = self.xyz.shape[0]
        lengths = {count, self.intensity.shape[0], self.labels.shape[0]}
        if self.ambient is not None:
            lengths.add(self.ambient.shape[0])
        if len(lengths) != 1:
            raise DimensionError(
                f"Canais do scan com comprimentos diferentes: xyz={count}, "
                f"intensidade={self.intensity.shape[0]}, rótulos={self.labels.shape[0]}"
            )
        if count < 1:
            raise ScanFormatError("Scan sem pontos")
        valid = (self.labels == IGNORE) | ((self.labels >= 0) & (self.labels < NUM_CLASSES))
        if not np.all(valid):
            bad = int(self.labels[~valid][0])
            raise LabelMappingError(bad, "alvo")

    @property
    def num_points(self) -> int:
        return int(self.xyz.shape[0])

    @property
    def is_labeled(self) -> bool:
        return bool(np.any(self.labels != IGNORE))

    def copy(self) -> "PointScan":
        return PointScan(
            xyz=self.xyz.copy(),
            intensity=self.intensity.copy(),
            ambient=None if self.ambient is None else self.ambient.copy(),
            labels=self.labels.copy(),
            dataset_id=self.dataset_id,
        )


@dataclass
class LabelMap:
    """Tabela total de ids de origem (16 bits) para ids alvo ou IGNORE."""

    name: str
    source_to_target: dict[int, int]
    lookup: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        lookup = np.full(IGNORE_WORD + 1, -1, dtype=np.int64)
        for source, target in self.source_to_target.items():
            if not 0 <= int(source) <= IGNORE_WORD:
                raise ConfigError(f"Mapa '{self.name}': id de origem {source} fora de 16 bits")
            if int(target) != IGNORE and not 0 <= int(target) < NUM_CLASSES:
                raise ConfigError(f"Mapa '{self.name}': alvo {target} inválido")
            lookup[int(source)] = int(target)
        self.lookup = lookup

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], *, name: str = "") -> "LabelMap":
        """Aceita ``{"classes": [{"id", "target"}...]}`` ou ``{"table": {id: alvo}}``."""

        label = str(data.get("name", name) or name or "custom")
        table: dict[int, int] = {}
        if "classes" in data:
            for row in data["classes"]:
                table[int(row["id"])] = target_id(row["target"])
        elif "table" in data:
            for source, target in dict(data["table"]).items():
                table[int(source)] = target_id(target)
        else:
            raise ConfigError(f"Mapa de rótulos '{label}' sem 'classes' nem 'table'")
        return cls(label, table)

    @classmethod
    def builtin(cls, name: str) -> "LabelMap":
        path = _LABEL_MAPS_DIR / f"{name}.json"
        if not path.exists():
            available = sorted(p.stem for p in _LABEL_MAPS_DIR.glob("*.json"))
            raise ConfigError(f"Mapa de rótulos '{name}' inexistente. Disponíveis: {available}")
        return cls.load(path)

    @classmethod
    def load(cls, path: PathLike) -> "LabelMap":
        path = Path(path)
        try:
            with path.open("r", encoding="utf-8") as handle:
                raw = json.load(handle)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"Não foi possível ler o mapa de rótulos {path}: {exc}") from exc
        return cls.from_dict(raw, name=path.stem)

    @classmethod
    def identity(cls) -> "LabelMap":
        table = {k: k for k in range(NUM_CLASSES)}
        table[IGNORE_WORD] = IGNORE
        return cls("identity", table)

    def as_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "table": {
                str(k): (TARGET_CLASSES[v] if v != IGNORE else "ignore")
                for k, v in sorted(self.source_to_target.items())
            },
        }

    def remap(self, raw: np.ndarray) -> np.ndarray:
        return remap_labels(raw, self)


class ScanSource(Protocol):
    """O que `load_scan` precisa de uma entrada do registro."""

    dataset_id: int
    has_ambient: bool
    label_map: LabelMap


def target_id(name_or_id: Union[str, int]) -> int:
    if isinstance(name_or_id, str):
        key = name_or_id.strip().lower()
        if key == "ignore":
            return IGNORE
        if key in TARGET_CLASSES:
            return TARGET_CLASSES.index(key)
        raise ConfigError(f"Classe alvo desconhecida: {name_or_id!r}")
    value = int(name_or_id)
    if value != IGNORE and not 0 <= value < NUM_CLASSES:
        raise ConfigError(f"Classe alvo desconhecida: {name_or_id!r}")
    return value


# ----------------------------------------------------------------------
# Public API
# ----------------------------------------------------------------------
def remap_labels(raw: np.ndarray, label_map: LabelMap) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.int64)
    if raw.size and (raw.min() < 0 or raw.max() > IGNORE_WORD):
        bad = int(raw[(raw < 0) | (raw > IGNORE_WORD)][0])
        raise LabelMappingError(bad, label_map.name)
    mapped = label_map.lookup[raw]
    missing = mapped < 0
    if np.any(missing):
        raise LabelMappingError(int(raw[missing][0]), label_map.name)
    return mapped


def label_path_for(bin_path: PathLike) -> Path:
    """``.../velodyne/000123.bin`` → ``.../labels/000123.label``."""
    bin_path = Path(bin_path)
    return bin_path.parent.parent / "labels" / f"{bin_path.stem}.label"


def load_scan(
    bin_path: PathLike,
    label_path: Optional[PathLike],
    entry: ScanSource,
) -> PointScan:
    bin_path = Path(bin_path)
    channels = 5 if entry.has_ambient else 4
    record = channels * _POINT_DTYPE.itemsize
    raw_points = _read_bytes(bin_path)
    if len(raw_points) % record != 0:
        expected = (len(raw_points) // record + 1) * record
        raise ScanFormatError(
            f"Arquivo de pontos não é múltiplo de {record} bytes ({channels} canais)",
            bin_path,
            expected,
            len(raw_points),
        )
    points = np.frombuffer(raw_points, dtype=_POINT_DTYPE).reshape(-1, channels).astype(np.float64)
    count = points.shape[0]
    if count == 0:
        raise ScanFormatError("Arquivo de pontos vazio", bin_path, record, 0)

    if label_path is not None and Path(label_path).exists():
        label_path = Path(label_path)
        raw_labels = _read_bytes(label_path)
        expected = count * _LABEL_DTYPE.itemsize
        if len(raw_labels) != expected:
            raise ScanFormatError(
                "Arquivo de rótulos com número de registros diferente do de pontos",
                label_path,
                expected,
                len(raw_labels),
            )
        words = np.frombuffer(raw_labels, dtype=_LABEL_DTYPE)
        labels = remap_labels(words & IGNORE_WORD, entry.label_map)
    else:
        labels = np.full(count, IGNORE, dtype=np.int64)

    finite = np.all(np.isfinite(points[:, :3]), axis=1)
    if not np.all(finite):
        dropped = int((~finite).sum())
        _count_dropped(dropped)
        log_event(f"{dropped} ponto(s) com coordenadas não finitas descartados em {bin_path.name}", level="warning")
        points, labels = points[finite], labels[finite]
        if points.shape[0] == 0:
            raise ScanFormatError("Nenhum ponto finito no arquivo", bin_path)

    return PointScan(
        xyz=points[:, :3],
        intensity=points[:, 3],
        ambient=points[:, 4] if entry.has_ambient else None,
        labels=labels,
        dataset_id=int(entry.dataset_id),
    )


def save_scan(
    scan: PointScan,
    bin_path: PathLike,
    label_path: Optional[PathLike],
    *,
    channels: Optional[int] = None,
) -> None:
    """Inverso exato de `load_scan` para entradas com o mapa identidade."""

    if scan.num_points < 1:
        raise ScanFormatError("Scan sem pontos não pode ser gravado", Path(bin_path))
    channels = channels or (5 if scan.ambient is not None else 4)
    if channels not in (4, 5):
        raise ConfigError(f"Número de canais inválido: {channels}")
    columns = [scan.xyz, scan.intensity[:, None]]
    if channels == 5:
        ambient = scan.ambient if scan.ambient is not None else np.zeros(scan.num_points)
        columns.append(ambient[:, None])
    points = np.concatenate(columns, axis=1).astype(_POINT_DTYPE)
    _write_bytes(Path(bin_path), points.tobytes())

    if label_path is not None:
        words = np.where(scan.labels == IGNORE, IGNORE_WORD, scan.labels).astype(_LABEL_DTYPE)
        _write_bytes(Path(label_path), words.tobytes())


def attach_ambient(
    scan: PointScan,
    ambient_values: Optional[Sequence[float] | np.ndarray] = None,
    *,
    entry: Optional[ScanSource] = None,
) -> PointScan:
    """Instala o canal de ambiente; zeros quando a entrada não tem o sensor."""

    if ambient_values is None:
        values = np.zeros(scan.num_points)
    else:
        values = np.asarray(ambient_values, dtype=np.float64).reshape(-1)
    if values.shape[0] != scan.num_points:
        raise DimensionError(
            f"attach_ambient: {values.shape[0]} valores para {scan.num_points} pontos"
        )
    if entry is not None and not entry.has_ambient:
        values = np.zeros(scan.num_points)
    return replace(scan, ambient=values.copy())


def ensure_ambient(scan: PointScan, entry: Optional[ScanSource] = None) -> PointScan:
    """Instala ambiente zerado em scans de sensores sem esse canal."""
    if scan.ambient is not None and (entry is None or entry.has_ambient):
        return scan
    return attach_ambient(scan, entry=entry)


def dropped_point_count() -> int:
    with _dropped_lock:
        return _dropped_points


def reset_dropped_point_count() -> None:
    global _dropped_points
    with _dropped_lock:
        _dropped_points = 0


# ----------------------------------------------------------------------
# Internal helpers
# ----------------------------------------------------------------------
_dropped_points = 0
_dropped_lock = threading.Lock()


def _count_dropped(amount: int) -> None:
    global _dropped_points
    with _dropped_lock:
        _dropped_points += amount


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise ScanIOError(path, exc.strerror or str(exc)) from exc


def _write_bytes(path: Path, payload: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as exc:
        raise ScanIOError(path, exc.strerror or str(exc)) from exc
