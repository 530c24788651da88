"""Registro de datasets: ids densos, sensores, mapas de rótulos e splits.

Formato JSON (caminhos relativos ao próprio arquivo)::

    {
      "target": "pseudo_target",
      "datasets": [
        {"name": "pseudo_a", "dataset_id": 0, "has_ambient": false,
         "channels": 4, "label_map": "identity",
         "sensor": {"height": 64, "width": 1024, "fov_down_deg": -25.0, "fov_up_deg": 3.0},
         "train": ["pseudo_a/velodyne/000000.bin", ...], "val": [...]}
      ]
    }

``label_map`` aceita o nome de um mapa embutido (``data/label_maps``) ou
uma tabela inline ``{"name": ..., "table": {"10": "vehicle", ...}}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Optional, Sequence, Union

from data.errors import ConfigError, RegistryError
from data.scan_io import LabelMap, PointScan, label_path_for, load_scan
from engine.projection import SensorSpec

PathLike = Union[str, Path]


@dataclass
class RegistryEntry:
    name: str
    dataset_id: int
    has_ambient: bool
    label_map: LabelMap
    sensor: SensorSpec = field(default_factory=SensorSpec)
    train: list[Path] = field(default_factory=list)
    val: list[Path] = field(default_factory=list)
    builtin_map: Optional[str] = None

    @property
    def channels(self) -> int:
        return 5 if self.has_ambient else 4

    def split(self, name: str) -> list[Path]:
        if name == "train":
            return self.train
        if name == "val":
            return self.val
        raise ConfigError(f"Split desconhecido: {name!r} (use 'train' ou 'val')")

    def load(self, bin_path: PathLike) -> PointScan:
        return load_scan(bin_path, label_path_for(bin_path), self)


@dataclass
class DatasetRegistry:
    entries: list[RegistryEntry]
    target: Optional[str] = None
    root: Path = field(default_factory=Path.cwd)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        ids = sorted(entry.dataset_id for entry in self.entries)
        if ids != list(range(len(self.entries))):
            raise RegistryError(f"dataset_ids devem ser densos e únicos 0..D-1; obtido {ids}")
        names = [entry.name for entry in self.entries]
        if len(set(names)) != len(names):
            raise RegistryError(f"Nomes de dataset repetidos: {names}")
        if self.target is not None and self.target not in names:
            raise RegistryError(f"Dataset alvo '{self.target}' não está no registro")

    def __iter__(self) -> Iterator[RegistryEntry]:
        return iter(sorted(self.entries, key=lambda e: e.dataset_id))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [entry.name for entry in self]

    def get(self, name: str) -> RegistryEntry:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise RegistryError(f"Dataset desconhecido: '{name}'. Registrados: {self.names}")

    def by_id(self, dataset_id: int) -> RegistryEntry:
        for entry in self.entries:
            if entry.dataset_id == dataset_id:
                return entry
        raise RegistryError(f"dataset_id {dataset_id} fora do registro (D={len(self.entries)})")

    def target_entry(self) -> RegistryEntry:
        if self.target is None:
            raise RegistryError("Registro sem dataset alvo definido ('target').")
        return self.get(self.target)

    def sensors(self) -> list[SensorSpec]:
        return [entry.sensor for entry in self]

    def upsert(self, entry: RegistryEntry) -> None:
        for index, current in enumerate(self.entries):
            if current.name == entry.name:
                entry.dataset_id = current.dataset_id
                self.entries[index] = entry
                return
        entry.dataset_id = len(self.entries)
        self.entries.append(entry)


# ----------------------------------------------------------------------
# Public API
# ----------------------------------------------------------------------
def load_registry(path: PathLike) -> DatasetRegistry:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"Registro de datasets não encontrado: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"Registro de datasets ilegível ({path}): {exc}") from exc
    return registry_from_dict(raw, root=path.resolve().parent)


def registry_from_dict(raw: Mapping[str, Any], *, root: Path) -> DatasetRegistry:
    if not isinstance(raw, Mapping) or "datasets" not in raw:
        raise RegistryError("Registro sem a lista 'datasets'.")
    entries = [_entry_from_dict(item, root) for item in raw["datasets"]]
    return DatasetRegistry(entries=entries, target=raw.get("target"), root=root)


def save_registry(registry: DatasetRegistry, path: PathLike) -> Path:
    path = Path(path)
    root = path.resolve().parent
    payload = {
        "target": registry.target,
        "datasets": [_entry_as_dict(entry, root) for entry in registry],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        json.dump(payload, handle, ensure_ascii=False, indent=2)
        handle.write("\n")
    return path


# ----------------------------------------------------------------------
# Internal helpers
# ----------------------------------------------------------------------
def _resolve_label_map(raw: Any) -> tuple[LabelMap, Optional[str]]:
    if isinstance(raw, str):
        if raw == "identity":
            return LabelMap.identity(), raw
        return LabelMap.builtin(raw), raw
    if isinstance(raw, Mapping):
        return LabelMap.from_dict(raw), None
    raise RegistryError(f"Campo 'label_map' inválido: {raw!r}")


def _entry_from_dict(item: Mapping[str, Any], root: Path) -> RegistryEntry:
    try:
        name = str(item["name"])
        has_ambient = bool(item.get("has_ambient", False))
        channels = int(item.get("channels", 5 if has_ambient else 4))
        if channels != (5 if has_ambient else 4):
            raise RegistryError(f"'{name}': channels={channels} incoerente com has_ambient={has_ambient}")
        label_map, builtin = _resolve_label_map(item.get("label_map", "identity"))
        sensor = SensorSpec.from_dict(item["sensor"]) if "sensor" in item else SensorSpec()
        return RegistryEntry(
            name=name,
            dataset_id=int(item["dataset_id"]),
            has_ambient=has_ambient,
            label_map=label_map,
            sensor=sensor,
            train=[_absolute(root, p) for p in item.get("train", [])],
            val=[_absolute(root, p) for p in item.get("val", [])],
            builtin_map=builtin,
        )
    except KeyError as exc:
        raise RegistryError(f"Entrada do registro sem o campo {exc}: {dict(item)!r}") from exc


def _entry_as_dict(entry: RegistryEntry, root: Path) -> dict[str, Any]:
    return {
        "name": entry.name,
        "dataset_id": entry.dataset_id,
        "has_ambient": entry.has_ambient,
        "channels": entry.channels,
        "label_map": entry.builtin_map or entry.label_map.as_dict(),
        "sensor": entry.sensor.as_dict(),
        "train": [_relative(root, p) for p in entry.train],
        "val": [_relative(root, p) for p in entry.val],
    }


def _absolute(root: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else root / path


def _relative(root: Path, path: Path) -> str:
    try:
        return Path(path).resolve().relative_to(root).as_posix()
    except ValueError:
        return str(path)


def split_paths(paths: Sequence[Path], val_fraction: float) -> tuple[list[Path], list[Path]]:
    """Separa os últimos ``val_fraction`` dos caminhos (ordenados) para validação."""

    ordered = sorted(paths)
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"val_fraction deve estar em [0, 1): {val_fraction}")
    n_val = int(round(len(ordered) * val_fraction))
    cut = len(ordered) - n_val
    return ordered[:cut], ordered[cut:]
