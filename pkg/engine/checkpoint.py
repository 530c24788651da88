"""Checkpoint binário versionado do modelo.

Layout (ver ``docs/formatos.md``)::

    b"DSCK" | versão uint16 LE | tamanho do cabeçalho uint32 LE |
    cabeçalho JSON UTF-8 | dados float64 LE concatenados

O cabeçalho lista, em ordem, cada tensor (``name``, ``kind`` param/buffer,
``shape``, ``frozen``) e traz a configuração do modelo e metadados livres.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from data.errors import CheckpointError, ScanIOError
from engine.model import ModelConfig, SegmentationModel

MAGIC = b"DSCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_DATA_DTYPE = np.dtype("<f8")

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    model: SegmentationModel
    meta: dict[str, Any] = field(default_factory=dict)


def encode_checkpoint(model: SegmentationModel, meta: Optional[dict[str, Any]] = None) -> bytes:
    tensors: list[dict[str, Any]] = []
    chunks: list[bytes] = []
    for entry in model.params:
        tensors.append({
            "name": entry.name,
            "kind": "param",
            "shape": list(entry.tensor.data.shape),
            "frozen": entry.frozen,
        })
        chunks.append(entry.tensor.data.astype(_DATA_DTYPE).tobytes())
    for name, array in model.buffers().items():
        tensors.append({"name": name, "kind": "buffer", "shape": list(array.shape), "frozen": False})
        chunks.append(array.astype(_DATA_DTYPE).tobytes())
    header = {
        "model": model.config.as_dict(),
        "tensors": tensors,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)


def decode_checkpoint(payload: bytes, *, source: str = "<memória>") -> Checkpoint:
    if len(payload) < _PREFIX.size:
        raise CheckpointError(f"Checkpoint truncado: {source}")
    magic, version, header_size = _PREFIX.unpack_from(payload)
    if magic != MAGIC:
        raise CheckpointError(f"Arquivo não é um checkpoint DeskSeg: {source}")
    if version != VERSION:
        raise CheckpointError(f"Versão de checkpoint {version} não suportada (esperado {VERSION})")
    start = _PREFIX.size
    try:
        header = json.loads(payload[start : start + header_size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"Cabeçalho de checkpoint ilegível: {source}") from exc

    model = SegmentationModel(ModelConfig.from_dict(header["model"]))
    offset = start + header_size
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    frozen: list[str] = []
    for item in header["tensors"]:
        shape = tuple(item["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * _DATA_DTYPE.itemsize
        if end > len(payload):
            raise CheckpointError(f"Checkpoint truncado em {item['name']}: {source}")
        array = np.frombuffer(payload[offset:end], dtype=_DATA_DTYPE).reshape(shape).astype(np.float64)
        offset = end
        if item["kind"] == "param":
            if item["name"] not in model.params:
                raise CheckpointError(f"Parâmetro desconhecido no checkpoint: {item['name']}")
            params[item["name"]] = array
            if item.get("frozen"):
                frozen.append(item["name"])
        else:
            buffers[item["name"]] = array
    if offset != len(payload):
        raise CheckpointError(f"Bytes excedentes no checkpoint: {source}")
    missing = set(model.params.names) - set(params)
    if missing:
        raise CheckpointError(f"Checkpoint sem os parâmetros: {sorted(missing)}")
    try:
        model.restore({"params": params, "buffers": buffers})
    except KeyError as exc:
        raise CheckpointError(f"Checkpoint sem o buffer {exc}") from exc
    for name in frozen:
        model.params.entry(name).frozen = True
    return Checkpoint(model=model, meta=dict(header.get("meta", {})))


def save_checkpoint(model: SegmentationModel, path: PathLike, meta: Optional[dict[str, Any]] = None) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(model, meta))
    except OSError as exc:
        raise ScanIOError(path, exc.strerror or str(exc)) from exc
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"Checkpoint não encontrado: {path}") from exc
    except OSError as exc:
        raise ScanIOError(path, exc.strerror or str(exc)) from exc
    return decode_checkpoint(payload, source=str(path))


def parameter_digest(model: SegmentationModel, pattern_names: Optional[list[str]] = None) -> str:
    """SHA-256 dos valores dos parâmetros (todos ou os nomes dados)."""

    digest = hashlib.sha256()
    names = pattern_names if pattern_names is not None else model.params.names
    for name in names:
        digest.update(name.encode("utf-8"))
        digest.update(model.params[name].data.astype(_DATA_DTYPE).tobytes())
    return digest.hexdigest()
