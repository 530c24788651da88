"""Telemetria leve em JSONL para diagnóstico de execuções de treino e avaliação."""

from __future__ import annotations

import json
import os
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

TELEMETRY_FILE_NAME = "telemetry.jsonl"
DEFAULT_TELEMETRY_FILE = Path("logs") / TELEMETRY_FILE_NAME
_TELEMETRY_DISABLED_VALUES = {"1", "true", "yes"}

_destination: Path = DEFAULT_TELEMETRY_FILE
_lock = threading.Lock()


def _telemetry_enabled() -> bool:
    flag = os.environ.get("DESKSEG_TELEMETRY_DISABLED", "").strip().lower()
    return flag not in _TELEMETRY_DISABLED_VALUES


def set_destination(path: Union[str, Path, None]) -> Path:
    """Redireciona os eventos (normalmente para ``<out>/telemetry.jsonl``)."""

    global _destination
    with _lock:
        _destination = Path(path) if path is not None else DEFAULT_TELEMETRY_FILE
        return _destination


def destination() -> Path:
    return _destination


def _plain(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return value.as_posix()
    if isinstance(value, dict):
        return {str(key): _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def record_event(event: str, details: Optional[dict[str, Any]] = None) -> dict[str, Any]:
    """Persiste um registro de telemetria e retorna o payload estruturado."""
    timestamp = (
        datetime.now(timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")
    )
    entry = {
        "timestamp": timestamp,
        "event": event,
        "details": _plain(details or {}),
    }
    if not _telemetry_enabled():
        return entry
    try:
        with _lock:
            _destination.parent.mkdir(parents=True, exist_ok=True)
            with _destination.open("a", encoding="utf-8") as handle:
                json.dump(entry, handle, ensure_ascii=False)
                handle.write("\n")
    except Exception:
        # Telemetria não deve interromper o fluxo principal.
        return entry
    return entry


def read_events(path: Union[str, Path, None] = None) -> list[dict[str, Any]]:
    target = Path(path) if path is not None else _destination
    if not target.exists():
        return []
    events = []
    for line in target.read_text(encoding="utf-8").splitlines():
        if line.strip():
            events.append(json.loads(line))
    return events
