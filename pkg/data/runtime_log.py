"""Emissão padronizada de logs de runtime do DeskSeg.

Todas as camadas (dados, motor numérico e CLI) registram mensagens por
`log_event`, no mesmo formato de linha usado pelos scripts de automação:
``[DeskSeg][NIVEL][HH:MM:SS] mensagem``. A sessão de log em disco
(`app.log_manager.LogManager`) assina essas linhas como um *sink*.
"""

from __future__ import annotations

import os
import sys
import threading
from datetime import datetime
from typing import Callable, Optional

LOG_PREFIX = "DeskSeg"
LogSink = Callable[[str], None]

_LEVELS = {"DEBUG": 10, "INFO": 20, "WARNING": 30, "ERROR": 40}
_sinks: list[LogSink] = []
_sinks_lock = threading.Lock()


def _minimum_level() -> int:
    raw = os.environ.get("DESKSEG_LOG_LEVEL", "INFO").strip().upper()
    return _LEVELS.get(raw, _LEVELS["INFO"])


def format_line(message: str, *, level: str = "info", now: Optional[datetime] = None) -> str:
    timestamp = (now or datetime.now()).strftime("%H:%M:%S")
    return f"[{LOG_PREFIX}][{level.upper()}][{timestamp}] {message}"


def log_event(message: str, *, level: str = "info") -> Optional[str]:
    """Emite uma linha de log padronizada para o console e os sinks ativos."""

    label = level.upper()
    if _LEVELS.get(label, _LEVELS["INFO"]) < _minimum_level():
        return None
    line = format_line(message, level=label)
    stream = sys.stderr if label == "ERROR" else sys.stdout
    print(line, file=stream, flush=True)
    with _sinks_lock:
        sinks = list(_sinks)
    for sink in sinks:
        try:
            sink(line)
        except Exception:
            # Um sink com defeito não pode derrubar o treino.
            continue
    return line


def add_log_sink(sink: LogSink) -> None:
    with _sinks_lock:
        if sink not in _sinks:
            _sinks.append(sink)


def remove_log_sink(sink: LogSink) -> None:
    with _sinks_lock:
        if sink in _sinks:
            _sinks.remove(sink)


def configure_stdio() -> None:
    """Força saída UTF-8 para consoles Windows."""
    if hasattr(sys.stdout, "reconfigure"):
        sys.stdout.reconfigure(encoding="utf-8", errors="replace")
    if hasattr(sys.stderr, "reconfigure"):
        sys.stderr.reconfigure(encoding="utf-8", errors="replace")
