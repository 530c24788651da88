"""Persistência em disco dos logs de cada execução da linha de comando.

Guia de edição (resumido)
- Modificável pelo usuário:
    - Diretório `LOGS_DIR` via `app/constants.py` ou `DESKSEG_LOGS_DIR`.
- Requer atenção:
    - Mudanças na fila de escrita, na thread de I/O ou no flush podem causar perda de logs.
- Apenas para devs:
    - Reescrever a arquitetura de buffering e o ciclo de vida da sessão.
"""

from __future__ import annotations

import contextlib
import queue
import re
import threading
import time
import unicodedata
from datetime import datetime
from pathlib import Path
from typing import Any, Optional, Tuple

from data.runtime_log import add_log_sink, remove_log_sink

from .constants import LOGS_DIR

QueueMessage = Tuple[Any, ...]


def _sanitize_session_name(raw_name: str) -> str:
    normalized = unicodedata.normalize("NFKD", raw_name)
    ascii_only = normalized.encode("ascii", "ignore").decode("ascii")
    cleaned = re.sub(r"[^A-Za-z0-9._-]+", "-", ascii_only).strip("-._")
    return cleaned or "execucao"


class LogManager:
    """Grava as linhas de `log_event` da sessão corrente em disco numa thread."""

    def __init__(
        self,
        *,
        logs_dir: Path = LOGS_DIR,
        max_queue_size: int = 10000,
        flush_interval: float = 2.0,
        flush_batch: int = 200,
    ) -> None:
        self._logs_dir = Path(logs_dir)
        self._current_file: Optional[Path] = None
        self._write_failed = False
        self._failures: list[str] = []
        self._max_queue_size = max_queue_size if max_queue_size > 0 else 10000
        self._write_queue: queue.Queue[QueueMessage] = queue.Queue()
        self._queue_lock = threading.Lock()
        self._queued_items = 0
        self._dropped_lines_count = 0
        self._drop_reported = False
        self._flush_interval = flush_interval if flush_interval > 0 else 2.0
        self._flush_batch = flush_batch if flush_batch > 0 else 200
        self._attached = False
        self._writer_thread = threading.Thread(target=self._writer_loop, daemon=True)
        self._writer_thread.start()

    @property
    def write_failed(self) -> bool:
        return self._write_failed

    @property
    def dropped_lines(self) -> int:
        return self._dropped_lines_count

    @property
    def failures(self) -> list[str]:
        """Falhas de gravação registradas desde o início da sessão."""
        return list(self._failures)

    # ------------------------------------------------------------------
    # API pública
    # ------------------------------------------------------------------
    def start_session(self, command: str) -> Optional[Path]:
        """Abre ``logs/AAAAMMDD-HHMMSS-<comando>.log`` e passa a receber `log_event`."""

        sanitized = _sanitize_session_name(command)
        timestamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        target = self._logs_dir / f"{timestamp}-{sanitized}.log"
        header = f"### Log de execução - {command} ###\n"
        self._failures = []
        self._dropped_lines_count = 0
        self._drop_reported = False
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            self._write_failed = True
            self._report_failure(f"Não foi possível preparar o diretório de log: {exc}")
            return None

        self._enqueue_message(("start_file", target, header), force=True)
        self._current_file = target
        self._write_failed = False
        if not self._attached:
            add_log_sink(self.append_line)
            self._attached = True
        return target

    def append_line(self, raw_line: str) -> None:
        if self._current_file is None or self._write_failed:
            return
        if not self._enqueue_message(("write", self._current_file, raw_line)):
            self._dropped_lines_count += 1
            if not self._drop_reported:
                self._drop_reported = True
                self._report_failure("Algumas linhas de log foram descartadas devido a alta taxa de geração.")

    def end_session(self) -> None:
        """Para de receber linhas; o que já está na fila ainda é gravado."""
        self._detach()
        self._current_file = None

    def shutdown(self, timeout: float = 5.0) -> None:
        """Grava o que estiver em buffer e encerra a thread de escrita."""
        self._detach()
        with contextlib.suppress(Exception):
            self._enqueue_message(("stop",), force=True)
            if self._writer_thread.is_alive():
                self._writer_thread.join(timeout)

    def __enter__(self) -> "LogManager":
        return self

    def __exit__(self, *_exc: object) -> None:
        self.shutdown()

    # ------------------------------------------------------------------
    # Auxiliares internos
    # ------------------------------------------------------------------
    def _detach(self) -> None:
        if self._attached:
            remove_log_sink(self.append_line)
            self._attached = False

    def _report_failure(self, message: str) -> None:
        self._failures.append(message)

    def _writer_loop(self) -> None:
        """Agrupa escritas e faz flush por tamanho (`_flush_batch`) ou intervalo."""
        current_path: Optional[Path] = None
        header: Optional[str] = None
        buffer: list[str] = []
        last_flush = time.monotonic()
        while True:
            try:
                msg: Optional[QueueMessage] = self._write_queue.get(timeout=self._flush_interval)
                self._decrement_queue_size()
            except queue.Empty:
                msg = None

            if msg:
                cmd = msg[0]
                if cmd == "stop":
                    if buffer and current_path is not None:
                        with contextlib.suppress(OSError):
                            self._flush_buffer(current_path, header, buffer)
                    return
                if cmd == "start_file":
                    _, path, hdr = msg
                    if buffer and current_path is not None:
                        with contextlib.suppress(OSError):
                            self._flush_buffer(current_path, header, buffer)
                        buffer = []
                    current_path, header = path, hdr
                    last_flush = time.monotonic()
                    try:
                        self._flush_buffer(current_path, header, [])
                    except OSError as exc:
                        self._write_failed = True
                        self._report_failure(f"Falha ao preparar arquivo de log: {exc}")
                    continue
                if cmd == "write":
                    _, path, raw = msg
                    if current_path is None or path != current_path:
                        continue
                    buffer.append(raw)

            now = time.monotonic()
            if buffer and current_path is not None and (
                len(buffer) >= self._flush_batch or (now - last_flush) >= self._flush_interval
            ):
                try:
                    self._flush_buffer(current_path, header, buffer)
                    last_flush = now
                except OSError as exc:
                    self._write_failed = True
                    self._report_failure(f"Falha ao gravar no log: {exc}")
                buffer = []

    def _flush_buffer(self, path: Path, header: Optional[str], lines: list[str]) -> None:
        exists = path.exists()
        with open(path, "a" if exists else "w", encoding="utf-8") as handle:
            if not exists and header:
                handle.write(header)
            if lines:
                handle.write("\n".join(lines) + "\n")
        self._write_failed = False

    def _enqueue_message(self, message: QueueMessage, *, force: bool = False) -> bool:
        """Mensagens de controle usam ``force=True``; linhas comuns são descartadas sob backlog."""
        with self._queue_lock:
            if not force and self._queued_items >= self._max_queue_size:
                return False
            self._write_queue.put_nowait(message)
            self._queued_items += 1
            return True

    def _decrement_queue_size(self) -> None:
        with self._queue_lock:
            if self._queued_items > 0:
                self._queued_items -= 1

