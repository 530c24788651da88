"""Produção de lotes de treino em uma thread de fundo.

Guia de edição (resumido)
- Modificável pelo usuário:
    - Profundidade da fila (`DESKSEG_PREFETCH_DEPTH`).
- Requer atenção:
    - O consumidor deve receber os lotes na ordem dos passos; cada lote depende só
      do passo, então produzir adiantado não altera o resultado.
- Apenas para devs:
    - Ciclo de vida da thread, cancelamento e propagação de exceções.
"""

from __future__ import annotations

import contextlib
import queue
import threading
from typing import Callable, Generic, Iterator, Optional, Sequence, TypeVar

from data.runtime_log import log_event

from .constants import PREFETCH_DEPTH

T = TypeVar("T")

_DONE = object()


class BatchPrefetcher(Generic[T]):
    """Chama ``make(step)`` adiantado numa thread e entrega ``(step, lote)`` em ordem.

    Uso como ``batch_source`` de `engine.train.run_stage`::

        run_stage(..., batch_source=BatchPrefetcher(depth=4))
    """

    def __init__(self, depth: int = PREFETCH_DEPTH) -> None:
        self.depth = max(int(depth), 1)
        self._stop_requested = threading.Event()
        self._thread: Optional[threading.Thread] = None

    # ------------------------------------------------------------------
    # Public API
    # ------------------------------------------------------------------
    def __call__(self, make: Callable[[int], T], steps: Sequence[int]) -> Iterator[tuple[int, T]]:
        items: queue.Queue[object] = queue.Queue(maxsize=self.depth)
        self._stop_requested.clear()
        self._thread = threading.Thread(
            target=self._produce, args=(make, list(steps), items), name="deskseg-prefetch", daemon=True
        )
        self._thread.start()
        try:
            while True:
                item = items.get()
                if item is _DONE:
                    return
                if isinstance(item, BaseException):
                    raise item
                yield item  # type: ignore[misc]
        finally:
            self.stop()
            # libera o produtor caso esteja bloqueado em put()
            with contextlib.suppress(queue.Empty):
                while True:
                    items.get_nowait()
            if self._thread is not None:
                self._thread.join(timeout=5.0)

    def stop(self) -> None:
        self._stop_requested.set()

    @property
    def running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    # ------------------------------------------------------------------
    # Internal helpers
    # ------------------------------------------------------------------
    def _produce(self, make: Callable[[int], T], steps: list[int], items: "queue.Queue[object]") -> None:
        try:
            for step in steps:
                if self._stop_requested.is_set():
                    return
                batch = make(step)
                if not self._put(items, (step, batch)):
                    return
        except Exception as exc:
            log_event(f"Falha ao preparar lote: {exc}", level="error")
            self._put(items, exc)
            return
        self._put(items, _DONE)

    def _put(self, items: "queue.Queue[object]", value: object) -> bool:
        while not self._stop_requested.is_set():
            try:
                items.put(value, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False
