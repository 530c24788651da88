"""
progress_manager.py - Progresso de treino em tempo real
Permite que os estágios de treino publiquem passo, perda e melhor mIoU via arquivo JSON.
"""

from __future__ import annotations

import json
import os
import threading
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union

from data.runtime_log import log_event

PROGRESS_ENV = "DESKSEG_PROGRESS_FILE"
DEFAULT_FILE_NAME = "progress.json"


class ProgressManager:
    """Gerencia o arquivo de progresso de uma execução."""

    def __init__(self, progress_file: Union[str, Path, None] = None, *, out_dir: Union[str, Path, None] = None):
        self.progress_path = self._resolve_progress_path(progress_file, out_dir)
        self.progress_data: Dict[str, Any] = {
            "status": "idle",  # idle, running, completed, error
            "stage": None,
            "percentage": 0,
            "current_step": "Aguardando início...",
            "total_steps": 0,
            "current_step_number": 0,
            "train_loss": None,
            "best_miou": None,
            "start_time": None,
            "estimated_time_remaining": None,
            "messages": [],
            "errors": [],
        }
        self.lock = threading.Lock()

    @staticmethod
    def _resolve_progress_path(
        custom_path: Union[str, Path, None] = None,
        out_dir: Union[str, Path, None] = None,
    ) -> Path:
        """Caminho explícito > variável de ambiente > ``<out>/progress.json``."""
        if custom_path:
            return Path(custom_path)
        env_path = os.environ.get(PROGRESS_ENV)
        if env_path:
            return Path(env_path)
        return Path(out_dir or ".") / DEFAULT_FILE_NAME

    def start(self, stage: str, total_steps: int) -> None:
        with self.lock:
            self.progress_data.update(
                status="running",
                stage=stage,
                percentage=0,
                current_step=f"Estágio {stage} iniciado",
                total_steps=int(total_steps),
                current_step_number=0,
                train_loss=None,
                best_miou=None,
                start_time=datetime.now().isoformat(),
                estimated_time_remaining=None,
            )
            self._save_progress()

    def update(
        self,
        step_number: int,
        *,
        train_loss: Optional[float] = None,
        best_miou: Optional[float] = None,
        force_save: bool = False,
    ) -> None:
        with self.lock:
            total = max(int(self.progress_data["total_steps"]), 1)
            old_percentage = self.progress_data["percentage"]
            percentage = max(0, min(100, int(100 * step_number / total)))
            self.progress_data["percentage"] = percentage
            self.progress_data["current_step_number"] = int(step_number)
            self.progress_data["current_step"] = f"Passo {step_number}/{total}"
            if train_loss is not None:
                self.progress_data["train_loss"] = float(train_loss)
            if best_miou is not None:
                self.progress_data["best_miou"] = float(best_miou)

            if self.progress_data["start_time"] and 0 < percentage < 100:
                start = datetime.fromisoformat(self.progress_data["start_time"])
                elapsed = (datetime.now() - start).total_seconds()
                self.progress_data["estimated_time_remaining"] = int(elapsed / percentage * (100 - percentage))

            if percentage != old_percentage or best_miou is not None or force_save:
                self._save_progress()

    def add_log(self, message: str) -> None:
        with self.lock:
            self._store_message(message, "info")
            self._save_progress()

    def complete(self, message: str = "Estágio concluído.") -> None:
        with self.lock:
            self.progress_data["status"] = "completed"
            self.progress_data["percentage"] = 100
            self.progress_data["current_step"] = message
            self._store_message(message, "success")
            self._save_progress()

    def error(self, error_message: str, *, details: Optional[str] = None) -> None:
        with self.lock:
            composed = f"{error_message} {details or ''}".strip()
            self.progress_data["status"] = "error"
            self.progress_data["current_step"] = f"Erro: {composed}"
            timestamp = self._store_message(composed, "error")
            self.progress_data["errors"].append({"timestamp": timestamp, "message": composed, "details": details})
            self._save_progress()

    def handle_event(self, event: str, details: Dict[str, Any]) -> None:
        """Adaptador para o callback ``on_event`` de `engine.train.run_stage`."""
        if event == "stage_started":
            self.start(details["stage"], details["steps"])
        elif event == "step":
            self.update(details["step"], train_loss=details.get("train_loss"))
        elif event == "evaluation":
            self.update(details["step"], best_miou=details.get("best_miou"), force_save=True)
        elif event == "early_stop":
            self.add_log(f"Parada antecipada no passo {details['step']} (melhor: passo {details['best_step']}).")
        elif event == "checkpoint_saved":
            self.add_log(f"Checkpoint salvo em {details['path']}.")
        elif event == "stage_finished":
            self.complete(f"Estágio {details['stage']} concluído no passo {details['step']}.")
        elif event == "divergence":
            self.error("Treino divergiu.", details=f"passo {details['step']}")

    def _save_progress(self) -> None:
        try:
            self.progress_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.progress_path, "w", encoding="utf-8") as handle:
                json.dump(self.progress_data, handle, ensure_ascii=False, indent=2)
        except OSError as exc:
            log_event(f"Erro ao salvar progresso: {exc}", level="warning")

    def _store_message(self, message: str, level: str) -> str:
        timestamp = datetime.now().isoformat()
        self.progress_data["messages"].append({"timestamp": timestamp, "message": message, "type": level})
        return timestamp

    @classmethod
    def read_progress(cls, progress_file: Union[str, Path, None] = None, *, out_dir: Union[str, Path, None] = None) -> Optional[Dict[str, Any]]:
        path = cls._resolve_progress_path(progress_file, out_dir)
        if not path.exists():
            return None
        try:
            with open(path, "r", encoding="utf-8") as handle:
                return json.load(handle)
        except (OSError, json.JSONDecodeError) as exc:
            log_event(f"Erro ao ler progresso: {exc}", level="warning")
            return None

    @classmethod
    def reset(cls, progress_file: Union[str, Path, None] = None, *, out_dir: Union[str, Path, None] = None) -> None:
        path = cls._resolve_progress_path(progress_file, out_dir)
        if path.exists():
            path.unlink()
