"""Dados, configuração e infraestrutura compartilhada (erros, logs, telemetria, progresso)."""

from .progress_manager import ProgressManager

__all__ = ["ProgressManager"]
# Mantemos __all__ explícito; os demais módulos são importados pelo caminho completo.
