"""Hierarquia de erros compartilhada pelo DeskSeg.

Todos os erros do domínio derivam de `DeskSegError`; a CLI converte
`ConfigError` em código de saída 2 e os demais em 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence


class DeskSegError(RuntimeError):
    """Raiz dos erros do DeskSeg."""


class ConfigError(DeskSegError):
    """Configuração inválida, ausente ou inconsistente."""


class RegistryError(ConfigError):
    """Registro de datasets inconsistente ou dataset desconhecido."""


class PreconditionError(DeskSegError):
    """Operação chamada fora das suas pré-condições."""


class DimensionError(DeskSegError, ValueError):
    """Formas incompatíveis entre operandos."""


class IndexRangeError(DeskSegError, IndexError):
    """Índice fora do intervalo permitido."""


class BatchTooSmallError(DeskSegError):
    """Normalização em modo treino com menos de duas linhas."""


class EmptyBatchError(DeskSegError):
    """Todas as linhas do lote estão mascaradas."""


class InvalidTargetError(DeskSegError):
    """Linha de alvo suave que não soma 1."""


class RankError(DeskSegError):
    """Tensor não escalar onde um escalar era esperado."""


class EmptyEvaluationError(DeskSegError):
    """Matriz de confusão sem nenhum ponto contabilizado."""


class CheckpointError(DeskSegError):
    """Arquivo de checkpoint ilegível ou incompatível."""


@dataclass
class ScanFormatError(DeskSegError):
    message: str
    path: Optional[Path] = None
    expected_bytes: Optional[int] = None
    actual_bytes: Optional[int] = None

    def __str__(self) -> str:  # pragma: no cover - formatting helper
        base = self.message
        if self.path is not None:
            base = f"{base} ({self.path})"
        if self.expected_bytes is not None or self.actual_bytes is not None:
            base += f" [esperado: {self.expected_bytes} bytes, obtido: {self.actual_bytes} bytes]"
        return base


@dataclass
class LabelMappingError(DeskSegError):
    class_id: int
    map_name: str = ""

    def __str__(self) -> str:  # pragma: no cover - formatting helper
        suffix = f" no mapa '{self.map_name}'" if self.map_name else ""
        return f"Classe de origem {self.class_id} sem mapeamento{suffix}."


@dataclass
class ScanIOError(DeskSegError):
    path: Path
    reason: str

    def __str__(self) -> str:  # pragma: no cover - formatting helper
        return f"Falha de E/S em {self.path}: {self.reason}"


@dataclass
class NonFiniteGradientError(DeskSegError):
    parameter_names: Sequence[str] = field(default_factory=tuple)

    def __str__(self) -> str:  # pragma: no cover - formatting helper
        names = ", ".join(self.parameter_names) or "?"
        return f"Gradiente não finito; passo abortado. Parâmetros afetados: {names}"


@dataclass
class TrainingDivergedError(DeskSegError):
    step: int
    checkpoint_path: Optional[Path] = None
    details: str = ""

    def __str__(self) -> str:  # pragma: no cover - formatting helper
        base = f"Treino divergiu no passo {self.step}."
        if self.details:
            base = f"{base} {self.details}"
        if self.checkpoint_path is not None:
            base += f"\n\nÚltimo checkpoint bom: {self.checkpoint_path}"
        return base
