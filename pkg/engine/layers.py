"""Camadas do modelo e registro nomeado de parâmetros.

Guia de edição
--------------
* Todo tensor treinável entra no `ParameterRegistry` exatamente uma vez,
  com nome pontilhado (``head.norm.scale_gen.weight``); é por esses nomes
  que os padrões de congelamento (fnmatch) são resolvidos.
* `PromptNorm` compartilha uma única `ctx_table` entre todas as camadas.
  Os geradores começam zerados, então a saída inicial é idêntica à da
  batch norm base.
"""

from __future__ import annotations

from dataclasses import dataclass
from fnmatch import fnmatchcase
from typing import Iterable, Iterator, Optional, Union

import numpy as np

from data.errors import ConfigError, RegistryError
from engine.tensor import (
    DTensor,
    NormState,
    add,
    batch_norm,
    gather_rows,
    matmul,
    mul,
    parameter,
)

DatasetIds = Union[int, np.ndarray]


@dataclass
class ParamEntry:
    name: str
    tensor: DTensor
    frozen: bool = False


class ParameterRegistry:
    """Registro plano ``nome → tensor`` com flags de congelamento."""

    def __init__(self) -> None:
        self._entries: dict[str, ParamEntry] = {}

    def register(self, name: str, tensor: DTensor) -> DTensor:
        if name in self._entries:
            raise ConfigError(f"Parâmetro registrado duas vezes: {name}")
        if any(entry.tensor is tensor for entry in self._entries.values()):
            raise ConfigError(f"Tensor já registrado com outro nome: {name}")
        self._entries[name] = ParamEntry(name, tensor)
        return tensor

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> DTensor:
        return self._entries[name].tensor

    @property
    def names(self) -> list[str]:
        return list(self._entries)

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def trainable(self) -> list[ParamEntry]:
        return [entry for entry in self._entries.values() if not entry.frozen]

    def frozen_names(self) -> list[str]:
        return [entry.name for entry in self._entries.values() if entry.frozen]

    def is_frozen(self, name: str) -> bool:
        return self._entries[name].frozen

    def apply_freeze(self, patterns: Iterable[str]) -> list[str]:
        """Congela os parâmetros cujos nomes casam com algum padrão.

        Um padrão que não casa com nenhum nome é erro de configuração.
        """

        patterns = list(patterns)
        matched: list[str] = []
        for pattern in patterns:
            hits = [name for name in self._entries if fnmatchcase(name, pattern)]
            if not hits:
                raise ConfigError(f"Padrão de congelamento não casa com nenhum parâmetro: {pattern!r}")
            for name in hits:
                self._entries[name].frozen = True
                if name not in matched:
                    matched.append(name)
        return matched

    def unfreeze_all(self) -> None:
        for entry in self._entries.values():
            entry.frozen = False

    def zero_grad(self) -> None:
        for entry in self._entries.values():
            entry.tensor.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: entry.tensor.data.copy() for name, entry in self._entries.items()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for name, array in values.items():
            target = self._entries[name].tensor
            if target.data.shape != array.shape:
                raise ConfigError(
                    f"Forma incompatível para {name}: {array.shape} vs {target.data.shape}"
                )
            target.data[...] = array


class Linear:
    def __init__(
        self,
        name: str,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        *,
        zero_init: bool = False,
    ) -> None:
        self.name = name
        if zero_init:
            weight = np.zeros((in_dim, out_dim))
        else:
            weight = rng.normal(0.0, np.sqrt(2.0 / max(in_dim, 1)), size=(in_dim, out_dim))
        self.weight = parameter(weight)
        self.bias = parameter(np.zeros(out_dim))

    def register(self, registry: ParameterRegistry) -> None:
        registry.register(f"{self.name}.weight", self.weight)
        registry.register(f"{self.name}.bias", self.bias)

    def __call__(self, x: DTensor) -> DTensor:
        return add(matmul(x, self.weight), self.bias)


class PromptNorm:
    """Batch norm modulada por escala e deslocamento gerados do contexto.

    ``y = BN(x); saída = y ⊙ (1 + S[ds]) + T[ds]`` com ``S = scale_gen(ctx)``
    e ``T = shift_gen(ctx)`` calculados para toda a tabela e lidos por linha,
    o que permite lotes com datasets misturados.
    """

    def __init__(
        self,
        name: str,
        width: int,
        ctx_table: DTensor,
        rng: np.random.Generator,
        *,
        enabled: bool = True,
    ) -> None:
        self.name = name
        self.width = width
        self.ctx_table = ctx_table
        self.enabled = enabled
        self.state = NormState.create(width)
        ctx_dim = ctx_table.shape[1]
        self.scale_gen = Linear(f"{name}.scale_gen", ctx_dim, width, rng, zero_init=True)
        self.shift_gen = Linear(f"{name}.shift_gen", ctx_dim, width, rng, zero_init=True)
        # "eval" força estatísticas congeladas mesmo em modo treino.
        self.mode_override: Optional[str] = None

    def register(self, registry: ParameterRegistry) -> None:
        registry.register(f"{self.name}.gamma", self.state.gamma)
        registry.register(f"{self.name}.beta", self.state.beta)
        self.scale_gen.register(registry)
        self.shift_gen.register(registry)

    def __call__(self, x: DTensor, dataset_ids: DatasetIds, mode: str) -> DTensor:
        return prompt_norm_forward(x, dataset_ids, self, mode)


def prompt_norm_forward(
    x: DTensor, dataset_ids: DatasetIds, layer: PromptNorm, mode: str
) -> DTensor:
    rows = x.shape[0]
    num_datasets = layer.ctx_table.shape[0]
    ids = np.full(rows, int(dataset_ids), dtype=np.int64) if np.ndim(dataset_ids) == 0 else np.asarray(dataset_ids, dtype=np.int64)
    if ids.shape[0] != rows:
        raise RegistryError(f"{layer.name}: {ids.shape[0]} ids de dataset para {rows} linhas")
    if ids.size and (ids.min() < 0 or ids.max() >= num_datasets):
        raise RegistryError(
            f"{layer.name}: dataset_id fora do registro (D={num_datasets}): {int(ids.max())}"
        )

    y = batch_norm(x, layer.state, layer.mode_override or mode)
    if not layer.enabled:
        return y
    scale = gather_rows(layer.scale_gen(layer.ctx_table), ids)
    shift = gather_rows(layer.shift_gen(layer.ctx_table), ids)
    return add(add(y, mul(y, scale)), shift)
