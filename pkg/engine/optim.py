"""AdamW com decaimento desacoplado e política one-cycle (cosseno)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from data.errors import ConfigError, DimensionError, NonFiniteGradientError, PreconditionError
from data.runtime_log import log_event
from engine.layers import ParameterRegistry


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Optional[np.ndarray]],
    state: OptimState,
    lr: float,
    *,
    frozen: frozenset[str] | set[str] = frozenset(),
) -> list[str]:
    """Atualiza ``params`` no lugar; devolve os nomes efetivamente atualizados.

    Gradiente não finito aborta o passo sem modificar nada.
    """

    if lr <= 0:
        raise PreconditionError(f"Taxa de aprendizado deve ser positiva: {lr}")
    active = [
        name for name, grad in grads.items()
        if grad is not None and name not in frozen
    ]
    bad = [name for name in active if not np.all(np.isfinite(grads[name]))]
    if bad:
        raise NonFiniteGradientError(tuple(bad))
    for name in active:
        if params[name].shape != grads[name].shape:
            raise DimensionError(
                f"Gradiente de {name} com forma {grads[name].shape}; parâmetro {params[name].shape}"
            )

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name in active:
        p, g = params[name], grads[name]
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        update = lr * m_hat / (np.sqrt(v_hat) + state.eps) + lr * state.weight_decay * p
        p -= update
    return active


class AdamW:
    """Otimizador ligado a um `ParameterRegistry`; respeita flags de congelamento."""

    def __init__(
        self,
        registry: ParameterRegistry,
        *,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ) -> None:
        self.registry = registry
        self.state = OptimState(beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)

    def step(self, lr: float) -> list[str]:
        params = {entry.name: entry.tensor.data for entry in self.registry}
        grads = {entry.name: entry.tensor.grad for entry in self.registry.trainable()}
        return adamw_step(params, grads, self.state, lr)


# ----------------------------------------------------------------------
# One-cycle
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class Schedule:
    max_lr: float
    total_steps: int
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self) -> None:
        if self.max_lr <= 0 or self.total_steps < 1:
            raise ConfigError(f"Schedule inválido: max_lr={self.max_lr}, total={self.total_steps}")
        if not 0.0 < self.pct_start < 1.0:
            raise ConfigError(f"pct_start fora de (0, 1): {self.pct_start}")
        if self.div_factor <= 1 or self.final_div_factor <= 1:
            raise ConfigError("div_factor e final_div_factor devem ser > 1")

    @property
    def initial_lr(self) -> float:
        return self.max_lr / self.div_factor

    @property
    def final_lr(self) -> float:
        return self.max_lr / self.final_div_factor

    @property
    def warmup_steps(self) -> float:
        return self.pct_start * self.total_steps


def _cosine(start: float, end: float, fraction: float) -> float:
    return end + (start - end) / 2.0 * (1.0 + math.cos(math.pi * fraction))


def one_cycle_lr(step: float, sched: Schedule) -> float:
    if step < 0 or step > sched.total_steps:
        clamped = min(max(step, 0), sched.total_steps)
        log_event(f"Passo {step} fora de [0, {sched.total_steps}]; usando {clamped}.", level="warning")
        step = clamped
    warm = sched.warmup_steps
    if step <= warm:
        return _cosine(sched.initial_lr, sched.max_lr, step / warm)
    return _cosine(sched.max_lr, sched.final_lr, (step - warm) / (sched.total_steps - warm))
