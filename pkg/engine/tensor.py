"""Núcleo de arrays densos (float64) com diferenciação automática reversa.

Suporta exatamente as operações usadas pelo modelo: produto matricial,
operações ponto a ponto com broadcast apenas de vetores no último eixo,
batch norm, entropia cruzada com alvos suaves, max-pooling por célula e
leitura de linhas. Cada operação registra um `Node` com sua regra de
backward; `backward` percorre o grafo em ordem topológica reversa.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from data.errors import (
    BatchTooSmallError,
    DimensionError,
    EmptyBatchError,
    IndexRangeError,
    InvalidTargetError,
    RankError,
)

ArrayLike = Union[np.ndarray, Sequence[float], float]
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_node_ids = itertools.count()


@dataclass(eq=False)
class Node:
    """Operação registrada: entradas, regra de backward e id sequencial."""

    op: str
    inputs: tuple["DTensor", ...]
    backward_rule: BackwardRule
    node_id: int = field(default_factory=lambda: next(_node_ids))


class DTensor:
    """Array denso de float64 que participa da diferenciação reversa."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data: ArrayLike, *, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64, copy=True, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:  # pragma: no cover - debug helper
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DTensor(shape={self.shape}{flag})"


def constant(data: ArrayLike) -> DTensor:
    return DTensor(data, requires_grad=False)


def parameter(data: ArrayLike) -> DTensor:
    return DTensor(data, requires_grad=True)


def apply_op(
    data: np.ndarray,
    op: str,
    inputs: Sequence[DTensor],
    rule: BackwardRule,
) -> DTensor:
    """Embrulha o resultado de uma operação e registra o nó quando necessário."""

    out = DTensor.__new__(DTensor)
    out.data = np.asarray(data, dtype=np.float64, order="C")
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.node = Node(op, tuple(inputs), rule) if out.requires_grad else None
    return out


@dataclass
class Graph:
    """Ordem topológica dos tensores registrados a partir de uma raiz."""

    order: list[DTensor]

    @property
    def nodes(self) -> list[Node]:
        return [t.node for t in self.order if t.node is not None]

    @classmethod
    def trace(cls, root: DTensor) -> "Graph":
        order: list[DTensor] = []
        visited: set[int] = set()
        stack: list[tuple[DTensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            key = id(tensor)
            if expanded:
                order.append(tensor)
                continue
            if key in visited:
                continue
            visited.add(key)
            stack.append((tensor, True))
            if tensor.node is not None:
                for parent in reversed(tensor.node.inputs):
                    if id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)


def backward(loss: DTensor) -> None:
    """Propaga gradientes a partir de um escalar; acumula nas folhas."""

    if loss.data.ndim != 0:
        raise RankError(f"backward exige um escalar; forma recebida: {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.node is None:
        loss.accumulate_grad(np.ones_like(loss.data))
        return

    graph = Graph.trace(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(graph.order):
        node = tensor.node
        if node is None:
            continue
        grad_out = pending.pop(id(tensor), None)
        if grad_out is None:
            continue
        for parent, grad_in in zip(node.inputs, node.backward_rule(grad_out)):
            if grad_in is None or not parent.requires_grad:
                continue
            if parent.node is None:
                parent.accumulate_grad(grad_in)
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + grad_in
            else:
                pending[id(parent)] = grad_in


# ----------------------------------------------------------------------
# Álgebra linear
# ----------------------------------------------------------------------
def matmul(a: DTensor, b: DTensor) -> DTensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul com formas incompatíveis: {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g @ b_data.T, a_data.T @ g

    return apply_op(a_data @ b_data, "matmul", (a, b), rule)


# ----------------------------------------------------------------------
# Operações ponto a ponto
# ----------------------------------------------------------------------
def _is_trailing_vector(vec: tuple[int, ...], full: tuple[int, ...]) -> bool:
    if len(full) != 2:
        return False
    return vec == (full[1],) or vec == (1, full[1])


def _check_binary(op: str, a: DTensor, b: DTensor) -> None:
    if a.shape == b.shape:
        return
    if _is_trailing_vector(b.shape, a.shape) or _is_trailing_vector(a.shape, b.shape):
        return
    raise DimensionError(f"{op} com formas não compatíveis: {a.shape} e {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.sum(axis=0).reshape(shape)


def add(a: DTensor, b: DTensor) -> DTensor:
    _check_binary("add", a, b)
    shape_a, shape_b = a.shape, b.shape

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _reduce_to(g, shape_a), _reduce_to(g, shape_b)

    return apply_op(a.data + b.data, "add", (a, b), rule)


def sub(a: DTensor, b: DTensor) -> DTensor:
    _check_binary("sub", a, b)
    shape_a, shape_b = a.shape, b.shape

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _reduce_to(g, shape_a), _reduce_to(-g, shape_b)

    return apply_op(a.data - b.data, "sub", (a, b), rule)


def mul(a: DTensor, b: DTensor) -> DTensor:
    _check_binary("mul", a, b)
    a_data, b_data = a.data, b.data

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _reduce_to(g * b_data, a_data.shape), _reduce_to(g * a_data, b_data.shape)

    return apply_op(a_data * b_data, "mul", (a, b), rule)


def relu(x: DTensor) -> DTensor:
    # Subgradiente em 0 é 0.
    mask = x.data > 0.0

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * mask,)

    return apply_op(np.where(mask, x.data, 0.0), "relu", (x,), rule)


def exp(x: DTensor) -> DTensor:
    out = np.exp(x.data)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * out,)

    return apply_op(out, "exp", (x,), rule)


def log(x: DTensor) -> DTensor:
    x_data = x.data

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (g / x_data,)

    return apply_op(np.log(x_data), "log", (x,), rule)


def scale(x: DTensor, factor: float) -> DTensor:
    c = float(factor)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * c,)

    return apply_op(x.data * c, "scale", (x,), rule)


_ELEMENTWISE: dict[str, Callable[..., DTensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "exp": exp,
    "log": log,
}


def elementwise(op: str, *inputs: DTensor) -> DTensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError as exc:
        raise ValueError(f"Operação ponto a ponto desconhecida: {op}") from exc
    return fn(*inputs)


def sum_all(x: DTensor) -> DTensor:
    shape = x.shape

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.full(shape, float(g)),)

    return apply_op(np.array(x.data.sum()), "sum", (x,), rule)


def concat_cols(parts: Sequence[DTensor]) -> DTensor:
    if not parts:
        raise DimensionError("concat_cols sem operandos")
    rows = parts[0].shape[0]
    for part in parts:
        if part.data.ndim != 2 or part.shape[0] != rows:
            raise DimensionError(
                f"concat_cols com formas incompatíveis: {[p.shape for p in parts]}"
            )
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def rule(g: np.ndarray) -> list[np.ndarray]:
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts))]

    return apply_op(np.concatenate([p.data for p in parts], axis=1), "concat", tuple(parts), rule)


# ----------------------------------------------------------------------
# Normalização
# ----------------------------------------------------------------------
@dataclass(eq=False)
class NormState:
    """Parâmetros afins e estatísticas correntes de uma batch norm."""

    gamma: DTensor
    beta: DTensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, width: int, *, eps: float = 1e-5, momentum: float = 0.1) -> "NormState":
        return cls(
            gamma=parameter(np.ones(width)),
            beta=parameter(np.zeros(width)),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            eps=eps,
            momentum=momentum,
        )


def batch_norm(x: DTensor, state: NormState, mode: str = "train") -> DTensor:
    if x.data.ndim != 2 or x.shape[1] != state.gamma.shape[0]:
        raise DimensionError(
            f"batch_norm: entrada {x.shape} incompatível com largura {state.gamma.shape}"
        )
    rows = x.shape[0]
    gamma = state.gamma.data
    if mode == "train":
        if rows < 2:
            raise BatchTooSmallError(f"batch_norm em modo treino exige N >= 2 (N={rows})")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        x_hat = (x.data - mean) * inv_std
        m = state.momentum
        state.running_mean[...] = (1.0 - m) * state.running_mean + m * mean
        state.running_var[...] = (1.0 - m) * state.running_var + m * var * rows / (rows - 1)

        def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
            g_hat = g * gamma
            gx = (inv_std / rows) * (
                rows * g_hat - g_hat.sum(axis=0) - x_hat * (g_hat * x_hat).sum(axis=0)
            )
            return gx, (g * x_hat).sum(axis=0), g.sum(axis=0)

    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        x_hat = (x.data - state.running_mean) * inv_std

        def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
            return g * gamma * inv_std, (g * x_hat).sum(axis=0), g.sum(axis=0)

    else:
        raise ValueError(f"Modo de normalização desconhecido: {mode}")

    out = x_hat * gamma + state.beta.data
    return apply_op(out, "batch_norm", (x, state.gamma, state.beta), rule)


# ----------------------------------------------------------------------
# Perda
# ----------------------------------------------------------------------
def log_softmax(logits: np.ndarray) -> np.ndarray:
    """log-softmax estável: subtrai o máximo e usa log1p sobre os demais termos."""

    rows = np.arange(logits.shape[0])
    top = logits.argmax(axis=1)
    z = logits - logits[rows, top][:, None]
    rest = np.exp(z)
    rest[rows, top] = 0.0
    return z - np.log1p(rest.sum(axis=1))[:, None]


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))


def softmax_cross_entropy(
    logits: DTensor,
    targets: np.ndarray,
    ignore_mask: Optional[np.ndarray] = None,
) -> DTensor:
    """Média, sobre as linhas não ignoradas, de -sum(alvo * log softmax)."""

    targets = np.asarray(targets, dtype=np.float64)
    if logits.data.ndim != 2 or targets.shape != logits.shape:
        raise DimensionError(
            f"softmax_cross_entropy: logits {logits.shape} vs alvos {targets.shape}"
        )
    rows = logits.shape[0]
    ignore = np.zeros(rows, dtype=bool) if ignore_mask is None else np.asarray(ignore_mask, dtype=bool)
    valid = ~ignore
    count = int(valid.sum())
    if count == 0:
        raise EmptyBatchError("Todas as linhas do lote estão mascaradas.")
    sums = targets[valid].sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        bad = int(np.flatnonzero(valid)[np.argmax(np.abs(sums - 1.0))])
        raise InvalidTargetError(f"Linha de alvo {bad} não soma 1 (soma={targets[bad].sum():.8f})")

    logp = log_softmax(logits.data)
    weights = np.where(valid[:, None], targets, 0.0)
    loss = -float((weights * logp).sum()) / count

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        grad = (np.exp(logp) - targets) * (float(g) / count)
        grad[ignore] = 0.0
        return (grad,)

    return apply_op(np.array(loss), "softmax_cross_entropy", (logits,), rule)


# ----------------------------------------------------------------------
# Células
# ----------------------------------------------------------------------
def _check_ids(ids: np.ndarray, limit: int, op: str) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"{op}: ids devem ser um vetor, forma {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= limit):
        bad = int(ids[(ids < 0) | (ids >= limit)][0])
        raise IndexRangeError(f"{op}: id {bad} fora de [0, {limit})")
    return ids


def scatter_max(
    point_feats: DTensor, cell_ids: np.ndarray, num_cells: int
) -> tuple[DTensor, np.ndarray]:
    """Máximo por célula e canal; células vazias valem 0.

    Retorna também o índice do ponto vencedor por (célula, canal), -1 nas
    células vazias. Em empates vence o menor índice.
    """

    if point_feats.data.ndim != 2:
        raise DimensionError(f"scatter_max exige matriz N×D, forma {point_feats.shape}")
    rows, width = point_feats.shape
    ids = _check_ids(cell_ids, num_cells, "scatter_max")
    if ids.shape[0] != rows:
        raise DimensionError(f"scatter_max: {ids.shape[0]} ids para {rows} pontos")

    feats = point_feats.data
    best = np.full((num_cells, width), -np.inf)
    np.maximum.at(best, ids, feats)
    winners = feats == best[ids]
    candidate = np.where(winners, np.arange(rows)[:, None], rows)
    argmax = np.full((num_cells, width), rows, dtype=np.int64)
    np.minimum.at(argmax, ids, candidate)
    empty = argmax == rows
    argmax[empty] = -1
    best[empty] = 0.0

    filled = ~empty
    src_rows = argmax[filled]
    src_cols = np.nonzero(filled)[1]

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros((rows, width))
        grad[src_rows, src_cols] = g[filled]
        return (grad,)

    return apply_op(best, "scatter_max", (point_feats,), rule), argmax


def gather_rows(cell_feats: DTensor, cell_ids: np.ndarray) -> DTensor:
    if cell_feats.data.ndim != 2:
        raise DimensionError(f"gather_rows exige matriz C×D, forma {cell_feats.shape}")
    num_cells, width = cell_feats.shape
    ids = _check_ids(cell_ids, num_cells, "gather_rows")

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros((num_cells, width))
        np.add.at(grad, ids, g)
        return (grad,)

    return apply_op(cell_feats.data[ids], "gather_rows", (cell_feats,), rule)
