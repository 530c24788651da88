"""Projeção esférica em imagem de alcance e agregação por vizinhança.

Convenções fixas:

* coluna = ⌊0.5·(1 − atan2(y, x)/π)·W⌋ mod W (eixo +x cai em W/2);
* linha 0 é o topo do FOV vertical; elevações fora do FOV são presas às
  linhas das bordas, de modo que nenhum ponto é descartado;
* ponto na origem recebe alcance 0, azimute 0 e elevação 0.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from data.errors import ConfigError, DimensionError
from engine.tensor import DTensor, apply_op, gather_rows


@dataclass(frozen=True)
class SensorSpec:
    height: int = 16
    width: int = 256
    fov_down_deg: float = -22.5
    fov_up_deg: float = 22.5

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"SensorSpec inválido: H={self.height}, W={self.width}")
        if not self.fov_down_deg < self.fov_up_deg:
            raise ConfigError(
                f"SensorSpec inválido: FOV [{self.fov_down_deg}, {self.fov_up_deg}]"
            )

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SensorSpec":
        try:
            return cls(
                height=int(data["height"]),
                width=int(data["width"]),
                fov_down_deg=float(data["fov_down_deg"]),
                fov_up_deg=float(data["fov_up_deg"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"Bloco de sensor inválido: {dict(data)!r}") from exc

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class RangeImage:
    cell_id: np.ndarray
    range: np.ndarray
    occupancy: np.ndarray
    height: int
    width: int

    @property
    def num_cells(self) -> int:
        return self.height * self.width


# ----------------------------------------------------------------------
# Public API
# ----------------------------------------------------------------------
def project(scan: Any, spec: SensorSpec) -> RangeImage:
    """Atribui cada ponto a uma célula da grade H×W do sensor."""

    xyz = np.asarray(getattr(scan, "xyz", scan), dtype=np.float64)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise DimensionError(f"project espera N×3 coordenadas, forma {xyz.shape}")
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    rng = np.sqrt(x * x + y * y + z * z)

    azimuth = np.arctan2(y, x)
    col = np.floor(0.5 * (1.0 - azimuth / np.pi) * spec.width).astype(np.int64) % spec.width

    safe_r = np.where(rng > 0.0, rng, 1.0)
    elevation = np.where(rng > 0.0, np.arcsin(np.clip(z / safe_r, -1.0, 1.0)), 0.0)
    fov_up = np.deg2rad(spec.fov_up_deg)
    fov_down = np.deg2rad(spec.fov_down_deg)
    fraction = (fov_up - elevation) / (fov_up - fov_down)
    row = np.clip(np.floor(fraction * spec.height), 0, spec.height - 1).astype(np.int64)

    cell_id = row * spec.width + col
    occupancy = np.bincount(cell_id, minlength=spec.num_cells).astype(np.int64)
    return RangeImage(cell_id=cell_id, range=rng, occupancy=occupancy,
                      height=spec.height, width=spec.width)


def unproject(cell_feats: DTensor, image: RangeImage) -> DTensor:
    if cell_feats.shape[0] != image.num_cells:
        raise DimensionError(
            f"unproject: {cell_feats.shape[0]} células para grade {image.height}×{image.width}"
        )
    return gather_rows(cell_feats, image.cell_id)


def window_mean(cell_feats: DTensor, height: int, width: int, k: int) -> DTensor:
    return window_mean_segments(cell_feats, [(height, width)], k)


def window_mean_segments(
    cell_feats: DTensor, segments: Sequence[tuple[int, int]], k: int
) -> DTensor:
    """Média k×k aplicada a várias imagens empilhadas (uma por segmento).

    Horizontal circular, vertical com bordas replicadas e divisor fixo k².
    """

    if not segments:
        raise DimensionError("window_mean sem segmentos")
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"Janela da média deve ser ímpar e positiva (k={k})")
    if cell_feats.data.ndim != 2:
        raise DimensionError(f"window_mean espera matriz C×D, forma {cell_feats.shape}")
    total = sum(h * w for h, w in segments)
    if total != cell_feats.shape[0]:
        raise DimensionError(
            f"window_mean: {cell_feats.shape[0]} linhas para {total} células nos segmentos"
        )
    for h, w in segments:
        if k > min(h, 2 * w - 1):
            raise ConfigError(f"Janela k={k} grande demais para grade {h}×{w}")

    bounds = np.cumsum([0] + [h * w for h, w in segments])
    width_d = cell_feats.shape[1]
    data = cell_feats.data
    out = np.concatenate(
        [
            _window_forward(data[bounds[i] : bounds[i + 1]].reshape(h, w, width_d), k).reshape(h * w, width_d)
            for i, (h, w) in enumerate(segments)
        ],
        axis=0,
    )

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        parts = [
            _window_adjoint(g[bounds[i] : bounds[i + 1]].reshape(h, w, width_d), k).reshape(h * w, width_d)
            for i, (h, w) in enumerate(segments)
        ]
        return (np.concatenate(parts, axis=0),)

    return apply_op(out, "window_mean", (cell_feats,), rule)


# ----------------------------------------------------------------------
# Internal helpers
# ----------------------------------------------------------------------
def _window_forward(grid: np.ndarray, k: int) -> np.ndarray:
    radius = k // 2
    rows = grid.shape[0]
    horizontal = np.zeros_like(grid)
    for dx in range(-radius, radius + 1):
        horizontal += np.roll(grid, -dx, axis=1)
    padded = np.pad(horizontal, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    out = np.zeros_like(grid)
    for t in range(k):
        out += padded[t : t + rows]
    return out / float(k * k)


def _window_adjoint(grad: np.ndarray, k: int) -> np.ndarray:
    radius = k // 2
    rows = grad.shape[0]
    scaled = grad / float(k * k)
    padded = np.zeros((rows + 2 * radius,) + grad.shape[1:])
    for t in range(k):
        padded[t : t + rows] += scaled
    folded = padded[radius : radius + rows].copy()
    if radius:
        folded[0] += padded[:radius].sum(axis=0)
        folded[-1] += padded[radius + rows :].sum(axis=0)
    out = np.zeros_like(grad)
    for dx in range(-radius, radius + 1):
        out += np.roll(folded, dx, axis=1)
    return out
