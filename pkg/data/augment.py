"""Augmentações de treino e normalização determinística de avaliação.

Todas as funções recebem um ``numpy.random.Generator`` explícito e devolvem
um scan novo; o scan de entrada nunca é alterado. Use `derive_rng` para
obter fluxos independentes por (semente, passo, posição no lote).
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Optional

import numpy as np

from data.errors import PreconditionError
from data.run_settings import AugmentConfig, GlobalAugmentConfig
from data.scan_io import IGNORE, PointScan

ROAD = 0
GROUND = 1
CHANNELS = ("intensity", "ambient")


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *(int(k) & 0xFFFFFFFF for k in keys)])


# ----------------------------------------------------------------------
# Equalização
# ----------------------------------------------------------------------
def histogram_equalize(values: np.ndarray, low_pct: float, high_pct: float) -> np.ndarray:
    """Remapeia pelo CDF empírico com corte nos percentis (nearest-rank).

    Valores até o percentil baixo viram 0, a partir do alto viram 1; os
    intermediários recebem o posto do CDF reescalado. Entrada constante
    resulta em zeros.
    """

    values = np.asarray(values, dtype=np.float64).reshape(-1)
    count = values.shape[0]
    if count < 1:
        raise PreconditionError("histogram_equalize exige ao menos um valor")
    if not 0.0 <= low_pct < high_pct <= 100.0:
        raise PreconditionError(f"Cortes inválidos: ({low_pct}, {high_pct})")

    ordered = np.sort(values, kind="stable")
    p_lo = ordered[_nearest_rank(low_pct, count)]
    p_hi = ordered[_nearest_rank(high_pct, count)]
    if p_hi <= p_lo:
        return np.zeros(count)

    cdf = 100.0 * np.searchsorted(ordered, values, side="right") / count
    out = np.clip((cdf - low_pct) / (high_pct - low_pct), 0.0, 1.0)
    out[values <= p_lo] = 0.0
    out[values >= p_hi] = 1.0
    return out


def _nearest_rank(pct: float, count: int) -> int:
    index = math.ceil(pct * count / 100.0) - 1
    return min(max(index, 0), count - 1)


def sample_eq_cutoffs(cfg: AugmentConfig, rng: np.random.Generator) -> tuple[float, float]:
    low = float(rng.uniform(cfg.eq_low_range[0], cfg.eq_low_range[1]))
    high = float(rng.uniform(cfg.eq_high_range[0], cfg.eq_high_range[1]))
    return low, high


def eval_normalize(scan: PointScan, low_pct: float = 2.0, high_pct: float = 95.0) -> PointScan:
    ambient = None
    if scan.ambient is not None:
        ambient = histogram_equalize(scan.ambient, low_pct, high_pct)
    return replace(
        scan,
        intensity=histogram_equalize(scan.intensity, low_pct, high_pct),
        ambient=ambient,
    )


# ----------------------------------------------------------------------
# Dropout de canais
# ----------------------------------------------------------------------
def channel_dropout(
    scan: PointScan,
    channel: str,
    rng: np.random.Generator,
    *,
    prob: float = 0.2,
    mode: str = "scan",
) -> PointScan:
    if channel not in CHANNELS:
        raise PreconditionError(f"Canal desconhecido para dropout: {channel!r}")
    values = getattr(scan, channel)
    if values is None:
        raise PreconditionError(f"Scan sem o canal '{channel}'")
    if mode == "scan":
        if rng.random() >= prob:
            return scan
        dropped = np.zeros_like(values)
    elif mode == "point":
        keep = rng.random(values.shape[0]) >= prob
        dropped = np.where(keep, values, 0.0)
    else:
        raise PreconditionError(f"Modo de dropout desconhecido: {mode!r}")
    return replace(scan, **{channel: dropped})


# ----------------------------------------------------------------------
# Geometria
# ----------------------------------------------------------------------
def rotate_z(xyz: np.ndarray, angle_rad: float) -> np.ndarray:
    cos_a, sin_a = math.cos(angle_rad), math.sin(angle_rad)
    out = xyz.copy()
    out[:, 0] = cos_a * xyz[:, 0] - sin_a * xyz[:, 1]
    out[:, 1] = sin_a * xyz[:, 0] + cos_a * xyz[:, 1]
    return out


def road_ground_yaw(
    scan: PointScan,
    rng: np.random.Generator,
    *,
    limit_deg: float = 1.5,
    angle_deg: Optional[float] = None,
) -> PointScan:
    """Gira em torno de z apenas os pontos rotulados como rua ou chão."""

    if not scan.is_labeled:
        raise PreconditionError("road_ground_yaw exige um scan rotulado")
    if angle_deg is None:
        angle_deg = float(rng.uniform(-limit_deg, limit_deg))
    mask = (scan.labels == ROAD) | (scan.labels == GROUND)
    if angle_deg == 0.0 or not mask.any():
        return scan
    xyz = scan.xyz.copy()
    xyz[mask] = rotate_z(scan.xyz[mask], math.radians(angle_deg))
    return replace(scan, xyz=xyz)


def flip_x(scan: PointScan) -> PointScan:
    """Espelha em torno do eixo x (y → -y)."""
    xyz = scan.xyz.copy()
    xyz[:, 1] = -xyz[:, 1]
    return replace(scan, xyz=xyz)


def flip_y(scan: PointScan) -> PointScan:
    xyz = scan.xyz.copy()
    xyz[:, 0] = -xyz[:, 0]
    return replace(scan, xyz=xyz)


def global_augment(
    scan: PointScan, rng: np.random.Generator, cfg: Optional[GlobalAugmentConfig] = None
) -> PointScan:
    cfg = cfg or GlobalAugmentConfig()
    out = scan
    if cfg.rotation:
        angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
        out = replace(out, xyz=rotate_z(out.xyz, math.radians(angle)))
    if cfg.flip:
        if rng.random() < cfg.flip_prob:
            out = flip_x(out)
        if rng.random() < cfg.flip_prob:
            out = flip_y(out)
    if cfg.scale:
        factor = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
        out = replace(out, xyz=out.xyz * factor)
    if cfg.jitter:
        noise = np.clip(
            rng.normal(0.0, cfg.jitter_sigma, size=out.xyz.shape),
            -cfg.jitter_clip,
            cfg.jitter_clip,
        )
        out = replace(out, xyz=out.xyz + noise)
    return out


# ----------------------------------------------------------------------
# Pipeline de treino
# ----------------------------------------------------------------------
def augment_for_training(
    scan: PointScan, cfg: AugmentConfig, rng: np.random.Generator
) -> PointScan:
    """Equalização randomizada → dropout → yaw de rua/chão → augmentação global."""

    low, high = sample_eq_cutoffs(cfg, rng)
    out = replace(scan, intensity=histogram_equalize(scan.intensity, low, high))
    if out.ambient is not None:
        low, high = sample_eq_cutoffs(cfg, rng)
        out = replace(out, ambient=histogram_equalize(out.ambient, low, high))

    out = channel_dropout(out, "intensity", rng, prob=cfg.dropout_prob, mode=cfg.dropout_mode)
    if out.ambient is not None:
        out = channel_dropout(out, "ambient", rng, prob=cfg.dropout_prob, mode=cfg.dropout_mode)

    if np.any(out.labels != IGNORE):
        out = road_ground_yaw(out, rng, limit_deg=cfg.yaw_limit_deg)
    return global_augment(out, rng, cfg.global_aug)
