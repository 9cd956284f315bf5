"""Sinusoidal and phase-modulated positional encodings for 3D points."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import spearmanr

PAPER_BETA = 0.125


@dataclass(frozen=True)
class PEConfig:
    L: int = 20          # base-frequency count per coordinate
    beta: float = PAPER_BETA

    def __post_init__(self):
        if self.L < 2 or self.L % 2:
            raise ValueError(f"L must be an even integer >= 2, got {self.L}")
        if self.beta <= 0 or self.beta * self.L <= 1:
            raise ValueError(f"need beta > 0 and beta*L > 1, got beta={self.beta}, L={self.L}")

    @classmethod
    def for_width(cls, width: int, beta: float = PAPER_BETA) -> "PEConfig":
        """L = width/6 rounded down to even, so 3L + 3 raw channels fit one layer."""
        L = max(2, (width // 6) // 2 * 2)
        return cls(L=L, beta=beta)


def _channels(L):
    return np.arange(1, L + 1)


def frequencies(cfg: PEConfig) -> np.ndarray:
    return 2.0 ** (_channels(cfg.L) // 2) * np.pi


def phases(cfg: PEConfig) -> np.ndarray:
    return np.pi / 2 * (_channels(cfg.L) % 2)


def modulated_phases(cfg: PEConfig) -> np.ndarray:
    i = _channels(cfg.L)
    return 2 * np.pi * ((cfg.beta * cfg.L) ** (1 - i / cfg.L) + i / cfg.L)


def gamma(p, cfg: PEConfig) -> np.ndarray:
    """Multi-frequency encoding of scalar coordinate(s) ``p``; shape ``p.shape + (L,)``."""
    p = np.asarray(p, dtype=np.float64)[..., None]
    return np.sin(frequencies(cfg) * p + phases(cfg))


def gamma_prime(p, cfg: PEConfig) -> np.ndarray:
    """Constant-frequency (pi/2) encoding with nonlinearly spread phase offsets."""
    p = np.asarray(p, dtype=np.float64)[..., None]
    return np.sin(np.pi / 2 * p + modulated_phases(cfg))


def gamma_pm(points, cfg: PEConfig) -> np.ndarray:
    """Phase-modulated encoding of 3D points: ``(..., 3) -> (..., 3L)``.

    Channels are ordered x-block, y-block, z-block.
    """
    pts = np.asarray(points, dtype=np.float64)
    enc = gamma(pts, cfg) + gamma_prime(pts, cfg)
    return enc.reshape(pts.shape[:-1] + (3 * cfg.L,))


def embed_points(points, cfg: PEConfig) -> np.ndarray:
    """Network input features: raw xyz followed by ``gamma_pm``."""
    pts = np.asarray(points, dtype=np.float64)
    return np.concatenate([pts, gamma_pm(pts, cfg)], axis=-1)


@dataclass
class SimilarityProfile:
    correlation: float
    degenerate: bool = False


def similarity_profile(encoder: Callable[[np.ndarray], np.ndarray], grid_n: int = 256) -> SimilarityProfile:
    """Spearman correlation between pairwise dot products and negative distance.

    ``encoder`` maps an array of 1D coordinates of shape (n,) to (n, C).
    A constant encoder has no defined rank correlation and is reported as 0
    with ``degenerate=True``.
    """
    if grid_n < 16:
        raise ValueError("grid_n must be >= 16")
    p = np.linspace(-1.0, 1.0, grid_n)
    e = np.asarray(encoder(p), dtype=np.float64)
    iu = np.triu_indices(grid_n, 1)
    sim = (e @ e.T)[iu]
    dist = -np.abs(p[:, None] - p[None, :])[iu]
    if np.ptp(sim) == 0:
        return SimilarityProfile(0.0, degenerate=True)
    return SimilarityProfile(float(spearmanr(sim, dist)[0]))
