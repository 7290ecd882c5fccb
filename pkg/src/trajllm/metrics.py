"""Displacement metrics over K-mode predictions (meters)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

MISS_THRESHOLD = 2.0


def _displacements(modes: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """modes (..., K, T, 2), gt (..., T, 2) -> L2 errors (..., K, T)."""
    return np.linalg.norm(np.asarray(modes, np.float64) - np.asarray(gt, np.float64)[..., None, :, :], axis=-1)


def min_ade(modes, gt) -> np.ndarray | float:
    """Best-mode mean displacement; scalar for one sample, array for a batch."""
    out = _displacements(modes, gt).mean(axis=-1).min(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def min_fde(modes, gt) -> np.ndarray | float:
    out = _displacements(modes, gt)[..., -1].min(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def miss_rate(modes, gt, threshold: float = MISS_THRESHOLD) -> float:
    """Fraction of samples whose best endpoint error is strictly above ``threshold``."""
    fde = np.atleast_1d(min_fde(modes, gt))
    if fde.size == 0:
        raise ValueError("miss rate of an empty sample set is undefined")
    return float(np.mean(fde > threshold))


@dataclass
class MetricsReport:
    min_ade: float
    min_fde: float
    miss_rate: float
    sample_count: int
    k_modes: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    @classmethod
    def from_predictions(cls, modes: np.ndarray, gt: np.ndarray) -> "MetricsReport":
        """modes (S, K, T, 2), gt (S, T, 2)."""
        modes, gt = np.asarray(modes), np.asarray(gt)
        if len(gt) == 0:
            raise ValueError("no samples to evaluate")
        return cls(
            min_ade=float(np.mean(min_ade(modes, gt))),
            min_fde=float(np.mean(min_fde(modes, gt))),
            miss_rate=miss_rate(modes, gt),
            sample_count=int(len(gt)),
            k_modes=int(modes.shape[1]),
        )
