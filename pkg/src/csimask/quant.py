"""Scalar Lloyd-Max quantizer for codeword values."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class Quantizer:
    levels: np.ndarray
    thresholds: np.ndarray
    b: int
    distortion_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"b": self.b, "levels": self.levels.tolist(), "thresholds": self.thresholds.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Quantizer":
        return cls(np.asarray(d["levels"], float), np.asarray(d["thresholds"], float), int(d["b"]))


def _thresholds(levels: np.ndarray) -> np.ndarray:
    return 0.5 * (levels[1:] + levels[:-1])


def lloyd_max_train(samples, b: int, max_iters: int = 2000, tol: float = 1e-7) -> Quantizer:
    """Alternate nearest-level partition and centroid updates.

    Stops once no level moves by more than ``tol`` times the sample spread.
    The distortion alone flattens long before the levels settle.
    Levels start at the midpoints of equal-probability sample bins.
    """
    if b < 1:
        raise ConfigError("quantizer needs at least one bit")
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n_levels = 2 ** b
    if np.unique(x).size < n_levels:
        raise ConfigError(f"need at least {n_levels} distinct samples for a {b}-bit quantizer")
    levels = np.quantile(x, (np.arange(n_levels) + 0.5) / n_levels)
    levels = np.unique(levels)
    if levels.size < n_levels:
        levels = np.linspace(x[0], x[-1], n_levels)
    csum = np.concatenate([[0.0], np.cumsum(x)])
    csq = np.concatenate([[0.0], np.cumsum(x * x)])
    history = []
    scale = max(float(x[-1] - x[0]), 1e-300)
    for _ in range(max_iters):
        edges = np.searchsorted(x, _thresholds(levels), side="right")
        lo = np.concatenate([[0], edges])
        hi = np.concatenate([edges, [x.size]])
        cnt = hi - lo
        s1 = csum[hi] - csum[lo]
        s2 = csq[hi] - csq[lo]
        # distortion of the current levels on the current partition
        dist = np.sum(s2 - 2 * levels * s1 + cnt * levels ** 2) / x.size
        history.append(float(dist))
        nonempty = cnt > 0
        new = levels.copy()
        new[nonempty] = s1[nonempty] / cnt[nonempty]
        new = np.sort(new)
        moved = np.abs(new - levels).max()
        levels = new
        if moved <= tol * scale:
            break
    return Quantizer(levels, _thresholds(levels), b, history)


def uniform_quantizer(samples, b: int) -> Quantizer:
    """Midpoint-reconstruction uniform quantizer spanning the sample range."""
    x = np.asarray(samples, dtype=np.float64)
    lo, hi = x.min(), x.max()
    step = (hi - lo) / 2 ** b
    levels = lo + step * (np.arange(2 ** b) + 0.5)
    return Quantizer(levels, _thresholds(levels), b)


def quantize(q: Quantizer, x) -> np.ndarray:
    return np.searchsorted(q.thresholds, np.asarray(x), side="left").astype(np.int64)


def dequantize(q: Quantizer, index) -> np.ndarray:
    return q.levels[np.asarray(index)]


def mse(q: Quantizer, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean((x - dequantize(q, quantize(q, x))) ** 2))
