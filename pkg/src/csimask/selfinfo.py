"""Per-element self-information of a CSI tensor via local Gaussian KDE.

Each element is compared with a 3x3 subgrid of its (2R+1)x(2R+1) neighborhood
(offsets {-R, 0, R}^2). Self-information is -log2 of the mean kernel value.

Border handling: the tensor is zero padded, but by default padded samples are
excluded from the average (``border="exclude"``) so the estimate depends only
on differences between real elements. ``border="zero"`` averages the padding
zeros in as ordinary neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

LOG_EPS = 1e-12


@dataclass(frozen=True)
class SelfInfoConfig:
    radius_r: int = 3
    bandwidth_h: float = 1.0
    threshold_mode: str = "quantile"  # or "absolute"
    quantile: float = 0.5
    threshold: float = 0.0
    epsilon: float = LOG_EPS
    include_center: bool = True
    border: str = "exclude"  # or "zero"

    def validate(self) -> "SelfInfoConfig":
        if self.radius_r < 1:
            raise ConfigError("radius_r must be >= 1")
        if not self.bandwidth_h > 0:
            raise ConfigError("bandwidth_h must be positive")
        if self.threshold_mode not in ("quantile", "absolute"):
            raise ConfigError(f"unknown threshold_mode {self.threshold_mode!r}")
        if self.threshold_mode == "quantile" and not 0 < self.quantile < 1:
            raise ConfigError("quantile must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.border not in ("exclude", "zero"):
            raise ConfigError(f"unknown border mode {self.border!r}")
        return self


@dataclass
class SelfInfoMap:
    values: np.ndarray
    mask: np.ndarray


def pad(h: np.ndarray, r: int) -> np.ndarray:
    """Zero-pad the last two axes by ``r`` on every side."""
    if r < 1:
        raise ConfigError("padding radius must be >= 1")
    width = [(0, 0)] * (h.ndim - 2) + [(r, r), (r, r)]
    return np.pad(h, width)


def subgrid_offsets(r: int, include_center: bool = True) -> list[tuple[int, int]]:
    offs = [(dy, dx) for dy in (-r, 0, r) for dx in (-r, 0, r)]
    if not include_center:
        offs.remove((0, 0))
    return offs


def window_offsets(r: int, include_center: bool = True) -> list[tuple[int, int]]:
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    if not include_center:
        offs.remove((0, 0))
    return offs


def sample_neighbors(padded: np.ndarray, center: tuple[int, int], r: int) -> np.ndarray:
    """The 9 subgrid values around ``center`` (unpadded coordinates) of a 2-D plane."""
    i, j = center[0] + r, center[1] + r
    return np.array([padded[i + dy, j + dx] for dy, dx in subgrid_offsets(r)])


def gaussian_kernel(a, b, h: float):
    if not h > 0:
        raise ConfigError("kernel bandwidth must be positive")
    d = np.asarray(a) - np.asarray(b)
    return np.exp(-(d * d) / (2.0 * h * h)) / (np.sqrt(2.0 * np.pi) * h)


def _shifted(padded: np.ndarray, r: int, dy: int, dx: int, n: int, m: int) -> np.ndarray:
    return padded[..., r + dy: r + dy + n, r + dx: r + dx + m]


def kernel_maps(h: np.ndarray, cfg: SelfInfoConfig, offsets=None) -> tuple[np.ndarray, np.ndarray]:
    """Kernel values against each sampled neighbor.

    Returns ``(k, valid)`` of shape (..., S, n, m) where S is the number of
    offsets. ``valid`` marks neighbors inside the unpadded tensor.
    """
    r = cfg.radius_r
    if offsets is None:
        offsets = subgrid_offsets(r, cfg.include_center)
    n, m = h.shape[-2:]
    hp = pad(h, r)
    inside = pad(np.ones((n, m)), r)
    ks, vs = [], []
    for dy, dx in offsets:
        ks.append(gaussian_kernel(h, _shifted(hp, r, dy, dx, n, m), cfg.bandwidth_h))
        vs.append(np.broadcast_to(_shifted(inside, r, dy, dx, n, m), h.shape))
    return np.stack(ks, axis=-3), np.stack(vs, axis=-3).astype(bool)


def _density(k: np.ndarray, valid: np.ndarray, border: str) -> np.ndarray:
    if border == "zero":
        return k.mean(axis=-3)
    return (k * valid).sum(axis=-3) / valid.sum(axis=-3)


def threshold_mask(values: np.ndarray, cfg: SelfInfoConfig) -> np.ndarray:
    """Binary mask over the last two axes of ``values``.

    Quantile mode keeps the ``n - round(quantile * n)`` largest entries per
    plane; ties go to the lower flattened index.
    """
    if cfg.threshold_mode == "absolute":
        return (values >= cfg.threshold).astype(np.uint8)
    lead = values.shape[:-2]
    flat = values.reshape(lead + (-1,))
    n = flat.shape[-1]
    keep = n - int(round(cfg.quantile * n))
    order = np.argsort(-flat, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(n).reshape((1,) * len(lead) + (n,)), axis=-1)
    return (ranks < keep).astype(np.uint8).reshape(values.shape)


def self_information_analytic(h: np.ndarray, cfg: SelfInfoConfig = SelfInfoConfig()) -> SelfInfoMap:
    """Self-information from the 9-sample subgrid, constant offset dropped."""
    cfg.validate()
    h = np.asarray(h, dtype=np.float64)
    k, valid = kernel_maps(h, cfg)
    q = _density(k, valid, cfg.border)
    values = -np.log2(np.maximum(cfg.epsilon, q))
    return SelfInfoMap(values, threshold_mask(values, cfg))


def brute_force_kde_oracle(h: np.ndarray, cfg: SelfInfoConfig = SelfInfoConfig()) -> SelfInfoMap:
    """Reference estimator: explicit loops over the full (2R+1)^2 window."""
    cfg.validate()
    h = np.asarray(h, dtype=np.float64)
    r, bw = cfg.radius_r, cfg.bandwidth_h
    n, m = h.shape[-2:]
    flat = h.reshape(-1, n, m)
    out = np.empty_like(flat)
    norm = 1.0 / (np.sqrt(2.0 * np.pi) * bw)
    for p in range(flat.shape[0]):
        for i in range(n):
            for j in range(m):
                total, count = 0.0, 0
                for dy in range(-r, r + 1):
                    for dx in range(-r, r + 1):
                        if dy == 0 and dx == 0 and not cfg.include_center:
                            continue
                        y, x = i + dy, j + dx
                        inside = 0 <= y < n and 0 <= x < m
                        if not inside and cfg.border == "exclude":
                            continue
                        other = flat[p, y, x] if inside else 0.0
                        diff = flat[p, i, j] - other
                        total += norm * np.exp(-diff * diff / (2.0 * bw * bw))
                        count += 1
                out[p, i, j] = -np.log2(max(cfg.epsilon, total / count))
    values = out.reshape(h.shape)
    return SelfInfoMap(values, threshold_mask(values, cfg))


class FrozenAggregator:
    """Fixed 64x9 mixing of the kernel maps (a bias-free 1x1 convolution)."""

    def __init__(self, n_out: int = 64, n_in: int = 9, seed: int = 0, init: str = "abs_gaussian"):
        if init == "gaussian":
            # Signed rows: outputs can go negative and hit the log clamp.
            w = np.random.default_rng(seed).standard_normal((n_out, n_in))
            w /= np.linalg.norm(w, axis=1, keepdims=True)
        elif init == "abs_gaussian":
            w = np.abs(np.random.default_rng(seed).standard_normal((n_out, n_in)))
            w /= w.sum(axis=1, keepdims=True)
        elif init == "uniform":
            w = np.full((n_out, n_in), 1.0 / n_in)
        else:
            raise ConfigError(f"unknown aggregator init {init!r}")
        w.setflags(write=False)
        self._weights = w
        self.seed = seed

    @property
    def weights(self) -> np.ndarray:
        """Read-only view shaped like a conv kernel, (64, 9, 1, 1)."""
        return self._weights[:, :, None, None]

    def __call__(self, maps: np.ndarray) -> np.ndarray:
        # (..., 9, n, m) -> (..., 64, n, m)
        return np.einsum("oi,...inm->...onm", self._weights, maps)


def sicnet_kernel_maps(h: np.ndarray, cfg: SelfInfoConfig) -> np.ndarray:
    """Kernel maps (..., 9, n, m) with out-of-bounds samples imputed.

    With ``border="exclude"`` each invalid entry is replaced by the mean of the
    valid kernels at that position, so a uniform aggregator reproduces the
    excluded-border density exactly.
    """
    k, valid = kernel_maps(np.asarray(h, dtype=np.float64), cfg)
    if cfg.border == "exclude":
        fill = _density(k, valid, "exclude")[..., None, :, :]
        k = np.where(valid, k, fill)
    return k


def sicnet_forward(kmaps: np.ndarray, agg: FrozenAggregator, cfg: SelfInfoConfig,
                   reduce_axis: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Self-information maps and binary mask from kernel maps.

    ``kmaps`` is (..., 9, n, m). When ``reduce_axis`` is given the maps are
    max-reduced over that axis (the real/imaginary planes) before thresholding.
    """
    maps = -np.log2(np.maximum(cfg.epsilon, agg(kmaps)))
    if reduce_axis is not None:
        maps = maps.max(axis=reduce_axis)
    return maps, threshold_mask(maps, cfg)


def encoder_mask(h: np.ndarray, agg: FrozenAggregator, cfg: SelfInfoConfig) -> np.ndarray:
    """64-channel mask for a batch (B, 2, n, m) -> (B, 64, n, m)."""
    k = sicnet_kernel_maps(h, cfg)  # B, 2, 9, n, m
    _, mask = sicnet_forward(k, agg, cfg, reduce_axis=-4)
    return mask
