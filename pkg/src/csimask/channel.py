"""Synthetic multipath MIMO-OFDM channels and the angle-delay CSI pipeline.

A channel is a sum of ``n_paths`` plane waves over a half-wavelength ULA.
``to_angle_delay`` applies unitary DFTs along frequency and antennas, which
concentrates each path into a few cells near row ``tau * bandwidth``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataFormatError, DimensionError

SPEED_OF_LIGHT = 3e8


@dataclass(frozen=True)
class ChannelScenario:
    n_f: int = 256
    n_t: int = 16
    n_c: int = 16
    n_paths: int = 3
    carrier_hz: float = 5.3e9
    bandwidth_hz: float = 20e6
    max_delay_s: float = 5e-7
    seed: int = 0

    def validate(self) -> "ChannelScenario":
        for name in ("n_f", "n_t", "n_c", "n_paths"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_c > self.n_f:
            raise ConfigError(f"n_c={self.n_c} exceeds n_f={self.n_f}")
        if not self.max_delay_s > 0:
            raise ConfigError("max_delay_s must be positive")
        if not (self.carrier_hz > 0 and self.bandwidth_hz > 0):
            raise ConfigError("carrier_hz and bandwidth_hz must be positive")
        return self

    @property
    def subcarrier_spacing(self) -> float:
        return self.bandwidth_hz / self.n_f

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelScenario":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d).validate()


# Full-size scenarios: channel dimensions with carrier, bandwidth, delay spread and path count.
PRESETS = {
    "desk": ChannelScenario(),
    "cost2100out": ChannelScenario(1024, 32, 32, 48, 300e6, 20e6, 5e-7),
    "cost2100in": ChannelScenario(1024, 32, 32, 3, 5.3e9, 20e6, 5e-7),
    "uma": ChannelScenario(1024, 32, 32, 34, 28e9, 100e6, 8e-6),
    "deepmimo_o1": ChannelScenario(1024, 32, 32, 10, 3.4e9, 10e6, 1e-6),
}


def load_scenario(path) -> ChannelScenario:
    with open(path) as f:
        return ChannelScenario.from_dict(json.load(f))


def save_scenario(scenario: ChannelScenario, path) -> None:
    with open(path, "w") as f:
        json.dump(scenario.to_dict(), f, indent=2)


@dataclass
class PathSet:
    gains: np.ndarray  # complex
    angles: np.ndarray  # rad
    delays: np.ndarray  # s
    doppler_hz: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.doppler_hz is None:
            self.doppler_hz = np.zeros(len(self.gains))

    def __len__(self):
        return len(self.gains)

    def copy(self) -> "PathSet":
        return PathSet(self.gains.copy(), self.angles.copy(), self.delays.copy(),
                       self.doppler_hz.copy())


def generate_paths(scenario: ChannelScenario, rng_seed) -> PathSet:
    """Draw i.i.d. paths with unit total average power.

    ``rng_seed`` may be an int or a ``np.random.SeedSequence``.
    """
    scenario.validate()
    rng = np.random.default_rng(rng_seed)
    p = scenario.n_paths
    gains = (rng.standard_normal(p) + 1j * rng.standard_normal(p)) / np.sqrt(2 * p)
    angles = rng.uniform(0.0, 2 * np.pi, p)
    delays = rng.uniform(0.0, scenario.max_delay_s, p)
    return PathSet(gains, angles, delays)


def synthesize(paths: PathSet, scenario: ChannelScenario) -> np.ndarray:
    """Spatial-frequency channel, shape (n_f, n_t)."""
    freqs = np.arange(scenario.n_f) * scenario.subcarrier_spacing
    ants = np.arange(scenario.n_t)
    freq_resp = np.exp(-2j * np.pi * np.outer(freqs, paths.delays))  # n_f x P
    steer = np.exp(-1j * np.pi * np.outer(np.sin(paths.angles), ants))  # P x n_t
    return (freq_resp * paths.gains) @ steer


def to_angle_delay(h: np.ndarray) -> np.ndarray:
    # Inverse DFT along frequency maps delay tau to row tau*bandwidth (not n_f - that).
    return np.fft.fft(np.fft.ifft(h, axis=0, norm="ortho"), axis=1, norm="ortho")


def from_angle_delay(h_bar: np.ndarray) -> np.ndarray:
    return np.fft.fft(np.fft.ifft(h_bar, axis=1, norm="ortho"), axis=0, norm="ortho")


def truncate(h_bar: np.ndarray, n_c: int) -> np.ndarray:
    if n_c > h_bar.shape[0] or n_c < 1:
        raise DimensionError(f"cannot keep {n_c} of {h_bar.shape[0]} delay rows")
    return h_bar[:n_c]


def untruncate(hc: np.ndarray, n_f: int) -> np.ndarray:
    out = np.zeros((n_f,) + hc.shape[1:], dtype=complex)
    out[: hc.shape[0]] = hc
    return out


def to_real(hc: np.ndarray) -> np.ndarray:
    """Complex (..., n_c, n_t) -> real (..., 2, n_c, n_t)."""
    return np.stack([hc.real, hc.imag], axis=-3)


def to_complex(h: np.ndarray) -> np.ndarray:
    return h[..., 0, :, :] + 1j * h[..., 1, :, :]


def add_awgn(h: np.ndarray, snr_db: float, seed) -> np.ndarray:
    """Add white Gaussian noise at ``snr_db`` relative to the sample power.

    ``snr_db=inf`` disables noise. Works on a single (2, n_c, n_t) tensor or a
    batch; the noise power is calibrated per sample.
    """
    if np.isinf(snr_db) and snr_db > 0:
        return h.copy()
    rng = np.random.default_rng(seed)
    per_sample = np.sum(h ** 2, axis=(-3, -2, -1), keepdims=True) / np.prod(h.shape[-3:])
    var = per_sample * 10.0 ** (-snr_db / 10.0)
    return h + rng.standard_normal(h.shape) * np.sqrt(var)


def apply_doppler(paths: PathSet, speed_mps: float, carrier_hz: float, elapsed_s: float,
                  seed) -> PathSet:
    if speed_mps < 0:
        raise ConfigError("speed must be non-negative")
    out = paths.copy()
    if speed_mps == 0:
        return out
    rng = np.random.default_rng(seed)
    phi = rng.uniform(0.0, 2 * np.pi, len(paths))
    fd = speed_mps * carrier_hz / SPEED_OF_LIGHT * np.cos(phi)
    out.gains = paths.gains * np.exp(2j * np.pi * fd * elapsed_s)
    out.doppler_hz = fd
    return out


def sample_csi(scenario: ChannelScenario, seed, speed_mps: float = 0.0,
               max_elapsed_s: float = 0.01) -> np.ndarray:
    """One real CSI tensor (2, n_c, n_t) from an independent seed stream."""
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    path_seed, dop_seed, t_seed = ss.spawn(3)
    paths = generate_paths(scenario, path_seed)
    if speed_mps > 0:
        elapsed = np.random.default_rng(t_seed).uniform(0.0, max_elapsed_s)
        paths = apply_doppler(paths, speed_mps, scenario.carrier_hz, elapsed, dop_seed)
    hc = truncate(to_angle_delay(synthesize(paths, scenario)), scenario.n_c)
    return to_real(hc)


def normalize_power(h: np.ndarray) -> np.ndarray:
    """Scale each sample to unit mean element power."""
    n = np.prod(h.shape[-3:])
    norm = np.sqrt(np.sum(h ** 2, axis=(-3, -2, -1), keepdims=True) / n)
    return h / np.where(norm > 0, norm, 1.0)


def generate_dataset(scenario: ChannelScenario, count: int, seed: int, split: int = 0,
                     speed_mps: float = 0.0, doppler_fraction: float = 0.0,
                     normalize: bool = True) -> np.ndarray:
    """Generate ``count`` samples, each from stream (seed, split, index).

    A ``doppler_fraction`` of the samples (chosen by index parity stream) move at
    ``speed_mps``. Parallel or partial generation reproduces the same samples
    because every sample owns its seed.
    """
    scenario.validate()
    out = np.empty((count, 2, scenario.n_c, scenario.n_t))
    for i in range(count):
        ss = np.random.SeedSequence(seed, spawn_key=(split, i))
        moving = doppler_fraction > 0 and (
            np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(split, i, 1))).random()
            < doppler_fraction)
        out[i] = sample_csi(scenario, ss, speed_mps if moving else 0.0)
    if normalize:
        out = normalize_power(out)
    return out


# --- dataset file format -------------------------------------------------------------

MAGIC = b"CSID"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def write_dataset(samples: Sequence[np.ndarray] | np.ndarray, meta: dict, path) -> None:
    arr = np.asarray(samples)
    if arr.ndim != 4 or arr.shape[0] == 0 or arr.shape[1] != 2:
        raise DataFormatError(f"expected nonempty (count, 2, n_c, n_t) samples, got {arr.shape}")
    path = Path(path)
    payload = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, arr.shape[0], *arr.shape[1:]))
        f.write(payload.tobytes())
    with open(meta_path(path), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_header(path) -> tuple[int, tuple[int, int, int]]:
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, count, *shape = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    return count, tuple(shape)


def read_dataset(path) -> tuple[np.ndarray, dict]:
    count, shape = read_header(path)
    n = count * int(np.prod(shape))
    with open(path, "rb") as f:
        f.seek(_HEADER.size)
        raw = f.read()
    if len(raw) != 4 * n:
        raise DataFormatError(f"{path}: payload has {len(raw)} bytes, header implies {4 * n}")
    samples = np.frombuffer(raw, dtype="<f4").reshape((count,) + shape).astype(np.float32)
    mp = meta_path(path)
    meta = json.loads(mp.read_text()) if mp.exists() else {}
    return samples, meta
