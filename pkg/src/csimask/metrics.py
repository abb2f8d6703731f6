"""Reconstruction metrics, multi-user ZF rates and complexity accounting."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .channel import from_angle_delay, to_complex, untruncate, add_awgn
from .codec import PipelineModel
from .errors import ConfigError, DimensionError, NumericalError
from .quant import Quantizer, dequantize, quantize

NEG_INF_DB = "-inf"


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def nmse(h, h_hat) -> float:
    h, h_hat = _batched(h), _batched(h_hat)
    if h.shape != h_hat.shape:
        raise DimensionError(f"shapes differ: {h.shape} vs {h_hat.shape}")
    ref = np.sum(h ** 2, axis=(1, 2, 3))
    if np.any(ref == 0):
        raise NumericalError("NMSE undefined for a zero-norm reference")
    return float(np.mean(np.sum((h - h_hat) ** 2, axis=(1, 2, 3)) / ref))


def to_db(linear: float) -> float:
    return -math.inf if linear == 0 else 10.0 * math.log10(linear)


def nmse_db(h, h_hat) -> float:
    return to_db(nmse(h, h_hat))


def format_db(db: float) -> str:
    return NEG_INF_DB if db == -math.inf else repr(db)


def sgcs(h, h_hat) -> float:
    """Mean of |Tr(H^H H_hat)|^2 / (||H||^2 ||H_hat||^2) over complex samples."""
    a, b = to_complex(_batched(h)), to_complex(_batched(h_hat))
    na = np.sum(np.abs(a) ** 2, axis=(1, 2))
    nb = np.sum(np.abs(b) ** 2, axis=(1, 2))
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericalError("SGCS undefined for a zero-norm input")
    inner = np.sum(np.conj(a) * b, axis=(1, 2))
    return float(np.mean(np.abs(inner) ** 2 / (na * nb)))


# --- multi-user ZF -------------------------------------------------------------------

@dataclass
class MultiUserSetup:
    h_true: np.ndarray  # (K, N_t) complex, row k is user k's channel
    h_est: np.ndarray  # (K, N_t) complex, reconstructed
    tx_power: float = 1.0
    noise_power: float = 1.0

    def validate(self) -> "MultiUserSetup":
        k, nt = self.h_true.shape
        if self.h_est.shape != (k, nt):
            raise DimensionError("true and reconstructed channels differ in shape")
        if k > nt:
            raise ConfigError(f"{k} users exceed {nt} antennas")
        if not (self.tx_power > 0 and self.noise_power > 0):
            raise ConfigError("powers must be positive")
        return self

    @property
    def k_users(self) -> int:
        return self.h_true.shape[0]


def zf_precode(h_est: np.ndarray, reg: float = 1e-9) -> np.ndarray:
    """Unit-norm ZF precoders W (N_t, K) with h_j^H w_k = 0 for j != k.

    ``h_est`` rows are the user channels h_k, so the effective downlink matrix
    is H = h_est.conj(). Rank-deficient Gram matrices get a diagonal loading.
    """
    hm = np.conj(h_est)  # row k is h_k^H
    gram = hm @ hm.conj().T
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        warnings.warn("rank-deficient channel matrix; using regularized ZF", RuntimeWarning)
        gram = gram + reg * np.trace(gram).real / gram.shape[0] * np.eye(gram.shape[0])
    w = hm.conj().T @ np.linalg.inv(gram)
    return w / np.linalg.norm(w, axis=0, keepdims=True)


def sum_rate(setup: MultiUserSetup, precoders: np.ndarray) -> np.ndarray:
    """Per-user log2(1 + SINR) on the true channels with equal power split."""
    setup.validate()
    p = setup.tx_power / setup.k_users
    g = np.abs(np.conj(setup.h_true) @ precoders) ** 2  # g[k, j] = |h_k^H w_j|^2
    signal = p * np.diag(g)
    interference = p * (g.sum(axis=1) - np.diag(g))
    return np.log2(1.0 + signal / (interference + setup.noise_power))


def spatial_channels(h, n_f: int, subcarriers=None) -> np.ndarray:
    """Per-subcarrier spatial vectors (S, n_sub, N_t) from real CSI (S, 2, n_c, n_t)."""
    hc = to_complex(_batched(h))
    full = np.stack([from_angle_delay(untruncate(x, n_f)) for x in hc])
    return full if subcarriers is None else full[:, subcarriers]


def rate_study(h_true, h_est, k_users: int, snr_db: float, n_f: int, n_sub: int = 8,
               seed: int = 0) -> float:
    """Mean per-user rate; users are consecutive groups of ``k_users`` samples.

    Unit transmit power with noise power 10^(-snr/10); rates are averaged over
    ``n_sub`` evenly spaced subcarriers and all user groups.
    """
    h_true, h_est = _batched(h_true), _batched(h_est)
    subs = np.linspace(0, n_f - 1, n_sub).astype(int)
    st = spatial_channels(h_true, n_f, subs)
    se = spatial_channels(h_est, n_f, subs)
    noise = 10.0 ** (-snr_db / 10.0)
    rates = []
    for g in range(len(st) // k_users):
        sl = slice(g * k_users, (g + 1) * k_users)
        for s in range(len(subs)):
            # normalize each user's channel to unit average gain per antenna
            ht, he = st[sl, s], se[sl, s]
            scale = np.linalg.norm(ht, axis=1, keepdims=True) / np.sqrt(ht.shape[1])
            scale = np.where(scale > 0, scale, 1.0)
            setup = MultiUserSetup(ht / scale, he / scale, 1.0, noise)
            rates.append(sum_rate(setup, zf_precode(setup.h_est)).mean())
    if not rates:
        raise ConfigError(f"need at least {k_users} samples for a rate study")
    return float(np.mean(rates))


# --- model evaluation ----------------------------------------------------------------

@dataclass
class EvalReport:
    scenario: str
    m: int
    sigma: float
    nmse_linear: float
    nmse_db: float
    sgcs: float
    rate: float | None
    samples: int
    variant: str
    quant_bits: int | None = None
    snr_db: float | None = None

    def row(self) -> dict:
        d = asdict(self)
        d["nmse_db"] = format_db(self.nmse_db)
        return d

    @classmethod
    def from_row(cls, row: dict) -> "EvalReport":
        kw = {}
        for f in fields(cls):
            v = row[f.name]
            if f.name in ("scenario", "variant"):
                kw[f.name] = v or ""
            elif v in ("", None, "None"):
                kw[f.name] = None
            elif f.name in ("m", "samples", "quant_bits"):
                kw[f.name] = int(v)
            else:
                kw[f.name] = float(v)
        return cls(**kw)


def write_reports(reports, path) -> None:
    names = [f.name for f in fields(EvalReport)]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, names)
        w.writeheader()
        for r in reports:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                        for k, v in r.row().items()})


def read_reports(path) -> list[EvalReport]:
    with open(path) as f:
        return [EvalReport.from_row(r) for r in csv.DictReader(f)]


def write_report_detail(report: EvalReport, path, extra: dict | None = None) -> None:
    d = report.row()
    if extra:
        d.update(extra)
    with open(path, "w") as f:
        json.dump(d, f, indent=2)


def reconstruct(model: PipelineModel, data, m: int, snr_db: float | None = None,
                quantizer: Quantizer | None = None, seed: int = 0, batch_size: int = 256,
                mode: str = "model", stage: int = 2) -> np.ndarray:
    """Encode (optionally from noisy CSI), optionally quantize, decode.

    ``mode="mean_fill"`` is the decoder-free baseline: the true CSI at the
    encoder's positions with the mean everywhere else. ``stage=1`` stops after
    the preliminary decoder.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.shape[1:] != (2, *model.shape):
        raise DimensionError(f"dataset shape {data.shape[1:]} does not match model {model.shape}")
    inp = data if snr_db is None else add_awgn(data, snr_db, seed)
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(seed)
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            h = torch.as_tensor(inp[i:i + batch_size], dtype=dtype)
            mean, vals, pos, valid = model.encode_batch(h, m, gen)
            if quantizer is not None:
                mean = torch.as_tensor(dequantize(quantizer, quantize(quantizer, mean.double().numpy())),
                                       dtype=dtype)
                vals = torch.as_tensor(dequantize(quantizer, quantize(quantizer, vals.double().numpy())),
                                       dtype=dtype)
            if mode == "mean_fill":
                # the true CSI at the selected positions, mean elsewhere
                truth = torch.as_tensor(data[i:i + batch_size], dtype=dtype).reshape(len(h), -1)
                out.append(model.fill(mean, truth.gather(1, pos), pos, valid).double().numpy())
            else:
                out.append(model.decode_batch(mean, vals, pos, valid, stage).double().numpy())
    return np.concatenate(out)


def codeword_values(model: PipelineModel, data, m: int, batch_size: int = 256) -> np.ndarray:
    """All transmitted values (means included) for quantizer training."""
    dtype = next(model.parameters()).dtype
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            mean, vals, _, _ = model.encode_batch(torch.as_tensor(np.asarray(data[i:i + batch_size]),
                                                                  dtype=dtype), m)
            out += [mean.double().numpy(), vals.double().numpy().ravel()]
    return np.concatenate(out)


def evaluate(model: PipelineModel, data, m: int, snr_db: float | None = None,
             quantizer: Quantizer | None = None, seed: int = 0, scenario: str = "",
             rate_users: int | None = None, rate_snr_db: float = 10.0, n_f: int | None = None,
             mode: str = "model", stage: int = 2) -> EvalReport:
    from .codec import compression_ratio

    h_hat = reconstruct(model, data, m, snr_db, quantizer, seed, mode=mode, stage=stage)
    lin = nmse(data, h_hat)
    rate = None
    if rate_users:
        rate = rate_study(data, h_hat, rate_users, rate_snr_db, n_f or 256)
    q1 = quantizer.b if quantizer is not None else model.cfg.q1
    return EvalReport(scenario, m, compression_ratio(m, q1, model.cfg.index_bits, *model.shape),
                      lin, to_db(lin), sgcs(data, h_hat), rate, len(data),
                      (model.variant if stage == 2 else "stage1") if mode == "model" else mode,
                      quantizer.b if quantizer is not None else None, snr_db)


# --- complexity ----------------------------------------------------------------------

def count_params(model: PipelineModel) -> dict[str, int]:
    return {g: model.store.count(g) for g in model.store.groups}


def count_flops(model: PipelineModel, shape=None) -> dict[str, float]:
    """Closed-form FLOP estimate per side (UE encoder, BS decoder)."""
    n_c, n_t = shape or model.shape
    cfg = model.cfg.layer
    area = n_c * n_t
    length = area // cfg.s_p ** 2 + 1
    ue = 2313 * area + math.log2(2 * area) + 64 * area * math.log2(area)
    transformer = cfg.n_trans * (4 * length * cfg.d_m ** 2 + 2 * length ** 2 * cfg.d_m
                                 + 2 * cfg.d_m * cfg.d_ff)
    bs = 3204 * area + 2 * cfg.d_m * area + transformer
    return {"UE": ue, "BS": bs, "transformer": transformer}
