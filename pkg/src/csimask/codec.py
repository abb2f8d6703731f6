"""Encoder, preliminary decoder and token-prediction decoder.

Tensors flowing through the networks are batched ``(B, 2, n_c, n_t)``. The
public per-sample functions (:func:`encode`, :func:`fill`, :func:`decode`, ...)
wrap the batched paths and exchange :class:`Codeword` objects.

Codeword values are read off the encoder's output image at the selected
positions; index 0 carries the mean of the input CSI.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import selfinfo
from .errors import ConfigError, DataFormatError, DimensionError
from .nn import (BatchNorm2d, Conv2d, ConvBN, LayerConfig, LayerNorm, Linear, ParameterStore,
                 TransformerLayer, _trunc_normal, leaky_relu)
from .selfinfo import FrozenAggregator, SelfInfoConfig

GROUPS = ("EN", "PD", "TP")
ABLATIONS = ("full", "random_mask", "no_pd", "no_tp")

# Reference M per compression ratio at 32x32 with q1=64, q2=10.
M_PRESETS_32 = {8: 221, 16: 111, 32: 56, 64: 28}


# --- bit accounting ------------------------------------------------------------------

def bits_total(m: int, q1: int = 64, q2: int = 10) -> int:
    if min(m, q1, q2) < 0:
        raise ConfigError("bit accounting needs nonnegative integers")
    return q1 * (m + 1) + q2 * m


def compression_ratio(m: int, q1: int, q2: int, n_c: int, n_t: int) -> float:
    return bits_total(m, q1, q2) / (q1 * 2 * n_c * n_t)


def m_for_ratio(sigma: float, q1: int = 64, q2: int = 10, n_c: int = 32, n_t: int = 32,
                use_presets: bool = True) -> int:
    """Largest M whose mean-free payload fits the ratio: floor(sigma*q1*2*Nc*Nt/(q1+q2)).

    At 32x32 with the default bit widths the reference M values are returned
    instead; they differ from the floor rule by one for sigma in {1/16, 1/32, 1/64}.
    """
    if not 0 < sigma <= 1:
        raise ConfigError(f"sigma must lie in (0, 1], got {sigma}")
    inv = 1.0 / sigma
    if use_presets and (n_c, n_t, q1, q2) == (32, 32, 64, 10) and abs(inv - round(inv)) < 1e-9 \
            and int(round(inv)) in M_PRESETS_32:
        return M_PRESETS_32[int(round(inv))]
    m = math.floor(sigma * q1 * 2 * n_c * n_t / (q1 + q2) + 1e-9)
    if m < 0:
        raise ConfigError("compression ratio too small for any payload")
    return m


def index_bits(n_c: int, n_t: int) -> int:
    return math.ceil(math.log2(2 * n_c * n_t))


# --- codeword ------------------------------------------------------------------------

@dataclass
class Codeword:
    values: np.ndarray  # m + 1 floats, values[0] is the CSI mean
    positions: np.ndarray  # m flattened indices into (2, n_c, n_t), ascending
    shape: tuple  # (n_c, n_t)
    q1: int = 64
    q2: int = 11
    quant_indices: np.ndarray | None = None  # when quantized, one index per value

    @property
    def m(self) -> int:
        return len(self.positions)

    def validate(self) -> "Codeword":
        n = 2 * self.shape[0] * self.shape[1]
        if len(self.values) != self.m + 1:
            raise DataFormatError("codeword needs m + 1 values")
        if self.m and (self.positions.min() < 0 or self.positions.max() >= n):
            raise DataFormatError("codeword position out of range")
        if len(np.unique(self.positions)) != self.m:
            raise DataFormatError("codeword positions must be unique")
        if not np.all(np.isfinite(self.values)):
            raise DataFormatError("codeword values must be finite")
        return self

    def bits(self) -> int:
        return bits_total(self.m, self.q1, self.q2)


_CW_HEADER = struct.Struct(">4sHBBBHH")
CW_MAGIC = b"CSCW"


def _pack_bits(ints, width: int) -> bytes:
    acc, nbits, out = 0, 0, bytearray()
    for v in ints:
        acc = (acc << width) | int(v)
        nbits += width
        while nbits >= 8:
            nbits -= 8
            out.append((acc >> nbits) & 0xFF)
        acc &= (1 << nbits) - 1
    if nbits:
        out.append((acc << (8 - nbits)) & 0xFF)
    return bytes(out)


def _unpack_bits(data: bytes, width: int, count: int) -> np.ndarray:
    need = (width * count + 7) // 8
    if len(data) < need:
        raise DataFormatError("codeword payload truncated")
    big = int.from_bytes(data[:need], "big") >> (need * 8 - width * count)
    mask = (1 << width) - 1
    return np.array([(big >> (width * (count - 1 - i))) & mask for i in range(count)], dtype=np.int64)


def pack_codeword(cw: Codeword) -> bytes:
    """Header, then values (float32 or b-bit quantizer indices), then q2-bit positions.

    Integers are packed MSB first.
    """
    cw.validate()
    if cw.m and int(cw.positions.max()) >= 2 ** cw.q2:
        raise DataFormatError(f"q2={cw.q2} bits cannot address position {int(cw.positions.max())}")
    quantized = cw.quant_indices is not None
    head = _CW_HEADER.pack(CW_MAGIC, cw.m, cw.q1, cw.q2, int(quantized), *cw.shape)
    if quantized:
        vals = _pack_bits(cw.quant_indices, cw.q1)
    else:
        vals = np.asarray(cw.values, dtype=">f4").tobytes()
    return head + vals + _pack_bits(cw.positions, cw.q2)


def unpack_codeword(data: bytes, quantizer=None) -> Codeword:
    if len(data) < _CW_HEADER.size:
        raise DataFormatError("codeword header truncated")
    magic, m, q1, q2, quantized, n_c, n_t = _CW_HEADER.unpack_from(data)
    if magic != CW_MAGIC:
        raise DataFormatError(f"bad codeword magic {magic!r}")
    pos = _CW_HEADER.size
    qidx = None
    if quantized:
        nbytes = (q1 * (m + 1) + 7) // 8
        qidx = _unpack_bits(data[pos:pos + nbytes], q1, m + 1)
        if quantizer is None:
            raise DataFormatError("quantized codeword needs a quantizer to decode")
        values = quantizer.levels[qidx]
    else:
        nbytes = 4 * (m + 1)
        if len(data) < pos + nbytes:
            raise DataFormatError("codeword values truncated")
        values = np.frombuffer(data, dtype=">f4", count=m + 1, offset=pos).astype(np.float64)
    pos += nbytes
    positions = _unpack_bits(data[pos:], q2, m)
    return Codeword(values, positions, (n_c, n_t), q1, q2, qidx).validate()


# --- batched fill --------------------------------------------------------------------

def fill_batch(mean, values, positions, valid, shape):
    """Mean-initialized (B, 2, n_c, n_t) tensor with ``values`` scattered in.

    ``valid`` (B, K) masks which of the K slots carry data; invalid slots write
    the mean back, so rows may use different M.
    """
    b = mean.shape[0]
    n = 2 * shape[0] * shape[1]
    base = mean.view(b, 1).expand(b, n)
    if positions.shape[1] == 0:
        return base.reshape(b, 2, *shape)
    src = torch.where(valid, values, mean.view(b, 1).expand_as(values))
    return base.scatter(1, positions, src).reshape(b, 2, *shape)


def rank_positions(score, k: int):
    """Indices of the k largest entries per row of ``score`` (B, N), ties to lower index."""
    order = torch.argsort(-score, dim=1, stable=True)
    return order[:, :k]


# --- networks ------------------------------------------------------------------------

class Encoder(nn.Module):
    """Conv features masked by self-information, then conv to an output image."""

    def __init__(self, si_cfg: SelfInfoConfig = SelfInfoConfig(), agg_seed: int = 0,
                 agg_init: str = "abs_gaussian", width: int = 64):
        super().__init__()
        self.si_cfg = si_cfg.validate()
        n_in = 9 if si_cfg.include_center else 8
        self.aggregator = FrozenAggregator(width, n_in, agg_seed, agg_init)
        self.features = ConvBN(2, width)
        self.image = ConvBN(width, 2)

    def mask(self, h):
        m = selfinfo.encoder_mask(h.detach().cpu().double().numpy(), self.aggregator, self.si_cfg)
        return torch.from_numpy(m).to(h.dtype)

    def forward(self, h, mask=None):
        if mask is None:
            mask = self.mask(h)
        return self.image(self.features(h) * mask)


class ResBlock(nn.Module):
    """Three convs with an additive skip, then LReLU."""

    def __init__(self, widths=(8, 16)):
        super().__init__()
        a, b = widths
        self.c1, self.c2, self.c3 = ConvBN(2, a), ConvBN(a, b), ConvBN(b, 2, act=False)

    def forward(self, x):
        return leaky_relu(x + self.c3(self.c2(self.c1(x))))


class PreliminaryDecoder(nn.Module):
    def __init__(self, widths=(8, 16)):
        super().__init__()
        self.res1, self.res2 = ResBlock(widths), ResBlock(widths)
        self.head = Conv2d(2, 2, 3, padding=1)

    def forward(self, k):
        return self.head(self.res2(self.res1(k)))


class TokenPredictor(nn.Module):
    """Patch tokens + position/class embeddings -> transformer layers -> patches."""

    def __init__(self, cfg: LayerConfig, n_c: int, n_t: int):
        super().__init__()
        self.cfg = cfg.validate(n_c, n_t)
        self.shape = (n_c, n_t)
        s = cfg.s_p
        self.grid = (n_c // s, n_t // s)
        self.n_tokens = self.grid[0] * self.grid[1]
        self.patch = Conv2d(2, cfg.d_m, s, stride=s)
        self.pos = _trunc_normal(self.n_tokens, cfg.d_m)
        self.cls = _trunc_normal(1, cfg.d_m)
        self.layers = nn.ModuleList(TransformerLayer(cfg.d_m, cfg.d_ff, cfg.n_heads)
                                    for _ in range(cfg.n_trans))
        self.ln_out = LayerNorm(cfg.d_m)
        self.head = Linear(cfg.d_m, 2 * s * s)
        self.register_buffer("norm_mean", torch.zeros(()))
        self.register_buffer("norm_std", torch.ones(()))

    def tokenize(self, hp):
        x = (hp - self.norm_mean) / self.norm_std
        t = self.patch(x).flatten(2).transpose(1, 2) + self.pos
        return torch.cat([self.cls.expand(t.shape[0], 1, -1), t], dim=1)

    def forward(self, hp):
        t = self.tokenize(hp)
        for layer in self.layers:
            t = layer(t)
        y = self.head(self.ln_out(t[:, 1:]))
        b, s = y.shape[0], self.cfg.s_p
        gh, gw = self.grid
        y = y.view(b, gh, gw, 2, s, s).permute(0, 3, 1, 4, 2, 5).reshape(b, 2, *self.shape)
        return y * self.norm_std + self.norm_mean


@dataclass
class ModelConfig:
    n_c: int = 16
    n_t: int = 16
    layer: LayerConfig = field(default_factory=LayerConfig)
    selfinfo: SelfInfoConfig = field(default_factory=SelfInfoConfig)
    agg_seed: int = 0
    agg_init: str = "abs_gaussian"
    pd_widths: tuple = (8, 16)
    variant: str = "full"
    q1: int = 64
    q2: int | None = None

    def validate(self) -> "ModelConfig":
        if self.variant not in ABLATIONS:
            raise ConfigError(f"unknown model variant {self.variant!r}")
        self.layer.validate(self.n_c, self.n_t)
        self.selfinfo.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pd_widths"] = list(self.pd_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["layer"] = LayerConfig(**d.get("layer", {}))
        d["selfinfo"] = SelfInfoConfig(**d.get("selfinfo", {}))
        d["pd_widths"] = tuple(d.get("pd_widths", (8, 16)))
        return cls(**d).validate()

    @property
    def index_bits(self) -> int:
        return self.q2 if self.q2 is not None else index_bits(self.n_c, self.n_t)


class PipelineModel(nn.Module):
    """Encoder, preliminary decoder and token predictor; parameter groups EN / PD / TP.

    ``variant`` selects an ablation: ``random_mask`` feeds back M uniformly
    random CSI entries, ``no_pd`` skips the preliminary decoder, ``no_tp`` stops
    after it.
    """

    def __init__(self, cfg: ModelConfig = None, seed: int = 0):
        super().__init__()
        cfg = (cfg or ModelConfig()).validate()
        self.cfg = cfg
        torch.manual_seed(seed)
        self.encoder = Encoder(cfg.selfinfo, cfg.agg_seed, cfg.agg_init)
        self.pd = PreliminaryDecoder(cfg.pd_widths)
        self.tp = TokenPredictor(cfg.layer, cfg.n_c, cfg.n_t)
        self.store = ParameterStore({"EN": self.encoder, "PD": self.pd, "TP": self.tp})
        self._random_calls = 0
        self.random_seed = seed

    @property
    def shape(self):
        return (self.cfg.n_c, self.cfg.n_t)

    @property
    def variant(self):
        return self.cfg.variant

    def fit_normalization(self, h) -> None:
        h = torch.as_tensor(h)
        with torch.no_grad():
            self.tp.norm_mean.fill_(float(h.mean()))
            self.tp.norm_std.fill_(float(h.std()) or 1.0)

    # -- encoding ------------------------------------------------------------------

    def masks(self, h, batch_size: int = 256):
        """Self-information masks for a whole dataset; they depend on the input only."""
        h = torch.as_tensor(np.asarray(h))
        return torch.cat([self.encoder.mask(h[i:i + batch_size]).bool()
                          for i in range(0, len(h), batch_size)])

    def encode_batch(self, h, counts, generator=None, mask=None):
        """Returns ``(mean, values, positions, valid)`` with K = max(counts) slots.

        Slots are in rank order (most informative first); ``valid[:, i]`` is
        ``i < counts``. ``mask`` may carry precomputed self-information masks.
        """
        b = h.shape[0]
        counts = torch.as_tensor(counts, dtype=torch.long).expand(b) if np.ndim(counts) == 0 \
            else torch.as_tensor(counts, dtype=torch.long)
        n = 2 * self.cfg.n_c * self.cfg.n_t
        k = int(counts.max()) if b else 0
        if k > n or int(counts.min()) < 0:
            raise ConfigError(f"M must lie in [0, {n}]")
        mean = h.mean(dim=(1, 2, 3)).detach()
        valid = torch.arange(k).view(1, k) < counts.view(b, 1)
        if self.variant == "random_mask":
            if generator is None:
                generator = torch.Generator().manual_seed(self.random_seed * 7919 + self._random_calls)
                self._random_calls += 1
            pos = torch.argsort(torch.rand(b, n, generator=generator), dim=1)[:, :k]
            vals = h.reshape(b, n).gather(1, pos)
            return mean, vals, pos, valid
        img = self.encoder(h, None if mask is None else mask.to(h.dtype)).reshape(b, n)
        pos = rank_positions(img.detach().abs(), k)
        return mean, img.gather(1, pos), pos, valid

    def fill(self, mean, values, positions, valid):
        return fill_batch(mean, values, positions, valid, self.shape)

    def decode_batch(self, mean, values, positions, valid, stage: int = 2):
        k = self.fill(mean, values, positions, valid)
        if self.variant == "no_pd":
            return self.tp(k)
        hp = self.pd(k)
        if stage == 1 or self.variant == "no_tp":
            return hp
        return self.tp(hp)

    def forward(self, h, counts, stage: int = 2):
        return self.decode_batch(*self.encode_batch(h, counts), stage=stage)

    # -- persistence -----------------------------------------------------------------

    def tensors(self) -> dict[str, torch.Tensor]:
        return dict(self.state_dict())

    def config_dict(self) -> dict:
        return {"model": self.cfg.to_dict(), "seed": self.random_seed}


def build_model(cfg: ModelConfig | None = None, seed: int = 0, dtype=torch.float32) -> PipelineModel:
    return PipelineModel(cfg, seed).to(dtype)


def save_model(model: PipelineModel, path, extra: dict | None = None) -> None:
    from .nn import save_checkpoint
    cfg = model.config_dict()
    if extra:
        cfg.update(extra)
    save_checkpoint(path, model.tensors(), cfg)


def load_model(path) -> tuple[PipelineModel, dict]:
    from .nn import load_checkpoint
    tensors, cfg = load_checkpoint(path)
    if "model" not in cfg:
        raise DataFormatError(f"{path}: checkpoint config lacks a model section")
    model = PipelineModel(ModelConfig.from_dict(cfg["model"]), cfg.get("seed", 0))
    missing = set(model.state_dict()) ^ set(tensors)
    if missing:
        raise DataFormatError(f"{path}: checkpoint tensors do not match architecture: {sorted(missing)[:5]}")
    model.load_state_dict(tensors)
    model.eval()
    return model, cfg


# --- per-sample API ------------------------------------------------------------------

def _as_batch(h, model):
    t = torch.as_tensor(np.asarray(h), dtype=next(model.parameters()).dtype)
    if t.shape[-3:] != (2, *model.shape):
        raise DimensionError(f"CSI shape {tuple(t.shape)} does not match model {model.shape}")
    return t.unsqueeze(0) if t.dim() == 3 else t


def encode(h, model: PipelineModel, m: int) -> Codeword:
    n = 2 * model.cfg.n_c * model.cfg.n_t
    if not 0 <= m <= n:
        raise ConfigError(f"M={m} out of range [0, {n}]")
    model.eval()
    with torch.no_grad():
        mean, vals, pos, _ = model.encode_batch(_as_batch(h, model), m)
    order = torch.argsort(pos[0])
    values = np.concatenate([[float(mean[0])], vals[0, order].double().numpy()])
    return Codeword(values, pos[0, order].numpy(), model.shape, model.cfg.q1, model.cfg.index_bits)


def _cw_tensors(cw: Codeword, dtype=torch.float64):
    cw.validate()
    mean = torch.tensor([cw.values[0]], dtype=dtype)
    vals = torch.as_tensor(cw.values[1:], dtype=dtype).view(1, -1)
    pos = torch.as_tensor(cw.positions, dtype=torch.long).view(1, -1)
    return mean, vals, pos, torch.ones_like(pos, dtype=torch.bool)


def fill(cw: Codeword, n_c: int, n_t: int) -> np.ndarray:
    if tuple(cw.shape) != (n_c, n_t):
        raise DataFormatError(f"codeword shape {cw.shape} does not match ({n_c}, {n_t})")
    return fill_batch(*_cw_tensors(cw), (n_c, n_t))[0].numpy()


def preliminary_decode(cw: Codeword, model: PipelineModel) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        return model.pd(model.fill(*_cw_tensors(cw, dtype)))[0].double().numpy()


def tokenize(hp, model: PipelineModel) -> torch.Tensor:
    """(L, d_m) token sequence, class token first."""
    with torch.no_grad():
        return model.tp.tokenize(_as_batch(hp, model))[0]


def token_predict(hp, model: PipelineModel) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        return model.tp(_as_batch(hp, model))[0].double().numpy()


def decode(cw: Codeword, model: PipelineModel) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        return model.decode_batch(*_cw_tensors(cw, dtype))[0].double().numpy()
