"""Differentiable building blocks on top of torch autograd.

Layers are written from elementary tensor ops so that every piece the codec
uses is inspectable and covered by :func:`grad_check`. Convolution is the one
exception and delegates to ``torch.nn.functional.conv2d``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataFormatError, DimensionError, NumericalError

LRELU_SLOPE = 0.3


@dataclass(frozen=True)
class LayerConfig:
    d_m: int = 64
    d_ff: int = 256
    n_heads: int = 4
    n_trans: int = 2
    s_p: int = 4

    def validate(self, n_c: int | None = None, n_t: int | None = None) -> "LayerConfig":
        if self.d_m % self.n_heads:
            raise ConfigError(f"d_m={self.d_m} not divisible by n_heads={self.n_heads}")
        if self.n_trans < 1:
            raise ConfigError("n_trans must be >= 1")
        for n in (n_c, n_t):
            if n is not None and n % self.s_p:
                raise ConfigError(f"patch size {self.s_p} does not divide {n}")
        return self


VARIANTS = {"S": 1, "M": 3, "L": 6}


# --- functional ops ------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=0):
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {tuple(x.shape)} vs weight {tuple(weight.shape)}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def leaky_relu(x, slope: float = LRELU_SLOPE):
    return torch.where(x >= 0, x, slope * x)


def gelu(x):
    return 0.5 * x * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def softmax(x, axis: int = -1):
    z = x - x.max(dim=axis, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=axis, keepdim=True)


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} vs weight {tuple(weight.shape)}")
    y = x @ weight.transpose(0, 1)
    return y if bias is None else y + bias


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5):
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def batch_norm(x, weight, bias, running_mean, running_var, training: bool,
               momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel normalization of an (N, C, H, W) tensor."""
    shape = (1, -1, 1, 1)
    if training:
        if x.shape[0] * x.shape[2] * x.shape[3] < 2:
            raise DimensionError("batch_norm in training mode needs more than one value per channel")
        mu = x.mean(dim=(0, 2, 3))
        var = ((x - mu.view(shape)) ** 2).mean(dim=(0, 2, 3))
        with torch.no_grad():
            n = x.numel() / x.shape[1]
            running_mean.mul_(1 - momentum).add_(momentum * mu.detach())
            running_var.mul_(1 - momentum).add_(momentum * var.detach() * n / (n - 1))
    else:
        mu, var = running_mean, running_var
    y = (x - mu.view(shape)) / torch.sqrt(var.view(shape) + eps)
    return y * weight.view(shape) + bias.view(shape)


def multi_head_attention(x, wq, bq, wk, bk, wv, bv, wo, bo, n_heads: int):
    """Scaled dot-product self-attention over (B, L, d_m) tokens."""
    b, length, d = x.shape
    if d % n_heads:
        raise ConfigError(f"d_m={d} not divisible by n_heads={n_heads}")
    dh = d // n_heads

    def split(t):
        return t.view(b, length, n_heads, dh).transpose(1, 2)

    q, k, v = split(linear(x, wq, bq)), split(linear(x, wk, bk)), split(linear(x, wv, bv))
    att = softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), axis=-1)
    y = (att @ v).transpose(1, 2).reshape(b, length, d)
    return linear(y, wo, bo)


# --- modules -------------------------------------------------------------------------

def _trunc_normal(*shape, std=0.02):
    t = torch.empty(*shape)
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)
    return nn.Parameter(t)


class Conv2d(nn.Module):
    def __init__(self, c_in, c_out, k, stride=1, padding=0, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k, k))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(nn.Module):
    def __init__(self, c, momentum=0.1, eps=1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(c))
        self.bias = nn.Parameter(torch.zeros(c))
        self.register_buffer("running_mean", torch.zeros(c))
        self.register_buffer("running_var", torch.ones(c))
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


class ConvBN(nn.Module):
    """Conv (no bias) -> BN -> optional LReLU, 'same' padding."""

    def __init__(self, c_in, c_out, k=3, act=True):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, k, padding=k // 2, bias=False)
        self.bn = BatchNorm2d(c_out)
        self.act = act

    def forward(self, x):
        y = self.bn(self.conv(x))
        return leaky_relu(y) if self.act else y


class Linear(nn.Module):
    def __init__(self, d_in, d_out, bias=True):
        super().__init__()
        self.weight = _trunc_normal(d_out, d_in)
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_m, n_heads):
        super().__init__()
        if d_m % n_heads:
            raise ConfigError(f"d_m={d_m} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q, self.k, self.v, self.out = (Linear(d_m, d_m) for _ in range(4))

    def forward(self, x):
        return multi_head_attention(x, self.q.weight, self.q.bias, self.k.weight, self.k.bias,
                                    self.v.weight, self.v.bias, self.out.weight, self.out.bias,
                                    self.n_heads)


class FeedForward(nn.Module):
    def __init__(self, d_m, d_ff):
        super().__init__()
        self.fc, self.out = Linear(d_m, d_ff), Linear(d_ff, d_m)

    def forward(self, x):
        return self.out(gelu(self.fc(x)))


class TransformerLayer(nn.Module):
    """Pre-norm block: x + MHSA(LN(x)), then + FFN(LN(.))."""

    def __init__(self, d_m, d_ff, n_heads):
        super().__init__()
        self.ln1, self.ln2 = LayerNorm(d_m), LayerNorm(d_m)
        self.attn = MultiHeadAttention(d_m, n_heads)
        self.ffn = FeedForward(d_m, d_ff)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ffn(self.ln2(x))


# --- parameter groups ----------------------------------------------------------------

class ParameterStore:
    """Named parameters split into groups, each freezable as a unit."""

    def __init__(self, groups: dict[str, nn.Module]):
        self._params: dict[str, nn.Parameter] = {}
        self._group_of: dict[str, str] = {}
        for group, module in groups.items():
            for name, p in module.named_parameters():
                full = f"{group}.{name}"
                if full in self._params:
                    raise ConfigError(f"duplicate parameter name {full}")
                self._params[full] = p
                self._group_of[full] = group
        self.groups = list(groups)

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def group(self, name: str) -> dict[str, nn.Parameter]:
        return {k: p for k, p in self._params.items() if self._group_of[k] == name}

    def set_frozen(self, group: str, frozen: bool = True) -> None:
        for p in self.group(group).values():
            p.requires_grad_(not frozen)

    def is_frozen(self, group: str) -> bool:
        return all(not p.requires_grad for p in self.group(group).values())

    def trainable(self) -> list[nn.Parameter]:
        return [p for p in self._params.values() if p.requires_grad]

    def snapshot(self, group: str | None = None) -> dict[str, torch.Tensor]:
        items = self.group(group).items() if group else self._params.items()
        return {k: p.detach().clone() for k, p in items}

    def count(self, group: str) -> int:
        return sum(p.numel() for p in self.group(group).values())


# --- gradient checking ---------------------------------------------------------------

def reverse_grads(fn: Callable[[], torch.Tensor], params: Iterable[torch.Tensor]) -> list[torch.Tensor]:
    """Reverse-mode gradients of scalar ``fn()``; frozen tensors get exact zeros."""
    params = list(params)
    live = [p for p in params if p.requires_grad]
    out = fn()
    if not torch.isfinite(out).all():
        raise NumericalError("non-finite function value in gradient evaluation")
    grads = torch.autograd.grad(out, live, allow_unused=True) if live else []
    it = iter(grads)
    res = []
    for p in params:
        if p.requires_grad:
            g = next(it)
            res.append(torch.zeros_like(p) if g is None else g)
        else:
            res.append(torch.zeros_like(p))
    return res


def grad_check(fn: Callable[[], torch.Tensor], params: Iterable[torch.Tensor], probe_count: int = 20,
               step: float = 1e-5, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error of reverse-mode gradients against central differences.

    Probes ``probe_count`` random coordinates across the trainable tensors.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = [p for p in params if p.requires_grad]
    if not params:
        return 0.0
    analytic = reverse_grads(fn, params)
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    worst = 0.0
    for _ in range(probe_count):
        which = int(rng.choice(len(params), p=sizes / sizes.sum()))
        idx = int(rng.integers(sizes[which]))
        p = params[which]
        flat = p.data.view(-1)
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + step
            f_plus = fn().item()
            flat[idx] = orig - step
            f_minus = fn().item()
            flat[idx] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericalError("non-finite value during finite differencing")
        num = (f_plus - f_minus) / (2 * step)
        ana = analytic[which].reshape(-1)[idx].item()
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


# --- checkpoints ---------------------------------------------------------------------

CKPT_MAGIC = b"CSCK"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, torch.Tensor], config: dict) -> None:
    """Binary container of float32 tensors plus a JSON config sidecar."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(tensors)))
        for name, t in tensors.items():
            raw = name.encode()
            arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
            f.write(struct.pack("<I", len(raw)) + raw)
            f.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    path.with_name(path.name + ".json").write_text(json.dumps(config, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    data = path.read_bytes()
    pos = 12
    if len(data) < pos:
        raise DataFormatError(f"{path}: truncated checkpoint")
    magic, version, count = struct.unpack_from("<4sII", data)
    if magic != CKPT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4: pos + 4 + n].decode()
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape)) * 4
            if pos + size > len(data):
                raise DataFormatError(f"{path}: tensor {name} runs past end of file")
            arr = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
            pos += size
    except struct.error as e:
        raise DataFormatError(f"{path}: truncated checkpoint ({e})") from None
    cfg_path = path.with_name(path.name + ".json")
    config = json.loads(cfg_path.read_text()) if cfg_path.exists() else {}
    return tensors, config


def layer_config_dict(cfg: LayerConfig) -> dict:
    return asdict(cfg)
