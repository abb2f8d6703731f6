"""Two-stage training: encoder and preliminary decoder first, then the token predictor joins."""

from __future__ import annotations

import csv
import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .codec import PipelineModel
from .errors import ConfigError, DivergenceError

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    warmup_epochs: int = 5
    lr_max: float = 2e-3
    lr_min: float = 0.0
    batch_size: int = 32
    patience: int = 10
    freeze_stage2: bool = False
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need 0 <= warmup_epochs < epochs")
        if not self.lr_max >= self.lr_min >= 0:
            raise ConfigError("need lr_max >= lr_min >= 0")
        if self.patience < 1 or self.batch_size < 1:
            raise ConfigError("patience and batch_size must be >= 1")
        return self


FULL_SCALE_TRAIN = TrainConfig(epochs=300, warmup_epochs=30, patience=20)


@dataclass
class RatioSchedule:
    m_values: tuple

    def validate(self, n_max: int) -> "RatioSchedule":
        if not self.m_values:
            raise ConfigError("ratio schedule is empty")
        if any(m < 0 or m > n_max for m in self.m_values):
            raise ConfigError(f"schedule M outside [0, {n_max}]")
        return self

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(self.m_values)[rng.integers(len(self.m_values), size=n)]


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: dict = field(default_factory=dict)  # stage -> epoch
    wall_time_s: float = 0.0
    final_nmse: float | None = None

    def add(self, epoch, stage, lr, train_loss, val_loss):
        self.rows.append({"epoch": epoch, "stage": stage, "lr": lr,
                          "train_loss": train_loss, "val_loss": val_loss})

    def stage_rows(self, stage):
        return [r for r in self.rows if r["stage"] == stage]

    def extend(self, other: "TrainLog") -> "TrainLog":
        self.rows += other.rows
        self.best_epoch.update(other.best_epoch)
        self.wall_time_s += other.wall_time_s
        if other.final_nmse is not None:
            self.final_nmse = other.final_nmse
        return self

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, ["epoch", "stage", "lr", "train_loss", "val_loss"])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path) as f:
            for r in csv.DictReader(f):
                out.add(int(r["epoch"]), r["stage"], float(r["lr"]), float(r["train_loss"]),
                        float(r["val_loss"]))
        return out


def cosine_lr(t: float, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max over warmup_epochs, then cosine decay to lr_min at epochs."""
    tw, tt = cfg.warmup_epochs, cfg.epochs
    if t < tw:
        return cfg.lr_max * t / tw
    frac = min(max((t - tw) / (tt - tw), 0.0), 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(frac * math.pi))


def mse_loss(h_hat, h):
    """Per-sample squared Frobenius distance, averaged over the batch."""
    if h_hat.shape != h.shape:
        raise ConfigError(f"loss shapes differ: {tuple(h_hat.shape)} vs {tuple(h.shape)}")
    return ((h_hat - h) ** 2).flatten(1).sum(dim=1).mean()


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float, betas=ADAM_BETAS, eps=ADAM_EPS):
    """In-place Adam update; frozen parameters and missing gradients are skipped."""
    b1, b2 = betas
    state.step += 1
    c1, c2 = 1 - b1 ** state.step, 1 - b2 ** state.step
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is None or not p.requires_grad:
                continue
            if not torch.isfinite(g).all():
                raise DivergenceError("non-finite gradient")
            key = id(p)
            m = state.m.setdefault(key, torch.zeros_like(p))
            v = state.v.setdefault(key, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))


def _as_tensor(x, model):
    return torch.as_tensor(np.asarray(x), dtype=next(model.parameters()).dtype)


def _set_groups(model: PipelineModel, trainable: set) -> None:
    for g in ("EN", "PD", "TP"):
        model.store.set_frozen(g, g not in trainable)


def stage_loss(model, h, counts, stage, generator=None, mask=None):
    out = model.decode_batch(*model.encode_batch(h, counts, generator, mask), stage=stage)
    return mse_loss(out, h)


def evaluate_loss(model, data, counts, stage, batch_size=256, seed=12345, masks=None) -> float:
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    total, n = 0.0, len(data)
    with torch.no_grad():
        for i in range(0, n, batch_size):
            sl = slice(i, i + batch_size)
            c = counts[sl] if np.ndim(counts) else counts
            mk = None if masks is None else masks[sl]
            total += float(stage_loss(model, data[sl], c, stage, gen, mk)) * len(data[sl])
    return total / n


def _run_stage(model: PipelineModel, train, val, cfg: TrainConfig, stage: int, m=None,
               schedule: RatioSchedule | None = None, tag: str | None = None) -> TrainLog:
    cfg.validate()
    tag = tag or f"stage{stage}"
    train, val = _as_tensor(train, model), _as_tensor(val, model)
    n_max = 2 * model.cfg.n_c * model.cfg.n_t
    if schedule is not None:
        schedule.validate(n_max)
        val_counts = schedule.draw(len(val), np.random.default_rng(cfg.seed + 99))
    else:
        if m is None or not 0 <= m <= n_max:
            raise ConfigError(f"M must lie in [0, {n_max}]")
        val_counts = m
    # masks depend on the input alone, so compute them once per stage
    use_masks = model.variant != "random_mask"
    train_masks = model.masks(train) if use_masks else None
    val_masks = model.masks(val) if use_masks else None
    params = model.store.trainable()
    state = AdamState()
    log_ = TrainLog()
    best, best_state, wait = math.inf, copy.deepcopy(model.state_dict()), 0
    n = len(train)
    n_batches = max(1, math.ceil(n / cfg.batch_size))
    gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + stage)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, stage, epoch])
        order = rng.permutation(n)
        model.train()
        running = 0.0
        lr = cfg.lr_max
        for b in range(n_batches):
            idx = torch.as_tensor(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            if len(idx) < 2:
                continue
            h = train[idx]
            counts = schedule.draw(len(idx), rng) if schedule is not None else m
            lr = cosine_lr(epoch + (b + 1) / n_batches, cfg)
            mk = train_masks[idx] if use_masks else None
            loss = stage_loss(model, h, counts, stage, gen, mk)
            if not torch.isfinite(loss):
                raise DivergenceError(f"{tag}: non-finite loss at epoch {epoch}, batch {b}")
            grads = torch.autograd.grad(loss, params, allow_unused=True) if params else []
            adam_step(params, grads, state, lr)
            running += float(loss.detach()) * len(idx)
        val_loss = evaluate_loss(model, val, val_counts, stage, masks=val_masks)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"{tag}: non-finite validation loss at epoch {epoch}")
        log_.add(epoch, tag, lr, running / n, val_loss)
        log.debug("%s epoch %d lr %.2e train %.4f val %.4f", tag, epoch, lr, running / n, val_loss)
        if val_loss < best:
            best, wait = val_loss, 0
            best_state = copy.deepcopy(model.state_dict())
            log_.best_epoch[tag] = epoch
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    log_.wall_time_s = time.perf_counter() - t0
    return log_


def train_stage1(model: PipelineModel, train, val, cfg: TrainConfig, m=None,
                 schedule: RatioSchedule | None = None) -> TrainLog:
    """Train EN and PD on ||H_p - H||^2 with TP frozen."""
    if model.variant == "no_pd":
        return TrainLog()
    _set_groups(model, {"EN", "PD"})
    return _run_stage(model, train, val, cfg, 1, m, schedule)


def train_stage2(model: PipelineModel, train, val, cfg: TrainConfig, m=None,
                 schedule: RatioSchedule | None = None) -> TrainLog:
    """Train on ||H_hat - H||^2; EN and PD stay frozen when ``cfg.freeze_stage2``."""
    if model.variant == "no_tp":
        return TrainLog()
    _set_groups(model, {"TP"} if cfg.freeze_stage2 else {"EN", "PD", "TP"})
    return _run_stage(model, train, val, cfg, 2, m, schedule)


def train_two_stage(model: PipelineModel, train, val, cfg: TrainConfig, m=None,
                    schedule: RatioSchedule | None = None, stage1_only: bool = False,
                    cfg2: TrainConfig | None = None) -> TrainLog:
    """Stage 1 then stage 2; ``cfg2`` overrides the schedule of the second stage."""
    model.fit_normalization(train)
    out = train_stage1(model, train, val, cfg, m, schedule)
    if not stage1_only:
        out.extend(train_stage2(model, train, val, cfg2 or cfg, m, schedule))
    return out


def train_multi_ratio(model: PipelineModel, train, val, cfg: TrainConfig,
                      schedule: RatioSchedule, cfg2: TrainConfig | None = None) -> TrainLog:
    """Both stages with a fresh uniform draw of M per sample and iteration."""
    return train_two_stage(model, train, val, cfg, schedule=schedule, cfg2=cfg2)


def fine_tune(model: PipelineModel, target_train, sample_budget: int, cfg: TrainConfig, m: int,
              val=None) -> TrainLog:
    """Continue stage-2 training on the first ``sample_budget`` target samples."""
    from .metrics import evaluate  # avoid import cycle

    if sample_budget <= 0:
        return TrainLog()
    if sample_budget > len(target_train):
        raise ConfigError(f"budget {sample_budget} exceeds {len(target_train)} target samples")
    subset = np.asarray(target_train)[:sample_budget]
    val = subset if val is None else val
    out = train_stage2(model, subset, val, cfg, m)
    out.final_nmse = evaluate(model, val, m).nmse_linear
    return out
