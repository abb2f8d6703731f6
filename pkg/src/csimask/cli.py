"""Command-line entry point: ``csimask <command> --config run.json --out DIR``.

Commands: gen, train, eval, rate, quantize-eval, inspect-selfinfo, ablate.
Every command validates its configuration before touching the output
directory, drops a ``.partial`` marker while it writes and removes it on
success. Exit codes: 0 ok, 2 configuration, 3 data, 4 numerical.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import channel, codec, metrics, quant, selfinfo, training
from .errors import ConfigError, CsiError, DataFormatError
from .nn import VARIANTS

log = logging.getLogger("csimask")

SPLITS = ("train", "val", "test")
PARTIAL = ".partial"


@dataclass
class RunConfig:
    scenario: channel.ChannelScenario = field(default_factory=channel.ChannelScenario)
    scenario_name: str = ""
    splits: dict = field(default_factory=lambda: {"train": 2000, "val": 500, "test": 500})
    speed_mps: float = 0.0
    doppler_fraction: float = 0.0
    data_dir: Path | None = None
    checkpoint: Path | None = None
    model: codec.ModelConfig = field(default_factory=codec.ModelConfig)
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    train_stage2: training.TrainConfig | None = None
    schedule: tuple | None = None
    fine_tune_budget: int | None = None
    sigma: float = 1 / 16
    m: int | None = None
    sigmas: tuple = ()
    snr_db: tuple = ()
    quant_bits: tuple = (3, 4, 6)
    rate_users: int = 4
    rate_snr_db: tuple = (0.0, 5.0, 10.0, 15.0, 20.0)
    inspect_count: int = 1
    stage1_only: bool = False
    seed: int = 0

    def validate(self) -> "RunConfig":
        self.scenario.validate()
        self.model.validate()
        self.train.validate()
        if self.train_stage2 is not None:
            self.train_stage2.validate()
        if (self.model.n_c, self.model.n_t) != (self.scenario.n_c, self.scenario.n_t):
            raise ConfigError("model n_c/n_t must match the scenario")
        if set(self.splits) != set(SPLITS) or min(self.splits.values()) < 1:
            raise ConfigError(f"splits must give positive counts for {SPLITS}")
        if not 0 <= self.doppler_fraction <= 1 or self.speed_mps < 0:
            raise ConfigError("doppler_fraction must lie in [0, 1] and speed must be >= 0")
        for s in (self.sigma, *self.sigmas):
            if not 0 < s <= 1:
                raise ConfigError(f"sigma {s} outside (0, 1]")
        n = 2 * self.model.n_c * self.model.n_t
        if self.m is not None and not 0 <= self.m <= n:
            raise ConfigError(f"M={self.m} outside [0, {n}]")
        if self.schedule is not None:
            training.RatioSchedule(self.schedule).validate(n)
        if not 1 <= self.rate_users <= self.scenario.n_t:
            raise ConfigError("rate_users must lie in [1, n_t]")
        if any(b < 1 for b in self.quant_bits):
            raise ConfigError("quantizer bits must be >= 1")
        return self

    def m_values(self) -> list[int]:
        if self.m is not None:
            return [self.m]
        return [self.m_for(s) for s in (self.sigmas or (self.sigma,))]

    def m_for(self, sigma: float) -> int:
        cfg = self.model
        return codec.m_for_ratio(sigma, cfg.q1, cfg.index_bits, cfg.n_c, cfg.n_t)


def _section(d: dict, key: str, allowed) -> dict:
    sub = d.get(key, {}) or {}
    unknown = set(sub) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
    return sub


def load_run_config(path: str | None, args) -> RunConfig:
    """JSON config with command-line overrides; relative paths resolve against the file."""
    raw, base = {}, Path.cwd()
    if path:
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
        base = p.resolve().parent
    known = {"scenario", "preset", "splits", "speed_mps", "doppler_fraction", "data_dir", "checkpoint",
             "model", "train", "train_stage2", "schedule", "fine_tune_budget", "sigma", "m", "sigmas",
             "snr_db", "quant_bits", "rate_users", "rate_snr_db", "inspect_count", "seed"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        if "preset" in raw:
            if raw["preset"] not in channel.PRESETS:
                raise ConfigError(f"unknown preset {raw['preset']!r}")
            scenario = replace(channel.PRESETS[raw["preset"]], **raw.get("scenario", {}))
        else:
            scenario = channel.ChannelScenario.from_dict(raw.get("scenario", {}))
        mdict = dict(raw.get("model", {}))
        mdict.setdefault("n_c", scenario.n_c)
        mdict.setdefault("n_t", scenario.n_t)
        model = codec.ModelConfig.from_dict(mdict)
        tkeys = training.TrainConfig.__dataclass_fields__
        train = training.TrainConfig(**_section(raw, "train", tkeys))
        train2 = training.TrainConfig(**_section(raw, "train_stage2", tkeys)) if "train_stage2" in raw else None
    except TypeError as e:
        raise ConfigError(f"bad config section: {e}") from e

    def resolve(key):
        return (base / raw[key]) if raw.get(key) else None

    cfg = RunConfig(
        scenario=scenario, scenario_name=raw.get("preset", ""),
        splits=dict(raw.get("splits", {"train": 2000, "val": 500, "test": 500})),
        speed_mps=float(raw.get("speed_mps", 0.0)), doppler_fraction=float(raw.get("doppler_fraction", 0.0)),
        data_dir=resolve("data_dir"), checkpoint=resolve("checkpoint"), model=model, train=train,
        train_stage2=train2, schedule=tuple(raw["schedule"]) if raw.get("schedule") else None,
        fine_tune_budget=raw.get("fine_tune_budget"), sigma=float(raw.get("sigma", 1 / 16)),
        m=raw.get("m"), sigmas=tuple(raw.get("sigmas", ())),
        snr_db=tuple(float(s) for s in raw.get("snr_db", ())),
        quant_bits=tuple(raw.get("quant_bits", (3, 4, 6))), rate_users=int(raw.get("rate_users", 4)),
        rate_snr_db=tuple(float(s) for s in raw.get("rate_snr_db", (0, 5, 10, 15, 20))),
        inspect_count=int(raw.get("inspect_count", 1)), seed=int(raw.get("seed", 0)))

    # command-line overrides
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.train = replace(cfg.train, seed=cfg.seed)
    if cfg.train_stage2 is not None:
        cfg.train_stage2 = replace(cfg.train_stage2, seed=cfg.seed)
    if args.m is not None:
        cfg.m, cfg.sigmas = args.m, ()
    if args.sigma is not None:
        cfg.sigma, cfg.sigmas, cfg.m = args.sigma, (), None
    if args.variant is not None:
        cfg.model = replace(cfg.model, layer=replace(cfg.model.layer, n_trans=VARIANTS[args.variant]))
    if args.freeze_stage2:
        cfg.train = replace(cfg.train, freeze_stage2=True)
        if cfg.train_stage2 is not None:
            cfg.train_stage2 = replace(cfg.train_stage2, freeze_stage2=True)
    cfg.stage1_only = args.stage1_only
    out = Path(args.out)
    cfg.data_dir = cfg.data_dir or out
    cfg.checkpoint = cfg.checkpoint or out / "model.ckpt"
    return cfg.validate()


# --- helpers -------------------------------------------------------------------------

def split_path(data_dir: Path, split: str) -> Path:
    return Path(data_dir) / f"{split}.csid"


def load_split(cfg: RunConfig, split: str) -> np.ndarray:
    path = split_path(cfg.data_dir, split)
    if not path.exists():
        raise DataFormatError(f"missing dataset {path}; run 'csimask gen' first")
    data, _ = channel.read_dataset(path)
    if data.shape[2:] != (cfg.model.n_c, cfg.model.n_t):
        raise DataFormatError(f"{path}: shape {data.shape[2:]} does not match the model")
    return data


def load_checkpoint(cfg: RunConfig) -> codec.PipelineModel:
    if not Path(cfg.checkpoint).exists():
        raise DataFormatError(f"missing checkpoint {cfg.checkpoint}; run 'csimask train' first")
    model, _ = codec.load_model(cfg.checkpoint)
    return model


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def stage2_cfg(cfg: RunConfig) -> training.TrainConfig:
    return cfg.train_stage2 or cfg.train


# --- commands ------------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, out: Path, plot: bool) -> None:
    manifest = {"scenario": cfg.scenario.to_dict(), "seed": cfg.seed, "speed_mps": cfg.speed_mps,
                "doppler_fraction": cfg.doppler_fraction, "splits": {}}
    for i, split in enumerate(SPLITS):
        n = cfg.splits[split]
        data = channel.generate_dataset(cfg.scenario, n, cfg.seed, split=i, speed_mps=cfg.speed_mps,
                                        doppler_fraction=cfg.doppler_fraction)
        path = split_path(out, split)
        channel.write_dataset(data, {"split": split, "split_key": i, "seed": cfg.seed,
                                     "scenario": cfg.scenario.to_dict()}, path)
        manifest["splits"][split] = {"file": path.name, "count": n, "split_key": i}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def cmd_train(cfg: RunConfig, out: Path, plot: bool) -> None:
    tr, va = load_split(cfg, "train"), load_split(cfg, "val")
    m = cfg.m_values()[0]
    if cfg.fine_tune_budget is not None:
        model = load_checkpoint(cfg)
        tlog = training.fine_tune(model, tr, cfg.fine_tune_budget, stage2_cfg(cfg), m, va)
    else:
        model = codec.build_model(cfg.model, seed=cfg.seed)
        if cfg.schedule is not None:
            tlog = training.train_multi_ratio(model, tr, va, cfg.train, training.RatioSchedule(cfg.schedule),
                                              cfg.train_stage2)
        else:
            tlog = training.train_two_stage(model, tr, va, cfg.train, m, stage1_only=cfg.stage1_only,
                                            cfg2=cfg.train_stage2)
    stage = 1 if cfg.stage1_only else 2
    tlog.final_nmse = metrics.evaluate(model, va, m, stage=stage).nmse_linear
    codec.save_model(model, out / "model.ckpt", {"m": m, "stage1_only": cfg.stage1_only})
    tlog.write_csv(out / "train_log.csv")
    (out / "train_summary.json").write_text(json.dumps(
        {"best_epoch": tlog.best_epoch, "wall_time_s": tlog.wall_time_s, "final_val_nmse": tlog.final_nmse,
         "final_val_nmse_db": metrics.format_db(metrics.to_db(tlog.final_nmse)),
         "params": metrics.count_params(model)}, indent=2))
    if plot and tlog.rows:
        from . import plotting
        plotting.training_curves(tlog, out / "train_log.png")


def cmd_eval(cfg: RunConfig, out: Path, plot: bool) -> None:
    model = load_checkpoint(cfg)
    te = load_split(cfg, "test")
    name = cfg.scenario_name
    reports = []
    for m in cfg.m_values():
        reports.append(metrics.evaluate(model, te, m, seed=cfg.seed, scenario=name))
        reports.append(metrics.evaluate(model, te, m, seed=cfg.seed, scenario=name, mode="mean_fill"))
    for snr in cfg.snr_db:
        for m in cfg.m_values():
            reports.append(metrics.evaluate(model, te, m, snr_db=snr, seed=cfg.seed, scenario=name))
    metrics.write_reports(reports, out / "eval.csv")
    extra = {"params": metrics.count_params(model), "flops": metrics.count_flops(model)}
    metrics.write_report_detail(reports[0], out / "eval.json", extra)
    if plot:
        from . import plotting
        plotting.nmse_vs_sigma([r for r in reports if r.snr_db is None], out / "nmse_vs_sigma.png")
        if cfg.snr_db:
            m0 = cfg.m_values()[0]
            snrs = sorted(cfg.snr_db) + [math.inf]
            by = {r.snr_db: r.nmse_db for r in reports if r.m == m0 and r.variant == model.variant}
            by[math.inf] = by.pop(None)
            plotting.nmse_vs_snr(snrs, [by[s] for s in snrs], out / "nmse_vs_snr.png")


def cmd_rate(cfg: RunConfig, out: Path, plot: bool) -> None:
    model = load_checkpoint(cfg)
    te = load_split(cfg, "test")
    m = cfg.m_values()[0]
    if len(te) < cfg.rate_users:
        raise DataFormatError(f"test split has fewer than {cfg.rate_users} samples")
    est = metrics.reconstruct(model, te, m, seed=cfg.seed)
    fill = metrics.reconstruct(model, te, m, seed=cfg.seed, mode="mean_fill")
    n_f = cfg.scenario.n_f
    rows, curves = [], {"model": [], "perfect_csi": [], "mean_fill": []}
    for snr in cfg.rate_snr_db:
        r_model = metrics.rate_study(te, est, cfg.rate_users, snr, n_f)
        r_perfect = metrics.rate_study(te, te, cfg.rate_users, snr, n_f)
        r_fill = metrics.rate_study(te, fill, cfg.rate_users, snr, n_f)
        rows.append((snr, cfg.rate_users, r_model, r_perfect, r_fill))
        for k, v in zip(curves, (r_model, r_perfect, r_fill)):
            curves[k].append(v)
    write_csv(out / "rate.csv", ["snr_db", "users", "mean_rate", "rate_perfect_csi", "rate_mean_fill"], rows)
    if plot:
        from . import plotting
        plotting.rate_vs_snr(list(cfg.rate_snr_db), curves, out / "rate_vs_snr.png")


def cmd_quantize_eval(cfg: RunConfig, out: Path, plot: bool) -> None:
    model = load_checkpoint(cfg)
    tr, te = load_split(cfg, "train"), load_split(cfg, "test")
    m = cfg.m_values()[0]
    base = metrics.evaluate(model, te, m, seed=cfg.seed)
    samples = metrics.codeword_values(model, tr, m)
    rows, quantizers = [], {}
    for b in cfg.quant_bits:
        q = quant.lloyd_max_train(samples, b)
        quantizers[str(b)] = q.to_dict()
        r = metrics.evaluate(model, te, m, quantizer=q, seed=cfg.seed)
        rows.append((b, m, r.sigma, r.nmse_db, base.nmse_db, r.nmse_db - base.nmse_db, quant.mse(q, samples)))
    write_csv(out / "quantize.csv", ["bits", "m", "sigma", "nmse_db", "nmse_db_unquantized",
                                     "degradation_db", "quantizer_mse"], rows)
    (out / "quantizers.json").write_text(json.dumps(quantizers, indent=2))


def cmd_inspect_selfinfo(cfg: RunConfig, out: Path, plot: bool) -> None:
    path = split_path(cfg.data_dir, "test")
    if path.exists():
        data = load_split(cfg, "test")[:cfg.inspect_count]
    else:
        data = channel.generate_dataset(cfg.scenario, cfg.inspect_count, cfg.seed, split=2)
    rows = []
    for s, h in enumerate(data):
        sm = selfinfo.self_information_analytic(h, cfg.model.selfinfo)
        for p in range(2):
            for i in range(h.shape[1]):
                for j in range(h.shape[2]):
                    rows.append((s, p, i, j, float(h[p, i, j]), float(sm.values[p, i, j]), int(sm.mask[p, i, j])))
        if s == 0 and plot:
            from . import plotting
            plotting.selfinfo_heatmap(h, sm.values.max(axis=0), sm.mask.max(axis=0), out / "selfinfo.png")
    write_csv(out / "selfinfo.csv", ["sample", "plane", "row", "col", "value", "self_info", "mask"], rows)


def cmd_ablate(cfg: RunConfig, out: Path, plot: bool) -> None:
    tr, va, te = (load_split(cfg, s) for s in SPLITS)
    m = cfg.m_values()[0]
    reports = []
    for variant in ("full", "random_mask", "no_pd", "no_tp"):
        model = codec.build_model(replace(cfg.model, variant=variant), seed=cfg.seed)
        training.train_two_stage(model, tr, va, cfg.train, m, cfg2=cfg.train_stage2)
        reports.append(metrics.evaluate(model, te, m, seed=cfg.seed))
        log.info("ablation %s: %.2f dB", variant, reports[-1].nmse_db)
    metrics.write_reports(reports, out / "ablation.csv")
    if plot:
        from . import plotting
        plotting.ablation_bars(reports, out / "ablation.png")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "rate": cmd_rate,
            "quantize-eval": cmd_quantize_eval, "inspect-selfinfo": cmd_inspect_selfinfo,
            "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csimask", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--m", type=int, help="number of fed-back values")
    g.add_argument("--sigma", type=float, help="compression ratio; M follows from the bit budget")
    p.add_argument("--variant", choices=sorted(VARIANTS), help="transformer depth S/M/L")
    p.add_argument("--stage1-only", action="store_true")
    p.add_argument("--freeze-stage2", action="store_true")
    p.add_argument("--out", default="runs/out")
    p.add_argument("--no-plot", action="store_true", help="skip PNG figures")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(int(os.environ.get("CSIMASK_THREADS", "1")))
    out = Path(args.out)
    try:
        cfg = load_run_config(args.config, args)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create output directory {out}: {e}") from e
        marker = out / PARTIAL
        marker.write_text(args.command + "\n")
        COMMANDS[args.command](cfg, out, not args.no_plot)
        marker.unlink()
    except CsiError as e:
        log.error("%s", e)
        return e.exit_code
    except OSError as e:
        log.error("%s", e)
        return DataFormatError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
