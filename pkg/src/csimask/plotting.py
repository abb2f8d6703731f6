"""PNG figures next to the CSV outputs of the CLI."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def nmse_vs_sigma(reports, path, title="NMSE vs compression ratio"):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    by_variant = {}
    for r in reports:
        by_variant.setdefault(r.variant, []).append((r.sigma, r.nmse_db))
    for variant, pts in sorted(by_variant.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=variant)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("compression ratio")
    ax.set_ylabel("NMSE (dB)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def rate_vs_snr(snrs, curves: dict, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, rates in curves.items():
        ax.plot(snrs, rates, "o-", label=name)
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("rate per user (bit/s/Hz)")
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def nmse_vs_snr(snrs, nmse_db, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    finite = [s if np.isfinite(s) else max(x for x in snrs if np.isfinite(x)) + 10 for s in snrs]
    ax.plot(finite, nmse_db, "o-")
    ax.set_xticks(finite, [("inf" if not np.isfinite(s) else f"{s:g}") for s in snrs])
    ax.set_xlabel("input SNR (dB)")
    ax.set_ylabel("NMSE (dB)")
    ax.grid(alpha=0.3)
    _save(fig, path)


def ablation_bars(reports, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = [r.variant for r in reports]
    ax.bar(names, [r.nmse_db for r in reports], color="tab:blue")
    ax.set_ylabel("NMSE (dB)")
    ax.grid(axis="y", alpha=0.3)
    _save(fig, path)


def training_curves(log, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    stages = sorted({r["stage"] for r in log.rows})
    offset = 0
    for st in stages:
        rows = log.stage_rows(st)
        x = np.arange(len(rows)) + offset
        ax.plot(x, [r["train_loss"] for r in rows], label=f"{st} train")
        ax.plot(x, [r["val_loss"] for r in rows], "--", label=f"{st} val")
        offset += len(rows)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    _save(fig, path)


def selfinfo_heatmap(h, values, mask, path):
    """Amplitude, self-information and kept mask of one sample, side by side."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    amp = np.hypot(h[0], h[1])
    for ax, img, title in zip(axes, (amp, values, mask), ("|H|", "self-information", "mask")):
        im = ax.imshow(img, aspect="auto", origin="lower")
        ax.set_title(title)
        ax.set_xlabel("angle")
        fig.colorbar(im, ax=ax, shrink=0.8)
    axes[0].set_ylabel("delay")
    _save(fig, path)
