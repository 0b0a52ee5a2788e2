"""Report figures rendered next to the delimited result tables."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METHOD_STYLE = {
    "sdemg": dict(color="C3", marker="o", label="SDEMG"),
    "hp": dict(color="C0", marker="s", label="HP"),
    "ts": dict(color="C2", marker="^", label="TS"),
    "identity": dict(color="0.5", marker="x", linestyle="--", label="noisy input"),
}

METRIC_LABELS = {
    "snr_imp_db": r"SNR$_{imp}$ (dB)",
    "rmse": "RMSE",
    "rmse_arv": r"RMSE$_{ARV}$",
    "rmse_mf_hz": r"RMSE$_{MF}$ (Hz)",
}


def _series(table, metric):
    out = {}
    for e in table:
        if e["input_snr_db"] == "all":
            continue
        out.setdefault(e["method"], []).append((float(e["input_snr_db"]), e[metric]))
    return {m: sorted(v) for m, v in out.items()}


def metric_vs_snr(table, metric="snr_imp_db", ax=None):
    """Mean of ``metric`` per input-SNR bucket, one line per method."""
    if ax is None:
        fig, ax = plt.subplots(figsize=(5, 3.5))
    else:
        fig = ax.figure
    for method, pts in _series(table, metric).items():
        if metric == "snr_imp_db" and method == "identity":
            continue
        x, y = zip(*pts)
        ax.plot(x, y, **METHOD_STYLE.get(method, dict(label=method)))
    ax.set_xlabel("input SNR (dB)")
    ax.set_ylabel(METRIC_LABELS[metric])
    ax.grid(True, alpha=0.3)
    return fig, ax


def metric_panels(table):
    fig, axes = plt.subplots(2, 2, figsize=(9, 6.5))
    for ax, metric in zip(axes.flat, METRIC_LABELS):
        metric_vs_snr(table, metric, ax)
    axes[0, 0].legend(fontsize="small")
    fig.tight_layout()
    return fig, axes


def training_curve(log_path):
    with open(log_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    epochs = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(epochs, [float(r["train_loss"]) for r in rows], label="train")
    ax.semilogy(epochs, [float(r["val_loss"]) for r in rows], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("noise-prediction MSE")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return fig, ax


def waveform_example(clean, noisy, denoised, fs, title=""):
    """Stacked clean / noisy / denoised traces of one segment."""
    t = np.arange(len(clean)) / fs
    fig, axes = plt.subplots(3, 1, figsize=(8, 5.5), sharex=True)
    for ax, x, name in zip(axes, (clean, noisy, denoised), ("clean sEMG", "noisy sEMG", "denoised sEMG")):
        ax.plot(t, x, lw=0.5, color="k")
        ax.set_ylabel(name)
    axes[-1].set_xlabel("time (s)")
    lim = 1.1 * max(np.max(np.abs(clean)), np.max(np.abs(denoised)))
    axes[0].set_ylim(-lim, lim)
    axes[2].set_ylim(-lim, lim)
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    return fig, axes


def render_report(table, out_dir, train_log=None, example=None) -> list:
    """Write every figure that the available inputs support; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def save(fig, name):
        path = out / name
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    fig, ax = metric_vs_snr(table)
    ax.legend(fontsize="small")
    save(fig, "snr_imp_vs_input_snr.png")
    save(metric_panels(table)[0], "metrics_vs_input_snr.png")
    if train_log is not None and Path(train_log).exists():
        save(training_curve(train_log)[0], "training_loss.png")
    if example is not None:
        save(waveform_example(**example)[0], "waveform_example.png")
    return written
