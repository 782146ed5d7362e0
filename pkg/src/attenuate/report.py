"""Figure rendering for the report paths: benchmark bars, training curves,
hop-time histograms. Figures are written next to the delimited record files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def bench_figure(report, path) -> None:
    rows = report.rows
    x = np.arange(len(rows))
    width = 0.35
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.bar(x - width / 2, [r.input_si_snr for r in rows], width, label="Input SI-SNR",
           color="#9aa7b8")
    ax.bar(x + width / 2, [r.output_si_snr for r in rows], width, label="Output SI-SNR",
           color="#3b6ea5")
    for xi, r in zip(x, rows):
        ax.annotate(f"+{r.si_snri_mean:.2f} dB", (xi, max(r.input_si_snr, r.output_si_snr)),
                    textcoords="offset points", xytext=(0, 6), ha="center", fontsize=9)
    ax.set_xticks(x)
    ax.set_xticklabels([f"{r.condition}-class\n(n={r.count})" for r in rows])
    ax.set_ylabel("SI-SNR (dB)")
    ax.set_title("Suppression benchmark by number of simultaneous targets")
    ax.axhline(0.0, color="black", lw=0.6)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_figure(log, path) -> None:
    steps = [r["step"] for r in log.records]
    losses = [r["loss"] for r in log.records]
    lrs = [r["lr"] for r in log.records]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(steps, losses, lw=0.7, color="#3b6ea5", alpha=0.6, label="loss (per step)")
    if len(losses) >= 20:
        kernel = np.ones(20) / 20
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(steps[19:], smooth, lw=1.8, color="#1c3d5d", label="loss (20-step mean)")
    ax.set_xlabel("step")
    ax.set_ylabel("negative SI-SNR loss (dB)")
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, lw=1.0, color="#b55a30", label="lr")
    ax2.set_ylabel("learning rate")
    lines, labels = ax.get_legend_handles_labels()
    l2, lab2 = ax2.get_legend_handles_labels()
    ax.legend(lines + l2, labels + lab2, frameon=False, loc="upper right")
    ax.set_title("Training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def profile_figure(hop_times_ms, hop_budget_ms: float, path) -> None:
    times = np.asarray(hop_times_ms, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(7, 4.2))
    if times.size:
        ax.hist(times, bins=40, color="#3b6ea5", alpha=0.85)
        ax.axvline(float(np.percentile(times, 95)), color="#b55a30", lw=1.5,
                   label=f"95p = {np.percentile(times, 95):.1f} ms")
    ax.axvline(hop_budget_ms, color="black", lw=1.5, ls="--",
               label=f"hop budget = {hop_budget_ms:.0f} ms")
    ax.set_xlabel("per-hop compute (ms)")
    ax.set_ylabel("hops")
    ax.set_title("Streaming hop compute time")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
