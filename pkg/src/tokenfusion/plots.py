"""Figure rendering for report and training outputs.

Figures land next to the delimited output: writing ``report.csv`` also
produces ``report.png``. Uses the Agg backend so headless runs work.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .flops import FlopsReport


def figure_path_for(out_path: str | Path) -> Path:
    return Path(out_path).with_suffix(".png")


def render_flops_figure(reports: list[FlopsReport], path: str | Path) -> Path:
    labels = [f"k={r.kernel}\nE={r.fused_tokens}" for r in reports]
    tflops = [r.tflops for r in reports]
    tokens = [r.vision_tokens for r in reports]

    fig, ax1 = plt.subplots(figsize=(7, 4))
    xs = range(len(reports))
    ax1.bar(xs, tflops, color="#4878cf", label="LLM prefill TFLOPs")
    ax1.set_xticks(list(xs))
    ax1.set_xticklabels(labels)
    ax1.set_ylabel("prefill TFLOPs")
    ax1.set_xlabel("fusion configuration")
    ax2 = ax1.twinx()
    ax2.plot(xs, tokens, "o-", color="#d65f5f", label="vision tokens")
    ax2.set_ylabel("vision tokens")
    ax1.set_title("Prefill cost vs fusion kernel and fused-token count")
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_loss_figure(curve: list[tuple[int, float]], path: str | Path) -> Path:
    steps = [s for s, _ in curve]
    losses = [l for _, l in curve]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, color="#4878cf")
    ax.set_xlabel("step")
    ax.set_ylabel("batch-mean squared error")
    ax.set_yscale("log")
    ax.set_title("Toy regression training")
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
