"""Figure rendering for training runs and evaluation reports.

All figures are written to files next to the delimited outputs; nothing is
shown interactively.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_loss_curves(metrics_path, fig_path):
    """Render mt/mlm/combined loss curves from a metrics TSV."""
    steps, mt, mlm, combined = [], [], [], []
    with open(metrics_path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        for row in reader:
            steps.append(int(row["step"]))
            mt.append(float(row["mt_loss"]))
            mlm.append(float(row["mlm_loss"]))
            combined.append(float(row["combined"]))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, mt, label="MT loss", lw=1)
    ax.plot(steps, mlm, label="MLM loss", lw=1)
    ax.plot(steps, combined, label="combined", lw=1, ls="--")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)


def plot_f1_histogram(f1_scores, fig_path, corpus_f1=None):
    """Per-sentence bracket-F1 distribution."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(f1_scores, bins=20, range=(0.0, 1.0), color="steelblue",
            edgecolor="white")
    if corpus_f1 is not None:
        ax.axvline(corpus_f1, color="crimson", ls="--",
                   label=f"corpus F1 = {corpus_f1:.3f}")
        ax.legend(frameon=False)
    ax.set_xlabel("per-sentence unlabeled F1")
    ax.set_ylabel("sentences")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)


def plot_lambda_sweep(lambdas, bleus, fig_path):
    """Validation BLEU as a function of the loss trade-off weight."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(lambdas, bleus, marker="o")
    ax.set_xlabel("lambda (MLM weight)")
    ax.set_ylabel("validation BLEU")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
