"""Figures for matrix reports.  Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _figure(width=6.0, height=None):
    golden = (np.sqrt(5) - 1.0) / 2.0
    fig, ax = plt.subplots(figsize=(width, height or width * golden))
    return fig, ax


def plot_asr_bars(report, path):
    """Grouped bars: one group per (surrogate, target) cell, one bar per attack."""
    rows = report.rows
    attacks = list(dict.fromkeys(r["attack"] for r in rows))
    cells = list(dict.fromkeys((r["surrogate_id"], r["target_id"]) for r in rows))
    lookup = {(r["surrogate_id"], r["target_id"], r["attack"]): r for r in rows}
    fig, ax = _figure(max(6.0, 1.2 * len(cells)))
    width = 0.8 / max(len(attacks), 1)
    x = np.arange(len(cells))
    for i, attack in enumerate(attacks):
        vals = [lookup[(s, t, attack)]["asr"] if (s, t, attack) in lookup else np.nan for s, t in cells]
        ax.bar(x + (i - (len(attacks) - 1) / 2) * width, vals, width, label=attack)
    labels = [f"{s}\n-> {t}" + (" (wb)" if lookup.get((s, t, attacks[0]), {}).get("white_box_flag") else "")
              for s, t in cells]
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("ASR (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_traces(traces_by_attack: dict, path):
    """Mean loss and mean consecutive-frame gradient cosine per iterate."""
    fig, (ax_loss, ax_cos) = plt.subplots(1, 2, figsize=(10, 3.6))
    for name, traces in traces_by_attack.items():
        if not traces:
            continue
        n_it = min(len(t) for t in traces)
        loss = np.array([[t[i].l_total for i in range(n_it)] for t in traces]).mean(axis=0)
        cos = np.array([[t[i].mean_grad_cosine for i in range(n_it)] for t in traces]).mean(axis=0)
        ax_loss.plot(loss, marker="o", ms=3, label=name)
        ax_cos.plot(cos, marker="o", ms=3, label=name)
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("objective")
    ax_cos.set_xlabel("iteration")
    ax_cos.set_ylabel("frame-gradient cosine")
    ax_cos.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_frames(clean, adversarial, path, max_frames=8):
    """Clean frames on top, adversarial below, amplified perturbation at the bottom."""
    t = min(clean.n_frames, max_frames)
    fig, axes = plt.subplots(3, t, figsize=(1.3 * t, 4.2), squeeze=False)
    delta = adversarial.frames - clean.frames
    scale = max(float(np.abs(delta).max()), 1e-12)
    for i in range(t):
        for row, img in enumerate((clean.frames[i], adversarial.frames[i], 0.5 + 0.5 * delta[i] / scale)):
            axes[row, i].imshow(np.clip(img, 0, 1))
            axes[row, i].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
