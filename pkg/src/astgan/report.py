"""Regime comparison table and figures."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COLUMNS = ("regime", "status", "best_dev_em", "final_dev_em", "d_heldout_acc")


def regime_table(rows) -> str:
    """Tab-separated table, one row per regime dict."""
    lines = ["\t".join(COLUMNS)]
    for r in rows:
        acc = r.get("d_heldout_acc")
        lines.append("\t".join([
            r["regime"],
            r["status"],
            f"{r['best_dev_em']:.4f}",
            f"{r['final_dev_em']:.4f}",
            "-" if acc is None else f"{acc:.4f}",
        ]))
    return "\n".join(lines) + "\n"


def plot_regimes(histories: dict, rows, path) -> None:
    """Dev exact match per epoch for each regime, next to the best-dev bars."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4), gridspec_kw={"width_ratios": [2, 1]})
    for regime, hist in histories.items():
        pts = [(h["epoch"], h["dev_em"]) for h in hist if "dev_em" in h]
        if pts:
            xs, ys = zip(*pts)
            ax1.plot(xs, ys, marker=".", label=regime)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("dev exact match")
    ax1.set_ylim(-0.02, 1.02)
    ax1.legend(frameon=False)
    names = [r["regime"] for r in rows]
    ax2.bar(names, [r["best_dev_em"] for r in rows], color="0.6")
    ax2.set_ylim(0, 1)
    ax2.set_ylabel("best dev exact match")
    for side in ("top", "right"):
        ax1.spines[side].set_visible(False)
        ax2.spines[side].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metrics(history, path) -> None:
    """Training curves of a single run: NLL, reward and dev exact match."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, key, label in zip(axes, ("mle_nll", "mean_reward", "dev_em"), ("train NLL", "mean reward", "dev EM")):
        pts = [(h["epoch"], h[key]) for h in history if h.get(key) is not None]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker=".")
        ax.set_xlabel("epoch")
        ax.set_title(label)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
