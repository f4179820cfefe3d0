"""Figures for evaluation reports and training logs, written straight to files."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

REPORT_RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def _acc_ks(names):
    return sorted(int(m.split("@")[1]) for m in names if m.startswith("Acc@"))


def plot_acc_curve(reports, path, labels=None):
    """Acc@k against k, one line per report."""
    with plt.rc_context(REPORT_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for i, rep in enumerate(reports):
            ks = _acc_ks(rep.overall)
            label = labels[i] if labels else rep.protocol + ("*" if rep.estimated else "")
            ax.plot(ks, [rep.overall[f"Acc@{k}"] for k in ks], marker="o", label=label)
        ax.set_xlabel("k")
        ax.set_ylabel("Acc@k")
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_category_metrics(report, path, metrics=("mAP", "Acc@1")):
    """Grouped bars per category, followed by the simple and weighted averages."""
    cats = sorted(report.per_category)
    simple = report.category_average()
    weighted = report.category_average(weighted=True)
    names = cats + ["average", "weighted avg"]
    x = np.arange(len(names))
    metrics = [m for m in metrics if m in report.overall]
    width = 0.8 / max(len(metrics), 1)
    with plt.rc_context(REPORT_RC):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.55 * len(names) + 1.5), 3.2))
        for i, m in enumerate(metrics):
            vals = [report.per_category[c]["metrics"][m] for c in cats] + [simple[m], weighted[m]]
            ax.bar(x + (i - (len(metrics) - 1) / 2) * width, vals, width, label=m)
        ax.axvline(len(cats) - 0.5, color="0.6", lw=0.8, ls="--")
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=45, ha="right")
        ax.set_ylim(0, 1.02)
        ax.set_title(report.protocol)
        ax.legend()
        return _save(fig, path)


def plot_rerank_comparison(before, after, path):
    names = list(before.overall)
    x = np.arange(len(names))
    with plt.rc_context(REPORT_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.bar(x - 0.2, [before.overall[m] for m in names], 0.4, label="no re-ranking")
        ax.bar(x + 0.2, [after.overall[m] for m in names], 0.4, label="re-ranking")
        ax.set_xticks(x)
        ax.set_xticklabels(names)
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_training_log(log, path):
    epochs = [e["epoch"] for e in log]
    with plt.rc_context(REPORT_RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        for key in ("total", "ce", "metric"):
            if log and key in log[0]:
                ax1.plot(epochs, [e[key] for e in log], label=key)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("loss")
        ax1.legend()
        ax2.plot(epochs, [e["lr"] for e in log], color="k")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("learning rate")
        evals = [e for e in log if "mAP" in e]
        if evals:
            ax3 = ax2.twinx()
            ax3.plot([e["epoch"] for e in evals], [e["mAP"] for e in evals], "o-", color="C3")
            ax3.set_ylabel("held-out mAP", color="C3")
        fig.tight_layout()
        return _save(fig, path)
