"""Figure rendering for training and evaluation reports.

Figures are written next to the delimited outputs (loss CSV, metrics
CSV) so a run leaves both machine- and human-readable artifacts.
"""

import csv
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def save_loss_figure(history, path, title="training loss"):
    """Loss curves over steps from (step, L_c, L_d, L_p, total) rows."""
    steps = [row[0] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for idx, label in ((4, "total"), (1, "color"), (2, "depth"), (3, "perceptual")):
        series = [row[idx] for row in history]
        if any(v != 0 for v in series) or label == "total":
            ax.plot(steps, series, label=label, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss (batch mean)")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(rows, path, title="per-view metrics"):
    """Bar charts of acc/iou and psnr from (view, acc, iou, psnr) rows."""
    views = [str(r[0]) for r in rows]
    acc = [r[1] for r in rows]
    iou = [r[2] for r in rows]
    vals = [r[3] for r in rows]
    finite = [v for v in vals if math.isfinite(v)]
    cap = (max(finite) + 5.0) if finite else 60.0
    shown_psnr = [v if math.isfinite(v) else cap for v in vals]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4.2))
    x = range(len(views))
    width = 0.38
    ax1.bar([i - width / 2 for i in x], acc, width, label="acc")
    ax1.bar([i + width / 2 for i in x], iou, width, label="iou")
    ax1.set_xticks(list(x), views, rotation=45, ha="right", fontsize=8)
    ax1.set_ylim(0.0, 1.05)
    ax1.set_ylabel("mask agreement")
    ax1.grid(True, axis="y", alpha=0.3)
    ax1.legend()

    bars = ax2.bar(list(x), shown_psnr, color="#4878b0")
    for bar, v in zip(bars, vals):
        if not math.isfinite(v):
            bar.set_hatch("//")
    ax2.set_xticks(list(x), views, rotation=45, ha="right", fontsize=8)
    ax2.set_ylabel("psnr (dB, hatched = exact match)")
    ax2.grid(True, axis="y", alpha=0.3)

    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_csv(rows, path):
    """Write view,acc,iou,psnr rows plus a trailing means row."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["view", "acc", "iou", "psnr"])
        for view, acc, iou, val in rows:
            writer.writerow([view, f"{acc:.6f}", f"{iou:.6f}", f"{val:.4f}"])
        if rows:
            finite = [r[3] for r in rows if math.isfinite(r[3])]
            mean_psnr = sum(finite) / len(finite) if finite else float("inf")
            writer.writerow(
                [
                    "mean",
                    f"{sum(r[1] for r in rows) / len(rows):.6f}",
                    f"{sum(r[2] for r in rows) / len(rows):.6f}",
                    f"{mean_psnr:.4f}",
                ]
            )


def load_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        rows = []
        for r in reader:
            rows.append((r[0], float(r[1]), float(r[2]), float(r[3])))
    return rows
