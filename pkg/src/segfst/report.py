"""Delimited report files and the figures rendered next to them.

Training writes an append-only JSONL metrics log; this module converts those
rows to TSV and renders learning-curve and benchmark figures to PNG files.
"""

from __future__ import annotations

from pathlib import Path as FsPath

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .bench import BenchRow

METRIC_COLUMNS = ("epoch", "stage", "train_loss", "dev_loss", "dev_per",
                  "wall_time", "step_size", "skipped")


def write_metrics_tsv(rows: list[dict], path) -> None:
    with open(path, "w") as f:
        f.write("\t".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            f.write("\t".join(str(row.get(col, "")) for col in METRIC_COLUMNS)
                    + "\n")


def plot_training_curves(rows: list[dict], path) -> None:
    epochs = [row["epoch"] for row in rows]
    fig, (ax_loss, ax_per) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [row["train_loss"] for row in rows],
                 marker="o", label="train loss")
    ax_loss.plot(epochs, [row["dev_loss"] for row in rows],
                 marker="s", label="dev loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_per.plot(epochs, [100.0 * row["dev_per"] for row in rows],
                marker="o", color="tab:red")
    ax_per.set_xlabel("epoch")
    ax_per.set_ylabel("dev PER (%)")
    stage = rows[0]["stage"] if rows else ""
    fig.suptitle(f"training curves ({stage})")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_bench_tsv(rows: list[BenchRow], path) -> None:
    with open(path, "w") as f:
        f.write("weightfn\tpyramid\tloss\tseconds\n")
        for row in rows:
            f.write(f"{row.weightfn}\t{int(row.pyramid)}\t{row.loss}\t"
                    f"{row.seconds:.6f}\n")


def plot_bench(rows: list[BenchRow], path) -> None:
    groups = [("fc", False), ("fc", True), ("srnn", False), ("srnn", True)]
    losses = ("hinge", "log", "mll")
    lookup = {(r.weightfn, r.pyramid, r.loss): r.seconds for r in rows}
    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.25
    for li, loss in enumerate(losses):
        xs = [gi + (li - 1) * width for gi in range(len(groups))]
        ys = [1e3 * lookup[(fn, pyr, loss)] for fn, pyr in groups]
        ax.bar(xs, ys, width=width, label=loss)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels([f"{fn}\n{'pyramid' if pyr else 'regular'}"
                        for fn, pyr in groups])
    ax.set_ylabel("gradient time per utterance (ms)")
    ax.set_yscale("log")
    ax.legend(title="loss")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def format_bench_table(rows: list[BenchRow], meta: dict) -> str:
    lookup = {(r.weightfn, r.pyramid, r.loss): r.seconds for r in rows}
    lines = [f"{'':14s} {'hinge':>10s} {'log':>10s} {'mll':>10s}"]
    for fn in ("fc", "srnn"):
        for pyr in (False, True):
            tag = f"{fn}/{'pyramid' if pyr else 'regular'}"
            cells = " ".join(f"{1e3 * lookup[(fn, pyr, loss)]:9.2f}m"
                             for loss in ("hinge", "log", "mll"))
            lines.append(f"{tag:14s} {cells}")
    ref = meta.get("encoder_backward_seconds", {})
    if ref:
        lines.append(f"encoder fwd+bwd reference: "
                     f"regular {1e3 * ref['regular']:.2f}ms, "
                     f"pyramid {1e3 * ref['pyramid']:.2f}ms")
    return "\n".join(lines)


def render_training_report(rows: list[dict], out_dir) -> None:
    """TSV plus learning-curve PNG alongside the JSONL metrics log."""
    out_dir = FsPath(out_dir)
    write_metrics_tsv(rows, out_dir / "metrics.tsv")
    if rows:
        plot_training_curves(rows, out_dir / "curves.png")


def render_bench_report(rows: list[BenchRow], meta: dict, out_dir) -> None:
    out_dir = FsPath(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_bench_tsv(rows, out_dir / "bench.tsv")
    plot_bench(rows, out_dir / "bench.png")
