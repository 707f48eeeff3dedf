"""Per-concept results table (CSV and aligned text) and training-curve figures."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

ROWS = [
    ("Number of epochs", "epochs", None),
    ("Training accuracy", "train", "accuracy"),
    ("Validation accuracy", "val", "accuracy"),
    ("Validation precision", "val", "precision"),
    ("Validation recall", "val", "recall"),
    ("Validation F1", "val", "f1"),
    ("Test accuracy", "test", "accuracy"),
    ("Test precision", "test", "precision"),
    ("Test recall", "test", "recall"),
    ("Test F1", "test", "f1"),
]
MODELS = (("vit", "ViT"), ("cnn", "CNN"))


def _cell(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, int):
        return str(value)
    return f"{value:.2f}"


def table_rows(result: dict) -> tuple[list[str], list[list[str]]]:
    concepts = list(result["vit"]["test"])
    header = ["model", "statistic", *concepts]
    rows = []
    for key, name in MODELS:
        block = result[key]
        for label, split, metric in ROWS:
            if metric is None:
                vals = [block[split].get(c) for c in concepts]
            else:
                vals = [block[split][c][metric] for c in concepts]
            rows.append([name, label, *(_cell(v) for v in vals)])
    return header, rows


def to_csv(result: dict) -> str:
    header, rows = table_rows(result)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def to_text(result: dict) -> str:
    header, rows = table_rows(result)
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = []
    for k, r in enumerate([header, *rows]):
        cells = [r[0].ljust(widths[0]), r[1].ljust(widths[1])] + [c.rjust(w) for c, w in zip(r[2:], widths[2:])]
        lines.append("  ".join(cells).rstrip())
        if k == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def _read_log(path: Path):
    """(epochs, train losses, val losses) from a training log CSV."""
    curves: dict[str, dict[int, float]] = {"train": {}, "val": {}}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            if rec["split"] in curves and rec["loss"]:
                curves[rec["split"]][int(rec["epoch"])] = float(rec["loss"])
    epochs = sorted(curves["train"])
    return epochs, [curves["train"][e] for e in epochs], [curves["val"].get(e) for e in epochs]


def plot_losses(logs_dir, out_path) -> Path | None:
    logs = sorted(Path(logs_dir).glob("*.csv")) if logs_dir and Path(logs_dir).is_dir() else []
    if not logs:
        return None
    fig, axes = plt.subplots(1, len(logs), figsize=(3.2 * len(logs), 2.8), squeeze=False)
    for ax, path in zip(axes[0], logs):
        epochs, tr, va = _read_log(path)
        ax.plot(epochs, tr, label="train")
        ax.plot(epochs, va, label="validation")
        ax.set_title(path.stem)
        ax.set_xlabel("epoch")
    axes[0][0].set_ylabel("loss")
    axes[0][0].legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=80)
    plt.close(fig)
    return Path(out_path)


def plot_test_metrics(result: dict, out_path) -> Path:
    concepts = list(result["vit"]["test"])
    fig, ax = plt.subplots(figsize=(1.6 * len(concepts) + 2, 2.8))
    width = 0.38
    for k, (key, name) in enumerate(MODELS):
        vals = [result[key]["test"][c]["accuracy"] or 0.0 for c in concepts]
        ax.bar([i + (k - 0.5) * width for i in range(len(concepts))], vals, width, label=name)
    ax.set_xticks(range(len(concepts)), concepts)
    ax.set_ylim(0, 1)
    ax.set_ylabel("test accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=80)
    plt.close(fig)
    return Path(out_path)


def write_report(result: dict, out_dir, logs_dir=None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "metrics.csv", out / "metrics.txt"]
    paths[0].write_text(to_csv(result))
    paths[1].write_text(to_text(result))
    paths.append(plot_test_metrics(result, out / "test_accuracy.png"))
    losses = plot_losses(logs_dir, out / "loss_curves.png")
    if losses is not None:
        paths.append(losses)
    return paths
