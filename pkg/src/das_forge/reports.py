"""JSON/CSV/PNG export of training reports and embeddings.

``report.json`` excludes wall-clock timings so that repeated runs with one
seed produce identical bytes; timings go to ``timing.json``.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fileio import atomic_write_bytes, atomic_write_text, write_json
from .sim import EventLabel

REPORT_SCHEMA = "das-forge-report"
REPORT_VERSION = 1
CURVE_FIELDS = ("epoch", "train_loss", "train_acc", "test_loss", "test_acc")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save_figure(fig, path: Path, dpi: int) -> None:
    buf = io.BytesIO()
    # no software/date metadata, so the bytes depend only on the content
    fig.savefig(buf, format="png", dpi=dpi, metadata={"Software": None})
    atomic_write_bytes(path, buf.getvalue())


def curves_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_FIELDS)
    for e in range(report.epochs):
        row = [e + 1, report.train_loss[e], report.train_acc[e]]
        if report.test_loss:
            row += [report.test_loss[e], report.test_acc[e]]
        else:
            row += ["", ""]
        w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def report_document(reports: Sequence, stats: Optional[dict] = None, extra: Optional[dict] = None) -> dict:
    doc = {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "runs": [r.to_dict(include_timing=False) for r in sorted(reports, key=lambda r: r.seed)],
    }
    if stats is not None:
        doc["stats"] = stats
    if extra:
        doc.update(extra)
    return doc


def load_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != REPORT_SCHEMA or doc.get("version") != REPORT_VERSION:
        raise ValueError(f"{path}: not a version {REPORT_VERSION} {REPORT_SCHEMA} document")
    return doc


def plot_curves(report, path: Path, size_px=(800, 400), dpi: int = 100) -> None:
    plt = _pyplot()
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(size_px[0] / dpi, size_px[1] / dpi), dpi=dpi)
    epochs = np.arange(1, report.epochs + 1)
    ax_l.plot(epochs, report.train_loss, label="train")
    ax_a.plot(epochs, report.train_acc, label="train")
    if report.test_loss:
        ax_l.plot(epochs, report.test_loss, label="test")
        ax_a.plot(epochs, report.test_acc, label="test")
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("loss")
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("accuracy")
    ax_a.set_ylim(0, 1.02)
    ax_l.legend()
    ax_a.legend()
    fig.tight_layout()
    _save_figure(fig, path, dpi)
    plt.close(fig)


def plot_confusion(confusion, path: Path, size_px=(600, 600), dpi: int = 100) -> None:
    plt = _pyplot()
    cm = np.asarray(confusion)
    n = cm.shape[0]
    fig, ax = plt.subplots(figsize=(size_px[0] / dpi, size_px[1] / dpi), dpi=dpi)
    ax.imshow(cm, cmap="Blues")
    for i in range(n):
        for j in range(n):
            if cm[i, j]:
                ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=6)
    names = [EventLabel.from_class(i).name for i in range(n)] if n == 15 else [str(i) for i in range(n)]
    ax.set_xticks(range(n), names, rotation=90, fontsize=5)
    ax.set_yticks(range(n), names, fontsize=5)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.tight_layout()
    _save_figure(fig, path, dpi)
    plt.close(fig)


def plot_boxplot(accuracies, path: Path, size_px=(400, 400), dpi: int = 100) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(size_px[0] / dpi, size_px[1] / dpi), dpi=dpi)
    # whiskers at min/max to match the exported summary
    ax.boxplot([list(accuracies)], whis=(0, 100))
    ax.set_ylabel("test accuracy")
    ax.set_xticks([1], [f"{len(accuracies)} runs"])
    fig.tight_layout()
    _save_figure(fig, path, dpi)
    plt.close(fig)


def plot_embedding(emb, path: Path, size_px=(600, 600), dpi: int = 100) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(size_px[0] / dpi, size_px[1] / dpi), dpi=dpi)
    cmap = plt.get_cmap("tab20")
    for c in np.unique(emb.labels):
        pts = emb.coords[emb.labels == c]
        ax.scatter(pts[:, 0], pts[:, 1], s=8, color=cmap(int(c) % 20), label=str(int(c)))
    ax.set_title(f"stage {emb.stage}")
    ax.legend(fontsize=5, ncol=3, markerscale=0.8)
    fig.tight_layout()
    _save_figure(fig, path, dpi)
    plt.close(fig)


def export_reports(
    out_dir,
    reports: Sequence,
    stats: Optional[dict] = None,
    embeddings: Sequence = (),
    plots: bool = True,
    confusion_px=(600, 600),
    extra: Optional[dict] = None,
) -> dict:
    """Write report.json, timing.json, per-run curve CSVs and the plots.
    Returns a mapping from artifact kind to written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, list] = {"json": [], "csv": [], "png": []}
    reports = sorted(reports, key=lambda r: r.seed)

    doc = report_document(reports, stats, extra)
    if embeddings:
        doc["embeddings"] = [e.to_dict() for e in embeddings]
    write_json(out / "report.json", doc)
    write_json(out / "timing.json", {"wall_time_s": {str(r.seed): r.wall_time_s for r in reports}})
    written["json"] += [out / "report.json", out / "timing.json"]

    for i, r in enumerate(reports):
        p = out / f"curves_run{i}.csv"
        atomic_write_text(p, curves_csv(r))
        written["csv"].append(p)
        if plots:
            p = out / f"curves_run{i}.png"
            plot_curves(r, p)
            written["png"].append(p)
            if r.confusion is not None:
                p = out / f"confusion_run{i}.png"
                plot_confusion(r.confusion, p, confusion_px)
                written["png"].append(p)
    if plots and reports and all(r.accuracy is not None for r in reports):
        p = out / "boxplot.png"
        plot_boxplot([r.accuracy for r in reports], p)
        written["png"].append(p)
    if plots:
        for e in embeddings:
            p = out / f"embedding_stage{e.stage}.png"
            plot_embedding(e, p)
            written["png"].append(p)
    return written
