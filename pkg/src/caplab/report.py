"""Score reports, training curves and attention figures.

Every report is written twice: a machine-readable delimited form (JSON
with sorted keys, CSV) and a rendered PNG.  The delimited bytes are
deterministic so reruns diff clean; figures carry no timestamps.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .corpus import write_json
from .errors import DomainError

METRIC_ORDER = ("BLEU@1", "BLEU@2", "BLEU@3", "BLEU@4", "ROUGE-L", "CIDEr-D")

# strips the library's Software tag so PNG bytes depend only on content
_PNG_META = {"Software": None}


def scale_scores(scores: dict[str, float]) -> dict[str, float]:
    """Natural-scale scores to the x100, two-decimal table convention."""
    return {k: round(100.0 * float(v), 2) for k, v in scores.items()}


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _metric_keys(scores: dict[str, float]) -> list[str]:
    known = [k for k in METRIC_ORDER if k in scores]
    rest = sorted(k for k in scores if k not in METRIC_ORDER)
    return known + rest


def write_eval_report(scores: dict[str, float], out_dir: str | Path,
                      prefix: str = "eval") -> dict[str, Path]:
    """Emit <prefix>.json / .csv / .png for one evaluation run.

    `scores` are natural scale (0..1 for BLEU/ROUGE, 0..10 for the
    consensus metric); files carry the x100 convention.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scaled = scale_scores(scores)
    keys = _metric_keys(scaled)

    paths = {
        "json": out_dir / f"{prefix}.json",
        "csv": out_dir / f"{prefix}.csv",
        "png": out_dir / f"{prefix}.png",
    }
    write_json(paths["json"], scaled)
    _write_csv(paths["csv"], ["metric", "value"],
               [[k, f"{scaled[k]:.2f}"] for k in keys])

    fig, ax = plt.subplots(figsize=(6, 3.2))
    xs = np.arange(len(keys))
    ax.bar(xs, [scaled[k] for k in keys], color="#4878a8")
    ax.set_xticks(xs)
    ax.set_xticklabels(keys, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("score (x100)")
    ax.set_title(prefix)
    fig.tight_layout()
    fig.savefig(paths["png"], metadata=_PNG_META)
    plt.close(fig)
    return paths


def read_history(log_path: str | Path) -> list[dict]:
    """Parse a JSONL training log into a list of records."""
    records = []
    with open(log_path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def write_training_curves(log_path: str | Path, out_dir: str | Path,
                          prefix: str = "training") -> dict[str, Path]:
    """Emit <prefix>.csv / .png tracing loss and validation metric per step.

    A log may hold several stages back to back; each stage gets its own
    line on the figure.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = read_history(log_path)
    if not records:
        raise DomainError(f"no training records in {log_path}")

    paths = {"csv": out_dir / f"{prefix}.csv", "png": out_dir / f"{prefix}.png"}
    _write_csv(
        paths["csv"], ["stage", "step", "loss", "val_metric", "best_metric"],
        [[r["stage"], r["step"], f"{r['loss']:.6f}", f"{r['val_metric']:.6f}",
          f"{r['best_metric']:.6f}"] for r in records])

    stages = []
    for r in records:
        if r["stage"] not in stages:
            stages.append(r["stage"])

    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(8, 3.2))
    for stage in stages:
        rs = [r for r in records if r["stage"] == stage]
        steps = [r["step"] for r in rs]
        ax_loss.plot(steps, [r["loss"] for r in rs], label=stage)
        ax_val.plot(steps, [r["val_metric"] for r in rs], label=stage)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("train loss")
    ax_val.set_xlabel("step")
    ax_val.set_ylabel("validation metric")
    ax_val.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(paths["png"], metadata=_PNG_META)
    plt.close(fig)
    return paths


def write_ablation_report(results: dict[str, dict[str, float]],
                          out_dir: str | Path,
                          prefix: str = "ablation") -> dict[str, Path]:
    """Emit a variant-by-metric comparison as JSON, CSV and grouped bars.

    `results` maps variant name -> natural-scale scores.
    """
    if not results:
        raise DomainError("no ablation results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = list(results)
    scaled = {v: scale_scores(results[v]) for v in variants}
    keys = _metric_keys(scaled[variants[0]])

    paths = {
        "json": out_dir / f"{prefix}.json",
        "csv": out_dir / f"{prefix}.csv",
        "png": out_dir / f"{prefix}.png",
    }
    write_json(paths["json"], scaled)
    _write_csv(paths["csv"], ["variant"] + keys,
               [[v] + [f"{scaled[v][k]:.2f}" for k in keys] for v in variants])

    fig, ax = plt.subplots(figsize=(7, 3.4))
    xs = np.arange(len(keys))
    width = 0.8 / len(variants)
    for i, v in enumerate(variants):
        ax.bar(xs + i * width, [scaled[v][k] for k in keys], width, label=v)
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(keys, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("score (x100)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(paths["png"], metadata=_PNG_META)
    plt.close(fig)
    return paths


def format_table(results: dict[str, dict[str, float]],
                 decimals: int = 1) -> str:
    """Plain-text table of x100 scores, one row per variant."""
    if not results:
        raise DomainError("nothing to tabulate")
    variants = list(results)
    keys = _metric_keys(results[variants[0]])
    name_w = max(len("variant"), max(len(v) for v in variants))
    cells = {v: {k: f"{100.0 * results[v][k]:.{decimals}f}" for k in keys}
             for v in variants}
    widths = {k: max(len(k), max(len(cells[v][k]) for v in variants))
              for k in keys}
    lines = ["  ".join(["variant".ljust(name_w)] +
                       [k.rjust(widths[k]) for k in keys])]
    for v in variants:
        lines.append("  ".join([v.ljust(name_w)] +
                               [cells[v][k].rjust(widths[k]) for k in keys]))
    return "\n".join(lines)


def write_attention_figure(attention: np.ndarray, row_labels: list[str],
                           out_path: str | Path,
                           title: str = "attention") -> Path:
    """Heatmap of per-step attention weights over feature positions."""
    attention = np.asarray(attention, dtype=float)
    if attention.ndim != 2:
        raise DomainError(f"attention must be 2-d, got shape {attention.shape}")
    if len(row_labels) != attention.shape[0]:
        raise DomainError(
            f"{len(row_labels)} labels for {attention.shape[0]} attention rows")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(
        figsize=(6, max(2.0, 0.3 * attention.shape[0] + 1.0)))
    im = ax.imshow(attention, aspect="auto", cmap="viridis",
                   vmin=0.0, vmax=max(1e-12, float(attention.max())))
    ax.set_yticks(np.arange(len(row_labels)))
    ax.set_yticklabels(row_labels, fontsize=8)
    ax.set_xlabel("feature step")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.035)
    fig.tight_layout()
    fig.savefig(out_path, metadata=_PNG_META)
    plt.close(fig)
    return out_path
