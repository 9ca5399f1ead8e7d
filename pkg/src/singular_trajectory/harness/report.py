"""CSV/Markdown tables in the benchmark layouts, JSON manifests and PNG plots."""
from __future__ import annotations

import csv
import json
import logging
import subprocess
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..dataset import LETTER_OF, SCENES, Task
from ..errors import ConfigError
from .protocol import AVG, EvalResult

log = logging.getLogger(__name__)

FORMATS = ("csv", "md", "json")
CSV_FIELDS = ("task", "scene", "ade", "fde", "num_samples", "count", "config_hash", "model")
TASK_TITLES = OrderedDict([
    (Task.DETERMINISTIC.value, "Deterministic"),
    (Task.STOCHASTIC.value, "Stochastic"),
    (Task.MOMENTARY.value, "Momentary"),
    (Task.DOMAIN_ADAPTATION.value, "Domain"),
    (Task.FEW_SHOT.value, "Few-shot"),
])


def _check(results) -> list[EvalResult]:
    rows = list(results)
    if not rows:
        raise ValueError("no results to report")
    return rows


def _cell(r: EvalResult | None, digits: int = 2) -> str:
    return "-" if r is None else f"{r.ade:.{digits}f} / {r.fde:.{digits}f}"


def scene_columns(task) -> list[str]:
    """Column order of the per-task tables (scene names or pair labels)."""
    if Task(task) is Task.DOMAIN_ADAPTATION:
        cols = []
        for src in SCENES:
            letter = LETTER_OF[src]
            cols += [f"{letter}2{LETTER_OF[t]}" for t in SCENES if t != src] + [f"{letter}2*"]
        return cols + [AVG]
    return list(SCENES) + [AVG]


def write_csv(results: Iterable[EvalResult], path) -> Path:
    rows = _check(results)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: getattr(r, k) for k in CSV_FIELDS})
    return path


def read_csv(path) -> list[EvalResult]:
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            out.append(EvalResult(row["task"], row["scene"], float(row["ade"]), float(row["fde"]),
                                  int(row["num_samples"]), int(row["count"]), row["config_hash"], row["model"]))
    return out


def markdown_table(results: Iterable[EvalResult], digits: int = 2) -> str:
    """One table per task: a row per model, one ``ADE / FDE`` column per scene."""
    rows = _check(results)
    blocks = []
    for task in OrderedDict.fromkeys(r.task for r in rows):
        cols = scene_columns(task)
        by_model: dict[str, dict[str, EvalResult]] = OrderedDict()
        for r in rows:
            if r.task == task:
                by_model.setdefault(r.model, {})[r.scene] = r
        title = TASK_TITLES.get(task, task)
        lines = [f"### {title} (ADE / FDE, m)", "",
                 "| Model | " + " | ".join(cols) + " |",
                 "|---|" + "---|" * len(cols)]
        for model, cells in by_model.items():
            lines.append(f"| {model} | " + " | ".join(_cell(cells.get(c), digits) for c in cols) + " |")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def ablation_table(rows: Sequence[tuple[str, EvalResult]], axis: str, digits: int = 2) -> str:
    """Rows are ablation settings, columns the tasks plus their average.

    ``rows`` pairs a setting label (e.g. ``"K=4"``) with the AVG result of
    one task run under that setting.
    """
    if not rows:
        raise ValueError("no ablation results to report")
    tasks = [t for t in TASK_TITLES if any(r.task == t for _, r in rows)]
    settings = list(OrderedDict.fromkeys(s for s, _ in rows))
    lines = [f"| {axis} | " + " | ".join(TASK_TITLES[t] for t in tasks) + " | Average |",
             "|---|" + "---|" * (len(tasks) + 1)]
    for s in settings:
        cells = {r.task: r for label, r in rows if label == s}
        present = [cells[t] for t in tasks if t in cells]
        avg = (f"{np.mean([c.ade for c in present]):.{digits}f} / {np.mean([c.fde for c in present]):.{digits}f}"
               if present else "-")
        lines.append(f"| {s} | " + " | ".join(_cell(cells.get(t), digits) for t in tasks) + f" | {avg} |")
    return "\n".join(lines) + "\n"


def git_hash(cwd=None) -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=cwd, capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 else "unknown"


def write_manifest(path, *, seed: int, config: Mapping, deviations: Mapping, command: str,
                   extra: Mapping | None = None) -> Path:
    doc = {"command": command, "seed": seed, "config": dict(config), "git_hash": git_hash(Path(__file__).parent),
           "deviations": dict(deviations)}
    if extra:
        doc.update(extra)
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, default=str))
    return path


def write_report(results: Iterable[EvalResult], out_dir, formats: Sequence[str] = FORMATS,
                 stem: str = "results") -> list[Path]:
    rows = _check(results)
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise ConfigError(f"unknown report format(s) {bad}; expected some of {FORMATS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    if "csv" in formats:
        paths.append(write_csv(rows, out / f"{stem}.csv"))
    if "md" in formats:
        p = out / f"{stem}.md"
        p.write_text(markdown_table(rows))
        paths.append(p)
    if "json" in formats:
        p = out / f"{stem}.json"
        p.write_text(json.dumps([r.to_dict() for r in rows], indent=2))
        paths.append(p)
    return paths


# --- figures ----------------------------------------------------------------

def plot_predictions(path, windows, pred, tmap=None, max_agents: int = 6, title: str = "") -> Path:
    """Histories, ground truth and sampled futures for a few agents."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = min(max_agents, len(windows))
    if n == 0:
        raise ValueError("nothing to plot")
    idx = np.linspace(0, len(windows) - 1, n).astype(int)
    fig, ax = plt.subplots(figsize=(6, 6))
    if tmap is not None:
        H, W = tmap.shape
        corners = tmap.to_world(np.array([[0.0, 0.0], [W - 1.0, H - 1.0]]))
        ax.imshow(tmap.grid, cmap="gray", origin="lower", alpha=0.35, interpolation="nearest",
                  extent=(corners[0, 0], corners[1, 0], corners[0, 1], corners[1, 1]))
    for j, i in enumerate(idx):
        w = windows[i]
        color = f"C{j % 10}"
        for s in range(pred.shape[1]):
            ax.plot(pred[i, s, :, 0], pred[i, s, :, 1], color=color, alpha=0.25, lw=0.8)
        ax.plot(w.hist[:, 0], w.hist[:, 1], color="k", lw=1.5)
        ax.plot(w.fut[:, 0], w.fut[:, 1], color=color, lw=2.0, ls="--")
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_summary(path, results: Iterable[EvalResult]) -> Path:
    """Grouped ADE/FDE bars per scene, one colour per model."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = _check(results)
    scenes = list(OrderedDict.fromkeys(r.scene for r in rows))
    models = list(OrderedDict.fromkeys(r.model for r in rows))
    x = np.arange(len(scenes))
    width = 0.8 / len(models)
    fig, axes = plt.subplots(1, 2, figsize=(max(6, len(scenes) * 0.9), 3.2), sharex=True)
    for metric, ax in zip(("ade", "fde"), axes):
        for j, m in enumerate(models):
            vals = {r.scene: getattr(r, metric) for r in rows if r.model == m}
            ax.bar(x + j * width, [vals.get(s, np.nan) for s in scenes], width, label=m)
        ax.set_ylabel(f"{metric.upper()} (m)")
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels(scenes, rotation=45, ha="right")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
