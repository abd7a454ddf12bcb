"""Result tables (text + CSV) and figures rendered to image files."""

from __future__ import annotations

import csv
import io
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from latent_replay.arch import get_preset  # noqa: E402
from latent_replay.cost import blocks_from_spec, relative_cost  # noqa: E402
from latent_replay.metrics import RunResult, average_accuracy_sem, format_accuracy  # noqa: E402
from latent_replay.replay import ReplayStrategy  # noqa: E402

log = logging.getLogger(__name__)

GAP = "--"

# (architecture, strategy) rows of the two strategy tables
TABLE_GRID = {
    "T1": [
        ("ARCH1", "IR"), ("ARCH1", (0.7, 0.3)), ("ARCH1", (0.5, 0.5)), ("ARCH1", (0.3, 0.7)),
        ("ARCH2", "IR"), ("ARCH2", (0.5, 0.3, 0.2)), ("ARCH2", (0.34, 0.33, 0.33)), ("ARCH2", (0.2, 0.3, 0.5)),
    ],
}
TABLE_GRID["T2"] = TABLE_GRID["T1"]
TABLE_COLUMNS = {
    "T1": ["Architecture", "Strategy", "R", "Accuracy"],
    "T2": ["Architecture", "Strategy", "R", "mFID", "Accuracy"],
}

FIG4_ORDER = [("GR", "GR"), ("IR_freeze_enc", "IR + freeze"), ("GR_freeze_enc_dec", "GR + freeze"),
              ("IR_naive", "naive IR")]


def _strategy(arch: str, s) -> ReplayStrategy:
    return ReplayStrategy.parse(s, get_preset(arch).depth)


def _cell_results(results: list[RunResult], arch: str, strategy: ReplayStrategy) -> list[RunResult]:
    out = []
    for r in results:
        if r.extra.get("arch") != arch or r.strategy is None:
            continue
        if np.allclose(r.strategy, strategy.frequencies, atol=1e-12):
            out.append(r)
    return out


def table_rows(results: list[RunResult], table_id: str, archs=None) -> list[dict]:
    """One row per (architecture, strategy) of the table; absent cells keep explicit gaps.

    Only architectures in ``archs`` are listed, by default those present in
    ``results`` (all of them when there are no results at all).
    """
    if table_id not in TABLE_GRID:
        raise ValueError(f"unknown table {table_id!r}")
    grid = TABLE_GRID[table_id]
    if archs is None:
        archs = {r.extra.get("arch") for r in results} & {a for a, _ in grid} or {a for a, _ in grid}
    rows = []
    for arch, s in grid:
        if arch not in archs:
            continue
        strategy = _strategy(arch, s)
        r_value = relative_cost(blocks_from_spec(get_preset(arch)), strategy)
        cell = _cell_results(results, arch, strategy)
        row = {"Architecture": arch, "Strategy": "Internal Replay" if strategy.is_internal_replay else
               "S=[" + ",".join(f"{f:g}" for f in strategy.frequencies) + "]",
               "R": "100%" if r_value == 1.0 else f"{100 * r_value:.1f}%", "mFID": GAP, "Accuracy": GAP, "acc": "", "sem": "",
               "seeds": len(cell)}
        if cell:
            mean, sem = average_accuracy_sem([r.average_accuracy for r in cell])
            row["Accuracy"] = format_accuracy(mean, sem)
            row["acc"], row["sem"] = f"{mean:.6f}", "" if sem is None else f"{sem:.6f}"
            mfids = [r.mfid for r in cell if r.mfid is not None]
            if mfids:
                row["mFID"] = f"{np.mean(mfids):.0f}"
        rows.append(row)
    return rows


def emit_table(results: list[RunResult], table_id: str, out_dir: str | Path | None = None, archs=None) -> str:
    """Render a table as aligned text; with ``out_dir`` also write ``<id>.csv`` and ``<id>.txt``."""
    rows = table_rows(results, table_id, archs)
    cols = TABLE_COLUMNS[table_id]
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) for c in cols]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(w) for c, w in zip(cols, widths)))
    missing = sum(1 for r in rows if r["Accuracy"] == GAP)
    if missing:
        lines.append(f"({missing} of {len(rows)} cells have no results)")
    text = "\n".join(lines) + "\n"
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{table_id}.txt").write_text(text)
        (out_dir / f"{table_id}.csv").write_text(table_csv(rows, cols + ["acc", "sem", "seeds"]))
    return text


def table_csv(rows: list[dict], cols: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# -- figures -----------------------------------------------------------------

def _warn(ax, message: str) -> None:
    log.warning(message)
    ax.text(0.5, 0.02, message, transform=ax.transAxes, ha="center", va="bottom", color="tab:red", fontsize=8)


def plot_pretraining(results: list[RunResult], path: Path, expected_counts=(2, 4, 6, 8, 10)):
    """Accuracy against the number of pretraining classes, one line per augmentation setting."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    series = {}
    for aug, name in ((True, "with augmentation"), (False, "without augmentation")):
        pts = {}
        for r in results:
            if r.extra.get("augmentation") is aug and "pretrain_classes" in r.extra:
                pts.setdefault(r.extra["pretrain_classes"], []).append(r.average_accuracy)
        if not pts:
            continue
        ks = sorted(pts)
        stats = [average_accuracy_sem(pts[k]) for k in ks]
        means = [100 * m for m, _ in stats]
        errs = [100 * (s or 0.0) for _, s in stats]
        ax.errorbar(ks, means, yerr=errs, marker="o", capsize=3, label=name)
        series[name] = ks
    ax.set_xlabel("classes used for pretraining")
    ax.set_ylabel("average accuracy (%)")
    ax.legend(frameon=False)
    if len(series) < 2 or any(set(ks) != set(expected_counts) for ks in series.values()):
        _warn(ax, "incomplete sweep")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return series


def plot_setups(results: list[RunResult], path: Path):
    """Bar chart of the final average accuracy of the four FashionMNIST setups."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    labels, means, errs = [], [], []
    for key, name in FIG4_ORDER:
        accs = [r.average_accuracy for r in results if r.extra.get("setup") == key]
        if not accs:
            continue
        m, s = average_accuracy_sem(accs)
        labels.append(name)
        means.append(100 * m)
        errs.append(100 * (s or 0.0))
    ax.bar(range(len(labels)), means, yerr=errs, capsize=3, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_ylabel("average accuracy after final task (%)")
    if len(labels) < len(FIG4_ORDER):
        _warn(ax, "incomplete sweep")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return labels


def plot_cost_accuracy(results: list[RunResult], path: Path):
    """Relative cost against accuracy, one point per (architecture, strategy)."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    points = {}
    for r in results:
        if r.strategy is None or r.relative_cost is None:
            continue
        points.setdefault((r.extra.get("arch", ""), r.strategy_label), (r.relative_cost, []))[1].append(
            r.average_accuracy)
    for arch in sorted({a for a, _ in points}):
        keys = [k for k in points if k[0] == arch]
        xs = [100 * points[k][0] for k in keys]
        ys = [100 * np.mean(points[k][1]) for k in keys]
        ax.scatter(xs, ys, label=arch or "?")
        for k, x, y in zip(keys, xs, ys):
            ax.annotate(k[1], (x, y), fontsize=6, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("relative cost R (%)")
    ax.set_ylabel("average accuracy (%)")
    if points:
        ax.legend(frameon=False)
    else:
        _warn(ax, "no strategy results")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return sorted(points)


FIGURES = {"F3": ("fig3.png", plot_pretraining), "F4": ("fig4.png", plot_setups),
           "cost-vs-acc": ("cost_vs_accuracy.png", plot_cost_accuracy)}


def emit_plots(results: list[RunResult], figure_id: str, out_dir: str | Path) -> Path:
    try:
        filename, fn = FIGURES[figure_id]
    except KeyError:
        raise ValueError(f"unknown figure {figure_id!r}; choose from {sorted(FIGURES)}") from None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / filename
    fn(results, path)
    return path
