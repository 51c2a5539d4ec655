"""Report figures written next to the CSV outputs.

PNG metadata is stripped so the same data always gives the same bytes.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Iterable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricReport  # noqa: E402

_SAVE = {"format": "png", "dpi": 100, "metadata": {"Software": None}}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def loss_curve(rows: Iterable[tuple[int, str, float, float]], path, title: str = "training loss") -> Path:
    """One line per loss term (unweighted value) against the step, log scale."""
    series: dict[str, tuple[list, list]] = defaultdict(lambda: ([], []))
    for step, term, _w, value in rows:
        series[term][0].append(step)
        series[term][1].append(value)
    fig, ax = plt.subplots(figsize=(6, 4))
    for term in sorted(series):
        xs, ys = series[term]
        ax.plot(xs, [max(y, 1e-12) for y in ys], label=term, lw=1.5 if term == "total" else 1.0)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if series:
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def metric_bars(report: MetricReport, path) -> Path:
    """Per-view PSNR-M and SSIM-M bars, one colour per source."""
    rows = report.rows
    labels = [f"{r['scene']}/{r['view']}" for r in rows]
    sources = sorted({r["source"] for r in rows})
    colours = {s: f"C{i}" for i, s in enumerate(sources)}
    fig, axes = plt.subplots(2, 1, figsize=(max(6, 0.35 * len(rows) + 2), 6), sharex=True)
    for ax, key, name in ((axes[0], "psnr_m", "PSNR-M (dB)"), (axes[1], "ssim_m", "SSIM-M")):
        ax.bar(range(len(rows)), [r[key] for r in rows], color=[colours[r["source"]] for r in rows])
        ax.set_ylabel(name)
    axes[1].set_xticks(range(len(rows)))
    axes[1].set_xticklabels(labels, rotation=90, fontsize=7)
    handles = [plt.Rectangle((0, 0), 1, 1, color=colours[s]) for s in sources]
    if handles:
        axes[0].legend(handles, sources, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
