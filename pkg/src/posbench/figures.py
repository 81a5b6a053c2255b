"""Render report files to figures. Analysis stays plot-free; everything here
consumes finished reports and writes image files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .analysis import (
    NUM_POSITIONS,
    PositionReport,
    SegmentSimilarityReport,
    SpanAccuracyReport,
)
from .errors import ValidationError


def render_position_figure(report: PositionReport, path: str | Path) -> Path:
    """Delta MRR and delta recall against insertion position, zero line for
    the unchanged-corpus baseline."""
    positions = list(range(1, NUM_POSITIONS + 1))
    d_mrr = [report.deltas[p].mrr for p in positions]
    d_rec = [report.deltas[p].recall for p in positions]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.axhline(0.0, color="gray", linewidth=1, linestyle="--", label="baseline")
    ax.plot(positions, d_mrr, marker="o", label=f"delta MRR@{report.k}")
    ax.plot(positions, d_rec, marker="s", label=f"delta R@{report.k}")
    ax.set_xticks(positions)
    ax.set_xlabel("insertion position")
    ax.set_ylabel("delta vs default run")
    ax.set_title(f"Passage relocation ({report.n_queries} queries)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def render_segment_figure(report: SegmentSimilarityReport, path: str | Path) -> Path:
    """Mean document-segment cosine per segment with the p25-p75 band."""
    segs = [s.segment for s in report.segments]
    means = [s.mean for s in report.segments]
    lo = [s.p25 for s in report.segments]
    hi = [s.p75 for s in report.segments]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.fill_between(segs, lo, hi, alpha=0.25, label="p25-p75")
    ax.plot(segs, means, marker="o", label="mean")
    ax.set_xticks(segs)
    ax.set_xlabel("segment index")
    ax.set_ylabel("cosine(document, segment)")
    ax.set_title(f"Segment similarity, pooling={report.pooling} ({report.n_docs} docs)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def render_span_figure(report: SpanAccuracyReport, path: str | Path) -> Path:
    """Span reconstruction accuracy per token window, std as error bars."""
    labels = [f"({w.window_start},{w.window_end})" for w in report.windows]
    means = [w.mean_acc for w in report.windows]
    stds = [w.std for w in report.windows]
    fig, ax = plt.subplots(figsize=(max(7, 1.1 * len(labels)), 4))
    ax.bar(range(len(labels)), means, yerr=stds, capsize=3)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("token window")
    ax.set_ylabel("span accuracy")
    ax.set_title(f"Span prediction accuracy ({report.span_len}-token spans)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def render_start_histogram(starts: Sequence[int], path: str | Path, bins: int = 40) -> Path:
    """Histogram of passage start offsets (characters)."""
    if not starts:
        raise ValidationError("no passage starts to plot")
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.hist(list(starts), bins=bins, color="tab:blue", alpha=0.85)
    ax.set_xlabel("passage start (characters)")
    ax.set_ylabel("documents")
    ax.set_title("Relevant-passage start positions")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
