"""Comparison tables and duration histograms across analyzed runs."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .turn_taking import STAT_KINDS, TurnTakingStats, write_histogram_csv

logger = logging.getLogger(__name__)

STATS_FILE = "stats.json"
GROUND_TRUTH_LABEL = "Ground Truth"
STAT_COLUMNS = [f"{k.lower()}_per_min" for k in STAT_KINDS] + [f"{k.lower()}_s_per_min" for k in STAT_KINDS]
TABLE_COLUMNS = ["model", "status"] + STAT_COLUMNS


@dataclass
class ReportRow:
    label: str
    source: Path
    stats: Optional[TurnTakingStats]
    values: Optional[dict[str, float]]

    @property
    def present(self) -> bool:
        return self.stats is not None


def _stats_path(run: Path) -> Path:
    return run if run.is_file() else run / STATS_FILE


def _run_label(run: Path, stats_doc: Optional[dict]) -> str:
    if stats_doc and stats_doc.get("label"):
        return stats_doc["label"]
    manifest = (run if run.is_dir() else run.parent) / "manifest.json"
    if manifest.exists():
        try:
            label = json.loads(manifest.read_text()).get("config", {}).get("label")
        except json.JSONDecodeError:
            label = None
        if label:
            return label
    return run.stem if run.is_file() else run.name


def load_row(run: str | Path, label: Optional[str] = None) -> ReportRow:
    """Read one analyzed run; a missing or unreadable stats file gives an absent row."""
    run = Path(run)
    path = _stats_path(run)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        stats = TurnTakingStats.from_dict(doc)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        logger.warning("%s: no usable stats (%s); row marked absent", path, exc)
        return ReportRow(label or _run_label(run, None), run, None, None)
    # the stored per-minute values are reported verbatim
    values = {}
    for k in STAT_KINDS:
        values[f"{k.lower()}_per_min"] = float(doc["kinds"][k]["count_per_min"])
        values[f"{k.lower()}_s_per_min"] = float(doc["kinds"][k]["cumulated_s_per_min"])
    return ReportRow(label or _run_label(run, doc), run, stats, values)


def write_table(path: str | Path, rows: Sequence[ReportRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            if r.present:
                w.writerow([r.label, "ok"] + [repr(r.values[c]) for c in STAT_COLUMNS])
            else:
                w.writerow([r.label, "absent"] + [""] * len(STAT_COLUMNS))


def read_table(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for c in STAT_COLUMNS:
            r[c] = float(r[c]) if r[c] else None
    return rows


def plot_histograms(path: str | Path, kind: str, stats_by_label: dict[str, TurnTakingStats],
                    max_s: float = 5.0) -> None:
    """Normalized duration distributions of one event kind, one step curve per label."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "duplexlm"
    fig, ax = plt.subplots(figsize=(6, 3.5))
    drawn = False
    for label, st in stats_by_label.items():
        counts = st.kinds[kind].hist_counts.astype(float)
        edges = np.asarray(st.hist_edges_ms, dtype=float) / 1000.0
        if counts.sum() == 0:
            continue
        ax.step(edges, counts[:edges.size] / counts.sum(), where="post", label=label)
        drawn = True
    ax.set_xlim(0, max_s)
    ax.set_xlabel(f"{kind.lower()} duration (s)")
    ax.set_ylabel("fraction of events")
    ax.set_title(kind.capitalize())
    if drawn:
        ax.legend(fontsize="small")
    fig.tight_layout()
    # fixed metadata keeps the SVG byte-stable across runs
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def build_report(runs: Sequence[str | Path], out_dir: str | Path, ground_truth: str | Path | None = None,
                 labels: Optional[Sequence[str]] = None, svg: bool = True) -> list[ReportRow]:
    """Write ``table2.csv`` and ``fig3/<kind>.csv`` (+ ``.svg``) under ``out_dir``.

    One table row per run in the given order, then the ground-truth row. Histograms
    cover the runs whose stats could be read.
    """
    if labels is not None and len(labels) != len(runs):
        raise ValueError("labels must match runs one to one")
    rows = [load_row(r, labels[i] if labels else None) for i, r in enumerate(runs)]
    if ground_truth is not None:
        rows.append(load_row(ground_truth, GROUND_TRUTH_LABEL))
    if not rows:
        raise ValueError("nothing to report: pass at least one run or a ground truth")
    seen = set()
    for r in rows:
        if r.label in seen:
            raise ValueError(f"duplicate row label {r.label!r}")
        seen.add(r.label)

    out_dir = Path(out_dir)
    (out_dir / "fig3").mkdir(parents=True, exist_ok=True)
    write_table(out_dir / "table2.csv", rows)
    present = {r.label: r.stats for r in rows if r.present}
    if present:
        edges = {tuple(s.hist_edges_ms) for s in present.values()}
        if len(edges) > 1:
            raise ValueError("runs were analyzed with different histogram bins")
        for kind in STAT_KINDS:
            write_histogram_csv(out_dir / "fig3" / f"{kind.lower()}.csv", kind, present)
            if svg:
                plot_histograms(out_dir / "fig3" / f"{kind.lower()}.svg", kind, present)
    return rows
