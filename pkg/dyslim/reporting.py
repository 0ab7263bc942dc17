# dyslim/reporting.py
"""
Merges metrics CSV files from several runs into one comparison table and
draws the per-run time series as SVG line plots.
"""

import csv
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from dyslim.errors import FormatError
from dyslim.evaluation import METRICS_COLUMNS
from helpers.utils import read_csv_rows

logger = logging.getLogger(__name__)

COMPARISON_FILE = "comparison.csv"
COMPARISON_COLUMNS = ["run", "source", "config_hash", "metric", "t", "value"]
PLOTTED_SERIES = ("cosine_similarity", "sinkhorn_divergence")


@dataclass
class MetricsTable:
    """The rows of one or more metrics files, tagged with their origin."""
    rows: List[Dict[str, str]] = field(default_factory=list)

    def runs(self) -> List[str]:
        return list(OrderedDict.fromkeys(row["run"] for row in self.rows))

    def series(self, metric: str) -> Dict[str, Tuple[List[float], List[float]]]:
        out: Dict[str, Tuple[List[float], List[float]]] = OrderedDict()
        for row in self.rows:
            if row["metric"] != metric or row["t"] == "":
                continue
            ts, vs = out.setdefault(row["run"], ([], []))
            ts.append(float(row["t"]))
            vs.append(float(row["value"]))
        return out

    def aggregate(self, run: str, metric: str) -> Optional[float]:
        for row in self.rows:
            if row["run"] == run and row["metric"] == metric and row["t"] == "":
                return float(row["value"])
        return None


def read_metrics_csv(path: str) -> MetricsTable:
    """Reads one metrics file; raises FormatError naming the file and line of any bad row."""
    comments, header, rows = read_csv_rows(path)
    if header != METRICS_COLUMNS:
        raise FormatError(f"{path}: expected columns {','.join(METRICS_COLUMNS)}, found {','.join(header)}")
    table = MetricsTable()
    for line_no, row in rows:
        record = dict(zip(header, row))
        try:
            if record["t"] != "":
                float(record["t"])
            float(record["value"])
        except ValueError:
            raise FormatError(f"{path}:{line_no}: non-numeric t or value") from None
        record["source"] = os.path.basename(path)
        record["config_hash"] = comments.get("config_hash", "")
        table.rows.append(record)
    return table


def merge_metrics(paths: Sequence[str]) -> MetricsTable:
    if not paths:
        raise FormatError("no metrics files given")
    merged = MetricsTable()
    for path in paths:
        merged.rows.extend(read_metrics_csv(path).rows)
    return merged


def write_comparison_csv(path: str, table: MetricsTable) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(COMPARISON_COLUMNS)
        for row in table.rows:
            writer.writerow([row[c] for c in COMPARISON_COLUMNS])
    logger.info(f"Wrote {path} ({len(table.rows)} rows)")


def plot_series(table: MetricsTable, metric: str, path: str) -> None:
    """One line per run of `metric` against time."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for run, (ts, vs) in table.series(metric).items():
        ax.plot(ts, vs, label=run, linewidth=1.2)
    ax.set_xlabel("time")
    ax.set_ylabel(metric.replace("_", " "))
    if metric == "sinkhorn_divergence":
        values = [v for _, vs in table.series(metric).values() for v in vs]
        if values and min(values) > 0 and max(values) / min(values) > 100:
            ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.info(f"Wrote {path}")


def build_report(paths: Sequence[str], out_dir: str) -> List[str]:
    """Writes comparison.csv and one SVG per plotted series. Returns the written paths."""
    table = merge_metrics(paths)
    os.makedirs(out_dir, exist_ok=True)
    written = [os.path.join(out_dir, COMPARISON_FILE)]
    write_comparison_csv(written[0], table)
    for metric in PLOTTED_SERIES:
        path = os.path.join(out_dir, f"{metric}.svg")
        plot_series(table, metric, path)
        written.append(path)
    return written

