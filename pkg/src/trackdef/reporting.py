"""Report assembly: metric tables with deltas, timing summaries, file output.

Percent deltas follow the convention of truncating toward zero at two
decimals, and are always reported relative to the first (baseline) run.
Metric files contain only deterministic content; wall-clock timings go to a
separate file because they vary between runs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .evaluation import SequenceResult

HIGHER_IS_BETTER = {
    "success": True,
    "precision": True,
    "norm_precision": True,
    "accuracy": True,
    "eao_s": True,
    "robustness": False,
}


@dataclass
class RunMetrics:
    """One evaluated configuration: identifying fields plus its metric values."""

    name: str
    dataset: str
    metrics: dict[str, float]
    spec: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "dataset": self.dataset,
            "spec": self.spec,
            "metrics": self.metrics,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RunMetrics":
        return cls(
            name=d["name"], dataset=d["dataset"], metrics=d["metrics"], spec=d.get("spec", {})
        )


def truncate_pct(value: float) -> float:
    """Truncate a percentage toward zero at two decimals (table display rule)."""
    return math.trunc(value * 100.0) / 100.0


def format_delta(base: float, value: float) -> str:
    delta = value - base
    if base == 0.0:
        return f"{delta:+.3f} (n/a)"
    pct = truncate_pct(delta / base * 100.0)
    return f"{delta:+.3f} ({pct:+.2f}%)"


@dataclass
class ComparisonRow:
    metric: str
    baseline: float
    values: dict[str, float]
    deltas: dict[str, str]


def compare_runs(runs: list[RunMetrics]) -> list[ComparisonRow]:
    """Per-metric absolute and relative deltas of each run against the first.

    All runs must share a dataset; metrics missing from any run are skipped.
    Raises ConfigError on mismatched datasets or no shared metrics.
    """
    if not runs:
        raise ConfigError("no runs to compare")
    datasets = {r.dataset for r in runs}
    if len(datasets) > 1:
        raise ConfigError(f"runs mix datasets: {sorted(datasets)}")
    base = runs[0]
    shared = [m for m in base.metrics if all(m in r.metrics for r in runs)]
    if not shared:
        raise ConfigError("runs share no metrics")
    rows = []
    for metric in shared:
        others = runs[1:]
        rows.append(
            ComparisonRow(
                metric=metric,
                baseline=base.metrics[metric],
                values={r.name: r.metrics[metric] for r in others},
                deltas={
                    r.name: format_delta(base.metrics[metric], r.metrics[metric])
                    for r in others
                },
            )
        )
    return rows


def format_comparison_table(runs: list[RunMetrics]) -> str:
    rows = compare_runs(runs)
    names = [r.name for r in runs[1:]]
    header = ["metric", f"{runs[0].name} (base)"]
    for name in names:
        header += [name, "delta"]
    lines = [header]
    for row in rows:
        line = [row.metric, f"{row.baseline:.3f}"]
        for name in names:
            line += [f"{row.values[name]:.3f}", row.deltas[name]]
        lines.append(line)
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(line, widths)) for line in lines
    )


# ---------------------------------------------------------------------------
# timing


@dataclass
class TimingReport:
    """Mean per-frame wall-clock cost of each pipeline stage, in milliseconds."""

    tracker_ms: float
    defense_ms: float
    attack_ms: float

    @property
    def pipeline_ms(self) -> float:
        # deployed inference cost: tracking plus defense, excluding the attacker
        return self.tracker_ms + self.defense_ms

    @property
    def fps(self) -> float:
        return 1000.0 / self.pipeline_ms if self.pipeline_ms > 0 else float("inf")

    def delta_vs(self, baseline: "TimingReport") -> float:
        return baseline.pipeline_ms - self.pipeline_ms

    def to_json_dict(self) -> dict:
        return {
            "tracker_ms": self.tracker_ms,
            "defense_ms": self.defense_ms,
            "attack_ms": self.attack_ms,
            "pipeline_ms": self.pipeline_ms,
            "fps": self.fps,
        }


def timing_report(results: list[SequenceResult]) -> TimingReport:
    """Average recorded stage timings over all frames of all sequences."""

    def stage_mean(stage: str) -> float:
        arrays = [r.times[stage] for r in results if stage in r.times]
        if not arrays:
            return 0.0
        values = np.concatenate(arrays)
        return float(values.mean()) if values.size else 0.0

    return TimingReport(
        tracker_ms=stage_mean("tracker"),
        defense_ms=stage_mean("defense"),
        attack_ms=stage_mean("attack"),
    )


def format_timing_table(reports: dict[str, TimingReport]) -> str:
    names = list(reports)
    base = reports[names[0]]
    lines = [["run", "speed/fps", "inference time/ms", "delta time/ms"]]
    for name in names:
        rep = reports[name]
        delta = "-" if name == names[0] else f"{rep.delta_vs(base):+.2f}"
        lines.append([name, f"{rep.fps:.0f}", f"{rep.pipeline_ms:.2f}", delta])
    widths = [max(len(line[i]) for line in lines) for i in range(4)]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(line, widths)) for line in lines
    )


# ---------------------------------------------------------------------------
# file output


def write_metrics_files(out_dir, runs: list[RunMetrics]) -> tuple[Path, Path]:
    """Write metrics.csv (one row per run and metric) and metrics.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "dataset", "metric", "value"])
        for run in runs:
            for metric, value in run.metrics.items():
                writer.writerow([run.name, run.dataset, metric, f"{value:.10g}"])
    json_path = out_dir / "metrics.json"
    payload = {"runs": [run.to_json_dict() for run in runs]}
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def read_metrics_file(run_dir) -> list[RunMetrics]:
    path = Path(run_dir) / "metrics.json"
    if not path.is_file():
        raise ConfigError(f"{run_dir} has no metrics.json")
    payload = json.loads(path.read_text())
    return [RunMetrics.from_json_dict(d) for d in payload["runs"]]


def write_timing_file(out_dir, reports: dict[str, TimingReport]) -> Path:
    path = Path(out_dir) / "timing.json"
    path.write_text(
        json.dumps(
            {name: rep.to_json_dict() for name, rep in reports.items()},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    return path


# ---------------------------------------------------------------------------
# plots


def plot_curves(results_by_run: dict[str, list[SequenceResult]], out_dir) -> list[Path]:
    """Success and precision curves as PNG files; one line per run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(5, 4))
    thresholds = np.linspace(0.0, 1.0, 21)
    for name, results in results_by_run.items():
        ious = np.concatenate([r.iou for r in results])
        ax.plot(thresholds, [(ious > t).mean() for t in thresholds], label=name)
    ax.set_xlabel("overlap threshold")
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "success_plot.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(5, 4))
    taus = np.linspace(0.0, 50.0, 21)
    for name, results in results_by_run.items():
        err = np.concatenate([r.center_err for r in results])
        ax.plot(taus, [(err <= t).mean() for t in taus], label=name)
    ax.set_xlabel("center error threshold (px)")
    ax.set_ylabel("precision")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "precision_plot.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)
    return paths
