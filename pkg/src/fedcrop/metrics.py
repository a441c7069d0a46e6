"""Run summaries, multi-method comparison and plots."""

from __future__ import annotations

import csv
import logging
import traceback
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .orchestrator import ExperimentConfig, RoundReport, run_experiment

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    "method",
    "defense_success_rounds",
    "final_main_acc",
    "final_backdoor_acc",
    "mean_round_time",
    "status",
]


def defense_success_rounds(history: Sequence[float], threshold: float = 0.3) -> int:
    """Rounds whose backdoor accuracy is strictly below ``threshold``."""
    if len(history) == 0:
        raise ValueError("empty backdoor-accuracy history")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    return int(sum(1 for b in history if b < threshold))


@dataclass
class SummaryReport:
    method: str
    defense_success_rounds: int
    final_main_acc: float
    final_backdoor_acc: float
    mean_round_time: float
    status: str = "ok"

    @classmethod
    def from_reports(cls, method: str, reports: Sequence[RoundReport], threshold: float = 0.3) -> "SummaryReport":
        if not reports:
            raise ValueError("no round reports to summarize")
        return cls(
            method=method,
            defense_success_rounds=defense_success_rounds([r.backdoor_acc for r in reports], threshold),
            final_main_acc=reports[-1].main_acc,
            final_backdoor_acc=reports[-1].backdoor_acc,
            mean_round_time=float(np.mean([r.total_time for r in reports])),
        )

    @classmethod
    def failed(cls, method: str, error: str) -> "SummaryReport":
        nan = float("nan")
        return cls(method, 0, nan, nan, nan, status=f"failed: {error}")


def write_summary(summaries: Sequence[SummaryReport], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, SUMMARY_COLUMNS)
        writer.writeheader()
        for s in summaries:
            writer.writerow(asdict(s))
    return path


def compare_methods(
    configs: Sequence[ExperimentConfig],
    out_dir=None,
    names: Optional[Sequence[str]] = None,
    threshold: float = 0.3,
) -> tuple:
    """Run each config; returns (summaries, {name: reports}).

    A failing method is recorded with a ``failed`` status and the rest still
    run. With ``out_dir`` each method gets a subdirectory, plus ``summary.csv``
    and comparison plots at the top level.
    """
    if not configs:
        raise ValueError("no configs to compare")
    names = list(names) if names is not None else _method_names(configs)
    out = Path(out_dir) if out_dir is not None else None
    summaries, histories = [], {}
    for name, cfg in zip(names, configs):
        try:
            reports = run_experiment(cfg, out / name if out is not None else None)
        except Exception as exc:
            log.error("method %s failed: %s\n%s", name, exc, traceback.format_exc())
            summaries.append(SummaryReport.failed(name, str(exc)))
            continue
        histories[name] = reports
        summaries.append(SummaryReport.from_reports(name, reports, threshold))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_summary(summaries, out / "summary.csv")
        if histories:
            emit_plots(histories, out)
    return summaries, histories


def _method_names(configs) -> list:
    names, seen = [], {}
    for cfg in configs:
        base = cfg.aggregator
        seen[base] = seen.get(base, 0) + 1
        names.append(base if seen[base] == 1 else f"{base}_{seen[base]}")
    return names


def emit_plots(reports, out_dir) -> list:
    """Write main_acc.png, backdoor_acc.png and submodels.png.

    ``reports`` is either a list of RoundReport (one series) or a mapping of
    method name to such lists.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = reports if isinstance(reports, dict) else {"run": list(reports)}
    if not series or not any(len(v) for v in series.values()):
        raise ValueError("no reports to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "fedcrop"
    meta = {"Software": None}
    paths = []

    for key, fname, ylabel in (
        ("main_acc", "main_acc.png", "main-task accuracy"),
        ("backdoor_acc", "backdoor_acc.png", "backdoor accuracy"),
    ):
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, reps in series.items():
            ax.plot([r.round for r in reps], [getattr(r, key) for r in reps], marker="o", ms=3, label=name)
        if key == "backdoor_acc":
            ax.axhline(0.3, color="grey", ls="--", lw=1)
        ax.set_xlabel("round")
        ax.set_ylabel(ylabel)
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / fname, metadata=meta)
        plt.close(fig)
        paths.append(out / fname)

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    plotted = False
    for name, reps in series.items():
        rows = [r for r in reps if r.submodels]
        for sub in ("benign", "repaired"):
            pts = [(r.round, r.submodels[f"{sub}_main_acc"], r.submodels[f"{sub}_backdoor_acc"]) for r in rows]
            pts = [p for p in pts if p[1] is not None]
            if not pts:
                continue
            plotted = True
            rounds, main, bd = zip(*pts)
            axes[0].plot(rounds, main, marker="o", ms=3, label=f"{name} {sub}")
            axes[1].plot(rounds, bd, marker="o", ms=3, label=f"{name} {sub}")
    for ax, title in zip(axes, ("main-task accuracy", "backdoor accuracy")):
        ax.set_title(title)
        ax.set_xlabel("round")
        ax.set_ylim(-0.02, 1.02)
        if plotted:
            ax.legend(fontsize=8)
        else:
            ax.text(0.5, 0.5, "no sub-model data", ha="center", va="center", transform=ax.transAxes)
    fig.tight_layout()
    fig.savefig(out / "submodels.png", metadata=meta)
    plt.close(fig)
    paths.append(out / "submodels.png")
    return paths
