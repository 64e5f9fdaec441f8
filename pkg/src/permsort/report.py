"""Aggregation of probe results across runs: means, 95% CIs, and a least-squares fit."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from permsort.runs import is_complete, run_manifest

Z95 = 1.96
METRICS = ("accuracy", "non_inversion_proportion", "top1", "top2", "greedy_trap_rate")


class NothingToReport(LookupError):
    pass


def mean_ci(values) -> tuple[float, float | None]:
    """Mean and normal-approximation 95% half-width (1.96 * s / sqrt(n)); no CI below two samples."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return float("nan"), None
    m = float(x.mean())
    if x.size < 2:
        return m, None
    return m, float(Z95 * x.std(ddof=1) / math.sqrt(x.size))


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r2: float
    n: int


def linear_fit(x, y) -> LinearFit:
    """Ordinary least squares ``y ~ slope * x + intercept`` with r^2 = 1 - SS_res / SS_tot."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n < 2:
        return LinearFit(float("nan"), float("nan"), float("nan"), n)
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0.0:
        return LinearFit(float("nan"), float("nan"), float("nan"), n)
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    ss_tot = float(np.sum((y - ym) ** 2))
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    r2 = float("nan") if ss_tot == 0.0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return LinearFit(slope, intercept, r2, n)


@dataclass
class Agent:
    path: str
    length: int
    embed_dim: int
    seed: int
    metrics: dict
    value_loss: list[tuple[int, float]]

    def value(self, metric: str) -> float:
        if metric in ("top1", "top2"):
            return float(self.metrics["top_k_hit_rates"].get(metric[-1], float("nan")))
        return float(self.metrics[metric])


def discover(runs_dir: str | Path) -> list[Agent]:
    """Completed runs under ``runs_dir`` in a canonical order independent of filesystem listing."""
    runs_dir = Path(runs_dir)
    agents = []
    for manifest in sorted(runs_dir.rglob("manifest")):
        run = manifest.parent
        if run.parent.name == "checkpoints" or not is_complete(run) or not (run / "metrics.json").is_file():
            continue
        m = run_manifest(run)
        curve = []
        log_path = run / "trainlog.jsonl"
        if log_path.is_file():
            for line in log_path.read_text().splitlines():
                rec = json.loads(line)
                curve.append((rec["global_step"], rec["value_loss"]))
        agents.append(Agent(
            path=str(run.relative_to(runs_dir)),
            length=int(m["length"]), embed_dim=int(m["embed_dim"]), seed=int(m["seed"]),
            metrics=json.loads((run / "metrics.json").read_text()),
            value_loss=curve,
        ))
    agents.sort(key=lambda a: (a.length, a.embed_dim, a.seed, a.path))
    return agents


@dataclass
class AggregateReport:
    rows: list[dict]         # one per (length, embed_dim, population, metric)
    agents: list[Agent]
    fit: LinearFit
    min_accuracy: float

    def to_dict(self) -> dict:
        return {
            "min_accuracy": self.min_accuracy,
            "n_agents": len(self.agents),
            "cells": self.rows,
            "fit_top1_vs_non_inversion": vars(self.fit),
        }


def aggregate(agents: list[Agent], min_accuracy: float = 0.99) -> AggregateReport:
    if not agents:
        raise NothingToReport("no completed runs to report")
    agents = sorted(agents, key=lambda a: (a.length, a.embed_dim, a.seed, a.path))
    rows = []
    cells = sorted({(a.length, a.embed_dim) for a in agents})
    for length, dim in cells:
        members = [a for a in agents if (a.length, a.embed_dim) == (length, dim)]
        populations = {
            "all": members,
            "high_accuracy": [a for a in members if a.value("accuracy") >= min_accuracy],
        }
        for pop, group in populations.items():
            for metric in METRICS:
                vals = [a.value(metric) for a in group]
                mean, half = mean_ci(vals)
                rows.append({
                    "length": length, "embed_dim": dim, "population": pop, "metric": metric,
                    "n": len(vals), "mean": mean if vals else None,
                    "ci_half": half,
                    "ci_low": None if half is None else mean - half,
                    "ci_high": None if half is None else mean + half,
                })
    fit = linear_fit([a.value("non_inversion_proportion") for a in agents],
                     [a.value("top1") for a in agents])
    return AggregateReport(rows, agents, fit, min_accuracy)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def write_report(rep: AggregateReport, out_dir: str | Path, plots: bool = True) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {name: out_dir / name for name in
             ("summary.csv", "agents.csv", "scatter.csv", "value_loss.csv", "report.json")}
    cols = ["length", "embed_dim", "population", "metric", "n", "mean", "ci_half", "ci_low", "ci_high"]
    with open(paths["summary.csv"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        w.writerows([_fmt(r[c]) for c in cols] for r in rep.rows)
    with open(paths["agents.csv"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["path", "length", "embed_dim", "seed", *METRICS, "sign_convention"])
        for a in rep.agents:
            w.writerow([a.path, a.length, a.embed_dim, a.seed,
                        *(_fmt(a.value(m)) for m in METRICS), a.metrics.get("sign_convention", "")])
    with open(paths["scatter.csv"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["length", "embed_dim", "seed", "non_inversion_proportion", "top1"])
        for a in rep.agents:
            w.writerow([a.length, a.embed_dim, a.seed,
                        _fmt(a.value("non_inversion_proportion")), _fmt(a.value("top1"))])
    with open(paths["value_loss.csv"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["length", "embed_dim", "seed", "global_step", "value_loss"])
        for a in rep.agents:
            w.writerows([a.length, a.embed_dim, a.seed, s, repr(v)] for s, v in a.value_loss)
    paths["report.json"].write_text(json.dumps(_denan(rep.to_dict()), indent=2, sort_keys=True) + "\n")
    if plots:
        from permsort import plotting

        paths.update(plotting.plot_report(rep, out_dir))
    return paths


def _denan(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _denan(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_denan(v) for v in obj]
    return obj

