"""Report containers and CSV/manifest emission for evaluation sweeps.

All emitted files are deterministic functions of the report contents:
fixed row ordering, 17-significant-digit floats, no timestamps.  Re-running
a sweep from the manifest's seed reproduces every byte.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .experiments import ExperimentPlan
from .params import SimParams

FLOAT_FMT = ".17g"


def _fmt(x) -> str:
    return format(float(x), FLOAT_FMT)


@dataclass
class Aggregate:
    mean: float
    ci_low: float
    ci_high: float
    q05: float
    q95: float
    n: int


def aggregate_returns(values) -> Aggregate:
    """Mean with a normal-approximation 95% CI and empirical 5/95 quantiles."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        raise ValueError("nothing to aggregate")
    mean = float(arr.mean())
    half = 1.959963984540054 * float(arr.std(ddof=1)) / math.sqrt(arr.size) if arr.size > 1 else 0.0
    q05, q95 = (float(q) for q in np.quantile(arr, [0.05, 0.95]))
    return Aggregate(mean, mean - half, mean + half, q05, q95, int(arr.size))


@dataclass
class EvaluationReport:
    """Row-level results of a sweep plus helpers to slice and aggregate."""

    plan: ExperimentPlan
    params: SimParams
    rows: list = field(default_factory=list)

    def select(self, **filters) -> list:
        out = []
        for row in self.rows:
            if all(row.get(k) == v for k, v in filters.items()):
                out.append(row)
        return out

    def replicate_returns(self, **filters) -> np.ndarray:
        rows = [r for r in self.select(**filters) if r.get("mean_return") is not None]
        rows.sort(key=lambda r: r["replicate"])
        return np.asarray([r["mean_return"] for r in rows], dtype=float)

    def mean_return(self, **filters) -> float:
        returns = self.replicate_returns(**filters)
        if returns.size == 0:
            raise KeyError(f"no evaluated rows match {filters}")
        return float(returns.mean())

    def mean_stage_probability(self, **filters) -> np.ndarray:
        rows = [r for r in self.select(**filters) if r.get("stage_probability") is not None]
        if not rows:
            raise KeyError(f"no evaluated rows match {filters}")
        return np.mean([r["stage_probability"] for r in rows], axis=0)

    def gap_closure(self, agent: str, weight: float | None = None,
                    train_size: int | None = None) -> float:
        """Fraction of the optimal-vs-therapist gap closed by the mixed policy."""
        weight = self.plan.crosssection_weight if weight is None else weight
        train_size = max(self.plan.train_sizes) if train_size is None else train_size
        pt = self.mean_return(policy="pt")
        optimal = self.mean_return(policy="optimal")
        mixed = self.mean_return(policy="mixed", agent=agent, weight=float(weight),
                                 train_size=train_size)
        return (mixed - pt) / (optimal - pt)

    def to_dict(self) -> dict:
        return {"plan": self.plan.to_dict(), "params": self.params.to_dict(), "rows": self.rows}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf8") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> "EvaluationReport":
        return cls(plan=ExperimentPlan.from_dict(data["plan"]),
                   params=SimParams.from_dict(data["params"]),
                   rows=list(data["rows"]))

    @classmethod
    def load(cls, path) -> "EvaluationReport":
        with open(path, encoding="utf8") as fh:
            return cls.from_dict(json.load(fh))


def emit_reports(report: EvaluationReport, out_dir) -> dict:
    """Write the evaluation CSVs plus a manifest; returns {name: path}.

    Files: figure2_returns.csv (replicate-level agent returns at the largest
    training size), table3_transitions.csv (per-stage mean probabilities),
    figure3_surface.csv (weight x training-size return grid per agent), and
    figure4_crosssection.csv (the crosssection-weight series with confidence
    and quantile bands, plus therapist and optimal reference series).
    """
    os.makedirs(out_dir, exist_ok=True)
    plan = report.plan
    max_size = max(plan.train_sizes)
    paths = {}

    def emit(name: str, header: list, rows_iter) -> None:
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf8") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows_iter:
                fh.write(",".join(str(v) for v in row) + "\n")
        paths[name] = path

    fig2 = []
    for agent in plan.agents:
        for row in sorted(report.select(policy="agent", agent=agent, train_size=max_size),
                          key=lambda r: r["replicate"]):
            if row.get("mean_return") is not None:
                fig2.append([row["replicate"], agent, max_size, _fmt(row["mean_return"])])
    emit("figure2_returns.csv", ["replicate", "agent", "train_size", "mean_return"], fig2)

    stage_cols = {"physiotherapist": report.mean_stage_probability(policy="pt")}
    for agent in plan.agents:
        stage_cols[agent] = report.mean_stage_probability(policy="agent", agent=agent,
                                                          train_size=max_size)
    header = ["stage"] + list(stage_cols)
    table3 = [[s] + [_fmt(col[s]) for col in stage_cols.values()]
              for s in range(report.params.n_nonterminal)]
    emit("table3_transitions.csv", header, table3)

    fig3 = []
    for agent in plan.agents:
        for size in plan.train_sizes:
            for weight in plan.weights:
                mean = report.mean_return(policy="mixed", agent=agent, train_size=size,
                                          weight=float(weight))
                fig3.append([agent, size, _fmt(float(weight)), _fmt(mean)])
    emit("figure3_surface.csv", ["agent", "train_size", "weight", "mean_return"], fig3)

    fig4 = []
    w = float(plan.crosssection_weight)
    pt_agg = aggregate_returns(report.replicate_returns(policy="pt"))
    opt_agg = aggregate_returns(report.replicate_returns(policy="optimal"))
    for agent in plan.agents:
        for size in plan.train_sizes:
            agg = aggregate_returns(
                report.replicate_returns(policy="mixed", agent=agent, train_size=size, weight=w)
            )
            fig4.append([f"mixed-{agent}", size] + [_fmt(v) for v in
                        (agg.mean, agg.ci_low, agg.ci_high, agg.q05, agg.q95)])
    for name, agg in (("pt", pt_agg), ("optimal", opt_agg)):
        for size in plan.train_sizes:
            fig4.append([name, size] + [_fmt(v) for v in
                        (agg.mean, agg.ci_low, agg.ci_high, agg.q05, agg.q95)])
    emit("figure4_crosssection.csv",
         ["series", "train_size", "mean_return", "ci_low", "ci_high", "q05", "q95"], fig4)

    summary = {
        "mean_return": {
            "pt": pt_agg.mean,
            "optimal": opt_agg.mean,
        },
        "gap_closure": {},
    }
    for agent in plan.agents:
        try:
            summary["mean_return"][f"agent-{agent}"] = report.mean_return(
                policy="agent", agent=agent, train_size=max_size)
        except KeyError:
            summary["mean_return"][f"agent-{agent}"] = None
        summary["gap_closure"][agent] = report.gap_closure(agent)
    if plan.include_popular:
        summary["mean_return"]["popular"] = report.mean_return(policy="popular")

    config_blob = json.dumps({"plan": plan.to_dict(), "params": report.params.to_dict()},
                             sort_keys=True).encode("utf8")
    manifest = {
        "master_seed": plan.master_seed,
        "plan": plan.to_dict(),
        "params": report.params.to_dict(),
        "config_sha256": hashlib.sha256(config_blob).hexdigest(),
        "summary": summary,
        "files": {},
    }
    for name in sorted(paths):
        with open(paths[name], "rb") as fh:
            manifest["files"][name] = hashlib.sha256(fh.read()).hexdigest()
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["manifest.json"] = manifest_path
    return paths
