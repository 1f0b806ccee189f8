"""Scoring estimated group effects against simulated ground truth.

A repetition produces one K-vector of estimates per method plus the true
group effects for that draw; these records reduce to per-group and
aggregate mean absolute error and squared bias.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .pipeline import assign_groups


@dataclass(frozen=True)
class BenchmarkRecord:
    scenario_id: str
    rep: int
    method: str
    gamma_hat: np.ndarray
    gamma_true: np.ndarray

    def __post_init__(self):
        if self.gamma_hat.shape != self.gamma_true.shape:
            raise ValueError("gamma_hat and gamma_true disagree on K")


def true_group_effects(tau_true, k: int) -> np.ndarray:
    """Mean of tau within quantile bins of tau itself; nondecreasing.

    The reference the estimators are scored against, computed on the full
    simulated sample.
    """
    tau = np.asarray(tau_true, dtype=np.float64)
    groups = assign_groups(tau, k)  # constant tau raises here
    return np.array([tau[groups.labels == g].mean() for g in range(1, k + 1)])


def _stack(records: list[BenchmarkRecord]) -> tuple[np.ndarray, np.ndarray]:
    if not records:
        raise ValueError("no records")
    keys = {(r.scenario_id, r.method) for r in records}
    if len(keys) > 1:
        raise ValueError(f"records mix scenario/method pairs: {sorted(keys)}")
    hat = np.vstack([r.gamma_hat for r in records])
    true = np.vstack([r.gamma_true for r in records])
    return hat, true


def mae(records: list[BenchmarkRecord]) -> tuple[np.ndarray, float]:
    """Per-group mean |gamma_hat - gamma_true| over reps, and its mean."""
    hat, true = _stack(records)
    per_group = np.abs(hat - true).mean(axis=0)
    return per_group, float(per_group.mean())


def bias2(records: list[BenchmarkRecord]) -> tuple[np.ndarray, float]:
    """Per-group (mean gamma_hat - mean gamma_true)^2 over reps, and mean."""
    hat, true = _stack(records)
    per_group = (hat.mean(axis=0) - true.mean(axis=0)) ** 2
    return per_group, float(per_group.mean())


def summarize(records: list[BenchmarkRecord]) -> dict:
    """Nested {scenario: {method: {mae, bias2, per-group vectors, n_reps}}}."""
    by_key: dict[tuple[str, str], list[BenchmarkRecord]] = {}
    for r in records:
        by_key.setdefault((r.scenario_id, r.method), []).append(r)
    out: dict = {}
    for (scenario, method), recs in sorted(by_key.items()):
        mae_k, mae_all = mae(recs)
        b2_k, b2_all = bias2(recs)
        out.setdefault(scenario, {})[method] = {
            "n_reps": len(recs),
            "mae": mae_all,
            "mae_per_group": mae_k.tolist(),
            "bias2": b2_all,
            "bias2_per_group": b2_k.tolist(),
        }
    return out


def write_records_csv(path, records: list[BenchmarkRecord]) -> None:
    """Long-format per-rep results: one row per (record, group)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "rep", "method", "group", "gamma_hat", "gamma_true"])
        for r in records:
            for g in range(r.gamma_hat.shape[0]):
                writer.writerow(
                    [
                        r.scenario_id,
                        r.rep,
                        r.method,
                        g + 1,
                        repr(float(r.gamma_hat[g])),
                        repr(float(r.gamma_true[g])),
                    ]
                )


def write_group_metrics_csv(path, summary: dict) -> None:
    """Per-group table: scenario, method, group, mae_k, bias2_k."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "method", "group", "mae", "bias2"])
        for scenario in sorted(summary):
            for method in sorted(summary[scenario]):
                entry = summary[scenario][method]
                # summaries can carry status keys next to method entries
                if not isinstance(entry, dict) or "mae_per_group" not in entry:
                    continue
                for g, (m, b2) in enumerate(
                    zip(entry["mae_per_group"], entry["bias2_per_group"]), start=1
                ):
                    writer.writerow([scenario, method, g, repr(m), repr(b2)])


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
