"""Tabular containers, deterministic sample splitting, and CSV I/O.

Datasets hold an outcome vector ``y``, a binary treatment vector ``d`` and
a covariate matrix ``x``. Covariates are named ``x1..xp`` (1-based, the
convention every external surface of this package uses); simulated data
additionally carries the generating truth so estimators can be scored.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import DataValidationError

TRUTH_COLUMNS = ("tau_true", "e_true", "y0", "y1")


@dataclass(frozen=True)
class Dataset:
    """Observed data: outcome, 0/1 treatment, covariates."""

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    feature_names: tuple[str, ...] | None = None

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def names(self) -> tuple[str, ...]:
        if self.feature_names is not None:
            return self.feature_names
        return tuple(f"x{j + 1}" for j in range(self.p))


@dataclass(frozen=True)
class SimulatedDataset:
    """Observed view plus the generating truth.

    `base.x` may have a column dropped (misspecified scenarios) while the
    truth vectors always refer to the full generating process.
    """

    base: Dataset
    tau_true: np.ndarray
    e_true: np.ndarray
    y0: np.ndarray
    y1: np.ndarray


@dataclass(frozen=True)
class SplitPlan:
    """Disjoint half-partition into auxiliary and main index sets."""

    aux_idx: np.ndarray
    main_idx: np.ndarray
    seed: int


def as_dataset(y, d, x, feature_names=None) -> Dataset:
    """Coerce arrays to canonical dtypes without validating content."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    d = np.ascontiguousarray(d, dtype=np.int64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if feature_names is not None:
        feature_names = tuple(str(c) for c in feature_names)
    return Dataset(y, d, x, feature_names)


def validate_dataset(data: Dataset, k: int | None = None) -> list[str]:
    """Collect every invariant violation; an empty list means valid.

    Report-only: callers decide which violations are fatal. Row numbers in
    messages are 1-based to match CSV reading order.
    """
    report: list[str] = []
    n = data.y.shape[0]
    if data.d.shape[0] != n:
        report.append(f"d has length {data.d.shape[0]}, expected {n}")
    if data.x.ndim != 2:
        report.append("x is not a 2-d matrix")
        return report
    if data.x.shape[0] != n:
        report.append(f"x has {data.x.shape[0]} rows, expected {n}")
    if data.feature_names is not None and len(data.feature_names) != data.x.shape[1]:
        report.append(
            f"{len(data.feature_names)} feature names for {data.x.shape[1]} columns"
        )
    if k is not None and n < 2 * k:
        report.append(f"N={n} is below 2K={2 * k}; grouping into {k} groups infeasible")

    bad_d = ~np.isin(data.d, (0, 1))
    if bad_d.any():
        rows = np.flatnonzero(bad_d)[:5] + 1
        report.append(f"d contains values outside {{0,1}} at rows {rows.tolist()}")
    else:
        if data.d.shape[0] == n:
            if not (data.d == 0).any():
                report.append("no control observations (d is all 1)")
            if not (data.d == 1).any():
                report.append("no treated observations (d is all 0)")

    bad_y = ~np.isfinite(data.y)
    if bad_y.any():
        rows = np.flatnonzero(bad_y)[:5] + 1
        report.append(f"y is non-finite at rows {rows.tolist()}")
    if data.x.shape[0] == n:
        bad_x = ~np.isfinite(data.x)
        if bad_x.any():
            names = data.names()
            locs = np.argwhere(bad_x)[:5]
            where = ", ".join(f"row {r + 1} column {names[c]}" for r, c in locs)
            report.append(f"x is non-finite at {where}")
    return report


def require_valid(data: Dataset, k: int | None = None) -> None:
    """Raise DataValidationError if validate_dataset finds anything."""
    report = validate_dataset(data, k)
    if report:
        raise DataValidationError(report)


def make_split(n: int, seed: int) -> SplitPlan:
    """Uniformly random half-partition of range(n), fixed by seed.

    The auxiliary half gets floor(n/2) indices, so halves differ by at
    most one element. Index sets are returned sorted.
    """
    if n < 4:
        raise ValueError(f"sample too small to split: n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_aux = n // 2
    aux = np.sort(perm[:n_aux])
    main = np.sort(perm[n_aux:])
    return SplitPlan(aux, main, int(seed))


def _xcol_order(columns) -> list[str]:
    xcols = [c for c in columns if c.startswith("x") and c[1:].isdigit()]
    return sorted(xcols, key=lambda c: int(c[1:]))


def read_dataset_csv(path) -> Dataset | SimulatedDataset:
    """Read a dataset CSV (header y, d, x1..xp, optional truth columns).

    Covariate columns are any named x<number>; they are ordered by number
    so a dropped column (e.g. a file without x2) is preserved as-is. When
    all of tau_true/e_true/y0/y1 are present the result is a
    SimulatedDataset, otherwise a plain Dataset.
    """
    # round_trip: repr-written floats must parse back to the same bits
    frame = pd.read_csv(path, float_precision="round_trip")
    violations = []
    for col in ("y", "d"):
        if col not in frame.columns:
            violations.append(f"missing required column {col}")
    xcols = _xcol_order(frame.columns)
    if not xcols:
        violations.append("no covariate columns x1..xp found")
    if violations:
        raise DataValidationError(violations)

    d_raw = frame["d"].to_numpy()
    d_float = np.asarray(d_raw, dtype=np.float64)
    if not np.isfinite(d_float).all() or not (d_float == np.round(d_float)).all():
        raise DataValidationError(["column d must hold integers 0/1"])
    data = as_dataset(
        frame["y"].to_numpy(dtype=np.float64),
        d_float.astype(np.int64),
        frame[xcols].to_numpy(dtype=np.float64),
        feature_names=xcols,
    )

    present = [c for c in TRUTH_COLUMNS if c in frame.columns]
    if not present:
        return data
    if len(present) < len(TRUTH_COLUMNS):
        missing = sorted(set(TRUTH_COLUMNS) - set(present))
        raise DataValidationError(
            [f"truth columns incomplete: found {present}, missing {missing}"]
        )
    return SimulatedDataset(
        base=data,
        tau_true=frame["tau_true"].to_numpy(dtype=np.float64),
        e_true=frame["e_true"].to_numpy(dtype=np.float64),
        y0=frame["y0"].to_numpy(dtype=np.float64),
        y1=frame["y1"].to_numpy(dtype=np.float64),
    )


def write_dataset_csv(path, data: Dataset | SimulatedDataset) -> None:
    """Write a dataset as CSV with full round-trip float precision."""
    if isinstance(data, SimulatedDataset):
        base = data.base
        extra = [
            ("tau_true", data.tau_true),
            ("e_true", data.e_true),
            ("y0", data.y0),
            ("y1", data.y1),
        ]
    else:
        base = data
        extra = []
    names = base.names()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "d", *names, *(name for name, _ in extra)])
        for i in range(base.n):
            row = [repr(float(base.y[i])), str(int(base.d[i]))]
            row.extend(repr(float(v)) for v in base.x[i])
            row.extend(repr(float(vec[i])) for _, vec in extra)
            writer.writerow(row)
