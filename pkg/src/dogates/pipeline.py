"""Cross-fitted group average treatment effect estimation.

One split: fit nuisances on the auxiliary half, build doubly-robust
pseudo-outcomes there, learn an effect proxy, predict it out-of-sample on
the main half, group by proxy quantiles, and project residualized
outcomes on group indicators. `run_dogates` repeats this over B random
splits and median-aggregates coefficients, p-values, and intervals, while
collecting every out-of-sample proxy prediction into a per-observation
ensemble (used by the quantile benchmark and the bagging diagnostics).

Group labels are 1-based everywhere, matching the reported names.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import Dataset, SplitPlan, make_split, require_valid
from .errors import (
    DogatesError,
    NoHeterogeneityError,
    NoTreatmentVariationError,
    OverlapError,
)
from .forest import (
    ForestModel,
    ForestParams,
    PropensityModel,
    fit_forest,
    fit_propensity,
    predict_forest,
    predict_propensity,
)
from .linreg import wls
from .seeding import derive_seed

logger = logging.getLogger(__name__)

TRIM_LO_DEFAULT = 0.02
TRIM_HI_DEFAULT = 0.95
CLOSED_FORM_TOL = 1e-10
SMALL_GROUP_WARN = 10
MAX_SKIP_FRACTION = 0.2

MODES = ("rct", "observational", "baseline_y0")


@dataclass(frozen=True)
class NuisanceFit:
    """Cross-fitted nuisance models, all trained on aux rows only."""

    g0: ForestModel
    g1: ForestModel
    e_model: PropensityModel
    mu_model: ForestModel
    split: SplitPlan


@dataclass(frozen=True)
class DrScores:
    """Raw pseudo-outcomes on aux and proxy predictions on main."""

    s_hat: np.ndarray
    s_tilde: np.ndarray
    proxy_model: ForestModel


@dataclass(frozen=True)
class GroupAssignment:
    k: int
    cuts: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class GatesResult:
    mode: str
    k: int
    b: int
    alpha: float
    gamma_per_split: np.ndarray
    se_per_split: np.ndarray
    p_per_split: np.ndarray
    ci_low_per_split: np.ndarray
    ci_high_per_split: np.ndarray
    gamma_median: np.ndarray
    p_adjusted: np.ndarray
    ci_median_low: np.ndarray
    ci_median_high: np.ndarray
    split_seeds: tuple[int, ...]
    skipped: tuple[tuple[int, str], ...]
    audit: tuple[dict, ...] = field(repr=False)

    @property
    def b_completed(self) -> int:
        return self.gamma_per_split.shape[0]


@dataclass(frozen=True)
class CateEnsemble:
    """Per-observation out-of-sample proxy estimates across splits."""

    estimates: tuple[tuple[float, ...], ...]
    s_bar: np.ndarray
    # (evaluation rows, predictions) pairs in completed-split order; empty
    # when the ensemble was rebuilt from aggregates rather than a run
    per_split: tuple[tuple[np.ndarray, np.ndarray], ...] = ()

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(e) for e in self.estimates], dtype=np.int64)

    @classmethod
    def from_split_predictions(cls, n: int, per_split) -> "CateEnsemble":
        """per_split: iterable of (main index array, prediction array)."""
        pairs = tuple(
            (np.asarray(idx, dtype=np.int64), np.asarray(v, dtype=np.float64))
            for idx, v in per_split
        )
        bags: list[list[float]] = [[] for _ in range(n)]
        for idx, values in pairs:
            for i, v in zip(idx, values):
                bags[int(i)].append(float(v))
        s_bar = np.array(
            [np.median(b) if b else np.nan for b in bags], dtype=np.float64
        )
        return cls(tuple(tuple(b) for b in bags), s_bar, pairs)


def trim_overlap(
    data: Dataset,
    e_hat,
    lo: float = TRIM_LO_DEFAULT,
    hi: float = TRIM_HI_DEFAULT,
) -> np.ndarray:
    """Indices with lo <= e_hat <= hi; errors if an arm disappears."""
    e_hat = np.asarray(e_hat, dtype=np.float64)
    if e_hat.shape != (data.n,):
        raise ValueError("e_hat length must match the dataset")
    if not (0.0 <= lo < hi <= 1.0):
        raise ValueError("trim bounds must satisfy 0 <= lo < hi <= 1")
    retained = np.flatnonzero((e_hat >= lo) & (e_hat <= hi))
    dropped = data.n - retained.size
    if dropped:
        logger.info("overlap trimming dropped %d of %d rows", dropped, data.n)
    d_kept = data.d[retained]
    # an arm counts as lost only if it existed before trimming
    lost_treated = bool((data.d == 1).any()) and not (d_kept == 1).any()
    lost_control = bool((data.d == 0).any()) and not (d_kept == 0).any()
    if retained.size == 0 or lost_treated or lost_control:
        raise OverlapError(
            "overlap violation: trimming removed an entire treatment arm "
            f"({retained.size} of {data.n} rows retained)"
        )
    return retained


def fit_nuisances(
    data: Dataset,
    split: SplitPlan,
    params: ForestParams,
    clip: float = 0.01,
) -> NuisanceFit:
    """Fit g0, g1, e, mu on the auxiliary half.

    Model seeds derive from (params.seed, split.seed, role) so refits are
    reproducible and the two outcome arms never share a tree stream.
    """
    aux = split.aux_idx
    x_aux = data.x[aux]
    y_aux = data.y[aux]
    d_aux = data.d[aux]
    control = d_aux == 0
    treated = d_aux == 1
    if not control.any() or not treated.any():
        raise OverlapError("auxiliary sample is missing a treatment arm")
    # each arm gets its own outcome forest, which needs 2*min_leaf rows
    min_rows = 2 * params.min_leaf
    if control.sum() < min_rows or treated.sum() < min_rows:
        raise OverlapError(
            "auxiliary sample has a treatment arm too small to fit "
            f"(need {min_rows} rows per arm)"
        )
    g0 = fit_forest(x_aux[control], y_aux[control], params.reseeded(split.seed, "g0"))
    g1 = fit_forest(x_aux[treated], y_aux[treated], params.reseeded(split.seed, "g1"))
    e_model = fit_propensity(x_aux, d_aux, params.reseeded(split.seed, "e"), clip=clip)
    mu_model = fit_forest(x_aux, y_aux, params.reseeded(split.seed, "mu"))
    return NuisanceFit(g0=g0, g1=g1, e_model=e_model, mu_model=mu_model, split=split)


def dr_pseudo_outcomes(y, d, g0_hat, g1_hat, e_hat) -> np.ndarray:
    """Doubly-robust pseudo-outcomes.

    S_i = g1 - g0 + d (y - g1) / e - (1 - d) (y - g0) / (1 - e),
    elementwise; consistent for the effect if either the outcome models
    or the propensity model is correct.
    """
    y = np.asarray(y, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    g0_hat = np.asarray(g0_hat, dtype=np.float64)
    g1_hat = np.asarray(g1_hat, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    if ((e_hat <= 0.0) | (e_hat >= 1.0)).any():
        raise ValueError("e_hat must lie strictly inside (0, 1); clamp or trim first")
    return (
        g1_hat
        - g0_hat
        + d * (y - g1_hat) / e_hat
        - (1.0 - d) * (y - g0_hat) / (1.0 - e_hat)
    )


def baseline_y0_scores(y, d, g0_hat, e_hat) -> np.ndarray:
    """Doubly-robust baseline-outcome scores g0 + (1-d)(y-g0)/(1-e)."""
    y = np.asarray(y, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    g0_hat = np.asarray(g0_hat, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    if ((e_hat <= 0.0) | (e_hat >= 1.0)).any():
        raise ValueError("e_hat must lie strictly inside (0, 1); clamp or trim first")
    return g0_hat + (1.0 - d) * (y - g0_hat) / (1.0 - e_hat)


def fit_cate_proxy(x_aux, s_hat_aux, params: ForestParams) -> ForestModel:
    """Regress aux pseudo-outcomes on aux covariates (the proxy l-hat)."""
    return fit_forest(x_aux, s_hat_aux, params)


def assign_groups(scores, k: int) -> GroupAssignment:
    """Balanced quantile groups by stable rank; labels are 1..k.

    Sorted positions are cut at floor(g*n/k), so group sizes differ by at
    most one; ties keep original index order (stable sort).
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"cannot form {k} groups from {n} scores")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if k > 1 and scores.min() == scores.max():
        raise NoHeterogeneityError("no heterogeneity in scores")
    order = np.argsort(scores, kind="mergesort")
    labels = np.empty(n, dtype=np.int64)
    for g in range(1, k + 1):
        lo = ((g - 1) * n) // k
        hi = (g * n) // k
        labels[order[lo:hi]] = g
    cuts = np.quantile(scores, np.arange(1, k) / k)
    return GroupAssignment(k=k, cuts=cuts, labels=labels)


def horvitz_thompson(d, e_hat) -> np.ndarray:
    """H = (d - e) / (e (1 - e)); mean-zero given X when e is correct."""
    d = np.asarray(d, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    if ((e_hat <= 0.0) | (e_hat >= 1.0)).any():
        raise ValueError("e_hat must lie strictly inside (0, 1)")
    return (d - e_hat) / (e_hat * (1.0 - e_hat))


def _check_groups(labels: np.ndarray, k: int) -> None:
    sizes = np.bincount(labels, minlength=k + 1)[1:]
    empty = np.flatnonzero(sizes < 2) + 1
    if empty.size:
        raise DogatesError(
            f"group(s) {empty.tolist()} have fewer than 2 observations"
        )
    small = np.flatnonzero(sizes < SMALL_GROUP_WARN) + 1
    if small.size:
        warnings.warn(
            f"group(s) {small.tolist()} have fewer than {SMALL_GROUP_WARN} "
            "observations; estimates will be noisy",
            stacklevel=2,
        )


def gates_rct(y, d, e_hat, baseline_hat, groups: GroupAssignment, alpha: float = 0.05):
    """Weighted projection for randomized designs.

    Regresses y*H on [H, baseline*H] plus the K group indicators with unit
    weights, H being the Horvitz-Thompson transform; returns the indicator
    coefficients with robust standard errors and p-values.
    """
    y = np.asarray(y, dtype=np.float64)
    baseline_hat = np.asarray(baseline_hat, dtype=np.float64)
    k = groups.k
    _check_groups(groups.labels, k)
    h = horvitz_thompson(d, e_hat)
    n = y.shape[0]
    design = np.empty((n, 2 + k))
    design[:, 0] = h
    design[:, 1] = baseline_hat * h
    for g in range(1, k + 1):
        design[:, 1 + g] = (groups.labels == g).astype(np.float64)
    names = ["ht", "baseline_x_ht"] + [f"group_{g}" for g in range(1, k + 1)]
    fit = wls(design, y * h, np.ones(n), alpha=alpha, column_names=names)
    return fit.coef[2:], fit.se[2:], fit.p_values[2:], fit


def gates_orthogonal(y, d, mu_hat, e_hat, groups: GroupAssignment, alpha: float = 0.05):
    """Orthogonal projection: regress U = y - mu on {V * 1(group=g)}.

    V = d - e. The design is block-diagonal across groups, so each OLS
    coefficient must equal the per-group ratio sum(V U)/sum(V^2); both are
    computed and cross-checked to 1e-10.
    """
    y = np.asarray(y, dtype=np.float64)
    mu_hat = np.asarray(mu_hat, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    k = groups.k
    _check_groups(groups.labels, k)
    u = y - mu_hat
    v = d - e_hat
    n = y.shape[0]
    design = np.empty((n, k))
    closed = np.empty(k)
    for g in range(1, k + 1):
        mask = groups.labels == g
        vv = float(v[mask] @ v[mask])
        if vv == 0.0:
            raise NoTreatmentVariationError(f"no treatment variation in group {g}")
        closed[g - 1] = float(v[mask] @ u[mask]) / vv
        design[:, g - 1] = np.where(mask, v, 0.0)
    names = [f"v_x_group_{g}" for g in range(1, k + 1)]
    fit = wls(design, u, np.ones(n), alpha=alpha, column_names=names)
    gap = np.abs(fit.coef - closed).max()
    if gap > CLOSED_FORM_TOL * max(1.0, np.abs(closed).max()):
        raise RuntimeError(
            f"orthogonal projection left its closed form by {gap:.3e}"
        )
    return fit.coef, fit.se, fit.p_values, fit


def gates_orthogonal_closed_form(u, v, labels, k: int) -> np.ndarray:
    """Per-group ratio sum(V U)/sum(V^2); reference for the OLS route."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = np.empty(k)
    for g in range(1, k + 1):
        mask = labels == g
        vv = float(v[mask] @ v[mask])
        if vv == 0.0:
            raise NoTreatmentVariationError(f"no treatment variation in group {g}")
        out[g - 1] = float(v[mask] @ u[mask]) / vv
    return out


def gates_baseline_y0(y, d, mu_hat, e_hat, y0_scores, k: int, alpha: float = 0.05):
    """Orthogonal projection with groups cut on baseline-outcome scores."""
    groups = assign_groups(y0_scores, k)
    gamma, se, p, fit = gates_orthogonal(y, d, mu_hat, e_hat, groups, alpha)
    return gamma, se, p, fit, groups


@dataclass(frozen=True)
class _SplitOutcome:
    index: int
    seed: int
    gamma: np.ndarray
    se: np.ndarray
    p: np.ndarray
    main_used: np.ndarray
    s_tilde: np.ndarray
    audit: dict


def _run_single_split(
    data: Dataset,
    index: int,
    master_seed: int,
    k: int,
    mode: str,
    params: ForestParams,
    trim_lo: float,
    trim_hi: float,
    clip: float,
    alpha: float,
) -> _SplitOutcome:
    split_seed = derive_seed(master_seed, "split", index)
    split = make_split(data.n, split_seed)
    nuis = fit_nuisances(data, split, params, clip=clip)
    e_all = predict_propensity(nuis.e_model, data.x)
    retained = trim_overlap(data, e_all, trim_lo, trim_hi)
    keep = np.zeros(data.n, dtype=bool)
    keep[retained] = True
    aux_t = split.aux_idx[keep[split.aux_idx]]
    main_t = split.main_idx[keep[split.main_idx]]
    if aux_t.size < 2 * k or main_t.size < 2 * k:
        raise OverlapError(
            f"too few rows after trimming: aux={aux_t.size}, main={main_t.size}"
        )

    g0_aux = predict_forest(nuis.g0, data.x[aux_t])
    g1_aux = predict_forest(nuis.g1, data.x[aux_t])
    s_hat = dr_pseudo_outcomes(
        data.y[aux_t], data.d[aux_t], g0_aux, g1_aux, e_all[aux_t]
    )
    proxy = fit_cate_proxy(data.x[aux_t], s_hat, params.reseeded(split_seed, "proxy"))
    scores = DrScores(
        s_hat=s_hat,
        s_tilde=predict_forest(proxy, data.x[main_t]),
        proxy_model=proxy,
    )
    s_tilde = scores.s_tilde

    if mode == "rct":
        groups = assign_groups(s_tilde, k)
        baseline_main = predict_forest(nuis.g0, data.x[main_t])
        gamma, se, p, _ = gates_rct(
            data.y[main_t], data.d[main_t], e_all[main_t], baseline_main, groups, alpha
        )
    elif mode == "observational":
        groups = assign_groups(s_tilde, k)
        mu_main = predict_forest(nuis.mu_model, data.x[main_t])
        gamma, se, p, _ = gates_orthogonal(
            data.y[main_t], data.d[main_t], mu_main, e_all[main_t], groups, alpha
        )
    elif mode == "baseline_y0":
        g0_for_y0 = baseline_y0_scores(
            data.y[aux_t], data.d[aux_t], g0_aux, e_all[aux_t]
        )
        proxy_y0 = fit_forest(
            data.x[aux_t], g0_for_y0, params.reseeded(split_seed, "proxy_y0")
        )
        y0_tilde = predict_forest(proxy_y0, data.x[main_t])
        mu_main = predict_forest(nuis.mu_model, data.x[main_t])
        gamma, se, p, _, groups = gates_baseline_y0(
            data.y[main_t], data.d[main_t], mu_main, e_all[main_t], y0_tilde, k, alpha
        )
    else:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")

    audit = {
        "split_index": index,
        "split_seed": split_seed,
        "train_idx": split.aux_idx,
        "eval_idx": split.main_idx,
        "train_used": aux_t,
        "eval_used": main_t,
        "n_trimmed": int(data.n - retained.size),
        "group_sizes": np.bincount(groups.labels, minlength=k + 1)[1:].tolist(),
    }
    return _SplitOutcome(index, split_seed, gamma, se, p, main_t, s_tilde, audit)


def _split_worker(args) -> tuple[int, _SplitOutcome | None, str | None]:
    data, index, master_seed, k, mode, params, trim_lo, trim_hi, clip, alpha = args
    try:
        out = _run_single_split(
            data, index, master_seed, k, mode, params, trim_lo, trim_hi, clip, alpha
        )
        return index, out, None
    except DogatesError as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


def run_dogates(
    data: Dataset,
    k: int = 5,
    b: int = 100,
    mode: str = "observational",
    params: ForestParams | None = None,
    trim_lo: float = TRIM_LO_DEFAULT,
    trim_hi: float = TRIM_HI_DEFAULT,
    clip: float = 0.01,
    seed: int = 0,
    alpha: float = 0.05,
    n_workers: int = 1,
) -> tuple[GatesResult, CateEnsemble]:
    """Estimate group effects over b random splits and median-aggregate.

    Per-split seeds derive from (seed, split index), so any worker count
    returns bit-identical results. Splits that raise a DogatesError are
    recorded and skipped; more than 20% skipped aborts the run.

    Returns
    -------
    (GatesResult, CateEnsemble)
        Aggregated coefficients with split-adjusted inference, and the
        per-observation collection of out-of-sample proxy estimates.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if b < 1:
        raise ValueError("b must be >= 1")
    if not (0.0 <= trim_lo < trim_hi <= 1.0):
        raise ValueError("trim bounds must satisfy 0 <= lo < hi <= 1")
    require_valid(data, k)
    if params is None:
        params = ForestParams(seed=seed)

    tasks = [
        (data, i, seed, k, mode, params, trim_lo, trim_hi, clip, alpha)
        for i in range(b)
    ]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_split_worker, tasks))
    else:
        results = [_split_worker(t) for t in tasks]

    outcomes = [out for _, out, err in results if err is None]
    skipped = tuple((i, err) for i, _, err in results if err is not None)
    for i, err in skipped:
        logger.warning("split %d skipped: %s", i, err)
    if len(skipped) > MAX_SKIP_FRACTION * b:
        raise DogatesError(
            f"{len(skipped)} of {b} splits failed: "
            + "; ".join(f"[{i}] {e}" for i, e in skipped[:5])
        )

    gamma = np.vstack([o.gamma for o in outcomes])
    se = np.vstack([o.se for o in outcomes])
    p = np.vstack([o.p for o in outcomes])
    zc = stats.norm.ppf(1.0 - alpha / 2.0)
    ci_low = gamma - zc * se
    ci_high = gamma + zc * se
    result = GatesResult(
        mode=mode,
        k=k,
        b=b,
        alpha=alpha,
        gamma_per_split=gamma,
        se_per_split=se,
        p_per_split=p,
        ci_low_per_split=ci_low,
        ci_high_per_split=ci_high,
        gamma_median=np.median(gamma, axis=0),
        p_adjusted=np.minimum(1.0, 2.0 * np.median(p, axis=0)),
        ci_median_low=np.median(ci_low, axis=0),
        ci_median_high=np.median(ci_high, axis=0),
        split_seeds=tuple(o.seed for o in outcomes),
        skipped=skipped,
        audit=tuple(o.audit for o in outcomes),
    )
    ensemble = CateEnsemble.from_split_predictions(
        data.n, ((o.main_used, o.s_tilde) for o in outcomes)
    )
    return result, ensemble


def run_benchmark_cate_quantiles(ensemble: CateEnsemble, k: int) -> np.ndarray:
    """Group the median proxy estimates by their own quantiles; group means.

    This is the benchmark estimator the study compares against. Constant
    medians fall back to K=1 reporting: the constant for every group.
    """
    s_bar = ensemble.s_bar
    if np.isnan(s_bar).any():
        missing = int(np.isnan(s_bar).sum())
        raise ValueError(
            f"{missing} observations have no out-of-sample estimate; "
            "increase b or restrict to covered rows"
        )
    try:
        groups = assign_groups(s_bar, k)
    except NoHeterogeneityError:
        logger.warning("no heterogeneity in median estimates; K=1 fallback")
        return np.full(k, float(s_bar[0]))
    return np.array([s_bar[groups.labels == g].mean() for g in range(1, k + 1)])
