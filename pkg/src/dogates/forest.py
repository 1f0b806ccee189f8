"""Regression random forest used for every nuisance function.

A small, self-contained CART ensemble: variance-reduction splits on a
per-node random feature subset, per-tree bootstrap subsampling, leaf
means as predictions. The propensity variant fits the same regression
forest on the 0/1 treatment labels and clamps predictions away from
{0, 1} so inverse weights stay finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _cart
from .seeding import derive_seed

UNLIMITED_DEPTH = 2**31


@dataclass(frozen=True)
class ForestParams:
    """Hyperparameters; `mtry=None` resolves to ceil(p / 3) at fit time."""

    n_trees: int = 200
    max_depth: int | None = None
    min_leaf: int = 5
    mtry: int | None = None
    bootstrap_fraction: float = 1.0
    seed: int = 0

    def resolve_mtry(self, p: int) -> int:
        if self.mtry is None:
            return math.ceil(p / 3)
        return self.mtry

    def reseeded(self, *parts: int | str) -> "ForestParams":
        """Copy with a seed derived from (self.seed, *parts)."""
        return replace(self, seed=derive_seed(self.seed, *parts))


@dataclass
class ForestModel:
    """Fitted ensemble; flat node arrays are shared, immutable state."""

    feat: np.ndarray
    thr: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    offsets: np.ndarray
    params: ForestParams
    p: int


def fit_forest(x, y, params: ForestParams) -> ForestModel:
    """Fit a regression forest; deterministic for a fixed params.seed.

    Parameters
    ----------
    x : array (n, p)
        Covariate matrix.
    y : array (n,)
        Response vector.
    params : ForestParams

    Returns
    -------
    ForestModel
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("x must be a 2-d matrix")
    n, p = x.shape
    if y.shape != (n,):
        raise ValueError(f"y has length {y.shape[0]}, expected {n}")
    if params.n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if params.min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    if n < 2 * params.min_leaf:
        raise ValueError(f"too few rows to fit a forest: n={n}, min_leaf={params.min_leaf}")
    if not (0.0 < params.bootstrap_fraction <= 1.0):
        raise ValueError("bootstrap_fraction must be in (0, 1]")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("non-finite values in forest training data")

    mtry = params.resolve_mtry(p)
    if not 1 <= mtry <= p:
        raise ValueError(f"mtry={mtry} outside [1, {p}]")
    max_depth = UNLIMITED_DEPTH if params.max_depth is None else params.max_depth
    n_boot = math.ceil(params.bootstrap_fraction * n)

    tree_seeds = np.array(
        [derive_seed(params.seed, "tree", t) for t in range(params.n_trees)],
        dtype=np.uint64,
    )
    xt = np.ascontiguousarray(x.T)  # feature-major: split search scans columns
    feat, thr, left, right, value, offsets = _cart.build_forest(
        xt, y, tree_seeds, n_boot, params.min_leaf, max_depth, mtry
    )
    return ForestModel(feat, thr, left, right, value, offsets, params, p)


def predict_forest(model: ForestModel, x, n_trees: int | None = None) -> np.ndarray:
    """Mean over the first `n_trees` trees (all by default); pure."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.p:
        raise ValueError(f"query matrix has {x.shape[-1] if x.ndim == 2 else '?'} columns, model expects {model.p}")
    t = model.params.n_trees if n_trees is None else n_trees
    if not 1 <= t <= model.params.n_trees:
        raise ValueError("n_trees outside the fitted ensemble")
    return _cart.predict_mean(
        x, model.feat, model.thr, model.left, model.right, model.value, model.offsets, t
    )


def predict_per_tree(model: ForestModel, x) -> np.ndarray:
    """Per-tree prediction matrix (n_trees, m); used by ensemble-growth checks."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.p:
        raise ValueError("column count mismatch")
    return _cart.predict_per_tree(
        x, model.feat, model.thr, model.left, model.right, model.value,
        model.offsets, model.params.n_trees,
    )


@dataclass
class PropensityModel:
    forest: ForestModel
    clip: float


def fit_propensity(x, d, params: ForestParams, clip: float = 0.01) -> PropensityModel:
    """Probability forest for P(D=1 | X): regression on the binary labels.

    Predictions are clamped to [clip, 1 - clip].
    """
    d = np.asarray(d)
    if not (0.0 < clip < 0.5):
        raise ValueError("clip must be in (0, 0.5)")
    uniq = np.unique(d)
    if not np.isin(uniq, (0, 1)).all():
        raise ValueError("treatment labels must be 0/1")
    if uniq.size < 2:
        raise ValueError("treatment labels are single-class; cannot fit a propensity model")
    forest = fit_forest(x, d.astype(np.float64), params)
    return PropensityModel(forest, clip)


def predict_propensity(model: PropensityModel, x) -> np.ndarray:
    raw = predict_forest(model.forest, x)
    return np.clip(raw, model.clip, 1.0 - model.clip)
