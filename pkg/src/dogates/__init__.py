"""Doubly-robust, Neyman-orthogonal estimation of sorted group average
treatment effects, with a Monte Carlo benchmarking harness."""

__version__ = "0.1.0"

from .data import (
    Dataset,
    SimulatedDataset,
    SplitPlan,
    as_dataset,
    make_split,
    read_dataset_csv,
    require_valid,
    validate_dataset,
    write_dataset_csv,
)
from .errors import (
    DataValidationError,
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
    predict_per_tree,
    predict_propensity,
)
from .linreg import WlsFit, wls
from .metrics import (
    BenchmarkRecord,
    bias2,
    mae,
    summarize,
    true_group_effects,
)
from .pipeline import (
    CateEnsemble,
    DrScores,
    GatesResult,
    GroupAssignment,
    NuisanceFit,
    assign_groups,
    baseline_y0_scores,
    dr_pseudo_outcomes,
    fit_cate_proxy,
    fit_nuisances,
    gates_orthogonal,
    gates_orthogonal_closed_form,
    gates_rct,
    horvitz_thompson,
    run_benchmark_cate_quantiles,
    run_dogates,
    trim_overlap,
)
from .seeding import derive_seed, rng_for
from .simulation import (
    SCENARIOS,
    ScenarioConfig,
    gen_correlated_covariates,
    gen_scenario,
    scenario_config,
)

__all__ = [
    "__version__",
    "Dataset",
    "SimulatedDataset",
    "SplitPlan",
    "as_dataset",
    "make_split",
    "read_dataset_csv",
    "require_valid",
    "validate_dataset",
    "write_dataset_csv",
    "DataValidationError",
    "DogatesError",
    "NoHeterogeneityError",
    "NoTreatmentVariationError",
    "OverlapError",
    "ForestModel",
    "ForestParams",
    "PropensityModel",
    "fit_forest",
    "fit_propensity",
    "predict_forest",
    "predict_per_tree",
    "predict_propensity",
    "WlsFit",
    "wls",
    "BenchmarkRecord",
    "bias2",
    "mae",
    "summarize",
    "true_group_effects",
    "CateEnsemble",
    "DrScores",
    "GatesResult",
    "GroupAssignment",
    "NuisanceFit",
    "assign_groups",
    "baseline_y0_scores",
    "dr_pseudo_outcomes",
    "fit_cate_proxy",
    "fit_nuisances",
    "gates_orthogonal",
    "gates_orthogonal_closed_form",
    "gates_rct",
    "horvitz_thompson",
    "run_benchmark_cate_quantiles",
    "run_dogates",
    "trim_overlap",
    "derive_seed",
    "rng_for",
    "SCENARIOS",
    "ScenarioConfig",
    "gen_correlated_covariates",
    "gen_scenario",
    "scenario_config",
]
