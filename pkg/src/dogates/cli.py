"""Command-line interface: estimate, simulate, benchmark, report.

Bundles are written deterministically: JSON is key-sorted with repr-exact
floats, CSVs use round-trip float formatting, and nothing derived from
wall-clock, worker count, or output location enters a result file (those
live in timings.json). Rerunning a command with the same inputs and seed
reproduces every result byte for byte, regardless of parallelism.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np

from . import __version__
from .data import (
    SimulatedDataset,
    read_dataset_csv,
    write_dataset_csv,
)
from .errors import DataValidationError, DogatesError
from .forest import ForestParams
from .metrics import (
    BenchmarkRecord,
    summarize,
    true_group_effects,
    write_group_metrics_csv,
    write_records_csv,
    write_summary_json,
)
from .pipeline import (
    MODES,
    CateEnsemble,
    run_benchmark_cate_quantiles,
    run_dogates,
)
from .seeding import derive_seed
from .simulation import SCENARIOS, gen_scenario, scenario_config

FORMAT_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines an estimation result."""

    mode: str = "observational"
    k: int = 5
    b: int = 100
    trim_lo: float = 0.02
    trim_hi: float = 0.95
    alpha: float = 0.05
    clip: float = 0.01
    n_trees: int = 200
    max_depth: int | None = None
    min_leaf: int = 5
    mtry: int | None = None
    bootstrap_fraction: float = 1.0
    seed: int = 0

    def forest_params(self) -> ForestParams:
        return ForestParams(
            n_trees=self.n_trees,
            max_depth=self.max_depth,
            min_leaf=self.min_leaf,
            mtry=self.mtry,
            bootstrap_fraction=self.bootstrap_fraction,
            seed=self.seed,
        )


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract reserves 2 for data
    # validation, so route usage problems through our own exception
    def error(self, message):
        raise _UsageError(message)


def _json_dump(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _float_list(vec) -> list[float]:
    return [float(v) for v in np.asarray(vec).ravel()]


def _float_matrix(mat) -> list[list[float]]:
    return [[float(v) for v in row] for row in np.asarray(mat)]


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _resolve_workers(flag_value) -> int:
    if flag_value is not None:
        return max(1, int(flag_value))
    env = os.environ.get("DOGATES_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise _UsageError(f"DOGATES_WORKERS is not an integer: {env!r}") from exc
    return 1


def _add_forest_flags(sub) -> None:
    sub.add_argument("--trees", type=int, default=200, help="trees per forest")
    sub.add_argument("--min-leaf", type=int, default=5, help="minimum rows per leaf")
    sub.add_argument("--mtry", type=int, default=None, help="features tried per split (default ceil(p/3))")
    sub.add_argument("--max-depth", type=int, default=None, help="tree depth cap (default unlimited)")
    sub.add_argument("--bootstrap-fraction", type=float, default=1.0)
    sub.add_argument("--clip", type=float, default=0.01, help="propensity clamp distance from {0,1}")


def _add_run_flags(sub, default_b: int) -> None:
    sub.add_argument("--k", type=int, default=5, help="number of effect groups")
    sub.add_argument("--b", type=int, default=default_b, help="number of random splits")
    sub.add_argument("--seed", type=int, default=0, help="master seed")
    sub.add_argument("--trim-lo", type=float, default=0.02)
    sub.add_argument("--trim-hi", type=float, default=0.95)
    sub.add_argument("--alpha", type=float, default=0.05, help="CI significance level")
    sub.add_argument("--workers", type=int, default=None, help="worker processes (or env DOGATES_WORKERS)")
    _add_forest_flags(sub)


def build_parser() -> _Parser:
    parser = _Parser(prog="dogates", description="Group average treatment effects with doubly-robust scores")
    sub = parser.add_subparsers(dest="command", metavar="command")

    est = sub.add_parser("estimate", help="estimate group effects from a CSV dataset")
    est.add_argument("--data", required=True, help="input CSV (columns y, d, x1..xp)")
    est.add_argument("--mode", choices=MODES, default="observational")
    est.add_argument("--out", required=True, help="output bundle directory")
    _add_run_flags(est, default_b=100)

    sim = sub.add_parser("simulate", help="generate one scenario repetition as CSV")
    sim.add_argument("--scenario", required=True, help="scenario id A..L")
    sim.add_argument("--n", type=int, default=2000)
    sim.add_argument("--p", type=int, default=20)
    sim.add_argument("--seed", type=int, default=0, help="repetition seed (noise and draws)")
    sim.add_argument("--covariate-seed", type=int, default=None, help="override the fixed per-scenario covariate seed")
    sim.add_argument("--c", type=float, default=None, help="override P(D=1) for random-assignment scenarios")
    sim.add_argument("--out", required=True, help="output CSV path")

    ben = sub.add_parser("benchmark", help="Monte Carlo comparison against the quantile benchmark")
    ben.add_argument("--scenarios", required=True, help="comma list of A..L, or 'all'")
    ben.add_argument("--n", type=int, default=2000)
    ben.add_argument("--p", type=int, default=20)
    ben.add_argument("--reps", type=int, default=20, help="Monte Carlo repetitions per scenario")
    ben.add_argument("--out", required=True, help="output bundle directory")
    _add_run_flags(ben, default_b=50)

    rep = sub.add_parser("report", help="export figure data from a result bundle")
    rep.add_argument("--in", dest="in_dir", required=True, help="bundle directory")
    rep.add_argument("--out", dest="out_dir", default=None, help="output directory (default: the bundle)")
    return parser


def _run_config_from_args(args) -> RunConfig:
    return RunConfig(
        mode=getattr(args, "mode", "observational"),
        k=args.k,
        b=args.b,
        trim_lo=args.trim_lo,
        trim_hi=args.trim_hi,
        alpha=args.alpha,
        clip=args.clip,
        n_trees=args.trees,
        max_depth=args.max_depth,
        min_leaf=args.min_leaf,
        mtry=args.mtry,
        bootstrap_fraction=args.bootstrap_fraction,
        seed=args.seed,
    )


def _write_estimate_bundle(out_dir, config: RunConfig, result, ensemble: CateEnsemble,
                           tau_true=None, input_path=None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    gates = {
        "format_version": FORMAT_VERSION,
        "mode": result.mode,
        "k": result.k,
        "alpha": result.alpha,
        "b_requested": result.b,
        "b_completed": result.b_completed,
        "gamma_median": _float_list(result.gamma_median),
        "p_adjusted": _float_list(result.p_adjusted),
        "ci_median_low": _float_list(result.ci_median_low),
        "ci_median_high": _float_list(result.ci_median_high),
        "gamma_per_split": _float_matrix(result.gamma_per_split),
        "se_per_split": _float_matrix(result.se_per_split),
        "p_per_split": _float_matrix(result.p_per_split),
        "ci_low_per_split": _float_matrix(result.ci_low_per_split),
        "ci_high_per_split": _float_matrix(result.ci_high_per_split),
        "split_seeds": [int(s) for s in result.split_seeds],
        "skipped_splits": [{"split_index": i, "error": e} for i, e in result.skipped],
    }
    _json_dump(os.path.join(out_dir, "gates.json"), gates)

    counts = ensemble.counts
    with open(os.path.join(out_dir, "cate.csv"), "w", newline="") as fh:
        fh.write("row_id,n_estimates,s_bar\n")
        for i in range(counts.shape[0]):
            s = repr(float(ensemble.s_bar[i])) if counts[i] else ""
            fh.write(f"{i + 1},{counts[i]},{s}\n")

    _write_cate_splits(os.path.join(out_dir, "cate_splits.csv"), result, ensemble)

    manifest = {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "command": "estimate",
        "config": asdict(config),
        "split_seeds": [int(s) for s in result.split_seeds],
        "input_path": str(input_path) if input_path else None,
        "input_sha256": _sha256(input_path) if input_path else None,
    }
    _json_dump(os.path.join(out_dir, "run_manifest.json"), manifest)

    if tau_true is not None:
        _json_dump(
            os.path.join(out_dir, "truth.json"),
            {"format_version": FORMAT_VERSION, "tau_true": _float_list(tau_true)},
        )


def _write_cate_splits(path, result, ensemble: CateEnsemble) -> None:
    # audit tuples and per_split pairs both follow completed-split order
    with open(path, "w", newline="") as fh:
        fh.write("split_index,row_id,estimate\n")
        for audit, (idx, values) in zip(result.audit, ensemble.per_split):
            split_index = audit["split_index"]
            for i, v in zip(idx, values):
                fh.write(f"{split_index},{int(i) + 1},{repr(float(v))}\n")


def cmd_estimate(args) -> int:
    config = _run_config_from_args(args)
    workers = _resolve_workers(args.workers)
    loaded = read_dataset_csv(args.data)
    tau_true = None
    if isinstance(loaded, SimulatedDataset):
        data, tau_true = loaded.base, loaded.tau_true
    else:
        data = loaded
    started = time.perf_counter()
    result, ensemble = run_dogates(
        data,
        k=config.k,
        b=config.b,
        mode=config.mode,
        params=config.forest_params(),
        trim_lo=config.trim_lo,
        trim_hi=config.trim_hi,
        clip=config.clip,
        seed=config.seed,
        alpha=config.alpha,
        n_workers=workers,
    )
    elapsed = time.perf_counter() - started
    _write_estimate_bundle(args.out, config, result, ensemble,
                           tau_true=tau_true, input_path=args.data)
    _json_dump(
        os.path.join(args.out, "timings.json"),
        {"wall_clock_seconds": elapsed, "workers": workers},
    )
    print(f"estimated {result.k} groups over {result.b_completed} of {result.b} splits")
    for g in range(result.k):
        print(
            f"  group {g + 1}: gamma={result.gamma_median[g]:.4f} "
            f"ci=[{result.ci_median_low[g]:.4f}, {result.ci_median_high[g]:.4f}] "
            f"p_adj={result.p_adjusted[g]:.4f}"
        )
    print(f"bundle written to {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = scenario_config(
        args.scenario,
        n=args.n,
        rep_seed=args.seed,
        covariate_seed=args.covariate_seed,
        p=args.p,
        c=args.c,
    )
    sim = gen_scenario(cfg)
    write_dataset_csv(args.out, sim)
    treated = float(sim.base.d.mean())
    print(
        f"scenario {cfg.scenario_id}: n={cfg.n}, observed p={sim.base.p}, "
        f"treated fraction {treated:.3f} -> {args.out}"
    )
    return EXIT_OK


def _parse_scenarios(arg: str) -> list[str]:
    if arg.strip().lower() == "all":
        return list(SCENARIOS)
    ids = [s.strip().upper() for s in arg.split(",") if s.strip()]
    unknown = [s for s in ids if s not in SCENARIOS]
    if unknown:
        raise _UsageError(f"unknown scenario id(s): {', '.join(unknown)}")
    if not ids:
        raise _UsageError("no scenarios given")
    return ids


def _benchmark_rep(task):
    (scenario_id, rep, n, p, config) = task
    rep_seed = derive_seed(config.seed, scenario_id, "rep", rep)
    est_seed = derive_seed(config.seed, scenario_id, "estimate", rep)
    sim = gen_scenario(scenario_config(scenario_id, n=n, rep_seed=rep_seed, p=p))
    params = ForestParams(
        n_trees=config.n_trees,
        max_depth=config.max_depth,
        min_leaf=config.min_leaf,
        mtry=config.mtry,
        bootstrap_fraction=config.bootstrap_fraction,
        seed=est_seed,
    )
    try:
        result, ensemble = run_dogates(
            sim.base,
            k=config.k,
            b=config.b,
            mode="observational",
            params=params,
            trim_lo=config.trim_lo,
            trim_hi=config.trim_hi,
            clip=config.clip,
            seed=est_seed,
            alpha=config.alpha,
            n_workers=1,
        )
        gamma_true = true_group_effects(sim.tau_true, config.k)
        covered = ~np.isnan(ensemble.s_bar)
        sub = CateEnsemble(
            estimates=tuple(e for e, c in zip(ensemble.estimates, covered) if c),
            s_bar=ensemble.s_bar[covered],
        )
        cate_gamma = run_benchmark_cate_quantiles(sub, config.k)
        return (rep, result.gamma_median, cate_gamma, gamma_true, None)
    except DogatesError as exc:
        return (rep, None, None, None, f"{type(exc).__name__}: {exc}")


def cmd_benchmark(args) -> int:
    config = _run_config_from_args(args)
    workers = _resolve_workers(args.workers)
    scenarios = _parse_scenarios(args.scenarios)
    os.makedirs(args.out, exist_ok=True)

    records: list[BenchmarkRecord] = []
    failures: dict[str, list[dict]] = {}
    timings: dict[str, float] = {}
    for scenario_id in scenarios:
        started = time.perf_counter()
        tasks = [
            (scenario_id, rep, args.n, args.p, config) for rep in range(args.reps)
        ]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(_benchmark_rep, tasks))
        else:
            outcomes = [_benchmark_rep(t) for t in tasks]
        timings[scenario_id] = time.perf_counter() - started

        for rep, gamma_do, gamma_cate, gamma_true, error in outcomes:
            if error is not None:
                failures.setdefault(scenario_id, []).append(
                    {"rep": rep, "error": error}
                )
                continue
            records.append(
                BenchmarkRecord(scenario_id, rep, "do_gates", gamma_do, gamma_true)
            )
            records.append(
                BenchmarkRecord(scenario_id, rep, "cate_quantiles", gamma_cate, gamma_true)
            )

    summary = summarize(records) if records else {}
    for scenario_id in scenarios:
        fails = failures.get(scenario_id, [])
        entry = summary.setdefault(scenario_id, {})
        entry["n_failed_reps"] = len(fails)
        entry["failed_reps"] = fails
        entry["invalid"] = len(fails) > 0.10 * args.reps
    _json_dump(os.path.join(args.out, "summary.json"), summary)
    write_records_csv(os.path.join(args.out, "records.csv"), records)
    write_group_metrics_csv(os.path.join(args.out, "group_metrics.csv"), summary)
    manifest = {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "command": "benchmark",
        "config": asdict(config),
        "scenarios": scenarios,
        "n": args.n,
        "p": args.p,
        "reps": args.reps,
    }
    _json_dump(os.path.join(args.out, "run_manifest.json"), manifest)
    _json_dump(
        os.path.join(args.out, "timings.json"),
        {"workers": workers, "per_scenario_seconds": timings,
         "total_seconds": sum(timings.values())},
    )
    for scenario_id in scenarios:
        entry = summary[scenario_id]
        line = f"scenario {scenario_id}: "
        if "do_gates" in entry and "cate_quantiles" in entry:
            line += (
                f"MAE {entry['do_gates']['mae']:.3f} vs "
                f"{entry['cate_quantiles']['mae']:.3f} (benchmark), "
                f"Bias2 {entry['do_gates']['bias2']:.3f} vs "
                f"{entry['cate_quantiles']['bias2']:.3f}"
            )
        else:
            line += "no completed reps"
        if entry["invalid"]:
            line += "  [INVALID: too many failed reps]"
        print(line)
    print(f"bundle written to {args.out}")
    return EXIT_OK


def _report_benchmark(in_dir, out_dir) -> int:
    import csv as _csv

    by_key: dict[tuple[str, int, str], list[tuple[int, float, float]]] = {}
    with open(os.path.join(in_dir, "records.csv")) as fh:
        for r in _csv.DictReader(fh):
            key = (r["scenario"], int(r["rep"]), r["method"])
            by_key.setdefault(key, []).append(
                (int(r["group"]), float(r["gamma_hat"]), float(r["gamma_true"]))
            )
    records = []
    for (scenario, rep, method), rows in sorted(by_key.items()):
        rows.sort()
        records.append(
            BenchmarkRecord(
                scenario,
                rep,
                method,
                np.array([g for _, g, _ in rows]),
                np.array([t for _, _, t in rows]),
            )
        )
    write_group_metrics_csv(os.path.join(out_dir, "group_metrics.csv"), summarize(records))
    print(f"per-group metric table written to {out_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    in_dir = args.in_dir
    out_dir = args.out_dir or in_dir
    if not os.path.exists(os.path.join(in_dir, "gates.json")):
        if os.path.exists(os.path.join(in_dir, "records.csv")):
            os.makedirs(out_dir, exist_ok=True)
            return _report_benchmark(in_dir, out_dir)
        raise DataValidationError(
            [f"missing bundle file: {os.path.join(in_dir, f)}"
             for f in ("gates.json", "records.csv")]
        )
    needed = ["cate.csv", "cate_splits.csv"]
    missing = [f for f in needed if not os.path.exists(os.path.join(in_dir, f))]
    if missing:
        raise DataValidationError(
            [f"missing bundle file: {os.path.join(in_dir, f)}" for f in missing]
        )
    os.makedirs(out_dir, exist_ok=True)

    import csv as _csv

    with open(os.path.join(in_dir, "cate.csv")) as fh:
        rows = list(_csv.DictReader(fh))
    counts = np.array([int(r["n_estimates"]) for r in rows], dtype=np.int64)
    values, freqs = np.unique(counts, return_counts=True)
    with open(os.path.join(out_dir, "counts_histogram.csv"), "w", newline="") as fh:
        fh.write("n_estimates,n_observations\n")
        for value, freq in zip(values, freqs):
            fh.write(f"{value},{freq}\n")

    truth_path = os.path.join(in_dir, "truth.json")
    if not os.path.exists(truth_path):
        print(f"histogram written to {out_dir}; no truth.json, skipping error trajectories")
        return EXIT_OK

    with open(os.path.join(in_dir, "gates.json")) as fh:
        gates = json.load(fh)
    with open(truth_path) as fh:
        tau_true = np.array(json.load(fh)["tau_true"], dtype=np.float64)
    k = int(gates["k"])
    gamma_true = true_group_effects(tau_true, k)
    gamma_per_split = np.array(gates["gamma_per_split"], dtype=np.float64)

    per_split: dict[int, list[tuple[int, float]]] = {}
    with open(os.path.join(in_dir, "cate_splits.csv")) as fh:
        for r in _csv.DictReader(fh):
            per_split.setdefault(int(r["split_index"]), []).append(
                (int(r["row_id"]) - 1, float(r["estimate"]))
            )
    split_order = sorted(per_split)
    n_obs = counts.shape[0]

    with open(os.path.join(out_dir, "ae_vs_b.csv"), "w", newline="") as fh:
        fh.write("b,method,group,abs_error\n")
        bags: list[list[float]] = [[] for _ in range(n_obs)]
        for prefix, split_id in enumerate(split_order, start=1):
            for row, val in per_split[split_id]:
                bags[row].append(val)
            gamma_prefix = np.median(gamma_per_split[:prefix], axis=0)
            for g in range(k):
                err = abs(float(gamma_prefix[g]) - float(gamma_true[g]))
                fh.write(f"{prefix},do_gates,{g + 1},{repr(err)}\n")
            s_bar = np.array(
                [np.median(b) if b else np.nan for b in bags], dtype=np.float64
            )
            covered = ~np.isnan(s_bar)
            sub = CateEnsemble(
                estimates=tuple(tuple(b) for b, c in zip(bags, covered) if c),
                s_bar=s_bar[covered],
            )
            cate_gamma = run_benchmark_cate_quantiles(sub, k)
            for g in range(k):
                err = abs(float(cate_gamma[g]) - float(gamma_true[g]))
                fh.write(f"{prefix},cate_quantiles,{g + 1},{repr(err)}\n")
    print(f"report data written to {out_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        handler = {
            "estimate": cmd_estimate,
            "simulate": cmd_simulate,
            "benchmark": cmd_benchmark,
            "report": cmd_report,
        }[args.command]
        return handler(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataValidationError as exc:
        for violation in exc.violations:
            print(f"validation: {violation}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"validation: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DogatesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FileNotFoundError as exc:
        print(f"validation: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
