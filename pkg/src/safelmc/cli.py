"""Benchmark command line: experiment configs, repetitions, result files.

Subcommands
-----------
``run <config>``
    Execute every (method, repetition) pair of a JSON experiment config,
    writing one run CSV each, one aggregate CSV per method, and a manifest.
``recompute-aggregates <dir>``
    Rebuild the aggregate CSVs of a finished experiment from its run CSVs.
``demo-expressiveness``
    Write gridded CSVs contrasting a single-feature and a two-feature
    synthetic function.
``validate <config>``
    Parse and echo a config, reporting the first problem found.

Exit codes: 0 success, 1 usage or config error, 2 partial failure (some
runs failed), 3 total failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import importlib.resources
import json
import os
import sys
import time
from dataclasses import dataclass

import numpy as np
import scipy
from scipy.stats import qmc

from . import __version__
from .bo import BOConfig, MCMCSettings, run
from .bounds import RegularityBudget
from .correlation import FixedPrior, LKJPrior, PriorSpec
from .kernels import CorrelationMatrix, LMCKernel, SEKernelParams
from .synthesis import MAIN_TASK, SyntheticFunction, expressiveness_demo, sample_function

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "parse_config_dict",
    "run_experiment",
    "recompute_aggregates",
    "demo_expressiveness",
    "find_initial_safe_inputs",
    "read_run_csv",
    "builtin_config_path",
    "main",
]

OUTPUT_DIR_ENV = "SAFELMC_OUT"
SCHEMA_VERSION = 1
SCAN_POINTS = 512

_REQUIRED = object()
_MCMC_DEFAULTS = {"samples": 48, "burn_in": 72, "thinning": 2, "initial_step": 0.3}
_REGULARITY_DEFAULTS = {"lipschitz_f": 0.0, "omega_mu": 0.0, "omega_sigma": 0.0}
_METHOD_ALIASES = {"lmc": "lmc", "icm": "icm", "single_task": "single_task",
                   "singletask": "single_task", "single-task": "single_task"}


class ConfigError(ValueError):
    """A config file failed validation; the message names the field."""


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _take(mapping, context: str, spec: dict) -> dict:
    """Pull known keys (with defaults) and reject unknown ones."""
    _require(isinstance(mapping, dict), f"{context} must be an object")
    unknown = set(mapping) - set(spec)
    _require(not unknown, f"unknown key(s) in {context}: {sorted(unknown)}")
    out = {}
    for key, default in spec.items():
        if default is _REQUIRED:
            _require(key in mapping, f"missing required key '{key}' in {context}")
            out[key] = mapping[key]
        else:
            out[key] = mapping.get(key, default)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description with all defaults materialized."""

    name: str
    domain: np.ndarray
    num_tasks: int
    methods: tuple
    repetitions: int
    master_seed: int
    threshold: float
    delta: float
    rho: float
    mesh_tau: float
    fidelity_ratio: int
    candidate_count: int
    max_main_evals: int
    noise_variance: float
    feature_lengthscales: tuple
    feature_signal_variances: tuple
    feature_correlations: tuple
    feature_priors: tuple
    task_variances: np.ndarray
    target_norms: tuple
    centers_per_feature: int
    mcmc: dict
    initial_safe_margin: float
    initial_safe_count: int
    regularity: dict
    output_dir: str

    def echo(self) -> dict:
        """Canonical JSON-ready dict; parsing the echo reproduces the config."""
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "domain": {"lower": list(self.domain[:, 0]), "upper": list(self.domain[:, 1])},
            "num_tasks": self.num_tasks,
            "methods": list(self.methods),
            "repetitions": self.repetitions,
            "master_seed": self.master_seed,
            "threshold": self.threshold,
            "delta": self.delta,
            "rho": self.rho,
            "mesh_tau": self.mesh_tau,
            "fidelity_ratio": self.fidelity_ratio,
            "candidate_count": self.candidate_count,
            "max_main_evals": self.max_main_evals,
            "noise_variance": self.noise_variance,
            "features": [
                {
                    "lengthscales": list(ell),
                    "signal_variance": sv,
                    "correlation": corr,
                    "prior": dict(pr),
                }
                for ell, sv, corr, pr in zip(
                    self.feature_lengthscales, self.feature_signal_variances,
                    self.feature_correlations, self.feature_priors)
            ],
            "task_variances": list(self.task_variances),
            "synthesis": {
                "target_norms": list(self.target_norms),
                "centers_per_feature": self.centers_per_feature,
            },
            "mcmc": dict(self.mcmc),
            "initial_safe_margin": self.initial_safe_margin,
            "initial_safe_count": self.initial_safe_count,
            "regularity": dict(self.regularity),
            "output_dir": self.output_dir,
        }

    def correlation_matrix(self, r: float) -> np.ndarray:
        u = self.num_tasks
        c = np.full((u, u), float(r))
        np.fill_diagonal(c, 1.0)
        root = np.sqrt(self.task_variances)
        return c * np.outer(root, root)

    def true_kernel(self) -> LMCKernel:
        """Kernel generating the benchmark objectives (truth)."""
        return LMCKernel(tuple(
            (SEKernelParams(ell, sv), CorrelationMatrix(self.correlation_matrix(r)))
            for ell, sv, r in zip(self.feature_lengthscales,
                                  self.feature_signal_variances,
                                  self.feature_correlations)))

    def prior_spec(self) -> PriorSpec:
        entries = []
        for pr in self.feature_priors:
            if pr["type"] == "lkj":
                entries.append(LKJPrior(eta=pr["eta"], variance=self.task_variances))
            else:
                entries.append(FixedPrior(
                    CorrelationMatrix(self.correlation_matrix(pr["correlation"]))))
        return PriorSpec(tuple(entries))

    def bo_config(self, seed: int, initial_safe_inputs) -> BOConfig:
        # free features get an uncorrelated placeholder; the loop substitutes
        # the sampled nominal tuple before any inference
        template = LMCKernel(tuple(
            (SEKernelParams(ell, sv), CorrelationMatrix(np.diag(self.task_variances)))
            for ell, sv in zip(self.feature_lengthscales, self.feature_signal_variances)))
        budget = None
        if any(v != 0.0 for v in self.regularity.values()):
            budget = RegularityBudget(
                lipschitz_f=self.regularity["lipschitz_f"],
                omega_mu_at_tau=self.regularity["omega_mu"],
                omega_sigma_at_tau=self.regularity["omega_sigma"],
                tau=self.mesh_tau)
        return BOConfig(
            domain=self.domain, threshold=self.threshold, delta=self.delta,
            rho=self.rho, fidelity_ratio=self.fidelity_ratio,
            candidate_count=self.candidate_count, max_main_evals=self.max_main_evals,
            initial_safe_inputs=initial_safe_inputs, seed=seed, kernel=template,
            prior=self.prior_spec(), noise_variance=self.noise_variance,
            mesh_tau=self.mesh_tau, mcmc=MCMCSettings(**self.mcmc), budget=budget)

    def objective_for(self, seed: int) -> SyntheticFunction:
        return sample_function(self.true_kernel(), self.target_norms,
                               self.centers_per_feature, seed, self.domain)


def parse_config_dict(raw: dict, name_fallback: str = "experiment") -> ExperimentConfig:
    """Validate a config dict; unknown keys are rejected, defaults filled."""
    top = _take(raw, "config", {
        "schema_version": _REQUIRED, "name": name_fallback, "domain": _REQUIRED,
        "num_tasks": 2, "methods": _REQUIRED, "repetitions": _REQUIRED,
        "master_seed": _REQUIRED, "threshold": _REQUIRED, "delta": 0.05,
        "rho": 0.05, "mesh_tau": 0.01, "fidelity_ratio": 8,
        "candidate_count": 4096, "max_main_evals": 40, "noise_variance": 1e-4,
        "features": _REQUIRED, "task_variances": None, "synthesis": _REQUIRED,
        "mcmc": {}, "initial_safe_margin": 1.5, "initial_safe_count": 6,
        "regularity": {},
        "output_dir": "results",
    })
    _require(top["schema_version"] == SCHEMA_VERSION,
             f"schema_version must be {SCHEMA_VERSION}")
    dom = _take(top["domain"], "domain", {"lower": _REQUIRED, "upper": _REQUIRED})
    lower = np.asarray(dom["lower"], dtype=float)
    upper = np.asarray(dom["upper"], dtype=float)
    _require(lower.ndim == 1 and lower.shape == upper.shape and lower.size > 0,
             "domain lower/upper must be equal-length nonempty lists")
    _require(bool(np.all(upper > lower)), "domain upper bounds must exceed lower bounds")
    domain = np.stack([lower, upper], axis=1)

    u = int(top["num_tasks"])
    _require(u >= 1, "num_tasks must be at least 1")
    methods = []
    _require(isinstance(top["methods"], list) and top["methods"],
             "methods must be a nonempty list")
    for m in top["methods"]:
        key = str(m).lower()
        _require(key in _METHOD_ALIASES, f"unknown method '{m}' in methods")
        methods.append(_METHOD_ALIASES[key])
    _require(int(top["repetitions"]) >= 1, "repetitions must be at least 1")
    for field_name in ("delta", "rho"):
        _require(0 < float(top[field_name]) < 1, f"{field_name} must lie in (0, 1)")
    _require(float(top["mesh_tau"]) > 0, "mesh_tau must be positive")
    _require(int(top["fidelity_ratio"]) >= 0, "fidelity_ratio must be nonnegative")
    _require(int(top["candidate_count"]) >= 1, "candidate_count must be positive")
    _require(int(top["max_main_evals"]) >= 0, "max_main_evals must be nonnegative")
    _require(float(top["noise_variance"]) > 0, "noise_variance must be positive")
    _require(float(top["initial_safe_margin"]) >= 0,
             "initial_safe_margin must be nonnegative")
    _require(int(top["initial_safe_count"]) >= 1,
             "initial_safe_count must be at least 1")

    _require(isinstance(top["features"], list) and top["features"],
             "features must be a nonempty list")
    lengthscales, signal_variances, correlations, priors = [], [], [], []
    for i, feat in enumerate(top["features"]):
        f = _take(feat, f"features[{i}]", {
            "lengthscales": _REQUIRED, "signal_variance": _REQUIRED,
            "correlation": _REQUIRED, "prior": _REQUIRED,
        })
        ell = tuple(float(v) for v in f["lengthscales"])
        _require(len(ell) == domain.shape[0],
                 f"features[{i}].lengthscales must have one entry per dimension")
        _require(all(v > 0 for v in ell), f"features[{i}].lengthscales must be positive")
        _require(float(f["signal_variance"]) > 0,
                 f"features[{i}].signal_variance must be positive")
        _require(-1.0 < float(f["correlation"]) < 1.0,
                 f"features[{i}].correlation must lie in (-1, 1)")
        pr_raw = f["prior"]
        _require(isinstance(pr_raw, dict) and "type" in pr_raw,
                 f"features[{i}].prior must be an object with a 'type'")
        if pr_raw["type"] == "lkj":
            pr = _take(pr_raw, f"features[{i}].prior", {"type": _REQUIRED, "eta": _REQUIRED})
            _require(float(pr["eta"]) > 0, f"features[{i}].prior.eta must be positive")
            pr = {"type": "lkj", "eta": float(pr["eta"])}
        elif pr_raw["type"] == "fixed":
            pr = _take(pr_raw, f"features[{i}].prior", {"type": _REQUIRED, "correlation": 0.0})
            _require(-1.0 < float(pr["correlation"]) < 1.0,
                     f"features[{i}].prior.correlation must lie in (-1, 1)")
            pr = {"type": "fixed", "correlation": float(pr["correlation"])}
        else:
            raise ConfigError(f"features[{i}].prior.type must be 'lkj' or 'fixed'")
        lengthscales.append(ell)
        signal_variances.append(float(f["signal_variance"]))
        correlations.append(float(f["correlation"]))
        priors.append(pr)

    tv = top["task_variances"]
    task_variances = np.ones(u) if tv is None else np.asarray(tv, dtype=float)
    _require(task_variances.shape == (u,) and bool(np.all(task_variances > 0)),
             "task_variances must be a positive list of length num_tasks")

    syn = _take(top["synthesis"], "synthesis", {
        "target_norms": _REQUIRED, "centers_per_feature": 200,
    })
    norms = tuple(float(v) for v in syn["target_norms"])
    _require(len(norms) == len(priors), "synthesis.target_norms needs one entry per feature")
    _require(all(v > 0 for v in norms), "synthesis.target_norms must be positive")
    _require(int(syn["centers_per_feature"]) >= 1,
             "synthesis.centers_per_feature must be at least 1")

    mcmc = _take(top["mcmc"], "mcmc", dict(_MCMC_DEFAULTS))
    _require(int(mcmc["samples"]) >= 1, "mcmc.samples must be at least 1")
    _require(int(mcmc["burn_in"]) >= 0, "mcmc.burn_in must be nonnegative")
    _require(int(mcmc["thinning"]) >= 1, "mcmc.thinning must be at least 1")
    _require(float(mcmc["initial_step"]) > 0, "mcmc.initial_step must be positive")
    mcmc = {"samples": int(mcmc["samples"]), "burn_in": int(mcmc["burn_in"]),
            "thinning": int(mcmc["thinning"]), "initial_step": float(mcmc["initial_step"])}

    reg = _take(top["regularity"], "regularity", dict(_REGULARITY_DEFAULTS))
    for key, value in reg.items():
        _require(float(value) >= 0, f"regularity.{key} must be nonnegative")
    reg = {k: float(v) for k, v in reg.items()}

    return ExperimentConfig(
        name=str(top["name"]), domain=domain, num_tasks=u, methods=tuple(methods),
        repetitions=int(top["repetitions"]), master_seed=int(top["master_seed"]),
        threshold=float(top["threshold"]), delta=float(top["delta"]),
        rho=float(top["rho"]), mesh_tau=float(top["mesh_tau"]),
        fidelity_ratio=int(top["fidelity_ratio"]),
        candidate_count=int(top["candidate_count"]),
        max_main_evals=int(top["max_main_evals"]),
        noise_variance=float(top["noise_variance"]),
        feature_lengthscales=tuple(lengthscales),
        feature_signal_variances=tuple(signal_variances),
        feature_correlations=tuple(correlations),
        feature_priors=tuple(priors),
        task_variances=task_variances, target_norms=norms,
        centers_per_feature=int(syn["centers_per_feature"]), mcmc=mcmc,
        initial_safe_margin=float(top["initial_safe_margin"]),
        initial_safe_count=int(top["initial_safe_count"]), regularity=reg,
        output_dir=str(top["output_dir"]))


def parse_config(path) -> ExperimentConfig:
    """Parse and validate a JSON experiment config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    name = os.path.splitext(os.path.basename(str(path)))[0]
    return parse_config_dict(raw, name_fallback=name)


def builtin_config_path(name: str):
    """Path of a config shipped with the package (e.g. 'paper_table1')."""
    return importlib.resources.files("safelmc").joinpath("configs", f"{name}.json")


def find_initial_safe_inputs(objective: SyntheticFunction, threshold: float,
                             margin: float, seed: int, count: int = 6,
                             cluster_radius: float = 0.5,
                             band: float = 2.0) -> np.ndarray:
    """Deterministic safe starting cluster for one benchmark objective.

    Scans a quasi-random batch for points whose main-task value sits in a
    moderate-safety band (between ``margin`` and ``margin + band`` below the
    threshold, so the start is safely feasible but not privileged), anchors
    on the qualifying point closest to the domain center, and greedily adds
    spread-out qualifying points within ``cluster_radius`` of the anchor
    (correlation inference needs safe observations at several distinct
    inputs).  Falls back to margin-only qualification and then to the scan
    minimizer when the band is empty.
    """
    dom = objective.domain
    unit = qmc.Sobol(dom.shape[0], scramble=True, seed=seed).random(SCAN_POINTS)
    points = dom[:, 0] + (dom[:, 1] - dom[:, 0]) * unit
    values = objective.evaluate_batch(points, MAIN_TASK)
    ok = (values <= threshold - margin) & (values >= threshold - margin - band)
    if not np.any(ok):
        ok = values <= threshold - margin
    if not np.any(ok):
        return points[int(np.argmin(values))][None, :]
    center = dom.mean(axis=1)
    safe_points = points[ok]
    anchor = safe_points[int(np.argmin(np.linalg.norm(safe_points - center, axis=1)))]
    near = safe_points[np.linalg.norm(safe_points - anchor, axis=1) <= cluster_radius]
    chosen = [anchor]
    while len(chosen) < count:
        dists = np.min(
            np.stack([np.linalg.norm(near - c, axis=1) for c in chosen]), axis=0)
        best = int(np.argmax(dists))
        if dists[best] <= 1e-12:
            break
        chosen.append(near[best])
    return np.array(chosen)


# --------------------------------------------------------------------------
# result files


def _atomic_write(path, writer_fn) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer_fn(fh)
    os.replace(tmp, path)


def read_run_csv(path) -> dict:
    """Load a run CSV into arrays (main-task rows drive the aggregates)."""
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    def col(name, cast=float):
        return np.array([cast(r[name]) for r in rows])
    return {
        "iteration": col("iteration", int),
        "task": col("task", int),
        "observation": col("observation"),
        "safe_predicted": col("safe_predicted", int),
        "beta": col("beta"),
        "nu": col("nu"),
        "gamma": col("gamma"),
        "beta_bar": col("beta_bar"),
        "incumbent": col("incumbent"),
        "regret": col("regret"),
        "violation": col("violation", int),
    }


def _aggregate_rows(run_paths) -> list:
    """Aggregate rows (n, q25, median, q75, cumulative violations) from CSVs."""
    regrets, violations = [], []
    for path in run_paths:
        run_data = read_run_csv(path)
        main = run_data["task"] == MAIN_TASK
        regrets.append(run_data["regret"][main])
        violations.append(run_data["violation"][main])
    counts = {len(r) for r in regrets}
    if len(counts) != 1:
        raise ValueError("run CSVs disagree on the number of main-task evaluations")
    regrets = np.array(regrets)
    violations = np.array(violations)
    rows = []
    for n in range(regrets.shape[1]):
        q25, q50, q75 = np.quantile(regrets[:, n], [0.25, 0.5, 0.75])
        total = int(np.sum(violations[:, :n + 1]))
        rows.append((n + 1, float(q25), float(q50), float(q75), total))
    return rows


def _write_aggregate(path, rows) -> None:
    def writer_fn(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n", "regret_q25", "regret_median", "regret_q75",
                         "violations_total"])
        for n, q25, q50, q75, total in rows:
            writer.writerow([n, repr(q25), repr(q50), repr(q75), total])
    _atomic_write(path, writer_fn)


def _run_one(config: ExperimentConfig, method: str, rep: int, out_dir: str) -> dict:
    """Execute one (method, repetition) run and write its CSV."""
    seed = config.master_seed + rep
    started = time.perf_counter()
    entry = {"method": method, "repetition": rep, "seed": seed,
             "file": os.path.join("runs", f"{method}_rep{rep:03d}.csv")}
    try:
        objective = config.objective_for(seed)
        x0 = find_initial_safe_inputs(objective, config.threshold,
                                      config.initial_safe_margin, seed,
                                      count=config.initial_safe_count)
        history = run(config.bo_config(seed, x0), objective, method)
        path = os.path.join(out_dir, entry["file"])
        tmp = f"{path}.tmp"
        history.to_csv(tmp)
        os.replace(tmp, path)
        entry.update(status="ok", error=None,
                     violations=history.violation_count,
                     final_regret=float(history.main_regrets()[-1]))
    except Exception as exc:  # noqa: BLE001 - recorded per run, experiment continues
        entry.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                     violations=None, final_regret=None)
    entry["wall_time_seconds"] = round(time.perf_counter() - started, 3)
    return entry


def _run_repetition(config_echo: dict, rep: int, out_dir: str) -> list:
    """Worker entry point: all methods of one repetition (pickle-friendly)."""
    config = parse_config_dict(config_echo)
    return [_run_one(config, method, rep, out_dir) for method in config.methods]


def run_experiment(config: ExperimentConfig, out_dir=None, jobs: int = 1,
                   quiet: bool = False) -> dict:
    """Run all repetitions and methods; write CSVs, aggregates and manifest.

    Returns the manifest dict (with an extra ``exit_code`` key: 0 all runs
    succeeded, 2 some failed, 3 all failed).  Output directory resolution:
    explicit argument, then the environment override, then the config.
    """
    out_dir = str(out_dir or os.environ.get(OUTPUT_DIR_ENV) or config.output_dir)
    os.makedirs(os.path.join(out_dir, "runs"), exist_ok=True)
    started = time.perf_counter()

    entries = []
    if jobs > 1:
        echo = config.echo()
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_repetition, echo, rep, out_dir)
                       for rep in range(config.repetitions)]
            for rep, fut in enumerate(futures):
                batch = fut.result()
                entries.extend(batch)
                if not quiet:
                    for e in batch:
                        print(f"[{e['status']}] {e['method']} rep {e['repetition']} "
                              f"({e['wall_time_seconds']}s)")
    else:
        for rep in range(config.repetitions):
            for e in _run_repetition(config.echo(), rep, out_dir):
                entries.append(e)
                if not quiet:
                    print(f"[{e['status']}] {e['method']} rep {e['repetition']} "
                          f"({e['wall_time_seconds']}s)")

    aggregates = {}
    for method in config.methods:
        paths = [os.path.join(out_dir, e["file"]) for e in entries
                 if e["method"] == method and e["status"] == "ok"]
        if paths:
            agg_file = f"aggregate_{method}.csv"
            _write_aggregate(os.path.join(out_dir, agg_file), _aggregate_rows(paths))
            aggregates[method] = agg_file

    failed = sum(1 for e in entries if e["status"] != "ok")
    exit_code = 0 if failed == 0 else (3 if failed == len(entries) else 2)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "library_versions": {"numpy": np.__version__, "scipy": scipy.__version__},
        "config": config.echo(),
        "master_seed": config.master_seed,
        "seeds": sorted({e["seed"] for e in entries}),
        "runs": entries,
        "aggregates": aggregates,
        "wall_time_seconds": round(time.perf_counter() - started, 3),
    }
    def writer_fn(fh):
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _atomic_write(os.path.join(out_dir, "manifest.json"), writer_fn)
    manifest["exit_code"] = exit_code
    return manifest


def recompute_aggregates(out_dir) -> dict:
    """Rebuild every aggregate CSV of a finished experiment from run CSVs."""
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    rebuilt = {}
    for method, agg_file in manifest["aggregates"].items():
        paths = [os.path.join(out_dir, e["file"]) for e in manifest["runs"]
                 if e["method"] == method and e["status"] == "ok"]
        _write_aggregate(os.path.join(out_dir, agg_file), _aggregate_rows(paths))
        rebuilt[method] = agg_file
    return rebuilt


def demo_expressiveness(seed: int, out_dir, resolution: int = 401,
                        minor_norm: float = 5.0) -> list:
    """Write gridded CSVs of the paired demo functions (columns x_1, task, value)."""
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    os.makedirs(out_dir, exist_ok=True)
    icm_fn, lmc_fn = expressiveness_demo(seed, minor_norm=minor_norm)
    grid = np.linspace(-1.0, 1.0, resolution)[:, None]
    written = []
    for label, fn in (("icm", icm_fn), ("lmc", lmc_fn)):
        path = os.path.join(out_dir, f"{label}.csv")
        def writer_fn(fh, fn=fn):
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["x_1", "task", "value"])
            for task in range(1, fn.num_tasks + 1):
                values = fn.evaluate_batch(grid, task)
                for x, v in zip(grid[:, 0], values):
                    writer.writerow([repr(float(x)), task, repr(float(v))])
        _atomic_write(path, writer_fn)
        written.append(path)
    return written


# --------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safelmc",
        description="Safe multi-task Bayesian optimization benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", help="path to a JSON experiment config")
    p_run.add_argument("--out", default=None, help="output directory override")
    p_run.add_argument("--jobs", type=int, default=None,
                       help="worker processes (default: available parallelism)")
    p_run.add_argument("--seed-override", type=int, default=None,
                       help="replace the config's master seed")
    p_run.add_argument("--quiet", action="store_true", help="suppress progress lines")

    p_agg = sub.add_parser("recompute-aggregates",
                           help="rebuild aggregate CSVs from run CSVs")
    p_agg.add_argument("dir", help="experiment output directory")

    p_demo = sub.add_parser("demo-expressiveness",
                            help="write gridded demo-function CSVs")
    p_demo.add_argument("--seed", type=int, default=0)
    p_demo.add_argument("--out", default="demo")
    p_demo.add_argument("--resolution", type=int, default=401)
    p_demo.add_argument("--minor-norm", type=float, default=5.0)

    p_val = sub.add_parser("validate", help="validate a config and echo it")
    p_val.add_argument("config", help="path to a JSON experiment config")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = parse_config(args.config)
            if args.seed_override is not None:
                raw = config.echo()
                raw["master_seed"] = args.seed_override
                config = parse_config_dict(raw, name_fallback=config.name)
            jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
            manifest = run_experiment(config, out_dir=args.out, jobs=jobs,
                                      quiet=args.quiet)
            return manifest["exit_code"]
        if args.command == "recompute-aggregates":
            rebuilt = recompute_aggregates(args.dir)
            print(f"rebuilt {len(rebuilt)} aggregate file(s)")
            return 0
        if args.command == "demo-expressiveness":
            written = demo_expressiveness(args.seed, args.out,
                                          resolution=args.resolution,
                                          minor_norm=args.minor_norm)
            for path in written:
                print(path)
            return 0
        if args.command == "validate":
            config = parse_config(args.config)
            json.dump(config.echo(), sys.stdout, indent=2, sort_keys=True)
            print()
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
