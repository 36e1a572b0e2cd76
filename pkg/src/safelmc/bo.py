"""Safe multi-task Bayesian optimization loop.

Minimizes the main task of a two-task objective subject to the safety
constraint ``f(x) <= threshold`` on the main task, certified through the
inflated confidence bound: a candidate is safe when

    mean(x) + sqrt(beta_bar) * std(x) + psi <= threshold

under the nominal correlation tuple.  Each main-task iteration refreshes the
correlation posterior (MCMC), rebuilds the confidence set and the inflation
factors, picks the safe candidate minimizing the optimistic lower bound,
then spends ``fidelity_ratio`` unconstrained evaluations of the cheap
supplementary task at maximum-variance points.  Single-task mode optimizes
the main task alone with the uninflated scaling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .bounds import (
    RegularityBudget,
    RobustBound,
    beta as beta_fn,
    compute_robust_bound,
    grid_cardinality,
    psi as psi_fn,
    robust_beta,
)
from .correlation import FixedPrior, LKJPrior, PriorSpec, build_confidence_set, mh_sample
from .gp import PosteriorModel, fit
from .kernels import CorrelationMatrix, LMCKernel, SEKernelParams, TaskedDataset
from .synthesis import MAIN_TASK, SyntheticFunction

__all__ = [
    "MCMCSettings",
    "BOConfig",
    "EvalRecord",
    "BOHistory",
    "METHODS",
    "safe_set",
    "acquire_main",
    "acquire_supplementary",
    "collapse_to_icm",
    "run",
]

SUPPLEMENTARY_TASK = 2
METHODS = ("lmc", "icm", "single_task")
# numerical guard on the sampler's transformed coordinates: keeps retained
# correlation matrices strictly positive definite under float saturation
MCMC_MAX_ABS_Z = 16.0


@dataclass(frozen=True)
class MCMCSettings:
    """Chain configuration for the per-iteration correlation refresh."""

    samples: int = 48
    burn_in: int = 72
    thinning: int = 2
    initial_step: float = 0.3

    def __post_init__(self):
        if self.samples < 1 or self.burn_in < 0 or self.thinning < 1:
            raise ValueError("need samples >= 1, burn_in >= 0, thinning >= 1")
        if not self.initial_step > 0:
            raise ValueError("initial_step must be positive")


@dataclass(frozen=True)
class BOConfig:
    """Everything one optimization run needs besides the objective.

    ``kernel`` is the model template (its free-feature task matrices are
    placeholders; the loop substitutes the sampled nominal tuple) and
    ``prior`` supplies one prior per template feature.
    """

    domain: np.ndarray
    threshold: float
    delta: float
    rho: float
    fidelity_ratio: int
    candidate_count: int
    max_main_evals: int
    initial_safe_inputs: np.ndarray
    seed: int
    kernel: LMCKernel
    prior: PriorSpec
    noise_variance: float
    mesh_tau: float
    mcmc: MCMCSettings = field(default_factory=MCMCSettings)
    budget: RegularityBudget | None = None

    def __post_init__(self):
        dom = np.asarray(self.domain, dtype=float)
        if dom.ndim != 2 or dom.shape[1] != 2 or np.any(dom[:, 1] <= dom[:, 0]):
            raise ValueError("domain must be a (d, 2) array of increasing bounds")
        x0 = np.atleast_2d(np.asarray(self.initial_safe_inputs, dtype=float))
        if x0.shape[0] == 0:
            raise ValueError("initial_safe_inputs must be nonempty")
        if x0.shape[1] != dom.shape[0]:
            raise ValueError("initial_safe_inputs dimension must match the domain")
        if np.any(x0 < dom[:, 0]) or np.any(x0 > dom[:, 1]):
            raise ValueError("initial safe inputs must lie in the domain")
        for name in ("delta", "rho"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.fidelity_ratio < 0:
            raise ValueError("fidelity_ratio must be nonnegative")
        if self.candidate_count < 1:
            raise ValueError("candidate_count must be positive")
        if self.max_main_evals < 0:
            raise ValueError("max_main_evals must be nonnegative")
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")
        if not self.mesh_tau > 0:
            raise ValueError("mesh_tau must be positive")
        if self.prior.num_features != self.kernel.num_features:
            raise ValueError("prior must define one entry per kernel feature")
        object.__setattr__(self, "domain", dom)
        object.__setattr__(self, "initial_safe_inputs", x0)

    @property
    def input_dim(self) -> int:
        return self.domain.shape[0]


@dataclass(frozen=True)
class EvalRecord:
    """One objective evaluation with the bound state current at that time."""

    iteration: int
    task: int
    x: np.ndarray
    observation: float
    safe_predicted: bool
    beta: float
    nu: float
    gamma: float
    beta_bar: float
    incumbent: float
    regret: float
    violation: bool


@dataclass
class BOHistory:
    """Ordered evaluation records of one run plus safety accounting."""

    records: list
    violation_count: int
    method: str
    seed: int
    optimum_value: float

    def main_records(self) -> list:
        return [r for r in self.records if r.task == MAIN_TASK]

    def main_regrets(self) -> np.ndarray:
        return np.array([r.regret for r in self.main_records()])

    def to_csv(self, path) -> None:
        """Write the documented run schema (one row per evaluation).

        Columns: iteration, task, x_1..x_d, observation, safe_predicted,
        beta, nu, gamma, beta_bar, incumbent, regret, violation.  Floats are
        shortest round-trip representations, so identical runs produce
        byte-identical files.
        """
        d = len(self.records[0].x) if self.records else 0
        header = (["iteration", "task"] + [f"x_{k + 1}" for k in range(d)]
                  + ["observation", "safe_predicted", "beta", "nu", "gamma",
                     "beta_bar", "incumbent", "regret", "violation"])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for r in self.records:
                writer.writerow(
                    [r.iteration, r.task]
                    + [repr(float(v)) for v in r.x]
                    + [repr(float(r.observation)), int(r.safe_predicted),
                       repr(float(r.beta)), repr(float(r.nu)), repr(float(r.gamma)),
                       repr(float(r.beta_bar)), repr(float(r.incumbent)),
                       repr(float(r.regret)), int(r.violation)])


def safe_set(model: PosteriorModel, bound: RobustBound, threshold: float,
             candidates: np.ndarray, anchors: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask of candidates certified safe on the main task.

    A candidate passes when its inflated upper confidence bound lies at or
    below the threshold.  Rows matching ``anchors`` (previously evaluated
    safe main-task inputs) are always members.
    """
    cands = np.atleast_2d(np.asarray(candidates, dtype=float))
    mean, var = model.predict_batch(cands, task=MAIN_TASK)
    mask = mean + bound.radius * np.sqrt(var) + bound.psi <= threshold
    if anchors is not None and len(anchors):
        for a in np.atleast_2d(anchors):
            mask |= np.all(cands == a[None, :], axis=1)
    return mask


def _lex_first(candidates: np.ndarray, *keys) -> np.ndarray:
    """Row of ``candidates`` minimizing the key tuple, coordinates last."""
    coord_keys = tuple(candidates[:, k] for k in range(candidates.shape[1] - 1, -1, -1))
    order = np.lexsort(coord_keys + tuple(reversed(keys)))
    return candidates[order[0]]


def acquire_main(model: PosteriorModel, bound: RobustBound,
                 safe_candidates: np.ndarray) -> np.ndarray:
    """Optimistic minimizer over the safe set.

    Picks the safe candidate with the lowest ``mean - sqrt(beta_bar) * std``
    on the main task; ties go to the larger standard deviation, then to the
    lexicographically smallest input.
    """
    cands = np.atleast_2d(np.asarray(safe_candidates, dtype=float))
    if cands.shape[0] == 0:
        raise ValueError("acquire_main needs a nonempty safe set")
    mean, var = model.predict_batch(cands, task=MAIN_TASK)
    sd = np.sqrt(var)
    return _lex_first(cands, -sd, mean - bound.radius * sd)


def acquire_supplementary(model: PosteriorModel, candidates: np.ndarray) -> np.ndarray:
    """Pure-exploration pick: the candidate with the largest posterior
    variance on the supplementary task, with deterministic tie-breaking.
    No safety filter applies."""
    cands = np.atleast_2d(np.asarray(candidates, dtype=float))
    if cands.shape[0] == 0:
        raise ValueError("acquire_supplementary needs candidates")
    _, var = model.predict_batch(cands, task=SUPPLEMENTARY_TASK)
    return _lex_first(cands, -var)


def collapse_to_icm(kernel: LMCKernel, prior: PriorSpec):
    """Single-feature (ICM) counterpart of a model template.

    A template that already has one feature is returned unchanged, so a
    single-feature run behaves identically under either method name.  For
    multi-feature templates the collapse keeps the first feature's
    lengthscales and prior and pools the signal variances, preserving the
    per-task prior scale when the features share a variance diagonal.
    """
    if kernel.num_features == 1:
        return kernel, prior
    params0 = kernel.features[0][0]
    pooled = sum(p.signal_variance for p, _ in kernel.features)
    corr0 = kernel.features[0][1]
    collapsed = LMCKernel(((SEKernelParams(params0.lengthscales, pooled), corr0),))
    return collapsed, PriorSpec((prior.features[0],))


def _single_task_template(kernel: LMCKernel, prior: PriorSpec) -> LMCKernel:
    """u = 1 template: each feature keeps its main-task prior scale."""
    feats = []
    for (params, _), pf in zip(kernel.features, prior.features):
        scale = pf.matrix.entries[0, 0] if isinstance(pf, FixedPrior) else pf.variance[0]
        feats.append((params, CorrelationMatrix(np.array([[scale]]))))
    return LMCKernel(tuple(feats))


def _prior_placeholder_sigmas(prior: PriorSpec) -> list:
    """Identity-correlation tuple consistent with the per-feature priors."""
    out = []
    for f in prior.features:
        if isinstance(f, FixedPrior):
            out.append(f.matrix.entries)
        else:
            out.append(np.diag(f.variance))
    return out


class _Incumbent:
    """Best safely observed main-task point (by true value)."""

    def __init__(self):
        self.safe_x = None
        self.safe_value = np.inf
        self.fallback_x = None
        self.fallback_obs = np.inf

    def update(self, x, observation, true_value, threshold):
        if observation <= threshold and true_value < self.safe_value:
            self.safe_x, self.safe_value = np.array(x), true_value
        if observation < self.fallback_obs:
            self.fallback_x, self.fallback_obs = np.array(x), observation

    @property
    def x(self) -> np.ndarray:
        return self.safe_x if self.safe_x is not None else self.fallback_x

    @property
    def value(self) -> float:
        return self.safe_value if self.safe_x is not None else self.fallback_obs


def run(config: BOConfig, objective: SyntheticFunction, method: str) -> BOHistory:
    """Execute one safe optimization run.

    ``method`` is one of ``"lmc"``, ``"icm"`` or ``"single_task"``
    (case-insensitive).  The ICM method collapses the model template to one
    feature; single-task mode drops the supplementary task entirely and uses
    the uninflated confidence scaling.  Runs are deterministic per
    (config, objective, seed): repeated runs export byte-identical CSVs.
    """
    method = method.lower().replace("-", "_")
    if method == "singletask":
        method = "single_task"
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")

    multitask = method != "single_task"
    kernel, prior = config.kernel, config.prior
    if method == "icm":
        kernel, prior = collapse_to_icm(kernel, prior)
    if multitask and kernel.num_tasks != 2:
        raise ValueError("multi-task runs expect exactly two tasks "
                         "(main task 1, supplementary task 2)")
    if not multitask:
        kernel = _single_task_template(config.kernel, config.prior)

    dom = config.domain
    dim = config.input_dim
    grid_count = grid_cardinality(dom, config.mesh_tau)
    base_beta = beta_fn(grid_count, config.delta)
    psi0 = psi_fn(config.budget, base_beta) if config.budget is not None else 0.0
    plain_bound = robust_beta(0.0, 1.0, base_beta, psi=psi0,
                              grid_cardinality=grid_count, delta=config.delta)

    seed_root = np.random.SeedSequence(config.seed)
    noise_ss, cand_ss, mcmc_ss = seed_root.spawn(3)
    noise_rng = np.random.default_rng(noise_ss)
    sobol = qmc.Sobol(dim, scramble=True, seed=np.random.default_rng(cand_ss))
    mcmc_seeds = np.random.default_rng(mcmc_ss).integers(
        0, 2**63 - 1, size=max(config.max_main_evals, 1))

    u_model = kernel.num_tasks
    data = TaskedDataset.empty(dim, u_model, config.noise_variance, domain=dom)
    records: list = []
    incumbent = _Incumbent()
    violations = 0
    evaluated_inputs: list = []
    safe_main_inputs: list = []
    has_free = bool(prior.free_indices()) and multitask

    def observe(x, task):
        true_value = objective.evaluate(x, task)
        y = true_value + np.sqrt(config.noise_variance) * noise_rng.standard_normal()
        return true_value, float(y)

    def record(iteration, task, x, y, safe_pred, bound, violation):
        records.append(EvalRecord(
            iteration=iteration, task=task, x=np.array(x), observation=y,
            safe_predicted=safe_pred, beta=bound.beta, nu=bound.nu,
            gamma=bound.gamma, beta_bar=bound.beta_bar,
            incumbent=incumbent.value,
            regret=incumbent.value - objective.optimum_value,
            violation=violation))

    def scale(unit: np.ndarray) -> np.ndarray:
        return dom[:, 0] + (dom[:, 1] - dom[:, 0]) * unit

    # initial design: declared-safe main input(s); multi-task methods also
    # get one co-located supplementary evaluation per safe input (bootstraps
    # the correlation posterior) plus unconstrained quasi-random draws
    for x0 in config.initial_safe_inputs:
        f0, y0 = observe(x0, MAIN_TASK)
        viol = f0 > config.threshold
        violations += viol
        data = data.extended(x0, MAIN_TASK, y0)
        incumbent.update(x0, y0, f0, config.threshold)
        evaluated_inputs.append(np.array(x0))
        if y0 <= config.threshold:
            safe_main_inputs.append(np.array(x0))
        record(0, MAIN_TASK, x0, y0, True, plain_bound, viol)
    if multitask:
        initial_sup = list(config.initial_safe_inputs)
        if config.fidelity_ratio > 0:
            initial_sup.extend(scale(sobol.random(config.fidelity_ratio)))
        for xs in initial_sup:
            fs, ys = observe(xs, SUPPLEMENTARY_TASK)
            data = data.extended(xs, SUPPLEMENTARY_TASK, ys)
            evaluated_inputs.append(np.array(xs))
            record(0, SUPPLEMENTARY_TASK, xs, ys, False, plain_bound, False)

    for iteration in range(1, config.max_main_evals + 1):
        if has_free:
            chain = mh_sample(
                data, kernel, prior,
                n_samples=config.mcmc.samples, burn_in=config.mcmc.burn_in,
                thinning=config.mcmc.thinning, seed=int(mcmc_seeds[iteration - 1]),
                initial_step=config.mcmc.initial_step, max_abs_z=MCMC_MAX_ABS_Z)
            conf_set = build_confidence_set(chain, config.rho)
            bound = compute_robust_bound(conf_set, data, kernel, grid_count,
                                         config.delta, config.budget)
            nominal = conf_set.nominal
        else:
            bound = plain_bound
            nominal = (_prior_placeholder_sigmas(prior) if multitask
                       else kernel.correlations())
        model = fit(kernel.with_correlations(nominal), data)

        fresh = scale(sobol.random(config.candidate_count))
        pool = np.unique(np.vstack([fresh] + [x[None, :] for x in evaluated_inputs]), axis=0)
        mask = safe_set(model, bound, config.threshold, pool,
                        anchors=np.array(safe_main_inputs) if safe_main_inputs else None)
        if np.any(mask):
            x_main = acquire_main(model, bound, pool[mask])
            safe_pred = True
        else:
            # empty safe set: fall back to re-evaluating the incumbent
            x_main = incumbent.x
            safe_pred = False
        f_main, y_main = observe(x_main, MAIN_TASK)
        viol = f_main > config.threshold
        violations += viol
        data = data.extended(x_main, MAIN_TASK, y_main)
        incumbent.update(x_main, y_main, f_main, config.threshold)
        evaluated_inputs.append(np.array(x_main))
        if y_main <= config.threshold:
            safe_main_inputs.append(np.array(x_main))
        record(iteration, MAIN_TASK, x_main, y_main, safe_pred, bound, viol)

        if multitask:
            # first supplementary evaluation probes the fresh main input
            # (keeps the correlation posterior identified as data grows);
            # the rest explore by maximum posterior variance
            for j in range(config.fidelity_ratio):
                model = fit(kernel.with_correlations(nominal), data)
                if j == 0:
                    x_sup = np.array(x_main)
                else:
                    x_sup = acquire_supplementary(model, pool)
                sup_safe = bool(safe_set(model, bound, config.threshold,
                                         x_sup[None, :])[0])
                f_sup, y_sup = observe(x_sup, SUPPLEMENTARY_TASK)
                data = data.extended(x_sup, SUPPLEMENTARY_TASK, y_sup)
                evaluated_inputs.append(np.array(x_sup))
                record(iteration, SUPPLEMENTARY_TASK, x_sup, y_sup, sup_safe,
                       bound, False)

    return BOHistory(records=records, violation_count=int(violations),
                     method=method, seed=config.seed,
                     optimum_value=objective.optimum_value)
