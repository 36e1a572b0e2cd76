"""Robust confidence-interval scaling under correlation uncertainty.

The uniform error bound ``|f(x) - mean(x)| <= sqrt(beta) * std(x)`` for a
multi-task GP is only valid when the inter-task matrices used for inference
are the true ones.  When the truth is merely known to lie in a confidence
set of correlation tuples, the scaling must be inflated to

    beta_bar = (nu + gamma * sqrt(beta))**2,

where ``nu`` bounds the posterior-mean deviation between any candidate tuple
and the nominal tuple (in units of the nominal posterior standard deviation)
and ``gamma`` bounds the ratio of posterior standard deviations.  ``psi``
accounts for the error of transferring a grid guarantee to the continuum and
is zero for the default (empty) regularity budget.

For an LMC kernel the mean-shift bound decomposes per feature.  With
``alpha  = (Gram_S  + s2 I)^{-1} y`` for the candidate tuple S,
``alpha' = (Gram_S' + s2 I)^{-1} y`` for the nominal tuple S', and the
task-weighted Gram ``G_i(A)[n, m] = A[t_n, t_m] k_i(x_n, x_m)``,

    nu^2 = sum_i [  alpha'' G_i(S'_i) alpha'
                  - 2 alpha'' G_i(S_i) alpha
                  + alpha'  G_i(S_i S'_i^{-1} S_i) alpha ]
           + (1 / s2) * sum_n ( fit_S(x_n, t_n) - fit_S'(x_n, t_n) )^2 ,

where the second sum compares the fitted values at each training row's
observed task.  Because ``Gram alpha = y - s2 * alpha`` identically, that
sum equals ``s2 * ||alpha - alpha'||^2`` and is evaluated in that form.
Both pieces are derived closed forms; the test suite gates the first
against an independent finite-dimensional feature-space computation (see
:mod:`safelmc.featurespace`) and the assembled bound against its defining
elementwise inequality before anything downstream relies on them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gp import GramCache, NumericalError
from .kernels import CorrelationMatrix, LMCKernel, TaskedDataset, task_weighted_gram

__all__ = [
    "RegularityBudget",
    "RobustBound",
    "grid_cardinality",
    "beta",
    "psi",
    "per_feature_gram",
    "nu_terms",
    "nu_single",
    "nu_max",
    "gamma",
    "gamma_per_feature",
    "robust_beta",
    "compute_robust_bound",
]


@dataclass(frozen=True)
class RegularityBudget:
    """User-supplied continuity budget for the discretization term.

    All fields default to zero, which turns the discretization term off (the
    appropriate choice for fine grids).  ``tau`` is the mesh size of the
    grid the budget refers to.
    """

    lipschitz_f: float = 0.0
    omega_mu_at_tau: float = 0.0
    omega_sigma_at_tau: float = 0.0
    tau: float = 1.0

    def __post_init__(self):
        if min(self.lipschitz_f, self.omega_mu_at_tau, self.omega_sigma_at_tau) < 0:
            raise ValueError("budget terms must be nonnegative")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class RobustBound:
    """The (beta, nu, gamma, psi, beta_bar) bundle used to inflate intervals."""

    beta: float
    nu: float
    gamma: float
    psi: float
    beta_bar: float
    grid_cardinality: int
    delta: float

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.grid_cardinality < 1:
            raise ValueError("grid_cardinality must be positive")
        if self.nu < 0:
            raise ValueError("nu must be nonnegative")
        expected_beta = 2.0 * (math.log(self.grid_cardinality) - math.log(self.delta))
        if abs(self.beta - expected_beta) > 1e-9 * max(1.0, abs(expected_beta)):
            raise ValueError("beta is inconsistent with the grid cardinality and delta")
        expected_bar = (self.nu + self.gamma * math.sqrt(self.beta)) ** 2
        if abs(self.beta_bar - expected_bar) > 1e-9 * max(1.0, expected_bar):
            raise ValueError("beta_bar must equal (nu + gamma*sqrt(beta))^2")

    @property
    def radius(self) -> float:
        """sqrt(beta_bar), the half-width multiplier on the posterior std."""
        return math.sqrt(self.beta_bar)


def grid_cardinality(domain: np.ndarray, tau: float) -> int:
    """Point count of the tensor grid with mesh ``tau`` on a box domain.

    ``domain`` has shape (d, 2).  Each axis contributes
    ``round(side / tau) + 1`` points; the product is exact (Python integers),
    even when the grid is far too large to materialize.
    """
    dom = np.asarray(domain, dtype=float)
    if dom.ndim != 2 or dom.shape[1] != 2:
        raise ValueError("domain must have shape (d, 2)")
    if not tau > 0:
        raise ValueError("tau must be positive")
    total = 1
    for lo, hi in dom:
        side = hi - lo
        if side <= 0:
            raise ValueError("domain sides must have positive length")
        total *= int(round(side / tau)) + 1
    return total


def beta(grid_cardinality: int, delta: float) -> float:
    """Confidence scaling 2*log(|grid| / delta) for a finite candidate grid."""
    if grid_cardinality < 1:
        raise ValueError("grid_cardinality must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return 2.0 * (math.log(grid_cardinality) - math.log(delta))


def psi(budget: RegularityBudget, beta: float) -> float:
    """Discretization term L_f*tau + omega_mu(tau) + sqrt(beta)*omega_sigma(tau)."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    return (budget.lipschitz_f * budget.tau
            + budget.omega_mu_at_tau
            + math.sqrt(beta) * budget.omega_sigma_at_tau)


def _as_matrices(sigmas) -> list:
    out = []
    for s in sigmas:
        a = s.entries if isinstance(s, CorrelationMatrix) else np.asarray(s, dtype=float)
        out.append(a)
    return out


def per_feature_gram(weights: np.ndarray, base_kernel_index: int,
                     data: TaskedDataset, kernel: LMCKernel) -> np.ndarray:
    """Task-weighted Gram G(A) with entries ``A[t_n, t_m] k_i(x_n, x_m)``.

    ``base_kernel_index`` selects the feature whose base kernel is used;
    ``weights`` is any (u, u) matrix (not necessarily a feature's own).
    """
    from .kernels import se_matrix

    params = kernel.features[base_kernel_index][0]
    base = se_matrix(params, data.inputs, data.inputs)
    tidx = data.task_index()
    return task_weighted_gram(base, np.asarray(weights, dtype=float), tidx, tidx)


class _ShiftWorkspace:
    """Shared state for mean-shift bounds of many candidates vs one nominal."""

    def __init__(self, nominal_sigmas, data: TaskedDataset, kernel: LMCKernel):
        self.cache = GramCache(kernel, data)
        self.nominal = _as_matrices(nominal_sigmas)
        if len(self.nominal) != kernel.num_features:
            raise ValueError("need one nominal matrix per kernel feature")
        try:
            self.nominal_inv = [np.linalg.inv(s) for s in self.nominal]
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"nominal task matrix is singular: {exc}") from None
        _, self.alpha_nom = self.cache.alpha(self.nominal)
        self.q_nom = self.cache.bilinear_forms(self.alpha_nom, self.alpha_nom)
        self.noise_variance = data.noise_variance

    def terms(self, candidate_sigmas):
        """(rkhs_shift_sq, datafit_sq) of one candidate tuple."""
        cand = _as_matrices(candidate_sigmas)
        if len(cand) != len(self.nominal):
            raise ValueError("candidate tuple length must match the nominal tuple")
        _, alpha = self.cache.alpha(cand)
        q_cross = self.cache.bilinear_forms(self.alpha_nom, alpha)
        q_cand = self.cache.bilinear_forms(alpha, alpha)
        rkhs = 0.0
        for s, s_nom_inv, s_nom, qn, qc, qm in zip(
            cand, self.nominal_inv, self.nominal, self.q_nom, q_cross, q_cand
        ):
            mixed = s @ s_nom_inv @ s
            rkhs += float(np.sum(s_nom * qn)) - 2.0 * float(np.sum(s * qc)) \
                + float(np.sum(mixed * qm))
        # a norm squared; clamp roundoff below zero
        rkhs = max(rkhs, 0.0)
        # fitted-value differences at the observed task of each training row:
        # Gram alpha = y - s2*alpha, so the sum telescopes to s2*||da||^2
        diff = alpha - self.alpha_nom
        datafit = self.noise_variance * float(diff @ diff)
        return rkhs, datafit


def nu_terms(candidate_sigmas, nominal_sigmas, data: TaskedDataset,
             kernel: LMCKernel):
    """RKHS-shift and data-fit components of the mean-shift bound (squared)."""
    if len(data) == 0:
        raise ValueError("the mean-shift bound needs a nonempty dataset")
    ws = _ShiftWorkspace(nominal_sigmas, data, kernel)
    return ws.terms(candidate_sigmas)


def nu_single(candidate_sigmas, nominal_sigmas, data: TaskedDataset,
              kernel: LMCKernel) -> float:
    """Mean-shift bound of one candidate tuple against the nominal tuple.

    Satisfies ``|mean_S(x) - mean_S'(x)| <= nu * std_S'(x)`` elementwise over
    tasks, for every x.
    """
    rkhs, datafit = nu_terms(candidate_sigmas, nominal_sigmas, data, kernel)
    return math.sqrt(rkhs + datafit)


def nu_max(corr_set, data: TaskedDataset, kernel: LMCKernel) -> float:
    """Largest mean-shift bound over all members of a confidence set."""
    if len(data) == 0:
        raise ValueError("the mean-shift bound needs a nonempty dataset")
    ws = _ShiftWorkspace(corr_set.nominal, data, kernel)
    worst = 0.0
    for member in corr_set.members:
        rkhs, datafit = ws.terms(member)
        worst = max(worst, rkhs + datafit)
    return math.sqrt(worst)


def _spectral_norm(m: np.ndarray) -> float:
    """Largest singular value via a symmetric eigensolve of m'm."""
    eigs = np.linalg.eigvalsh(m.T @ m)
    return math.sqrt(max(float(eigs[-1]), 0.0))


def gamma(corr_set) -> float:
    """Std-ratio bound: sqrt(max over members and features of ||S_i inv(S'_i)||_2)."""
    nominal_inv = []
    for s in _as_matrices(corr_set.nominal):
        try:
            nominal_inv.append(np.linalg.inv(s))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"nominal task matrix is singular: {exc}") from None
    worst = 0.0
    for member in corr_set.members:
        for s, s_nom_inv in zip(_as_matrices(member), nominal_inv):
            worst = max(worst, _spectral_norm(s @ s_nom_inv))
    return math.sqrt(worst)


def gamma_per_feature(corr_set) -> np.ndarray:
    """Per-feature std-ratio bounds (diagnostic; the global bound is their max)."""
    nominal = _as_matrices(corr_set.nominal)
    nominal_inv = [np.linalg.inv(s) for s in nominal]
    worst = np.zeros(len(nominal))
    for member in corr_set.members:
        for i, (s, s_nom_inv) in enumerate(zip(_as_matrices(member), nominal_inv)):
            worst[i] = max(worst[i], _spectral_norm(s @ s_nom_inv))
    return np.sqrt(worst)


def robust_beta(nu: float, gamma: float, beta: float, *, psi: float = 0.0,
                grid_cardinality: int, delta: float) -> RobustBound:
    """Assemble the inflated scaling beta_bar = (nu + gamma*sqrt(beta))^2.

    Reduces exactly to ``beta_bar == beta`` when ``nu == 0`` and
    ``gamma == 1`` (certain correlation matrices).
    """
    if nu < 0 or gamma <= 0 or beta < 0:
        raise ValueError("need nu >= 0, gamma > 0 and beta >= 0")
    if nu == 0.0 and gamma == 1.0:
        beta_bar = beta
    else:
        beta_bar = (nu + gamma * math.sqrt(beta)) ** 2
    return RobustBound(
        beta=beta,
        nu=nu,
        gamma=gamma,
        psi=psi,
        beta_bar=beta_bar,
        grid_cardinality=grid_cardinality,
        delta=delta,
    )


def compute_robust_bound(corr_set, data: TaskedDataset, kernel: LMCKernel,
                         grid_count: int, delta: float,
                         budget: RegularityBudget | None = None) -> RobustBound:
    """Bound bundle for a confidence set on the current data.

    Convenience orchestration for the optimization loop: evaluates the
    mean-shift and std-ratio bounds over the set, the grid scaling, and the
    discretization term from an optional budget.
    """
    b = beta(grid_count, delta)
    nu = nu_max(corr_set, data, kernel)
    g = gamma(corr_set)
    p = psi(budget, b) if budget is not None else 0.0
    return robust_beta(nu, g, b, psi=p, grid_cardinality=grid_count, delta=delta)
