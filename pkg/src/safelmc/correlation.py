"""Posterior sampling of uncertain inter-task correlation matrices.

A random-walk Metropolis chain explores the correlation matrices of the free
(non-fixed) kernel features under an LKJ hyper-prior, scoring each proposal
by the GP marginal likelihood of the current data.  States are parameterized
by Fisher-z-transformed canonical partial correlations, one coordinate per
lower-triangular position; for two tasks this is a single ``atanh(r)``.  The
transformed coordinates carry the exact change-of-variables term, so the
stationary law over matrices is

    posterior(C) propto likelihood(C) * det(C)^(eta - 1).

The retained samples, ranked by that posterior score, form the confidence
set used to inflate the optimization confidence bounds: the top ``1 - rho``
fraction is kept and the single best-scoring member becomes the nominal
tuple used for inference.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .gp import GramCache
from .kernels import CorrelationMatrix, LMCKernel, TaskedDataset

__all__ = [
    "FixedPrior",
    "LKJPrior",
    "PriorSpec",
    "CorrelationSet",
    "MHResult",
    "lkj_log_density",
    "mh_sample",
    "build_confidence_set",
    "merge_chains",
]

UNIT_DIAGONAL_TOL = 1e-8
ADAPT_WINDOW = 25
TARGET_ACCEPTANCE = 0.3


@dataclass(frozen=True)
class FixedPrior:
    """A feature whose task matrix is known and never sampled."""

    matrix: CorrelationMatrix

    def sigma(self) -> np.ndarray:
        return self.matrix.entries


@dataclass(frozen=True)
class LKJPrior:
    """LKJ(eta) hyper-prior over a feature's correlation shape.

    ``variance`` is the fixed per-task variance diagonal; the sampled
    unit-diagonal correlation C is scaled to ``D^{1/2} C D^{1/2}``.  Small
    ``eta`` favors strong correlations.
    """

    eta: float
    variance: np.ndarray

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        v = np.atleast_1d(np.asarray(self.variance, dtype=float))
        if not np.all(v > 0):
            raise ValueError("variance diagonal must be positive")
        object.__setattr__(self, "variance", v)

    @property
    def num_tasks(self) -> int:
        return self.variance.size


@dataclass(frozen=True)
class PriorSpec:
    """Per-feature priors: each entry is a FixedPrior or an LKJPrior."""

    features: tuple

    def __post_init__(self):
        feats = tuple(self.features)
        if not feats:
            raise ValueError("PriorSpec needs at least one feature")
        for f in feats:
            if not isinstance(f, (FixedPrior, LKJPrior)):
                raise TypeError("prior entries must be FixedPrior or LKJPrior")
        object.__setattr__(self, "features", feats)

    @property
    def num_features(self) -> int:
        return len(self.features)

    def free_indices(self) -> list:
        return [i for i, f in enumerate(self.features) if isinstance(f, LKJPrior)]


@dataclass(frozen=True)
class CorrelationSet:
    """Retained high-posterior correlation tuples plus the nominal tuple."""

    members: tuple
    nominal: tuple
    rho: float
    posterior_scores: np.ndarray

    def __post_init__(self):
        if not self.members:
            raise ValueError("a confidence set needs at least one member")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if len(self.posterior_scores) != len(self.members):
            raise ValueError("need one posterior score per member")
        if not any(self.nominal is m for m in self.members):
            raise ValueError("the nominal tuple must be a member")

    def __len__(self) -> int:
        return len(self.members)


def lkj_log_density(matrix, eta: float) -> float:
    """Unnormalized LKJ log-density (eta - 1) * log det(C).

    ``matrix`` must be in correlation form (unit diagonal).
    """
    c = matrix.entries if isinstance(matrix, CorrelationMatrix) else np.asarray(matrix, dtype=float)
    if not eta > 0:
        raise ValueError("eta must be positive")
    if np.max(np.abs(np.diag(c) - 1.0)) > UNIT_DIAGONAL_TOL:
        raise ValueError("LKJ density requires a unit-diagonal correlation matrix")
    sign, logdet = np.linalg.slogdet(c)
    if sign <= 0:
        return -math.inf
    return (eta - 1.0) * logdet


def _log1m_tanh_sq(z: np.ndarray) -> np.ndarray:
    """log(1 - tanh(z)^2), stable for large |z|."""
    az = np.abs(z)
    return 2.0 * (math.log(2.0) - az - np.log1p(np.exp(-2.0 * az)))


def _cpc_positions(u: int) -> list:
    return [(i, j) for i in range(1, u) for j in range(i)]


def _cpc_beta_exponents(u: int, eta: float) -> np.ndarray:
    """Shape parameter of each partial-correlation coordinate under LKJ(eta).

    Position (i, j) with column j carries a symmetric Beta on (-1, 1) with
    parameter ``eta + (u - 2 - j) / 2``; this factorization reproduces the
    LKJ matrix law exactly (for u = 2 it is the single-coefficient density
    ``(1 - r^2)^(eta - 1)``).
    """
    return np.array([eta + 0.5 * (u - 2 - j) for (_, j) in _cpc_positions(u)])


def _cholesky_from_cpcs(x: np.ndarray, u: int) -> np.ndarray:
    """Unit-row lower Cholesky factor built from partial correlations."""
    low = np.zeros((u, u))
    low[0, 0] = 1.0
    pos = 0
    for i in range(1, u):
        remaining = 1.0
        for j in range(i):
            low[i, j] = x[pos] * remaining
            remaining *= math.sqrt(max(1.0 - x[pos] * x[pos], 0.0))
            pos += 1
        low[i, i] = remaining
    return low


def _correlation_from_z(z: np.ndarray, u: int) -> tuple:
    """(correlation matrix, log det) from transformed coordinates."""
    x = np.tanh(z)
    low = _cholesky_from_cpcs(x, u)
    corr = low @ low.T
    # unit diagonal by construction of the unit-row factor
    np.fill_diagonal(corr, 1.0)
    logdet = float(np.sum(_log1m_tanh_sq(z)))
    return corr, logdet


@dataclass
class MHResult:
    """Chain output: retained (tuple-of-matrices, posterior score) samples."""

    samples: list
    acceptance_rate: float
    step_scale: float

    def __iter__(self):
        return iter(self.samples)

    def __len__(self) -> int:
        return len(self.samples)


def _scaled(corr: np.ndarray, variance: np.ndarray) -> np.ndarray:
    root = np.sqrt(variance)
    return corr * np.outer(root, root)


def mh_sample(data: TaskedDataset, kernel_template: LMCKernel, prior: PriorSpec,
              n_samples: int, burn_in: int, thinning: int, seed: int,
              initial_step: float = 0.1, max_abs_z: float | None = None,
              trace_path=None) -> MHResult:
    """Random-walk Metropolis over the free features' correlation matrices.

    Parameters
    ----------
    data : TaskedDataset
        Nonempty observations scored by the GP marginal likelihood.
    kernel_template : LMCKernel
        Supplies the base kernels (its own task matrices are ignored for
        free features and for fixed features the prior's matrix is used).
    prior : PriorSpec
        Per-feature priors; at least one feature must be non-fixed.
    n_samples, burn_in, thinning : int
        Retained count, discarded prefix, and keep-every-k spacing.
    seed : int
        Chain seed; identical seeds reproduce the sample sequence exactly.
    initial_step : float
        Initial Gaussian step scale on the transformed coordinates; adapted
        toward 30% acceptance during burn-in, then frozen.
    max_abs_z : float, optional
        Reject proposals outside ``|z| <= max_abs_z``.  Guards downstream
        strict positive-definiteness against float saturation of tanh; leave
        unset to sample the full support (needed for faithful prior tails).
    trace_path : path, optional
        CSV chain trace (step, feature, r, log_posterior, accepted).

    Returns
    -------
    MHResult
        List-like of ``(H-tuple of matrices, posterior score)``.  The score
        is the chain's stationary log density in its sampling coordinates
        (marginal likelihood plus the transformed LKJ prior); ranking by it
        stays well-posed even when the matrix-space LKJ density diverges at
        singular matrices (eta < 1).
    """
    if len(data) == 0:
        raise ValueError("mh_sample needs a nonempty dataset")
    if prior.num_features != kernel_template.num_features:
        raise ValueError("prior and kernel must have the same feature count")
    free = prior.free_indices()
    if not free:
        raise ValueError("mh_sample needs at least one non-fixed feature")
    if n_samples < 1 or burn_in < 0 or thinning < 1:
        raise ValueError("need n_samples >= 1, burn_in >= 0, thinning >= 1")

    u = kernel_template.num_tasks
    for i, f in enumerate(prior.features):
        width = f.num_tasks if isinstance(f, LKJPrior) else f.matrix.num_tasks
        if width != u:
            raise ValueError("prior feature size must match the kernel task count")
    n_coords = u * (u - 1) // 2
    cache = GramCache(kernel_template, data)
    rng = np.random.default_rng(seed)

    fixed_sigmas = {
        i: f.sigma() for i, f in enumerate(prior.features) if isinstance(f, FixedPrior)
    }
    exponents = {i: _cpc_beta_exponents(u, prior.features[i].eta) for i in free}

    def unpack(zvec: np.ndarray):
        """Materialize matrices and the transformed-coordinate log density.

        The returned density is the chain's own target (likelihood plus the
        LKJ prior expressed in the sampling coordinates, Jacobian included).
        Scoring samples in these coordinates keeps ranking well-posed for
        eta < 1, where the matrix-space LKJ density diverges at singular
        matrices that carry vanishing probability mass.
        """
        sigmas: list = [None] * prior.num_features
        corrs = {}
        z_prior = 0.0
        for pos, i in enumerate(free):
            zi = zvec[pos * n_coords:(pos + 1) * n_coords]
            corr, _ = _correlation_from_z(zi, u)
            corrs[i] = corr
            sigmas[i] = _scaled(corr, prior.features[i].variance)
            z_prior += float(np.sum(exponents[i] * _log1m_tanh_sq(zi)))
        for i, s in fixed_sigmas.items():
            sigmas[i] = s
        lik = cache.log_marginal_likelihood(sigmas)
        return sigmas, corrs, lik + z_prior

    z = np.zeros(len(free) * n_coords)
    sigmas, corrs, target = unpack(z)
    score = target
    step = float(initial_step)
    total_steps = burn_in + n_samples * thinning
    samples = []
    accepted_total = 0
    window_accepts = 0
    trace_rows = []

    for k in range(total_steps):
        proposal = z + step * rng.standard_normal(z.size)
        accept = False
        if max_abs_z is None or np.max(np.abs(proposal)) <= max_abs_z:
            cand_sigmas, cand_corrs, cand_target = unpack(proposal)
            log_ratio = cand_target - target
            if log_ratio >= 0 or math.log(rng.uniform()) < log_ratio:
                z, sigmas, corrs, target = proposal, cand_sigmas, cand_corrs, cand_target
                score = target
                accept = True
        accepted_total += accept
        window_accepts += accept
        if k < burn_in and (k + 1) % ADAPT_WINDOW == 0:
            rate = window_accepts / ADAPT_WINDOW
            step = float(np.clip(step * math.exp(rate - TARGET_ACCEPTANCE), 1e-3, 50.0))
            window_accepts = 0
        if k >= burn_in and (k - burn_in + 1) % thinning == 0:
            samples.append((tuple(np.array(s) for s in sigmas), score))
        if trace_path is not None:
            for i in free:
                r = corrs[i][1, 0] if u >= 2 else 0.0
                trace_rows.append((k, i, r, score, int(accept)))

    acceptance = accepted_total / total_steps
    if accepted_total == 0:
        warnings.warn(
            "Metropolis chain rejected every proposal; the returned samples "
            "repeat the initial state", RuntimeWarning)
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "feature", "r", "log_posterior", "accepted"])
            writer.writerows(trace_rows)
    return MHResult(samples=samples, acceptance_rate=acceptance, step_scale=step)


def build_confidence_set(samples, rho: float) -> CorrelationSet:
    """Highest-posterior-density style confidence set from scored samples.

    Keeps the ``ceil((1 - rho) * S)`` best-scoring of S samples; the single
    best becomes the nominal tuple.  Ties keep chain order.
    """
    pairs = list(samples)
    if not pairs:
        raise ValueError("cannot build a confidence set from zero samples")
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    scores = np.array([s for _, s in pairs])
    order = np.argsort(-scores, kind="stable")
    keep = math.ceil((1.0 - rho) * len(pairs))
    chosen = order[:keep]
    members = []
    kept_scores = np.empty(keep)
    for rank, idx in enumerate(chosen):
        tup, score = pairs[idx]
        members.append(tuple(CorrelationMatrix(m) for m in tup))
        kept_scores[rank] = score
    return CorrelationSet(
        members=tuple(members),
        nominal=members[0],
        rho=rho,
        posterior_scores=kept_scores,
    )


def merge_chains(chains) -> list:
    """Merge per-seed chain outputs into one scored sample list.

    ``chains`` maps seed -> MHResult (or sample list); merging is
    order-stable: sorted by seed, then chain order.
    """
    merged = []
    for seed in sorted(chains):
        merged.extend(list(chains[seed]))
    return merged
