"""Exact multi-task Gaussian-process posterior inference.

Inference follows the standard Gaussian conditioning formulas on the
multi-task Gram matrix: with ``G = Gram + noise_variance * I``,

    mean(x)     = K(x, X) G^{-1} y
    variance(x) = K(x, x) - K(x, X) G^{-1} K(X, x)

evaluated per task, using a cached Cholesky factorization.  A small jitter
(relative to the mean Gram diagonal) is added at factorization time only and
escalated by factors of ten up to ``1e-4 * mean diagonal`` before giving up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .kernels import (
    LMCKernel,
    TaskedDataset,
    assemble_gram,
    base_kernel_matrices,
    se_matrix,
    task_weighted_gram,
)

__all__ = [
    "NumericalError",
    "Prediction",
    "PosteriorModel",
    "fit",
    "predict",
    "log_marginal_likelihood",
    "GramCache",
]

JITTER_INITIAL = 1e-10
JITTER_CEILING = 1e-4
VARIANCE_FLOOR = -1e-10


class NumericalError(RuntimeError):
    """Factorization failed even after jitter escalation."""


def _chol_with_jitter(gram: np.ndarray, noise_variance: float,
                      initial: float = JITTER_INITIAL,
                      ceiling: float = JITTER_CEILING):
    """Cholesky factor of ``gram + noise_variance*I`` with jitter escalation.

    Returns ``(lower_factor, jitter_used)``.  The jitter starts at
    ``initial * mean(diag)`` and is multiplied by 10 on failure until it
    exceeds ``ceiling * mean(diag)``.
    """
    n = gram.shape[0]
    mean_diag = float(np.trace(gram)) / n if n else 1.0
    if mean_diag <= 0:
        mean_diag = 1.0
    jitter = initial * mean_diag
    limit = ceiling * mean_diag
    shifted = gram + noise_variance * np.eye(n)
    while True:
        try:
            factor = np.linalg.cholesky(shifted + jitter * np.eye(n))
            return factor, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > limit:
                eigs = np.linalg.eigvalsh(shifted)
                raise NumericalError(
                    "Cholesky failed after jitter escalation "
                    f"(n={n}, min eig={eigs.min():.3e}, max eig={eigs.max():.3e}, "
                    f"noise_variance={noise_variance:.3e}, jitter ceiling={limit:.3e})"
                ) from None


@dataclass(frozen=True)
class Prediction:
    """Posterior mean and per-task variance at a single input.

    ``mean`` and ``variance`` are vectors over tasks; variances are clamped
    at zero from below (values below -1e-10 indicate a numerical problem and
    raise instead).
    """

    mean: np.ndarray
    variance: np.ndarray


class PosteriorModel:
    """Fitted multi-task GP with a cached factorization.

    Use :func:`fit` to construct.  Instances are immutable and safe to share
    across threads; all prediction methods are pure.
    """

    def __init__(self, kernel: LMCKernel, data: TaskedDataset,
                 factor: np.ndarray | None, alpha: np.ndarray, jitter: float):
        self.kernel = kernel
        self.data = data
        self.factor = factor
        self.alpha = alpha
        self.jitter = jitter

    @property
    def num_tasks(self) -> int:
        return self.kernel.num_tasks

    def prior_variance(self, task: int) -> float:
        """Prior variance of one task (1-based) under the kernel."""
        ti = task - 1
        return float(sum(corr.entries[ti, ti] * params.signal_variance
                         for params, corr in self.kernel.features))

    def _cross_columns(self, xq: np.ndarray, task: int) -> np.ndarray:
        """(Q, N) cross-covariance of queries on one task against the data."""
        didx = self.data.task_index()
        out = np.zeros((xq.shape[0], len(self.data)))
        for params, corr in self.kernel.features:
            base = se_matrix(params, xq, self.data.inputs)
            out += corr.entries[task - 1, didx][None, :] * base
        return out

    def predict_batch(self, inputs: np.ndarray, task: int | None = None):
        """Posterior means and per-task variances at many inputs.

        Parameters
        ----------
        inputs : ndarray, shape (Q, d)
        task : int, optional
            1-based task; when given, the returned arrays have shape (Q,),
            otherwise (Q, u) over all tasks.

        Returns
        -------
        (means, variances)
        """
        xq = np.atleast_2d(np.asarray(inputs, dtype=float))
        tasks = [task] if task is not None else list(range(1, self.num_tasks + 1))
        q = xq.shape[0]
        means = np.zeros((q, len(tasks)))
        variances = np.zeros((q, len(tasks)))
        for j, t in enumerate(tasks):
            prior = self.prior_variance(t)
            if self.factor is None:
                means[:, j] = 0.0
                variances[:, j] = prior
                continue
            cross = self._cross_columns(xq, t)
            means[:, j] = cross @ self.alpha
            v = solve_triangular(self.factor, cross.T, lower=True)
            var = prior - np.einsum("ij,ij->j", v, v)
            bad = var < VARIANCE_FLOOR
            if np.any(bad):
                raise NumericalError(
                    f"negative posterior variance {var[bad].min():.3e} below the "
                    "tolerated floor; factorization is unreliable"
                )
            variances[:, j] = np.maximum(var, 0.0)
        if task is not None:
            return means[:, 0], variances[:, 0]
        return means, variances

    def log_marginal_likelihood(self) -> float:
        """Evidence of the data under the (jittered) cached factorization."""
        if self.factor is None:
            raise ValueError("the marginal likelihood needs at least one observation")
        y = self.data.observations
        n = len(self.data)
        logdet = 2.0 * float(np.sum(np.log(np.diag(self.factor))))
        return -0.5 * float(y @ self.alpha) - 0.5 * logdet - 0.5 * n * math.log(2.0 * math.pi)


def fit(kernel: LMCKernel, data: TaskedDataset) -> PosteriorModel:
    """Fit the exact multi-task GP posterior.

    An empty dataset yields the prior model (zero mean, prior variance).
    Raises :class:`NumericalError` if the Gram factorization fails after
    jitter escalation.
    """
    if len(data) == 0:
        return PosteriorModel(kernel, data, None, np.zeros(0), 0.0)
    gram = assemble_gram(kernel, data)
    factor, jitter = _chol_with_jitter(gram, data.noise_variance)
    alpha = solve_triangular(
        factor.T, solve_triangular(factor, data.observations, lower=True), lower=False
    )
    return PosteriorModel(kernel, data, factor, alpha, jitter)


def predict(model: PosteriorModel, x) -> Prediction:
    """Posterior mean and per-task variance at a single input."""
    xq = np.asarray(x, dtype=float).reshape(1, -1)
    means, variances = model.predict_batch(xq)
    return Prediction(mean=means[0], variance=variances[0])


def log_marginal_likelihood(kernel: LMCKernel, data: TaskedDataset) -> float:
    """GP evidence: -1/2 y' G^{-1} y - 1/2 log det G - N/2 log 2 pi."""
    if len(data) == 0:
        raise ValueError("the marginal likelihood needs at least one observation")
    return fit(kernel, data).log_marginal_likelihood()


class GramCache:
    """Fast repeated inference on fixed data under varying task matrices.

    Caches the per-feature base kernel matrices and per-task-pair blocks so
    that the Gram matrix for a new tuple of task matrices costs a few scaled
    additions instead of a full kernel pass.  Drives the MCMC scoring loop
    and the confidence-set bound computations, which revisit the same data
    for many candidate correlation tuples.
    """

    def __init__(self, kernel_template: LMCKernel, data: TaskedDataset):
        if len(data) == 0:
            raise ValueError("GramCache needs a nonempty dataset")
        self.template = kernel_template
        self.data = data
        self.num_tasks = kernel_template.num_tasks
        self.tidx = data.task_index()
        self.bases = base_kernel_matrices(kernel_template, data.inputs, data.inputs)
        u = self.num_tasks
        n = len(data)
        # pair_blocks[i][(a, b)] holds base_i masked to rows of task a x task b,
        # symmetrized for a != b so the weighted sum stays exactly symmetric
        row = {a: (self.tidx == a) for a in range(u)}
        self.pair_blocks = []
        for base in self.bases:
            blocks = {}
            for a in range(u):
                for b in range(a, u):
                    mask = np.outer(row[a], row[b])
                    if a != b:
                        mask = mask | mask.T
                    blocks[(a, b)] = np.where(mask, base, 0.0)
            self.pair_blocks.append(blocks)
        self._n = n

    def gram(self, sigmas) -> np.ndarray:
        """Multi-task Gram for the task-matrix tuple ``sigmas``."""
        out = np.zeros((self._n, self._n))
        for blocks, sigma in zip(self.pair_blocks, sigmas):
            s = np.asarray(sigma, dtype=float)
            for (a, b), block in blocks.items():
                w = s[a, b]
                if w != 0.0:
                    out += w * block
        return out

    def chol(self, sigmas):
        return _chol_with_jitter(self.gram(sigmas), self.data.noise_variance)

    def alpha(self, sigmas):
        """(factor, alpha) for the tuple ``sigmas``."""
        factor, _ = self.chol(sigmas)
        alpha = solve_triangular(
            factor.T,
            solve_triangular(factor, self.data.observations, lower=True),
            lower=False,
        )
        return factor, alpha

    def log_marginal_likelihood(self, sigmas) -> float:
        factor, _ = self.chol(sigmas)
        y = self.data.observations
        alpha = solve_triangular(
            factor.T, solve_triangular(factor, y, lower=True), lower=False
        )
        logdet = 2.0 * float(np.sum(np.log(np.diag(factor))))
        return -0.5 * float(y @ alpha) - 0.5 * logdet - 0.5 * self._n * math.log(2.0 * math.pi)

    def bilinear_forms(self, left: np.ndarray, right: np.ndarray) -> list:
        """Per-feature task-pair bilinear forms of two coefficient vectors.

        For feature i returns the (u, u) matrix Q with
        ``Q[a, b] = sum_{n in task a, m in task b} left_n base_i[n, m] right_m``
        so that ``left' G_i(A) right = sum(A * Q)`` for any weight matrix A.
        """
        u = self.num_tasks
        masks = [self.tidx == a for a in range(u)]
        out = []
        for base in self.bases:
            q = np.zeros((u, u))
            for b in range(u):
                v = base @ np.where(masks[b], right, 0.0)
                for a in range(u):
                    q[a, b] = float(np.sum(left[masks[a]] * v[masks[a]]))
            out.append(q)
        return out
