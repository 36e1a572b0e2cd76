"""Kernel primitives for scalar and multi-task covariance evaluation.

A linear model of co-regionalization (LMC) kernel is a sum of separable
features,

    K(x, x', t, t') = sum_i [Sigma_i]_{t,t'} * k_i(x, x'),

where each feature pairs a scalar squared-exponential base kernel ``k_i``
with a positive-definite inter-task matrix ``Sigma_i``.  A single feature
(H = 1) recovers the intrinsic co-regionalization model (ICM).  This module
holds the kernel value types, elementwise evaluation, and Gram/cross-Gram
assembly for task-tagged datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

__all__ = [
    "SEKernelParams",
    "CorrelationMatrix",
    "LMCKernel",
    "TaskedDataset",
    "se_eval",
    "se_matrix",
    "lmc_eval",
    "assemble_gram",
    "cross_gram",
    "base_kernel_matrices",
    "task_weighted_gram",
]

SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class SEKernelParams:
    """Squared-exponential kernel hyperparameters.

    Parameters
    ----------
    lengthscales : array_like, shape (d,)
        Positive lengthscale per input dimension.
    signal_variance : float
        Positive signal variance (the kernel value at zero distance).
    """

    lengthscales: np.ndarray
    signal_variance: float

    def __post_init__(self):
        ell = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if ell.ndim != 1 or ell.size == 0:
            raise ValueError("lengthscales must be a non-empty 1-d array")
        if not np.all(ell > 0):
            raise ValueError("all lengthscales must be positive")
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be positive")
        object.__setattr__(self, "lengthscales", ell)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))

    @property
    def input_dim(self) -> int:
        return self.lengthscales.size


@dataclass(frozen=True)
class CorrelationMatrix:
    """Symmetric positive-definite inter-task matrix of one LMC feature.

    Strict positive definiteness is required because the robust-bound
    computations invert the nominal matrices.
    """

    entries: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("correlation matrix must be square")
        if np.max(np.abs(a - a.T)) > SYMMETRY_TOL:
            raise ValueError("correlation matrix must be symmetric to 1e-12")
        a = 0.5 * (a + a.T)
        if np.min(np.linalg.eigvalsh(a)) <= 0:
            raise ValueError("correlation matrix must be strictly positive definite")
        object.__setattr__(self, "entries", a)

    @property
    def num_tasks(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class LMCKernel:
    """Ordered features of an LMC kernel: (base kernel, task matrix) pairs."""

    features: tuple

    def __post_init__(self):
        feats = tuple(self.features)
        if len(feats) == 0:
            raise ValueError("an LMC kernel needs at least one feature")
        u = feats[0][1].num_tasks
        d = feats[0][0].input_dim
        for params, corr in feats:
            if corr.num_tasks != u:
                raise ValueError("all correlation matrices must share the task count")
            if params.input_dim != d:
                raise ValueError("all base kernels must share the input dimension")
        object.__setattr__(self, "features", feats)

    @property
    def num_tasks(self) -> int:
        return self.features[0][1].num_tasks

    @property
    def num_features(self) -> int:
        return len(self.features)

    @property
    def input_dim(self) -> int:
        return self.features[0][0].input_dim

    def correlations(self) -> list:
        return [corr.entries for _, corr in self.features]

    def base_params(self) -> list:
        return [params for params, _ in self.features]

    def with_correlations(self, sigmas) -> "LMCKernel":
        """Same base kernels, new task matrices (one per feature)."""
        if len(sigmas) != self.num_features:
            raise ValueError("need one matrix per feature")
        feats = tuple(
            (params, sigma if isinstance(sigma, CorrelationMatrix) else CorrelationMatrix(sigma))
            for (params, _), sigma in zip(self.features, sigmas)
        )
        return LMCKernel(feats)


@dataclass(frozen=True)
class TaskedDataset:
    """Noisy observations of a vector-valued function, one task tag per row.

    Parameters
    ----------
    inputs : ndarray, shape (N, d)
    tasks : ndarray, shape (N,)
        Integer task indices in ``1..num_tasks``.
    observations : ndarray, shape (N,)
    noise_variance : float
        Shared observation-noise variance (positive).
    num_tasks : int
    domain : ndarray, shape (d, 2), optional
        Box bounds; when given, every input must lie inside.
    """

    inputs: np.ndarray
    tasks: np.ndarray
    observations: np.ndarray
    noise_variance: float
    num_tasks: int
    domain: np.ndarray | None = field(default=None)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        t = np.atleast_1d(np.asarray(self.tasks, dtype=int))
        y = np.atleast_1d(np.asarray(self.observations, dtype=float))
        if x.shape[0] != t.shape[0] or x.shape[0] != y.shape[0]:
            raise ValueError("inputs, tasks and observations must have matching length")
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be at least 1")
        if t.size and (t.min() < 1 or t.max() > self.num_tasks):
            raise ValueError(f"task indices must lie in 1..{self.num_tasks}")
        dom = self.domain
        if dom is not None:
            dom = np.asarray(dom, dtype=float)
            if dom.shape != (x.shape[1], 2):
                raise ValueError("domain must have shape (d, 2)")
            if x.size and (np.any(x < dom[:, 0]) or np.any(x > dom[:, 1])):
                raise ValueError("every input must lie inside the domain")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "tasks", t)
        object.__setattr__(self, "observations", y)
        object.__setattr__(self, "noise_variance", float(self.noise_variance))
        object.__setattr__(self, "domain", dom)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def task_index(self) -> np.ndarray:
        """Zero-based task indices (for array indexing)."""
        return self.tasks - 1

    def extended(self, x, task: int, y: float) -> "TaskedDataset":
        """New dataset with one extra row appended."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return TaskedDataset(
            inputs=np.vstack([self.inputs, x]) if len(self) else x,
            tasks=np.append(self.tasks, task),
            observations=np.append(self.observations, y),
            noise_variance=self.noise_variance,
            num_tasks=self.num_tasks,
            domain=self.domain,
        )

    @classmethod
    def empty(cls, input_dim: int, num_tasks: int, noise_variance: float,
              domain=None) -> "TaskedDataset":
        return cls(
            inputs=np.zeros((0, input_dim)),
            tasks=np.zeros(0, dtype=int),
            observations=np.zeros(0),
            noise_variance=noise_variance,
            num_tasks=num_tasks,
            domain=domain,
        )


def se_matrix(params: SEKernelParams, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Squared-exponential kernel matrix between two point sets.

    Returns the (n, m) matrix with entries
    ``signal_variance * exp(-0.5 * sum_k ((xa_k - xb_k) / ell_k)^2)``.
    """
    xa = np.atleast_2d(np.asarray(xa, dtype=float))
    xb = np.atleast_2d(np.asarray(xb, dtype=float))
    if xa.shape[1] != params.input_dim or xb.shape[1] != params.input_dim:
        raise ValueError(
            f"input dimension mismatch: kernel expects {params.input_dim}, "
            f"got {xa.shape[1]} and {xb.shape[1]}"
        )
    if xa.shape[0] == 0 or xb.shape[0] == 0:
        return np.zeros((xa.shape[0], xb.shape[0]))
    ell = params.lengthscales
    sq = cdist(xa / ell, xb / ell, metric="sqeuclidean")
    return params.signal_variance * np.exp(-0.5 * sq)


def se_eval(params: SEKernelParams, x, xp) -> float:
    """Scalar squared-exponential kernel value k(x, x')."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(xp, dtype=float))
    if x.shape != xp.shape or x.size != params.input_dim:
        raise ValueError("x and x' must both match the kernel input dimension")
    return float(se_matrix(params, x[None, :], xp[None, :])[0, 0])


def _check_task(kernel: LMCKernel, t: int) -> int:
    if not 1 <= t <= kernel.num_tasks:
        raise ValueError(f"task index {t} outside 1..{kernel.num_tasks}")
    return t - 1


def lmc_eval(kernel: LMCKernel, x, xp, t: int, tp: int) -> float:
    """Multi-task kernel value  sum_i [Sigma_i]_{t,t'} k_i(x, x')."""
    ti = _check_task(kernel, t)
    tj = _check_task(kernel, tp)
    return float(
        sum(corr.entries[ti, tj] * se_eval(params, x, xp) for params, corr in kernel.features)
    )


def base_kernel_matrices(kernel: LMCKernel, xa: np.ndarray, xb: np.ndarray) -> list:
    """Per-feature base kernel matrices k_i(xa, xb)."""
    return [se_matrix(params, xa, xb) for params, _ in kernel.features]


def task_weighted_gram(base: np.ndarray, weights: np.ndarray,
                       tasks_a: np.ndarray, tasks_b: np.ndarray) -> np.ndarray:
    """Task-weighted Gram, entries ``weights[ta_n, tb_m] * base[n, m]``.

    ``tasks_a`` and ``tasks_b`` are zero-based task indices per row/column.
    """
    w = np.asarray(weights, dtype=float)
    return w[np.ix_(np.asarray(tasks_a), np.asarray(tasks_b))] * base


def assemble_gram(kernel: LMCKernel, data: TaskedDataset) -> np.ndarray:
    """Multi-task Gram matrix of a task-tagged dataset.

    Entry (n, m) is ``lmc_eval(kernel, x_n, x_m, t_n, t_m)``; for rows grouped
    per task this is the block matrix of per-task-pair Gram blocks.  The
    result is exactly symmetric; no jitter is added here (stabilization is a
    factorization-time concern).
    """
    if data.num_tasks != kernel.num_tasks:
        raise ValueError("dataset and kernel disagree on the task count")
    n = len(data)
    if n == 0:
        return np.zeros((0, 0))
    tidx = data.task_index()
    gram = np.zeros((n, n))
    for base, (_, corr) in zip(base_kernel_matrices(kernel, data.inputs, data.inputs),
                               kernel.features):
        gram += task_weighted_gram(base, corr.entries, tidx, tidx)
    return 0.5 * (gram + gram.T)


def cross_gram(kernel: LMCKernel, query_inputs: np.ndarray, query_tasks: np.ndarray,
               data: TaskedDataset) -> np.ndarray:
    """Cross-covariance between query (input, task) pairs and dataset rows.

    Returns the (Q, N) matrix with entries
    ``lmc_eval(kernel, x_q, x_n, t_q, t_n)``.
    """
    xq = np.atleast_2d(np.asarray(query_inputs, dtype=float))
    tq = np.atleast_1d(np.asarray(query_tasks, dtype=int))
    if xq.shape[0] != tq.shape[0]:
        raise ValueError("query inputs and tasks must have matching length")
    if tq.size and (tq.min() < 1 or tq.max() > kernel.num_tasks):
        raise ValueError(f"task indices must lie in 1..{kernel.num_tasks}")
    out = np.zeros((xq.shape[0], len(data)))
    if out.size == 0:
        return out
    didx = data.task_index()
    for base, (_, corr) in zip(base_kernel_matrices(kernel, xq, data.inputs),
                               kernel.features):
        out += task_weighted_gram(base, corr.entries, tq - 1, didx)
    return out
