"""Finite-dimensional feature-space reference for the mean-shift bound.

Every base kernel admits an eigenfunction expansion, so on a finite design
the kernel is reproduced exactly by a Nystrom feature map: eigendecompose
the design Gram ``K = U diag(w) U'`` and set
``phi(x) = diag(w)^{-1/2} U' k(design, x)``.  A multi-task feature then maps
a task vector to ``B e_t (x) phi(x)`` with ``B' B = Sigma``, realized here
as (num_tasks, num_features_kept) coefficient matrices with the Frobenius
inner product.

Within this explicit space the posterior-mean representation is the ridge
solution ``w = (F F' + noise * I)^{-1} F y`` over stacked per-row feature
columns F, and the transfer operator between the spaces of two task-matrix
tuples acts on the task axis of each feature block as ``B'^{-T} B^{T}``.
None of this shares code or algebra with the closed-form quadratic
expression in :mod:`safelmc.bounds`; it exists to validate that expression
numerically and is only accurate when the design contains the data inputs.
"""

from __future__ import annotations

import numpy as np

from .kernels import (
    CorrelationMatrix,
    LMCKernel,
    SEKernelParams,
    TaskedDataset,
    se_matrix,
)

__all__ = [
    "NystromFeatureMap",
    "mixing_factor",
    "FeatureSpaceEmbedding",
    "rkhs_shift_sq_reference",
]


class NystromFeatureMap:
    """Finite feature map of one scalar kernel on a fixed design.

    Eigenvalues below ``rtol * max(eigenvalue)`` are dropped; on design
    points the reproduced kernel matches the true kernel up to that
    truncation.
    """

    def __init__(self, params: SEKernelParams, design: np.ndarray, rtol: float = 1e-12):
        design = np.atleast_2d(np.asarray(design, dtype=float))
        gram = se_matrix(params, design, design)
        eigvals, eigvecs = np.linalg.eigh(gram)
        keep = eigvals > rtol * eigvals[-1]
        self.params = params
        self.design = design
        self._scaled_vecs = eigvecs[:, keep] / np.sqrt(eigvals[keep])[None, :]

    @property
    def dim(self) -> int:
        return self._scaled_vecs.shape[1]

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        """Feature vectors, shape (Q, dim)."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        return se_matrix(params=self.params, xa=inputs, xb=self.design) @ self._scaled_vecs


def mixing_factor(sigma) -> np.ndarray:
    """A square invertible B with B' B = Sigma (transposed lower Cholesky)."""
    s = sigma.entries if isinstance(sigma, CorrelationMatrix) else np.asarray(sigma, dtype=float)
    return np.linalg.cholesky(s).T


class FeatureSpaceEmbedding:
    """Posterior-mean representation of one task-matrix tuple in feature space.

    ``blocks[i]`` is the (num_tasks, dim_i) coefficient matrix of feature i;
    the represented mean function is ``x -> sum_i B_i' blocks[i] phi_i(x)``.
    """

    def __init__(self, sigmas, data: TaskedDataset, kernel: LMCKernel,
                 feature_maps: list):
        mats = [s.entries if isinstance(s, CorrelationMatrix) else np.asarray(s, dtype=float)
                for s in sigmas]
        self.factors = [mixing_factor(s) for s in mats]
        self.maps = feature_maps
        u = kernel.num_tasks
        tidx = data.task_index()
        dims = [u * fm.dim for fm in feature_maps]
        offsets = np.concatenate([[0], np.cumsum(dims)])
        total = int(offsets[-1])
        n = len(data)
        columns = np.zeros((total, n))
        for i, fm in enumerate(feature_maps):
            phi = fm(data.inputs)                      # (n, dim_i)
            task_cols = self.factors[i][:, tidx]       # (u, n), column n is B e_{t_n}
            block = np.einsum("un,nm->umn", task_cols, phi).reshape(u * fm.dim, n)
            columns[offsets[i]:offsets[i + 1], :] = block
        ridge = columns @ columns.T + data.noise_variance * np.eye(total)
        flat = np.linalg.solve(ridge, columns @ data.observations)
        self.blocks = [
            flat[offsets[i]:offsets[i + 1]].reshape(u, feature_maps[i].dim)
            for i in range(len(feature_maps))
        ]

    def mean_at(self, inputs: np.ndarray) -> np.ndarray:
        """Task-valued posterior means, shape (Q, num_tasks)."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        u = self.blocks[0].shape[0]
        out = np.zeros((inputs.shape[0], u))
        for fm, b, block in zip(self.maps, self.factors, self.blocks):
            out += fm(inputs) @ (b.T @ block).T
        return out


def rkhs_shift_sq_reference(candidate_sigmas, nominal_sigmas, data: TaskedDataset,
                            kernel: LMCKernel, design: np.ndarray) -> float:
    """Explicit-feature-space value of the squared mean-shift RKHS term.

    Embeds the two posterior means, applies the transfer operator of the
    candidate space into the nominal space on each feature's task axis, and
    measures the squared Frobenius distance.  The design must contain the
    data inputs for the embedding to be exact.
    """
    maps = [NystromFeatureMap(params, design) for params, _ in kernel.features]
    emb_cand = FeatureSpaceEmbedding(candidate_sigmas, data, kernel, maps)
    emb_nom = FeatureSpaceEmbedding(nominal_sigmas, data, kernel, maps)
    total = 0.0
    for b_cand, b_nom, w_cand, w_nom in zip(
        emb_cand.factors, emb_nom.factors, emb_cand.blocks, emb_nom.blocks
    ):
        transfer = np.linalg.solve(b_nom.T, b_cand.T)    # B_nom^{-T} B_cand^{T}
        diff = w_nom - transfer @ w_cand
        total += float(np.sum(diff * diff))
    return total
