"""Fisher discriminant subspace from Gaussian parameters.

Solves ``S_B v = lambda S_W v`` by Cholesky whitening: with ``L L^T = S_W`` the symmetric
problem ``L^-1 S_B L^-T w = lambda w`` has the same eigenvalues and ``v = L^-T w``, which
makes the basis ``S_W``-orthonormal (``V^T S_W V = I``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.linalg import solve_triangular

from .datamodel import FISHER, GaussianParams, LabeledEmbeddingSet, MomentBundle
from .gaussian_heads import _cholesky, accuracy, fit_head
from .sketch import linear_map_bundle

_NULL_TOL = 1e-10


@dataclass(frozen=True)
class FixedK:
    k: int


@dataclass(frozen=True)
class Energy:
    threshold: float = 0.99


Selection = Union[FixedK, Energy]


@dataclass(frozen=True, eq=False)
class FisherBasis:
    """Columns of ``V`` are generalized eigenvectors, sorted by decreasing eigenvalue.

    ``all_eigenvalues`` keeps the full spectrum so energies of other truncations can be read
    off; ``padded`` counts columns taken from the null space of ``S_B``.
    """

    V: np.ndarray
    eigenvalues: np.ndarray
    energy: np.ndarray
    all_eigenvalues: np.ndarray
    padded: int = 0

    @property
    def k_f(self) -> int:
        return self.V.shape[1]

    @property
    def k_in(self) -> int:
        return self.V.shape[0]

    @property
    def captured_energy(self) -> float:
        return float(self.energy[-1]) if self.energy.size else 0.0

    def transform(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.V

    def project_set(self, data: LabeledEmbeddingSet) -> LabeledEmbeddingSet:
        if data.dim != self.k_in:
            raise ValueError(f"set has dim {data.dim}, basis expects {self.k_in}")
        return LabeledEmbeddingSet(self.transform(data.features), data.labels, data.class_count)


def scatter_matrices(params: GaussianParams):
    """``(S_B, S_W)`` with prior-weighted between-class scatter and ``S_W`` the pooled covariance."""
    if params.pooled_cov is None:
        raise ValueError("Fisher subspace needs the pooled covariance")
    pi = params.priors
    mu = params.class_means
    centered = mu - pi @ mu
    S_B = (centered.T * pi) @ centered
    return 0.5 * (S_B + S_B.T), params.pooled_cov


def fit_fisher(params: GaussianParams, select: Selection = Energy(0.99)) -> FisherBasis:
    if params.n_classes < 2:
        raise ValueError("Fisher subspace needs at least two classes")
    S_B, S_W = scatter_matrices(params)
    L = _cholesky(S_W, "within-class scatter")
    Linv_SB = solve_triangular(L, S_B, lower=True)
    M = solve_triangular(L, Linv_SB.T, lower=True)
    M = 0.5 * (M + M.T)
    lam, W = np.linalg.eigh(M)
    lam, W = lam[::-1], W[:, ::-1]
    lam = np.where(np.abs(lam) < _NULL_TOL * max(lam[0], 1e-300), 0.0, lam)
    total = float(lam[lam > 0].sum())
    k_in = S_W.shape[0]
    rank = int(np.sum(lam > _NULL_TOL * max(lam[0], 1e-300)))
    cum = np.cumsum(np.clip(lam, 0.0, None)) / total if total > 0 else np.zeros(k_in)

    if isinstance(select, FixedK):
        k_f = int(select.k)
        if not 1 <= k_f <= k_in:
            raise ValueError(f"requested k_f={k_f} outside [1, {k_in}]")
    elif isinstance(select, Energy):
        if not 0.0 < select.threshold <= 1.0:
            raise ValueError("energy threshold must lie in (0, 1]")
        k_f = int(np.searchsorted(cum, select.threshold - 1e-12) + 1)
        k_f = min(max(k_f, 1), max(rank, 1))
    else:
        raise TypeError(f"unknown selection {select!r}")

    padded = max(k_f - rank, 0)
    if padded:
        # Null-space directions of S_B carry no signal; among them prefer those with the
        # smallest within-class variance per unit Euclidean length.
        null = W[:, rank:]
        Linv_T_null = solve_triangular(L, null, lower=True, trans="T")
        G = Linv_T_null.T @ Linv_T_null
        _, Q = np.linalg.eigh(0.5 * (G + G.T))
        W = np.concatenate([W[:, :rank], null @ Q[:, ::-1]], axis=1)
    Wk = W[:, :k_f]
    V = solve_triangular(L, Wk, lower=True, trans="T")
    # deterministic orientation: largest-magnitude entry of each column is positive
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(k_f)])
    signs[signs == 0] = 1.0
    V = V * signs
    return FisherBasis(
        V=V,
        eigenvalues=np.clip(lam[:k_f], 0.0, None),
        energy=cum[:k_f],
        all_eigenvalues=lam,
        padded=padded,
    )


def project_bundle_fisher(agg: MomentBundle, basis: FisherBasis) -> MomentBundle:
    if agg.space.kind == "fisher":
        raise ValueError("bundle is already in Fisher space")
    if agg.dim != basis.k_in:
        raise ValueError(f"bundle has dim {agg.dim}, basis expects {basis.k_in}")
    return linear_map_bundle(agg, basis.V, FISHER)


def project_params(params: GaussianParams, basis: FisherBasis) -> GaussianParams:
    """Map means and covariances through ``V`` (``mu V``, ``V^T S V``, diag of mapped class covs)."""
    V = basis.V
    pooled = V.T @ params.pooled_cov @ V if params.pooled_cov is not None else None
    class_covs = None
    class_vars = None
    if params.class_covs is not None:
        class_covs = np.swapaxes(V, 0, 1) @ params.class_covs @ V
        class_vars = np.diagonal(class_covs, axis1=1, axis2=2).copy()
    return GaussianParams(
        class_means=params.class_means @ V,
        log_priors=params.log_priors,
        class_ids=params.class_ids,
        pooled_cov=pooled,
        class_covs=class_covs,
        class_vars=class_vars,
        class_count=params.class_count,
    )


def energy_sweep(
    params: GaussianParams,
    probe_set: LabeledEmbeddingSet,
    ks: Sequence[int],
) -> list:
    """Rows of ``{"k", "energy", "lda_accuracy"}`` for Fisher-subspace LDA at each ``k``.

    A ``k`` of 0 (or ``None``) stands for full-space LDA.
    """
    rows = []
    for k in ks:
        if not k:
            head = fit_head(params, "lda")
            rows.append({"k": 0, "energy": 1.0, "lda_accuracy": accuracy(head, probe_set)})
            continue
        basis = fit_fisher(params, FixedK(int(k)))
        head = fit_head(project_params(params, basis), "lda")
        acc = accuracy(head, basis.project_set(probe_set))
        rows.append({"k": int(k), "energy": basis.captured_energy, "lda_accuracy": acc})
    return rows


__all__ = [
    "Energy",
    "FisherBasis",
    "FixedK",
    "energy_sweep",
    "fit_fisher",
    "project_bundle_fisher",
    "project_params",
    "scatter_matrices",
]
