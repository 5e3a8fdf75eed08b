"""Closed-form Gaussian heads built from aggregated moments.

Parameter estimation (means, priors, pooled/class covariances, diagonal variances),
covariance shrinkage, and scoring for NB-diag, LDA, QDA and diagonal-plus-low-rank QDA
evaluated with the Woodbury identity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .datamodel import GaussianParams, LabeledEmbeddingSet, MomentBundle

HEAD_KINDS = ("nb_diag", "lda", "qda", "dlr_qda")


class NotPositiveDefinite(np.linalg.LinAlgError):
    def __init__(self, what: str, min_eig: float):
        self.min_eig = min_eig
        super().__init__(f"{what} is not positive definite (min eigenvalue {min_eig:.3e})")


@dataclass(frozen=True)
class Shrinkage:
    """Shrinkage toward ``tr(S)/k * I``.

    ``alpha`` applies to the pooled covariance, ``class_alpha`` (default: ``alpha``) to class
    covariances.  ``variance_floor`` is absolute; when unset the floor is
    ``variance_floor_rel`` times the mean diagonal variance.
    """

    alpha: float = 0.1
    class_alpha: Optional[float] = 0.3
    variance_floor: Optional[float] = None
    variance_floor_rel: float = 1e-6

    def __post_init__(self):
        for a in (self.alpha, self.class_alpha):
            if a is not None and not 0.0 <= a <= 1.0:
                raise ValueError(f"shrinkage alpha {a} outside [0, 1]")

    @property
    def class_value(self) -> float:
        return self.alpha if self.class_alpha is None else self.class_alpha


def shrink(S: np.ndarray, alpha: float) -> np.ndarray:
    """``(1 - alpha) S + alpha tr(S)/k I`` for one matrix or a stack."""
    S = np.asarray(S, dtype=np.float64)
    k = S.shape[-1]
    target = np.trace(S, axis1=-2, axis2=-1)[..., None, None] / k * np.eye(k)
    out = (1.0 - alpha) * S + alpha * target
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def estimate_params(
    agg: MomentBundle,
    shrinkage: Shrinkage = Shrinkage(),
    min_count: int = 2,
) -> GaussianParams:
    """Gaussian parameters from an aggregate bundle.

    Classes with fewer than ``min_count`` samples are dropped; the surviving original labels
    are kept in ``class_ids``.  The pooled within-class scatter still uses every non-empty
    class, so dropping a class never leaks its mean into the shared covariance.
    """
    N = agg.counts
    keep = np.flatnonzero(N >= max(int(min_count), 1))
    if keep.size == 0:
        raise ValueError(f"every class has fewer than {min_count} samples")
    small = np.flatnonzero((N > 0) & (N < min_count))
    if small.size:
        warnings.warn(f"dropping classes below min_count={min_count}: {small.tolist()}", stacklevel=2)
    nonempty = np.flatnonzero(N > 0)
    mu_all = np.zeros_like(agg.first_moments)
    mu_all[nonempty] = agg.first_moments[nonempty] / N[nonempty, None]
    mu = mu_all[keep]
    Nk = N[keep].astype(np.float64)
    log_priors = np.log(Nk) - np.log(Nk.sum())
    # renormalize so exp(log_priors) sums to 1 to machine precision
    log_priors -= np.log(np.exp(log_priors).sum())
    k = agg.dim

    pooled = None
    B = agg.global_second
    if B is None and agg.has("class_second"):
        B = agg.class_second.sum(axis=0)
    if B is not None:
        denom = int(N.sum()) - nonempty.size
        if denom <= 0:
            raise ValueError(f"pooled covariance denominator N - C = {denom} is not positive")
        Nn = N[nonempty].astype(np.float64)
        between = (mu_all[nonempty].T * Nn) @ mu_all[nonempty]
        pooled = shrink((B - between) / denom, shrinkage.alpha)

    class_covs = None
    if agg.has("class_second"):
        class_covs = np.empty((keep.size, k, k))
        for i, c in enumerate(keep):
            if N[c] >= 2:
                Sc = (agg.class_second[c] - N[c] * np.outer(mu_all[c], mu_all[c])) / (N[c] - 1)
                class_covs[i] = shrink(Sc, shrinkage.class_value)
            else:
                warnings.warn(
                    f"class {c} has a single sample; using the pooled covariance", stacklevel=2
                )
                class_covs[i] = pooled

    class_vars = None
    if agg.has("class_sq_sums"):
        sq = agg.class_sq_sums[keep]
    elif agg.has("class_second"):
        sq = np.diagonal(agg.class_second[keep], axis1=1, axis2=2)
    else:
        sq = None
    if sq is not None:
        var = np.maximum(sq / Nk[:, None] - mu * mu, 0.0)
        floor = shrinkage.variance_floor
        if floor is None:
            m = float(var.mean())
            floor = shrinkage.variance_floor_rel * m if m > 0 else 1e-12
        class_vars = np.maximum(var, floor)

    return GaussianParams(
        class_means=mu,
        log_priors=log_priors,
        class_ids=keep,
        pooled_cov=pooled,
        class_covs=class_covs,
        class_vars=class_vars,
        class_count=agg.class_count,
    )


def _cholesky(S: np.ndarray, what: str) -> np.ndarray:
    try:
        return cholesky(S, lower=True)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(what, float(np.linalg.eigvalsh(S)[0])) from None


# ---------------------------------------------------------------------------
# Diagonal-plus-low-rank algebra
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DLRFactor:
    """Covariance ``diag(d) + U U^T`` with its capacitance Cholesky ``I + U^T diag(d)^-1 U``."""

    d: np.ndarray
    U: np.ndarray
    cap_chol: np.ndarray = field(init=False, repr=False)
    logdet: float = field(init=False)

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        if np.any(d <= 0):
            raise NotPositiveDefinite("DLR diagonal", float(d.min()))
        U = np.asarray(self.U, dtype=np.float64).reshape(d.size, -1)
        r = U.shape[1]
        cap = np.eye(r) + U.T @ (U / d[:, None])
        L = _cholesky(cap, "DLR capacitance") if r else np.zeros((0, 0))
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "cap_chol", L)
        object.__setattr__(self, "logdet", float(np.log(d).sum() + 2.0 * np.log(np.diag(L)).sum()))

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def quad(self, R: np.ndarray) -> np.ndarray:
        """Row-wise ``r^T (D + U U^T)^-1 r`` in O(n k r)."""
        Rd = R / self.d
        q = np.einsum("ij,ij->i", R, Rd)
        if self.rank == 0:
            return q
        T = solve_triangular(self.cap_chol, (Rd @ self.U).T, lower=True)
        return q - np.einsum("ij,ij->j", T, T)

    def dense(self) -> np.ndarray:
        return np.diag(self.d) + self.U @ self.U.T


def dlr_from_covariance(S: np.ndarray, rank: int) -> DLRFactor:
    """Probabilistic-PCA split: top-``rank`` excess variance in ``U``, isotropic remainder.

    The remainder level is the mean of the trailing eigenvalues; at full rank it is set to
    half the smallest eigenvalue so ``D + U U^T`` reproduces ``S`` exactly.
    """
    k = S.shape[0]
    rank = int(min(max(rank, 0), k))
    lam, V = np.linalg.eigh(S)
    lam, V = lam[::-1], V[:, ::-1]
    sigma = float(lam[rank:].mean()) if rank < k else 0.5 * float(lam[-1])
    if sigma <= 0:
        raise NotPositiveDefinite("class covariance (DLR remainder)", float(lam[-1]))
    U = V[:, :rank] * np.sqrt(np.maximum(lam[:rank] - sigma, 0.0))
    return DLRFactor(np.full(k, sigma), U)


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


class GaussianHead:
    """A fitted closed-form discriminant; ``scores`` returns per-class log-scores."""

    def __init__(self, kind: str, params: GaussianParams, rank: Optional[int] = None):
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.params = params
        self.rank = rank
        mu = params.class_means
        if kind == "nb_diag":
            if params.class_vars is None:
                raise ValueError("nb_diag needs class variances (D or S statistics)")
            v = params.class_vars
            self._inv_var = 1.0 / v
            self._log_var_sum = np.log(v).sum(axis=1)
        elif kind == "lda":
            if params.pooled_cov is None:
                raise ValueError("lda needs the pooled covariance (B statistics)")
            self._chol = _cholesky(params.pooled_cov, "pooled covariance")
            self.weights = cho_solve((self._chol, True), mu.T).T
            self.bias = -0.5 * np.einsum("ij,ij->i", mu, self.weights) + params.log_priors
        elif kind == "qda":
            if params.class_covs is None:
                raise ValueError("qda needs class covariances (S statistics)")
            self._chols = [_cholesky(S, f"class {c} covariance") for c, S in zip(params.class_ids, params.class_covs)]
            self._logdets = np.array([2.0 * np.log(np.diag(L)).sum() for L in self._chols])
        else:
            if params.class_covs is None:
                raise ValueError("dlr_qda needs class covariances (S statistics)")
            if rank is None:
                raise ValueError("dlr_qda needs a rank")
            self.factors = [dlr_from_covariance(S, rank) for S in params.class_covs]

    @property
    def class_ids(self) -> np.ndarray:
        return self.params.class_ids

    @property
    def dim(self) -> int:
        return self.params.dim

    @property
    def label(self) -> str:
        return f"dlr_qda_r{self.rank}" if self.kind == "dlr_qda" else self.kind

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.dim:
            raise ValueError(f"input has dim {X.shape[1]}, head expects {self.dim}")
        p = self.params
        mu, lp = p.class_means, p.log_priors
        if self.kind == "lda":
            G = X @ self.weights.T + self.bias
        elif self.kind == "nb_diag":
            G = np.empty((X.shape[0], mu.shape[0]))
            for c in range(mu.shape[0]):
                R = X - mu[c]
                G[:, c] = -0.5 * ((R * R) @ self._inv_var[c] + self._log_var_sum[c]) + lp[c]
        elif self.kind == "qda":
            G = np.empty((X.shape[0], mu.shape[0]))
            for c, L in enumerate(self._chols):
                Z = solve_triangular(L, (X - mu[c]).T, lower=True)
                G[:, c] = -0.5 * self._logdets[c] - 0.5 * np.einsum("ij,ij->j", Z, Z) + lp[c]
        else:
            G = np.empty((X.shape[0], mu.shape[0]))
            for c, F in enumerate(self.factors):
                G[:, c] = -0.5 * F.logdet - 0.5 * F.quad(X - mu[c]) + lp[c]
        return G[0] if single else G

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.class_ids[np.argmax(np.atleast_2d(self.scores(X)), axis=1)]

    def parameter_count(self) -> int:
        p = self.params
        C, k = p.class_means.shape
        n = C * k + C
        if self.kind == "nb_diag":
            return n + C * k
        if self.kind == "lda":
            return n + k * (k + 1) // 2
        if self.kind == "qda":
            return n + C * k * (k + 1) // 2
        return n + sum(F.d.size + F.U.size for F in self.factors)


def fit_head(params: GaussianParams, kind: str, rank: Optional[int] = None) -> GaussianHead:
    return GaussianHead(kind, params, rank)


def score(head, x: np.ndarray) -> np.ndarray:
    return head.scores(x)


def predict(head, X: np.ndarray) -> np.ndarray:
    """Argmax label per row; ties go to the lowest class index."""
    return head.predict(X)


def accuracy(head, data: Union[LabeledEmbeddingSet, tuple]) -> float:
    if isinstance(data, LabeledEmbeddingSet):
        X, y = data.features, data.labels
    else:
        X, y = data
    X = np.asarray(X)
    if X.shape[0] == 0:
        raise ValueError("empty test set")
    return float(np.mean(head.predict(X) == np.asarray(y)))
