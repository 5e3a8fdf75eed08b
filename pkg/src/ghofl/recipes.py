"""Synthetic class-conditional Gaussian datasets, so every experiment can run without files."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .datamodel import LabeledEmbeddingSet

MEAN_LAYOUTS = ("simplex", "antipodal", "offset", "random")
COVARIANCE_FAMILIES = ("identity", "isotropic", "shared_random", "heteroscedastic")


@dataclass(frozen=True)
class SyntheticRecipe:
    """Gaussian mixture recipe.

    ``means``: ``simplex`` (regular simplex with circumradius ``separation``), ``antipodal``
    (two classes at ``+-separation e1``), ``offset`` (class ``c`` at ``c * separation * e1``)
    or ``random`` (random directions of norm ``separation``).
    ``covariance``: ``identity`` (``noise^2 I``), ``isotropic`` (``class_variances[c] I``),
    ``shared_random`` (one random SPD matrix) or ``heteroscedastic`` (a random rotation and
    log-normal spectrum per class).
    """

    class_count: int = 10
    dim: int = 64
    separation: float = 3.0
    means: str = "simplex"
    covariance: str = "identity"
    noise: float = 1.0
    class_variances: Optional[Tuple[float, ...]] = None
    anisotropy: float = 1.0
    n_train: int = 20000
    n_test: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 1 or self.dim < 1:
            raise ValueError("class_count and dim must be positive")
        if self.means not in MEAN_LAYOUTS:
            raise ValueError(f"unknown mean layout {self.means!r}")
        if self.covariance not in COVARIANCE_FAMILIES:
            raise ValueError(f"unknown covariance family {self.covariance!r}")
        if self.means == "antipodal" and self.class_count != 2:
            raise ValueError("antipodal means need exactly two classes")
        if self.covariance == "isotropic":
            if self.class_variances is None or len(self.class_variances) != self.class_count:
                raise ValueError("isotropic covariance needs one variance per class")
        if self.n_train < self.class_count or self.n_test < 1:
            raise ValueError("need at least one training sample per class and one test sample")


def _means(r: SyntheticRecipe, rng: np.random.Generator) -> np.ndarray:
    C, d, s = r.class_count, r.dim, r.separation
    mu = np.zeros((C, d))
    if r.means == "antipodal":
        mu[0, 0], mu[1, 0] = s, -s
    elif r.means == "offset":
        mu[:, 0] = s * np.arange(C)
    elif r.means == "simplex" and d >= C and C > 1:
        E = np.eye(C) - 1.0 / C
        mu[:, :C] = s * E / np.linalg.norm(E[0])
    else:
        G = rng.standard_normal((C, d))
        mu = s * G / np.linalg.norm(G, axis=1, keepdims=True)
    return mu


def _random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


def _covariances(r: SyntheticRecipe, rng: np.random.Generator) -> np.ndarray:
    C, d = r.class_count, r.dim
    if r.covariance == "identity":
        return np.broadcast_to(r.noise**2 * np.eye(d), (C, d, d)).copy()
    if r.covariance == "isotropic":
        return np.stack([v * np.eye(d) for v in r.class_variances])
    if r.covariance == "shared_random":
        Q = _random_rotation(d, rng)
        lam = r.noise**2 * np.exp(r.anisotropy * rng.standard_normal(d))
        S = (Q * lam) @ Q.T
        return np.broadcast_to(S, (C, d, d)).copy()
    out = np.empty((C, d, d))
    for c in range(C):
        Q = _random_rotation(d, rng)
        lam = r.noise**2 * np.exp(r.anisotropy * rng.standard_normal(d))
        out[c] = (Q * lam) @ Q.T
    return out


def _draw(mu, covs, counts, rng) -> LabeledEmbeddingSet:
    C, d = mu.shape
    chols = [np.linalg.cholesky(S) for S in covs]
    X = np.empty((int(sum(counts)), d))
    y = np.repeat(np.arange(C), counts)
    pos = 0
    for c, n in enumerate(counts):
        X[pos : pos + n] = rng.standard_normal((n, d)) @ chols[c].T + mu[c]
        pos += n
    perm = rng.permutation(X.shape[0])
    return LabeledEmbeddingSet(X[perm], y[perm], C)


def _balanced(n: int, C: int) -> Sequence[int]:
    base, extra = divmod(n, C)
    return [base + (1 if c < extra else 0) for c in range(C)]


def generate(recipe: SyntheticRecipe):
    """``(train, test, truth)`` where ``truth`` holds the generating means and covariances."""
    rng = np.random.default_rng([recipe.seed, 0])
    mu = _means(recipe, rng)
    covs = _covariances(recipe, rng)
    train = _draw(mu, covs, _balanced(recipe.n_train, recipe.class_count), np.random.default_rng([recipe.seed, 1]))
    test = _draw(mu, covs, _balanced(recipe.n_test, recipe.class_count), np.random.default_rng([recipe.seed, 2]))
    return train, test, {"means": mu, "covs": covs}
