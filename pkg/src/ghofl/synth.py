"""Data-free class-conditional sampler in Fisher space.

Class ``c`` is drawn from ``N(mu_c + delta_c, tau_c^2 Sigma_c)`` where
``tau_c = clip(sqrt(tr Sigma_c / mean_j tr Sigma_j), lo, hi)`` and ``delta_c`` nudges the
mean by ``+-eps`` class standard deviations along each of the leading Fisher axes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from .datamodel import GaussianParams, LabeledEmbeddingSet
from .gaussian_heads import _cholesky

COVARIANCE_SOURCES = ("auto", "class", "pooled", "diagonal")


@dataclass(frozen=True)
class SynthConfig:
    per_class: int = 512
    tau_clip: Tuple[float, float] = (0.5, 2.0)
    delta_scale: float = 0.1
    delta_dirs: int = 2
    seed: int = 0
    covariance_source: str = "auto"

    def __post_init__(self):
        if self.per_class < 1:
            raise ValueError("per_class must be at least 1")
        lo, hi = self.tau_clip
        if not 0 < lo <= hi:
            raise ValueError(f"invalid tau clip {self.tau_clip}")
        if self.covariance_source not in COVARIANCE_SOURCES:
            raise ValueError(f"unknown covariance source {self.covariance_source!r}")
        object.__setattr__(self, "tau_clip", (float(lo), float(hi)))


@dataclass(frozen=True, eq=False)
class SyntheticBatch:
    features: np.ndarray
    labels: np.ndarray
    generator_fingerprint: str
    tau: np.ndarray
    delta: np.ndarray
    source: str

    def as_set(self, class_count: Optional[int] = None) -> LabeledEmbeddingSet:
        C = class_count if class_count is not None else int(self.labels.max()) + 1
        return LabeledEmbeddingSet(self.features, self.labels, C)


def resolve_source(params: GaussianParams, requested: str = "auto") -> str:
    if requested != "auto":
        return requested
    if params.class_covs is not None:
        return "class"
    if params.pooled_cov is not None:
        return "pooled"
    if params.class_vars is not None:
        return "diagonal"
    raise ValueError("parameters carry no covariance information to sample from")


def class_covariances(params: GaussianParams, source: str) -> np.ndarray:
    C, k = params.class_means.shape
    if source == "class":
        if params.class_covs is None:
            raise ValueError("class covariance source requested but class_covs missing")
        return params.class_covs
    if source == "pooled":
        if params.pooled_cov is None:
            raise ValueError("pooled covariance source requested but pooled_cov missing")
        return np.broadcast_to(params.pooled_cov, (C, k, k))
    if params.class_vars is not None:
        v = params.class_vars
    elif params.class_covs is not None:
        v = np.diagonal(params.class_covs, axis1=1, axis2=2)
    else:
        raise ValueError("diagonal covariance source requested but no variances available")
    out = np.zeros((C, k, k))
    idx = np.arange(k)
    out[:, idx, idx] = v
    return out


def fingerprint(params: GaussianParams, cfg: SynthConfig, source: str) -> str:
    h = hashlib.sha256()
    for arr in (params.class_means, params.log_priors, params.class_ids,
                params.pooled_cov, params.class_covs, params.class_vars):
        h.update(b"-" if arr is None else np.ascontiguousarray(arr).tobytes())
    h.update(json.dumps(asdict(cfg), sort_keys=True).encode())
    h.update(source.encode())
    return h.hexdigest()


def sample(params_f: GaussianParams, cfg: SynthConfig = SynthConfig()) -> SyntheticBatch:
    source = resolve_source(params_f, cfg.covariance_source)
    covs = class_covariances(params_f, source)
    mu = params_f.class_means
    C, k = mu.shape
    traces = np.trace(covs, axis1=1, axis2=2)
    lo, hi = cfg.tau_clip
    tau = np.clip(np.sqrt(traces / traces.mean()), lo, hi)

    n_dirs = min(cfg.delta_dirs, k)
    feats = np.empty((C * cfg.per_class, k))
    labels = np.repeat(params_f.class_ids, cfg.per_class)
    deltas = np.zeros((C, k))
    for c in range(C):
        rng = np.random.default_rng([cfg.seed, int(params_f.class_ids[c])])
        signs = rng.choice([-1.0, 1.0], size=n_dirs)
        sd = np.sqrt(np.diag(covs[c])[:n_dirs])
        deltas[c, :n_dirs] = cfg.delta_scale * signs * sd
        L = _cholesky(tau[c] ** 2 * covs[c], f"class {params_f.class_ids[c]} sampling covariance")
        Z = rng.standard_normal((cfg.per_class, k))
        feats[c * cfg.per_class : (c + 1) * cfg.per_class] = Z @ L.T + mu[c] + deltas[c]
    return SyntheticBatch(
        features=feats,
        labels=labels,
        generator_fingerprint=fingerprint(params_f, cfg, source),
        tau=tau,
        delta=deltas,
        source=source,
    )
