"""Univariate Gaussianity diagnostics (skewness, excess kurtosis) from power sums.

Central moments are recovered from the per-class raw power sums
``D = sum x^2``, ``M3 = sum x^3``, ``M4 = sum x^4`` and ``A = sum x``::

    m2 = D/N - mu^2
    m3 = M3/N - 3 mu D/N + 2 mu^3
    m4 = M4/N - 4 mu M3/N + 6 mu^2 D/N - 3 mu^4
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import MomentBundle

MIN_COUNT = 8


@dataclass(frozen=True, eq=False)
class GaussianityReport:
    skewness: np.ndarray  # C x k, NaN where excluded
    excess_kurtosis: np.ndarray
    included: np.ndarray  # C x k bool
    counts: np.ndarray

    def summary(self) -> dict:
        s = np.abs(self.skewness[self.included])
        e = np.abs(self.excess_kurtosis[self.included])

        def stats(v):
            if v.size == 0:
                return {"mean": None, "median": None, "p90": None}
            return {
                "mean": float(v.mean()),
                "median": float(np.median(v)),
                "p90": float(np.percentile(v, 90)),
            }

        return {"abs_skew": stats(s), "abs_excess_kurtosis": stats(e), "entries": int(s.size)}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "dim", "count", "skewness", "excess_kurtosis", "included"])
            C, k = self.skewness.shape
            for c in range(C):
                for j in range(k):
                    w.writerow([c, j, int(self.counts[c]), float(self.skewness[c, j]),
                                float(self.excess_kurtosis[c, j]), bool(self.included[c, j])])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))


def central_moments(agg: MomentBundle):
    """Per-class ``(m2, m3, m4)``; rows of empty classes are NaN."""
    for name in ("class_sq_sums", "class_cube_sums", "class_quart_sums"):
        if not agg.has(name):
            raise ValueError(f"diagnostics need {name}")
    N = agg.counts.astype(np.float64)[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = agg.first_moments / N
        s2 = agg.class_sq_sums / N
        s3 = agg.class_cube_sums / N
        s4 = agg.class_quart_sums / N
    m2 = s2 - mu**2
    m3 = s3 - 3 * mu * s2 + 2 * mu**3
    m4 = s4 - 4 * mu * s3 + 6 * mu**2 * s2 - 3 * mu**4
    return m2, m3, m4


def gaussianity(agg: MomentBundle, min_count: int = MIN_COUNT, var_floor: float = 1e-12) -> GaussianityReport:
    m2, m3, m4 = central_moments(agg)
    ok = (agg.counts[:, None] >= min_count) & (m2 > var_floor)
    with np.errstate(invalid="ignore", divide="ignore"):
        skew = np.where(ok, m3 / np.where(ok, m2, 1.0) ** 1.5, np.nan)
        kurt = np.where(ok, m4 / np.where(ok, m2, 1.0) ** 2 - 3.0, np.nan)
    return GaussianityReport(skew, kurt, ok, agg.counts.copy())
