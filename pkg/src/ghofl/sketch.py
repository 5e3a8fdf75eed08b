"""Public random-projection sketch ``z = x R`` and the moment identities it induces."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import prng
from .datamodel import LabeledEmbeddingSet, MomentBundle, SpaceTag

_PROJECTION_DOMAIN = 0x5250  # "RP"


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    """``d x k`` Gaussian matrix with i.i.d. N(0, 1/k) entries, a pure function of (seed, d, k).

    Only the header travels between parties; ``entries`` is regenerated locally.
    """

    seed: int
    d: int
    k: int
    entries: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.k < 1 or self.d < 1:
            raise ValueError("projection dimensions must be positive")
        if self.k > self.d:
            raise ValueError(f"output dim k={self.k} exceeds input dim d={self.d}")
        if self.entries is None:
            key = prng.derive_key(self.seed, _PROJECTION_DOMAIN, self.d, self.k)
            R = prng.gaussians(key, self.d * self.k).reshape(self.d, self.k) / np.sqrt(self.k)
        else:
            R = np.array(self.entries, dtype=np.float64)
            if R.shape != (self.d, self.k):
                raise ValueError(f"entries must be {self.d} x {self.k}")
        R.setflags(write=False)
        object.__setattr__(self, "entries", R)

    @property
    def tag(self) -> SpaceTag:
        return SpaceTag.projected(self.seed, self.k)

    def header(self) -> dict:
        return {"seed": int(self.seed), "d": int(self.d), "k": int(self.k)}


def project_set(
    data: LabeledEmbeddingSet,
    R: ProjectionMatrix,
    shift: Optional[np.ndarray] = None,
    scale: Optional[np.ndarray] = None,
) -> LabeledEmbeddingSet:
    """Map every row to ``z = x R``.

    ``shift``/``scale`` apply a public per-feature standardization ``(x - shift) / scale``
    before projecting.  They must be identical for all parties, otherwise moments stop
    being additive.
    """
    if data.dim != R.d:
        raise ValueError(f"set has dim {data.dim}, projection expects {R.d}")
    X = data.features
    if shift is not None:
        X = X - np.asarray(shift, dtype=np.float64)
    if scale is not None:
        X = X / np.asarray(scale, dtype=np.float64)
    return LabeledEmbeddingSet(X @ R.entries, data.labels, data.class_count)


def congruence(M: np.ndarray, R: np.ndarray) -> np.ndarray:
    """``R^T M R`` for one matrix or a stack of them."""
    return np.swapaxes(R, 0, 1) @ M @ R


def project_bundle(bundle: MomentBundle, R: ProjectionMatrix) -> MomentBundle:
    if bundle.space.kind != "raw":
        raise ValueError(f"only raw bundles can be projected, got {bundle.space}")
    if bundle.dim != R.d:
        raise ValueError(f"bundle has dim {bundle.dim}, projection expects {R.d}")
    return linear_map_bundle(bundle, R.entries, R.tag)


def linear_map_bundle(bundle: MomentBundle, M: np.ndarray, space: SpaceTag) -> MomentBundle:
    """Push every linear/quadratic field through ``x -> x M``.

    Elementwise power sums do not survive a change of basis: the diagonal is rebuilt from
    the mapped class second moments when present and dropped otherwise, and cube/fourth
    power sums are always dropped.
    """
    A = bundle.first_moments @ M
    B = congruence(bundle.global_second, M) if bundle.has("global_second") else None
    S = congruence(bundle.class_second, M) if bundle.has("class_second") else None
    D = None
    if bundle.has("class_sq_sums"):
        if S is not None:
            D = np.diagonal(S, axis1=1, axis2=2).copy()
        else:
            warnings.warn(
                "class_sq_sums without class_second cannot be mapped; dropping the diagonal",
                stacklevel=3,
            )
    if bundle.has("class_cube_sums") or bundle.has("class_quart_sums"):
        warnings.warn("third/fourth power sums do not map linearly; dropped", stacklevel=3)
    if S is not None and B is not None:
        # keep B == sum_c S_c exact after the map
        B = S.sum(axis=0)
    return MomentBundle(
        bundle.counts,
        A,
        global_second=B,
        class_second=S,
        class_sq_sums=D,
        space=space,
    )
