"""Core value types and embedding-file ingestion.

All numeric state is float64 in memory; embedding files store float32 features.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

PathLike = Union[str, Path]

EMBEDDING_MAGIC = b"GHE1"

# Optional bundle fields in declaration (and wire) order.
OPTIONAL_FIELDS = (
    "global_second",
    "class_second",
    "class_sq_sums",
    "class_cube_sums",
    "class_quart_sums",
)


class IngestError(ValueError):
    """Raised when an embedding file is malformed.  ``row`` is 0-based when known."""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


class BundleMismatch(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


@dataclass(frozen=True, eq=False)
class LabeledEmbeddingSet:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64, copy=True)
        y = np.array(self.labels, copy=True)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"features must be a non-empty n x d matrix, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError("labels must be a vector with one entry per row")
        if y.dtype.kind == "f":
            if not np.all(np.isfinite(y)) or np.any(y != np.round(y)):
                raise ValueError("labels must be integers")
        y = y.astype(np.int64)
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        bad = np.flatnonzero((y < 0) | (y >= self.class_count))
        if bad.size:
            raise ValueError(f"label {y[bad[0]]} at row {bad[0]} outside [0, {self.class_count})")
        nonfinite = np.flatnonzero(~np.all(np.isfinite(X), axis=1))
        if nonfinite.size:
            raise ValueError(f"non-finite feature value at row {nonfinite[0]}")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "labels", _frozen(y))
        object.__setattr__(self, "class_count", int(self.class_count))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray) -> "LabeledEmbeddingSet":
        index = np.asarray(index, dtype=np.int64)
        return LabeledEmbeddingSet(self.features[index], self.labels[index], self.class_count)

    def equals(self, other: "LabeledEmbeddingSet") -> bool:
        return (
            self.class_count == other.class_count
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True)
class SpaceTag:
    """Coordinate system a bundle lives in: ``raw``, ``projected`` (with seed, k) or ``fisher``."""

    kind: str = "raw"
    seed: Optional[int] = None
    k: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("raw", "projected", "fisher"):
            raise ValueError(f"unknown space kind {self.kind!r}")
        if self.kind == "projected" and (self.seed is None or self.k is None):
            raise ValueError("projected space needs seed and k")

    @classmethod
    def projected(cls, seed: int, k: int) -> "SpaceTag":
        return cls("projected", int(seed), int(k))

    def __str__(self) -> str:
        if self.kind == "projected":
            return f"projected(seed={self.seed}, k={self.k})"
        return self.kind


RAW = SpaceTag("raw")
FISHER = SpaceTag("fisher")


@dataclass(frozen=True, eq=False)
class MomentBundle:
    """Additive sufficient statistics of a client shard or of the aggregate.

    ``counts`` (C,), ``first_moments`` (C, k); optional ``global_second`` (k, k),
    ``class_second`` (C, k, k), and per-class elementwise power sums
    ``class_sq_sums`` / ``class_cube_sums`` / ``class_quart_sums`` (C, k).
    """

    counts: np.ndarray
    first_moments: np.ndarray
    global_second: Optional[np.ndarray] = None
    class_second: Optional[np.ndarray] = None
    class_sq_sums: Optional[np.ndarray] = None
    class_cube_sums: Optional[np.ndarray] = None
    class_quart_sums: Optional[np.ndarray] = None
    space: SpaceTag = field(default=RAW)

    def __post_init__(self):
        counts = np.array(self.counts)
        if counts.dtype.kind == "f":
            if np.any(counts != np.round(counts)):
                raise ValueError("counts must be integral")
        counts = counts.astype(np.int64)
        if counts.ndim != 1 or counts.size < 1:
            raise ValueError("counts must be a non-empty vector")
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        C = counts.size
        A = np.array(self.first_moments, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != C:
            raise ValueError(f"first_moments must be {C} x k, got {A.shape}")
        k = A.shape[1]
        object.__setattr__(self, "counts", _frozen(counts))
        object.__setattr__(self, "first_moments", _frozen(A))
        shapes = {
            "global_second": (k, k),
            "class_second": (C, k, k),
            "class_sq_sums": (C, k),
            "class_cube_sums": (C, k),
            "class_quart_sums": (C, k),
        }
        for name in OPTIONAL_FIELDS:
            v = getattr(self, name)
            if v is None:
                continue
            v = np.array(v, dtype=np.float64)
            if v.shape != shapes[name]:
                raise ValueError(f"{name} must have shape {shapes[name]}, got {v.shape}")
            if name in ("global_second", "class_second"):
                v = _symmetrize(v)
            object.__setattr__(self, name, _frozen(v))
        if self.class_second is not None and self.class_sq_sums is not None:
            diag = np.diagonal(self.class_second, axis1=1, axis2=2)
            scale = max(float(np.max(np.abs(diag))), 1.0)
            if np.max(np.abs(diag - self.class_sq_sums)) > 1e-9 * scale:
                raise ValueError("class_sq_sums disagrees with diag(class_second)")
        if self.class_second is not None and self.global_second is not None:
            total = self.class_second.sum(axis=0)
            scale = max(float(np.max(np.abs(self.global_second))), 1.0)
            if np.max(np.abs(total - self.global_second)) > 1e-6 * scale:
                raise ValueError("global_second disagrees with the sum of class_second")

    @property
    def class_count(self) -> int:
        return self.counts.size

    @property
    def dim(self) -> int:
        return self.first_moments.shape[1]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def present(self) -> tuple:
        """Names of the optional fields this bundle carries."""
        return tuple(n for n in OPTIONAL_FIELDS if getattr(self, n) is not None)

    def has(self, name: str) -> bool:
        return getattr(self, name) is not None

    def with_fields(self, **kwargs) -> "MomentBundle":
        return replace(self, **kwargs)

    def __add__(self, other: "MomentBundle") -> "MomentBundle":
        return add_bundles(self, other)

    @classmethod
    def zeros(
        cls,
        class_count: int,
        dim: int,
        present: Sequence[str] = (),
        space: SpaceTag = RAW,
    ) -> "MomentBundle":
        C, k = class_count, dim
        shapes = {
            "global_second": (k, k),
            "class_second": (C, k, k),
            "class_sq_sums": (C, k),
            "class_cube_sums": (C, k),
            "class_quart_sums": (C, k),
        }
        extra = {name: np.zeros(shapes[name]) for name in present}
        return cls(np.zeros(C, dtype=np.int64), np.zeros((C, k)), space=space, **extra)


def check_compatible(a: MomentBundle, b: MomentBundle) -> None:
    if a.dim != b.dim or a.class_count != b.class_count:
        raise BundleMismatch(
            f"shape mismatch: (C={a.class_count}, k={a.dim}) vs (C={b.class_count}, k={b.dim})"
        )
    if a.space != b.space:
        raise BundleMismatch(f"space mismatch: {a.space} vs {b.space}")
    if a.present() != b.present():
        raise BundleMismatch(f"field mismatch: {a.present()} vs {b.present()}")


def add_bundles(a: MomentBundle, b: MomentBundle) -> MomentBundle:
    check_compatible(a, b)
    extra = {name: getattr(a, name) + getattr(b, name) for name in a.present()}
    return MomentBundle(a.counts + b.counts, a.first_moments + b.first_moments, space=a.space, **extra)


def sum_bundles(bundles: Sequence[MomentBundle]) -> MomentBundle:
    """Reduce with a fixed balanced tree so the result depends only on list order."""
    items = list(bundles)
    if not items:
        raise ValueError("nothing to sum")
    while len(items) > 1:
        paired = [add_bundles(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            paired.append(items[-1])
        items = paired
    return items[0]


@dataclass(frozen=True, eq=False)
class GaussianParams:
    """Moment-derived Gaussian parameters over the retained classes.

    ``class_ids[i]`` is the original label of row ``i``.  Covariances are stored
    after shrinkage; ``class_vars`` after variance flooring.
    """

    class_means: np.ndarray
    log_priors: np.ndarray
    class_ids: np.ndarray
    pooled_cov: Optional[np.ndarray] = None
    class_covs: Optional[np.ndarray] = None
    class_vars: Optional[np.ndarray] = None
    class_count: Optional[int] = None

    def __post_init__(self):
        mu = np.array(self.class_means, dtype=np.float64)
        lp = np.array(self.log_priors, dtype=np.float64)
        ids = np.array(self.class_ids, dtype=np.int64)
        if mu.ndim != 2 or lp.shape != (mu.shape[0],) or ids.shape != lp.shape:
            raise ValueError("class_means, log_priors and class_ids disagree in class count")
        total = float(np.exp(lp).sum())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"priors sum to {total}, not 1")
        object.__setattr__(self, "class_means", _frozen(mu))
        object.__setattr__(self, "log_priors", _frozen(lp))
        object.__setattr__(self, "class_ids", _frozen(ids))
        if self.class_count is None:
            object.__setattr__(self, "class_count", int(ids.max()) + 1)
        for name in ("pooled_cov", "class_covs", "class_vars"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _frozen(np.array(v, dtype=np.float64)))

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def priors(self) -> np.ndarray:
        return np.exp(self.log_priors)


# ---------------------------------------------------------------------------
# Embedding files
# ---------------------------------------------------------------------------


def _parse_csv(path: Path):
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise IngestError("expected at least one feature and a label", i)
            try:
                feats = [float(cell) for cell in row[:-1]]
            except ValueError as exc:
                raise IngestError(f"unparseable feature ({exc})", i) from None
            if not all(math.isfinite(v) for v in feats):
                raise IngestError("non-finite feature value", i)
            try:
                label = int(row[-1].strip())
            except ValueError:
                raise IngestError(f"label {row[-1]!r} is not an integer", i) from None
            if label < 0:
                raise IngestError(f"negative label {label}", i)
            if width is None:
                width = len(feats)
            elif len(feats) != width:
                raise IngestError(f"expected {width} features, found {len(feats)}", i)
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise IngestError("no rows")
    return np.asarray(rows, dtype=np.float64), np.asarray(labels, dtype=np.int64), None


def _parse_packed(path: Path):
    raw = path.read_bytes()
    if len(raw) == 0:
        raise IngestError("no rows")
    if len(raw) < 16 or raw[:4] != EMBEDDING_MAGIC:
        raise IngestError("missing GHE1 header")
    n, d, C = struct.unpack_from("<III", raw, 4)
    if n == 0:
        raise IngestError("no rows")
    if d == 0:
        raise IngestError("zero feature dimension")
    rec = np.dtype([("x", "<f4", (d,)), ("y", "<u4")])
    body = raw[16:]
    if len(body) != n * rec.itemsize:
        raise IngestError(f"expected {n} records of {rec.itemsize} bytes, found {len(body)} bytes")
    arr = np.frombuffer(body, dtype=rec, count=n)
    X = arr["x"].astype(np.float64)
    y = arr["y"].astype(np.int64)
    bad = np.flatnonzero(~np.all(np.isfinite(X), axis=1))
    if bad.size:
        raise IngestError("non-finite feature value", int(bad[0]))
    bad = np.flatnonzero(y >= C)
    if bad.size:
        raise IngestError(f"label {y[bad[0]]} outside [0, {C})", int(bad[0]))
    return X, y, int(C)


def ingest_embeddings(
    path: PathLike, format: Optional[str] = None, class_count: Optional[int] = None
) -> LabeledEmbeddingSet:
    """Read a labeled embedding file (``csv`` or ``packed``).

    The format is guessed from the extension when not given (``.csv`` vs anything else).
    ``class_count`` defaults to the header value (packed) or ``max(label) + 1``.
    """
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "packed"
    if format == "csv":
        X, y, header_C = _parse_csv(path)
    elif format in ("packed", "packed-binary", "bin"):
        X, y, header_C = _parse_packed(path)
    else:
        raise ValueError(f"unknown embedding format {format!r}")
    C = class_count if class_count is not None else (header_C or int(y.max()) + 1)
    bad = np.flatnonzero(y >= C)
    if bad.size:
        raise IngestError(f"label {y[bad[0]]} outside [0, {C})", int(bad[0]))
    return LabeledEmbeddingSet(X, y, C)


def write_embeddings(data: LabeledEmbeddingSet, path: PathLike, format: Optional[str] = None) -> None:
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "packed"
    if format == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for x, y in zip(data.features, data.labels):
                w.writerow([repr(float(v)) for v in x] + [int(y)])
        return
    rec = np.dtype([("x", "<f4", (data.dim,)), ("y", "<u4")])
    arr = np.empty(data.n, dtype=rec)
    arr["x"] = data.features.astype(np.float32)
    arr["y"] = data.labels.astype(np.uint32)
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<III", data.n, data.dim, data.class_count))
        fh.write(arr.tobytes())


__all__ = [
    "BundleMismatch",
    "FISHER",
    "GaussianParams",
    "IngestError",
    "LabeledEmbeddingSet",
    "MomentBundle",
    "OPTIONAL_FIELDS",
    "RAW",
    "SpaceTag",
    "add_bundles",
    "check_compatible",
    "ingest_embeddings",
    "sum_bundles",
    "write_embeddings",
]
