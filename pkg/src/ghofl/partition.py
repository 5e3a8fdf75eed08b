"""Split a labeled set across simulated clients (IID, Dirichlet label skew, m classes each)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .datamodel import LabeledEmbeddingSet

SCHEMES = ("iid", "dirichlet", "classes_per_client")


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    scheme: str = "dirichlet"
    alpha: Optional[float] = 0.5
    classes_per_client: Optional[int] = None
    seed: int = 0
    min_per_class_per_client: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be at least 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.scheme == "dirichlet" and (self.alpha is None or not self.alpha > 0):
            raise ValueError(f"Dirichlet alpha must be positive, got {self.alpha}")
        if self.scheme == "classes_per_client" and (self.classes_per_client or 0) < 1:
            raise ValueError("classes_per_client must be at least 1")
        if self.min_per_class_per_client < 0:
            raise ValueError("min_per_class_per_client must be nonnegative")

    @classmethod
    def iid(cls, num_clients: int, seed: int = 0) -> "PartitionSpec":
        return cls(num_clients, "iid", None, None, seed)

    @classmethod
    def dirichlet(cls, num_clients: int, alpha: float, seed: int = 0, min_per_class_per_client: int = 0):
        return cls(num_clients, "dirichlet", alpha, None, seed, min_per_class_per_client)

    @classmethod
    def per_client_classes(cls, num_clients: int, m: int, seed: int = 0) -> "PartitionSpec":
        return cls(num_clients, "classes_per_client", None, m, seed)

    def describe(self) -> str:
        if self.scheme == "dirichlet":
            return f"dirichlet(alpha={self.alpha}) U={self.num_clients}"
        if self.scheme == "classes_per_client":
            return f"classes_per_client(m={self.classes_per_client}) U={self.num_clients}"
        return f"iid U={self.num_clients}"


def make_partition(data: LabeledEmbeddingSet, spec: PartitionSpec) -> List[np.ndarray]:
    """Disjoint, sorted index arrays (one per client) covering ``0..n-1``."""
    n, U, C = data.n, spec.num_clients, data.class_count
    if U > n:
        raise ValueError(f"{U} clients but only {n} samples")
    rng = np.random.default_rng(spec.seed)
    y = data.labels
    owned: List[list] = [[] for _ in range(U)]

    if spec.scheme == "iid":
        for u, part in enumerate(np.array_split(rng.permutation(n), U)):
            owned[u].append(part)

    elif spec.scheme == "dirichlet":
        m = spec.min_per_class_per_client
        for c in range(C):
            idx = rng.permutation(np.flatnonzero(y == c))
            p = rng.dirichlet(np.full(U, spec.alpha))
            guaranteed = m if idx.size >= m * U else 0
            rest = idx.size - guaranteed * U
            counts = rng.multinomial(rest, p) + guaranteed
            for u, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                owned[u].append(part)

    else:
        mcls = spec.classes_per_client
        if mcls > C:
            raise ValueError(f"classes_per_client={mcls} exceeds class count {C}")
        if U * mcls < C:
            raise ValueError(f"{U} clients x {mcls} classes leave some classes without an owner")
        order = rng.permutation(C)
        owners: List[list] = [[] for _ in range(C)]
        for u in range(U):
            for j in range(mcls):
                owners[order[(u * mcls + j) % C]].append(u)
        for c in range(C):
            idx = rng.permutation(np.flatnonzero(y == c))
            for u, part in zip(owners[c], np.array_split(idx, len(owners[c]))):
                owned[u].append(part)

    return [np.sort(np.concatenate(parts)).astype(np.int64) if parts else np.zeros(0, np.int64)
            for parts in owned]


def client_histograms(data: LabeledEmbeddingSet, parts: List[np.ndarray]) -> np.ndarray:
    return np.stack([np.bincount(data.labels[p], minlength=data.class_count) for p in parts])


def partition_fingerprint(parts: List[np.ndarray]) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(len(p).to_bytes(8, "little"))
        h.update(np.asarray(p, dtype="<i8").tobytes())
    return h.hexdigest()


def export_partition(parts: List[np.ndarray], path) -> None:
    Path(path).write_text(json.dumps([p.tolist() for p in parts]))


def load_partition(path) -> List[np.ndarray]:
    return [np.asarray(p, dtype=np.int64) for p in json.loads(Path(path).read_text())]
