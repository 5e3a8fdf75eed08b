"""Client-side reduction of a labeled shard to a MomentBundle, and the GHB1 wire frame.

GHB1 frame (little-endian)::

    offset  size  field
    0       4     magic b"GHB1"
    4       2     version (1)
    6       2     flags: bit0 B, bit1 S_c, bit2 D_c, bit3 M3_c, bit4 M4_c
    8       4     C (class count)
    12      4     k (dimension)
    16      1     space kind: 0 raw, 1 projected, 2 fisher
    17      3     padding
    20      8     projection seed (0 unless projected)
    28      4     projection k (0 unless projected)
    32      ...   float64 scalars: N_c (C), A_c (C*k), upper triangle of B (k(k+1)/2),
                  upper triangle of each S_c (C*k(k+1)/2), D_c, M3_c, M4_c (C*k each)

Symmetric matrices travel as their row-major upper triangles, so the payload scalar
count equals the number of independent statistics.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .datamodel import OPTIONAL_FIELDS, LabeledEmbeddingSet, MomentBundle, SpaceTag
from .sketch import ProjectionMatrix, project_set

BUNDLE_MAGIC = b"GHB1"
BUNDLE_VERSION = 1
_HEADER = struct.Struct("<4sHHIIB3xQI")
HEADER_SIZE = _HEADER.size

_FLAG_BITS = {name: 1 << i for i, name in enumerate(OPTIONAL_FIELDS)}
_SPACE_CODES = {"raw": 0, "projected": 1, "fisher": 2}


@dataclass(frozen=True)
class StatsRequest:
    """Which optional statistics a client computes.  Counts and sums are always sent.

    ``project_with`` is a projection header ``{"seed", "d", "k"}``; ``standardize`` an
    optional public ``(shift, scale)`` pair applied before projecting.
    """

    want_B: bool = True
    want_S: bool = False
    want_D: bool = False
    want_M34: bool = False
    project_with: Optional[dict] = None
    standardize: Optional[tuple] = None

    @classmethod
    def for_heads(cls, heads, project_with=None, diagnostics: bool = False, standardize=None) -> "StatsRequest":
        """Smallest request serving every head family in ``heads``.

        ``B`` is omitted when ``S_c`` is sent (``B = sum_c S_c``) and ``D_c`` when it can be
        read off ``diag(S_c)``.
        """
        heads = {h.split("_r")[0] if h.startswith("dlr_qda") else h for h in heads}
        want_S = bool(heads & {"qda", "dlr_qda"})
        want_B = bool(heads & {"lda", "fishermix", "protohyper"}) and not want_S
        want_D = ("nb_diag" in heads and not want_S) or diagnostics
        return cls(want_B, want_S, want_D, diagnostics, project_with, standardize)

    def present(self) -> tuple:
        out = []
        if self.want_B:
            out.append("global_second")
        if self.want_S:
            out.append("class_second")
        if self.want_D or self.want_M34:
            out.append("class_sq_sums")
        if self.want_M34:
            out += ["class_cube_sums", "class_quart_sums"]
        return tuple(out)

    def space(self, dim: int) -> SpaceTag:
        if self.project_with is None:
            return SpaceTag("raw")
        return SpaceTag.projected(self.project_with["seed"], self.project_with["k"])

    def output_dim(self, dim: int) -> int:
        return dim if self.project_with is None else int(self.project_with["k"])


def compute_bundle(shard: LabeledEmbeddingSet, req: StatsRequest) -> MomentBundle:
    space = SpaceTag("raw")
    if req.project_with is not None:
        R = ProjectionMatrix(**req.project_with)
        shift, scale = req.standardize if req.standardize is not None else (None, None)
        shard = project_set(shard, R, shift, scale)
        space = R.tag
    X, y, C, k = shard.features, shard.labels, shard.class_count, shard.dim
    counts = np.bincount(y, minlength=C).astype(np.int64)
    A = np.zeros((C, k))
    S = np.zeros((C, k, k)) if req.want_S else None
    D = np.zeros((C, k)) if (req.want_D or req.want_M34) else None
    M3 = np.zeros((C, k)) if req.want_M34 else None
    M4 = np.zeros((C, k)) if req.want_M34 else None
    order = np.argsort(y, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    for c in np.flatnonzero(counts):
        Xc = X[order[bounds[c] : bounds[c + 1]]]
        A[c] = Xc.sum(axis=0)
        if S is not None:
            S[c] = Xc.T @ Xc
        if D is not None:
            sq = Xc * Xc
            # same path as diag(S_c) so the two agree bit for bit
            D[c] = np.diagonal(S[c]) if S is not None else sq.sum(axis=0)
            if M3 is not None:
                M3[c] = (sq * Xc).sum(axis=0)
                M4[c] = (sq * sq).sum(axis=0)
    B = None
    if req.want_B:
        B = S.sum(axis=0) if S is not None else X.T @ X
    return MomentBundle(
        counts,
        A,
        global_second=B,
        class_second=S,
        class_sq_sums=D if req.want_D or req.want_M34 else None,
        class_cube_sums=M3,
        class_quart_sums=M4,
        space=space,
    )


# ---------------------------------------------------------------------------
# Flat scalar layout shared by the wire frame and secure aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BundleLayout:
    class_count: int
    dim: int
    present: tuple
    space: SpaceTag

    @classmethod
    def of(cls, bundle: MomentBundle) -> "BundleLayout":
        return cls(bundle.class_count, bundle.dim, bundle.present(), bundle.space)

    def segment_sizes(self) -> list:
        C, k = self.class_count, self.dim
        tri = k * (k + 1) // 2
        sizes = [("counts", C), ("first_moments", C * k)]
        per_field = {
            "global_second": tri,
            "class_second": C * tri,
            "class_sq_sums": C * k,
            "class_cube_sums": C * k,
            "class_quart_sums": C * k,
        }
        sizes += [(name, per_field[name]) for name in self.present]
        return sizes

    @property
    def scalar_count(self) -> int:
        return sum(n for _, n in self.segment_sizes())

    @property
    def flags(self) -> int:
        return sum(_FLAG_BITS[name] for name in self.present)


def bundle_to_vector(bundle: MomentBundle) -> np.ndarray:
    k = bundle.dim
    iu = np.triu_indices(k)
    parts = [bundle.counts.astype(np.float64), bundle.first_moments.ravel()]
    for name in bundle.present():
        v = getattr(bundle, name)
        if name == "global_second":
            parts.append(v[iu])
        elif name == "class_second":
            parts.append(v[:, iu[0], iu[1]].ravel())
        else:
            parts.append(v.ravel())
    return np.concatenate(parts)


def vector_to_bundle(vec: np.ndarray, layout: BundleLayout) -> MomentBundle:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != layout.scalar_count:
        raise ValueError(f"expected {layout.scalar_count} scalars, got {vec.size}")
    C, k = layout.class_count, layout.dim
    iu = np.triu_indices(k)
    out = {}
    pos = 0
    for name, size in layout.segment_sizes():
        seg = vec[pos : pos + size]
        pos += size
        if name == "counts":
            out[name] = np.rint(seg).astype(np.int64)
        elif name == "global_second":
            M = np.zeros((k, k))
            M[iu] = seg
            out[name] = M + np.triu(M, 1).T
        elif name == "class_second":
            M = np.zeros((C, k, k))
            M[:, iu[0], iu[1]] = seg.reshape(C, -1)
            out[name] = M + np.swapaxes(np.triu(M, 1), 1, 2)
        else:
            out[name] = seg.reshape(C, k)
    return MomentBundle(space=layout.space, **out)


def encode_header(layout: BundleLayout) -> bytes:
    sp = layout.space
    return _HEADER.pack(
        BUNDLE_MAGIC,
        BUNDLE_VERSION,
        layout.flags,
        layout.class_count,
        layout.dim,
        _SPACE_CODES[sp.kind],
        int(sp.seed or 0),
        int(sp.k or 0),
    )


def decode_header(buf: bytes, offset: int = 0) -> BundleLayout:
    if len(buf) - offset < HEADER_SIZE:
        raise ValueError("truncated bundle header")
    magic, version, flags, C, k, code, seed, pk = _HEADER.unpack_from(buf, offset)
    if magic != BUNDLE_MAGIC:
        raise ValueError(f"bad bundle magic {magic!r}")
    if version != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {version}")
    kind = {v: n for n, v in _SPACE_CODES.items()}.get(code)
    if kind is None:
        raise ValueError(f"unknown space code {code}")
    space = SpaceTag.projected(seed, pk) if kind == "projected" else SpaceTag(kind)
    present = tuple(name for name in OPTIONAL_FIELDS if flags & _FLAG_BITS[name])
    return BundleLayout(C, k, present, space)


def serialize_bundle(bundle: MomentBundle) -> bytes:
    layout = BundleLayout.of(bundle)
    return encode_header(layout) + bundle_to_vector(bundle).astype("<f8").tobytes()


def deserialize_bundle(buf: bytes) -> MomentBundle:
    layout = decode_header(buf)
    body = buf[HEADER_SIZE:]
    if len(body) != 8 * layout.scalar_count:
        raise ValueError(f"bundle body has {len(body)} bytes, expected {8 * layout.scalar_count}")
    return vector_to_bundle(np.frombuffer(body, dtype="<f8"), layout)


def payload_scalars(bundle: MomentBundle) -> int:
    return BundleLayout.of(bundle).scalar_count


def zero_bundle(class_count: int, dim: int, req: StatsRequest) -> MomentBundle:
    """What a client with no samples sends."""
    return MomentBundle.zeros(class_count, req.output_dim(dim), req.present(), req.space(dim))


@dataclass(frozen=True)
class PayloadCount:
    scalars: int
    bytes: int
    frame_bytes: int


def report_payload_bytes(req: StatsRequest, C: int, k: int) -> PayloadCount:
    """Independent scalars a client uploads for ``req`` at class count ``C`` and dim ``k``.

    Matches the per-family table: NB-diag ``C(1+2k)``, LDA ``C(1+k) + k(k+1)/2``,
    QDA ``C(1 + k + k(k+1)/2)``.  Bytes are 8 per scalar; ``frame_bytes`` adds the header.
    """
    if C < 1 or k < 1:
        raise ValueError(f"class count and dimension must be positive (C={C}, k={k})")
    layout = BundleLayout(C, k, req.present(), req.space(k))
    n = layout.scalar_count
    return PayloadCount(n, 8 * n, 8 * n + HEADER_SIZE)


FAMILY_REQUESTS = {
    "nb_diag": StatsRequest(want_B=False, want_D=True),
    "lda": StatsRequest(want_B=True),
    "qda": StatsRequest(want_B=False, want_S=True),
}
