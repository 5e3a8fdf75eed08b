"""GHH1 container for fitted heads.

Layout (little-endian): magic ``b"GHH1"``, u32 format version, u32 header length, a UTF-8
JSON header ``{"kind", "meta", "arrays": [{"name", "dtype", "shape"}, ...]}``, then the raw
array bytes in header order.  An optional Fisher basis travels as ``basis.*`` arrays.
Closed-form heads are stored as their parameters and refactorized on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .datamodel import GaussianParams
from .fisher import FisherBasis
from .gaussian_heads import GaussianHead, fit_head
from .train_heads import FisherMixHead, ProtoHyperHead, build_protohyper

HEAD_MAGIC = b"GHH1"
HEAD_VERSION = 1
_PARAM_FIELDS = ("class_means", "log_priors", "class_ids", "pooled_cov", "class_covs", "class_vars")


def _params_arrays(params: GaussianParams, prefix: str = "params.") -> dict:
    return {prefix + f: getattr(params, f) for f in _PARAM_FIELDS if getattr(params, f) is not None}


def _params_from(arrays: dict, class_count: int, prefix: str = "params.") -> GaussianParams:
    kw = {f: arrays.get(prefix + f) for f in _PARAM_FIELDS}
    return GaussianParams(class_count=class_count, **kw)


def _basis_arrays(basis: Optional[FisherBasis]) -> dict:
    if basis is None:
        return {}
    return {
        "basis.V": basis.V,
        "basis.eigenvalues": basis.eigenvalues,
        "basis.energy": basis.energy,
        "basis.all_eigenvalues": basis.all_eigenvalues,
    }


def _basis_from(arrays: dict, meta: dict) -> Optional[FisherBasis]:
    if "basis.V" not in arrays:
        return None
    return FisherBasis(
        arrays["basis.V"],
        arrays["basis.eigenvalues"],
        arrays["basis.energy"],
        arrays["basis.all_eigenvalues"],
        int(meta.get("basis_padded", 0)),
    )


def head_to_bytes(head, basis: Optional[FisherBasis] = None) -> bytes:
    """Serialize a GaussianHead, FisherMixHead or ProtoHyperHead.

    ``basis`` is only needed for closed-form heads evaluated in Fisher space; the
    trainable heads carry their own.
    """
    if isinstance(head, GaussianHead):
        kind = head.kind
        meta = {"rank": head.rank, "class_count": head.params.class_count}
        arrays = _params_arrays(head.params)
    elif isinstance(head, FisherMixHead):
        kind = "fishermix"
        basis = head.basis
        meta = {"scale": head.scale, "margin": head.margin}
        arrays = {"W": head.W, "class_ids": head.class_ids}
        if head.center is not None:
            arrays["center"] = head.center
    elif isinstance(head, ProtoHyperHead):
        kind = "protohyper"
        basis = head.basis
        meta = {
            "base_kind": head.base.kind,
            "base_rank": head.base.rank,
            "class_count": head.base.params.class_count,
            "beta": head.beta,
            "temperature": head.temperature,
            "kd_weight": head.kd_weight,
        }
        arrays = dict(_params_arrays(head.base.params), U1=head.U1, V2=head.V2)
    else:
        raise TypeError(f"cannot serialize {type(head).__name__}")
    if basis is not None:
        meta["basis_padded"] = basis.padded
    arrays.update(_basis_arrays(basis))
    entries, chunks = [], []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = "<i8" if arr.dtype.kind in "iu" else "<f8"
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        chunks.append(arr.astype(dtype).tobytes())
    header = json.dumps({"kind": kind, "meta": meta, "arrays": entries}, sort_keys=True).encode()
    return HEAD_MAGIC + struct.pack("<II", HEAD_VERSION, len(header)) + header + b"".join(chunks)


def head_from_bytes(buf: bytes) -> Tuple[object, Optional[FisherBasis], dict]:
    """``(head, basis, header)`` from a GHH1 blob."""
    if buf[:4] != HEAD_MAGIC:
        raise ValueError("not a GHH1 head blob")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != HEAD_VERSION:
        raise ValueError(f"unsupported head blob version {version}")
    header = json.loads(buf[12 : 12 + hlen].decode())
    pos = 12 + hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.int64 if dt.kind == "i" else np.float64)
        pos += count * dt.itemsize
    if pos != len(buf):
        raise ValueError("trailing bytes after head arrays")
    kind, meta = header["kind"], header["meta"]
    basis = _basis_from(arrays, meta)
    if kind in ("nb_diag", "lda", "qda", "dlr_qda"):
        head = fit_head(_params_from(arrays, meta["class_count"]), kind, meta.get("rank"))
    elif kind == "fishermix":
        head = FisherMixHead(
            arrays["W"], arrays["class_ids"], meta["scale"], meta["margin"], basis, arrays.get("center")
        )
    elif kind == "protohyper":
        params = _params_from(arrays, meta["class_count"])
        head = build_protohyper(
            params,
            meta["base_kind"],
            rank=arrays["U1"].shape[0],
            beta=meta["beta"],
            temperature=meta["temperature"],
            kd_weight=meta["kd_weight"],
            basis=basis,
            dlr_rank=meta.get("base_rank"),
        )
        head.U1, head.V2 = arrays["U1"], arrays["V2"]
    else:
        raise ValueError(f"unknown head kind {kind!r}")
    return head, basis, header


def save_head(path, head, basis: Optional[FisherBasis] = None) -> str:
    """Write a blob and return its sha256."""
    data = head_to_bytes(head, basis)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_head(path):
    return head_from_bytes(Path(path).read_bytes())
