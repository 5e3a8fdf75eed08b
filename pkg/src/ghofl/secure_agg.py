"""Simulated secure aggregation with cancelling pairwise masks.

Every float statistic is encoded on a fixed-point grid (scale 2**20) into signed 64-bit
lanes; counts are carried as plain integers.  Client ``i`` adds ``PRG(round_seed, i, j)``
for every roster peer ``j > i`` and subtracts ``PRG(round_seed, j, i)`` for every
``j < i``.  All lane arithmetic wraps modulo 2**64, so the masks cancel exactly in the sum
over the full roster and the server learns only the aggregate.

One extra lane, the contribution counter, carries plain value 1 per client.  After
unmasking it must equal the roster size; a missing contributor leaves a uniformly random
residue there, which is how dropouts are detected.  No recovery protocol is implemented.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import prng
from .client_stats import (
    HEADER_SIZE,
    BundleLayout,
    bundle_to_vector,
    decode_header,
    encode_header,
    vector_to_bundle,
)
from .datamodel import MomentBundle

FIXED_POINT_BITS = 20
SCALE = float(1 << FIXED_POINT_BITS)
# per-client encoded magnitude bound; leaves 7 bits of headroom so sums of up to
# 128 clients cannot wrap
_LIMIT = 2.0**56
_MASK_DOMAIN = 0x4D41534B  # "MASK"

ROUND_MAGIC = b"GHS1"
_ROUND_HEADER = struct.Struct("<4sQIII")  # magic, round_seed, round_id, client_id, lanes


class DropoutDetected(RuntimeError):
    pass


class RosterError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MaskedBundle:
    """Masked lanes of one client, or the lane-wise sum of several.

    ``client_id`` is -1 for sums.
    """

    lanes: np.ndarray  # int64, wraps
    layout: BundleLayout
    client_id: int
    round_id: int
    round_seed: int

    def __add__(self, other: "MaskedBundle") -> "MaskedBundle":
        if other.layout != self.layout or other.round_id != self.round_id:
            raise RosterError("cannot sum masked bundles from different layouts or rounds")
        with np.errstate(over="ignore"):
            lanes = (self.lanes.view(np.uint64) + other.lanes.view(np.uint64)).view(np.int64)
        return MaskedBundle(lanes, self.layout, -1, self.round_id, self.round_seed)

    def to_bytes(self) -> bytes:
        head = _ROUND_HEADER.pack(
            ROUND_MAGIC,
            self.round_seed & prng.MASK64,
            self.round_id,
            self.client_id & 0xFFFFFFFF,
            self.lanes.size,
        )
        return head + encode_header(self.layout) + self.lanes.astype("<i8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "MaskedBundle":
        magic, seed, round_id, client_id, n = _ROUND_HEADER.unpack_from(buf, 0)
        if magic != ROUND_MAGIC:
            raise ValueError(f"bad round magic {magic!r}")
        layout = decode_header(buf, _ROUND_HEADER.size)
        body = buf[_ROUND_HEADER.size + HEADER_SIZE :]
        if len(body) != 8 * n or n != _lane_count(layout):
            raise ValueError("masked frame length does not match its header")
        lanes = np.frombuffer(body, dtype="<i8").astype(np.int64)
        if client_id == 0xFFFFFFFF:
            client_id = -1
        return cls(lanes, layout, client_id, round_id, seed)


def _lane_count(layout: BundleLayout) -> int:
    return layout.scalar_count + 1


def encode_fixed(bundle: MomentBundle) -> np.ndarray:
    """Bundle scalars on the fixed-point grid, plus a trailing contribution lane of 1."""
    layout = BundleLayout.of(bundle)
    vec = bundle_to_vector(bundle)
    C = layout.class_count
    out = np.empty(vec.size + 1, dtype=np.int64)
    out[:C] = bundle.counts
    scaled = np.rint(vec[C:] * SCALE)
    if scaled.size and np.max(np.abs(scaled)) >= _LIMIT:
        raise OverflowError("statistic too large for the 64-bit fixed-point encoding")
    out[C:-1] = scaled.astype(np.int64)
    out[-1] = 1
    return out


def decode_fixed(lanes: np.ndarray, layout: BundleLayout) -> MomentBundle:
    C = layout.class_count
    vec = np.empty(lanes.size - 1)
    vec[:C] = lanes[:C]
    vec[C:] = lanes[C:-1].astype(np.float64) / SCALE
    return vector_to_bundle(vec, layout)


def quantize(bundle: MomentBundle) -> MomentBundle:
    """Round a bundle to the fixed-point grid (what the aggregate is exact against)."""
    return decode_fixed(encode_fixed(bundle), BundleLayout.of(bundle))


def pair_mask(round_seed: int, i: int, j: int, n_lanes: int) -> np.ndarray:
    key = prng.derive_key(round_seed, _MASK_DOMAIN, i, j)
    return prng.random_bits(key, n_lanes)


def _check_roster(roster: Sequence[int]) -> list:
    roster = [int(r) for r in roster]
    if not roster:
        raise RosterError("empty roster")
    if len(set(roster)) != len(roster):
        raise RosterError("duplicate client ids in roster")
    return sorted(roster)


def mask(
    bundle: MomentBundle,
    client_id: int,
    roster: Sequence[int],
    round_seed: int,
    round_id: int = 0,
) -> MaskedBundle:
    roster = _check_roster(roster)
    if client_id not in roster:
        raise RosterError(f"client {client_id} is not in the roster")
    lanes = encode_fixed(bundle).view(np.uint64)
    n = lanes.size
    with np.errstate(over="ignore"):
        for peer in roster:
            if peer == client_id:
                continue
            if client_id < peer:
                lanes = lanes + pair_mask(round_seed, client_id, peer, n)
            else:
                lanes = lanes - pair_mask(round_seed, peer, client_id, n)
    return MaskedBundle(lanes.view(np.int64), BundleLayout.of(bundle), client_id, round_id, round_seed)


def sum_masked(messages: Iterable[MaskedBundle]) -> MaskedBundle:
    total = None
    for m in messages:
        total = m if total is None else total + m
    if total is None:
        raise RosterError("no masked messages to sum")
    return total


def unseal(total: MaskedBundle, roster: Sequence[int]) -> MomentBundle:
    roster = _check_roster(roster)
    contributions = int(total.lanes[-1])
    if contributions != len(roster):
        raise DropoutDetected(
            f"checksum lane reads {contributions}, expected {len(roster)}: "
            "masks did not cancel (missing or duplicated contributor)"
        )
    return decode_fixed(total.lanes, total.layout)


def secure_sum(bundles: Sequence[MomentBundle], round_seed: int, round_id: int = 0) -> MomentBundle:
    """Mask every bundle under roster ``0..U-1``, sum, and unseal."""
    roster = list(range(len(bundles)))
    masked = [mask(b, u, roster, round_seed, round_id) for u, b in enumerate(bundles)]
    return unseal(sum_masked(masked), roster)
