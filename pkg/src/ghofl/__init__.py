"""Gaussian heads for one-shot federated learning from aggregated sufficient statistics."""

__version__ = "0.1.0"

from .datamodel import (  # noqa: E402
    GaussianParams,
    LabeledEmbeddingSet,
    MomentBundle,
    add_bundles,
    ingest_embeddings,
    sum_bundles,
    write_embeddings,
)
from .client_stats import StatsRequest, compute_bundle, report_payload_bytes  # noqa: E402
from .gaussian_heads import Shrinkage, estimate_params, fit_head  # noqa: E402
from .fisher import Energy, FixedK, fit_fisher  # noqa: E402
from .partition import PartitionSpec, make_partition  # noqa: E402
from .secure_agg import mask, secure_sum, unseal  # noqa: E402

__all__ = [
    "GaussianParams",
    "LabeledEmbeddingSet",
    "MomentBundle",
    "add_bundles",
    "ingest_embeddings",
    "sum_bundles",
    "write_embeddings",
    "StatsRequest",
    "compute_bundle",
    "report_payload_bytes",
    "Shrinkage",
    "estimate_params",
    "fit_head",
    "Energy",
    "FixedK",
    "fit_fisher",
    "PartitionSpec",
    "make_partition",
    "mask",
    "secure_sum",
    "unseal",
]
