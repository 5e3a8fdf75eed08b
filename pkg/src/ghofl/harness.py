"""Config-driven end-to-end experiments.

A run goes ingest -> partition -> client statistics -> (secure) aggregation -> Gaussian
parameters -> closed-form heads -> Fisher basis -> synthetic batches -> trainable heads ->
evaluation, once per partition spec, and reports how much the moment-derived quantities
moved between specs.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from . import __version__
from .blobs import save_head
from .client_stats import (
    FAMILY_REQUESTS,
    StatsRequest,
    compute_bundle,
    report_payload_bytes,
    serialize_bundle,
    zero_bundle,
)
from .datamodel import LabeledEmbeddingSet, MomentBundle, ingest_embeddings, sum_bundles
from .diagnostics import gaussianity
from .fisher import Energy, FixedK, fit_fisher, project_bundle_fisher
from .gaussian_heads import Shrinkage, estimate_params, fit_head
from .partition import PartitionSpec, make_partition, partition_fingerprint
from .recipes import SyntheticRecipe, generate
from .secure_agg import secure_sum
from .sketch import ProjectionMatrix, project_set
from .synth import SynthConfig
from .train_heads import TrainConfig, train_fishermix, train_protohyper

logger = logging.getLogger(__name__)

CLOSED_FORM = ("nb_diag", "lda", "qda", "dlr_qda")
TRAINABLE = ("fishermix", "protohyper")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, config_path: Optional[str], cause: BaseException):
        self.stage = stage
        where = f" ({config_path})" if config_path else ""
        super().__init__(f"stage {stage!r} failed{where}: {cause}")


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------


@dataclass
class DataSection:
    train: str
    test: str
    format: Optional[str] = None
    class_count: Optional[int] = None


@dataclass
class SketchSection:
    enabled: bool = False
    k: int = 16
    seed: int = 0
    standardize: bool = False


@dataclass
class ShrinkSection:
    alpha: float = 0.1
    class_alpha: float = 0.3
    variance_floor: Optional[float] = None


@dataclass
class FisherSection:
    select: str = "energy"
    threshold: float = 0.99
    k: Optional[int] = None


@dataclass
class SynthSection:
    per_class: int = 512
    tau_clip: Tuple[float, float] = (0.5, 2.0)
    delta_scale: float = 0.1
    delta_dirs: int = 2
    seed: int = 0
    covariance_source: str = "auto"


@dataclass
class FisherMixSection:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    scale: float = 16.0
    margin: float = 0.2


@dataclass
class ProtoHyperSection:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    rank: int = 8
    base: str = "lda"
    beta: float = 0.5
    temperature: float = 2.0
    kd_weight: float = 0.7


@dataclass
class PartitionSection:
    num_clients: int = 10
    scheme: str = "dirichlet"
    alpha: Optional[float] = 0.5
    classes_per_client: Optional[int] = None
    seed: int = 0
    min_per_class_per_client: int = 0

    def spec(self) -> PartitionSpec:
        return PartitionSpec(**dataclasses.asdict(self))


@dataclass
class SecureAggSection:
    enabled: bool = False
    round_seed: int = 0


@dataclass
class ExperimentConfig:
    data: Optional[DataSection] = None
    synthetic: Optional[SyntheticRecipe] = None
    partitions: List[PartitionSection] = field(default_factory=lambda: [PartitionSection()])
    sketch: SketchSection = field(default_factory=SketchSection)
    shrinkage: ShrinkSection = field(default_factory=ShrinkSection)
    min_count: int = 2
    fisher: FisherSection = field(default_factory=FisherSection)
    synth: SynthSection = field(default_factory=SynthSection)
    fishermix: FisherMixSection = field(default_factory=FisherMixSection)
    protohyper: ProtoHyperSection = field(default_factory=ProtoHyperSection)
    heads: List[str] = field(default_factory=lambda: ["nb_diag", "lda", "qda"])
    dlr_rank: int = 8
    head_space: str = "input"
    secure_agg: SecureAggSection = field(default_factory=SecureAggSection)
    diagnostics: bool = False
    output_dir: Optional[str] = None
    save_heads: bool = True
    seed: int = 0
    source_path: Optional[str] = None

    def __post_init__(self):
        if (self.data is None) == (self.synthetic is None):
            raise ConfigError("exactly one of 'data' and 'synthetic' must be given")
        unknown = [h for h in self.heads if h not in CLOSED_FORM + TRAINABLE]
        if unknown:
            raise ConfigError(f"unknown heads {unknown}")
        if not self.heads:
            raise ConfigError("no heads to evaluate")
        if not self.partitions:
            raise ConfigError("at least one partition spec is required")
        if self.head_space not in ("input", "fisher"):
            raise ConfigError("head_space must be 'input' or 'fisher'")
        if self.fisher.select not in ("energy", "fixed"):
            raise ConfigError("fisher.select must be 'energy' or 'fixed'")
        if self.fisher.select == "fixed" and not self.fisher.k:
            raise ConfigError("fisher.select=fixed needs fisher.k")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("source_path")
        return d


_SECTIONS = {
    "data": DataSection,
    "synthetic": SyntheticRecipe,
    "sketch": SketchSection,
    "shrinkage": ShrinkSection,
    "fisher": FisherSection,
    "synth": SynthSection,
    "fishermix": FisherMixSection,
    "protohyper": ProtoHyperSection,
    "secure_agg": SecureAggSection,
}
_TUPLE_FIELDS = {"tau_clip", "class_variances"}


def _strict(cls, values: Any, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    values = {k: tuple(v) if k in _TUPLE_FIELDS and v is not None else v for k, v in values.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict, source_path: Optional[str] = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"source_path"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    kw: Dict[str, Any] = {}
    for key, value in raw.items():
        if key in _SECTIONS and value is not None:
            kw[key] = _strict(_SECTIONS[key], value, key)
        elif key == "partitions":
            items = value if isinstance(value, list) else [value]
            kw[key] = [_strict(PartitionSection, v, f"partitions[{i}]") for i, v in enumerate(items)]
        else:
            kw[key] = value
    try:
        cfg = ExperimentConfig(source_path=source_path, **kw)
        for p in cfg.partitions:
            p.spec()
        Shrinkage(cfg.shrinkage.alpha, cfg.shrinkage.class_alpha, cfg.shrinkage.variance_floor)
        SynthConfig(**dataclasses.asdict(cfg.synth))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    return config_from_dict(yaml.safe_load(text) or {}, str(path))


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def _stage(name: str, cfg: ExperimentConfig):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, cfg.source_path, exc) from exc
            return False

    return _Ctx()


def dataset_hash(data: LabeledEmbeddingSet) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.features).tobytes())
    h.update(np.ascontiguousarray(data.labels).tobytes())
    return h.hexdigest()


def load_data(cfg: ExperimentConfig) -> Tuple[LabeledEmbeddingSet, LabeledEmbeddingSet]:
    if cfg.synthetic is not None:
        train, test, _ = generate(cfg.synthetic)
        return train, test
    d = cfg.data
    train = ingest_embeddings(d.train, d.format, d.class_count)
    test = ingest_embeddings(d.test, d.format, d.class_count or train.class_count)
    if test.dim != train.dim:
        raise ValueError(f"train dim {train.dim} != test dim {test.dim}")
    if test.class_count != train.class_count:
        test = LabeledEmbeddingSet(test.features, test.labels, max(test.class_count, train.class_count))
    return train, test


def stats_request(cfg: ExperimentConfig, dim: int, standardize=None) -> StatsRequest:
    heads = set(cfg.heads)
    if cfg.head_space == "fisher" and heads & {"nb_diag"}:
        # NB-diag in Fisher space needs the full class second moments to map the diagonal
        heads.add("qda")
    proj = {"seed": cfg.sketch.seed, "d": dim, "k": cfg.sketch.k} if cfg.sketch.enabled else None
    return StatsRequest.for_heads(heads, proj, cfg.diagnostics, standardize)


def client_bundles(train, parts, req) -> List[MomentBundle]:
    out = []
    for p in parts:
        if len(p) == 0:
            out.append(zero_bundle(train.class_count, train.dim, req))
        else:
            out.append(compute_bundle(train.subset(p), req))
    return out


def _drop_power_sums(agg: MomentBundle) -> MomentBundle:
    return agg.with_fields(class_cube_sums=None, class_quart_sums=None)


def _per_class_accuracy(pred, y) -> Dict[str, float]:
    return {str(int(c)): float(np.mean(pred[y == c] == c)) for c in np.unique(y)}


def _params_max_rel_diff(a, b) -> float:
    worst = 0.0
    for name in ("class_means", "log_priors", "pooled_cov", "class_covs", "class_vars"):
        x, y = getattr(a, name), getattr(b, name)
        if x is None or y is None:
            continue
        scale = max(float(np.max(np.abs(x))), 1e-300)
        worst = max(worst, float(np.max(np.abs(x - y))) / scale)
    return worst


def run_partition(
    cfg: ExperimentConfig,
    train: LabeledEmbeddingSet,
    test_in: LabeledEmbeddingSet,
    spec: PartitionSpec,
    req: StatsRequest,
    out_dir: Optional[Path],
    tag: str,
) -> Tuple[dict, dict]:
    """One pipeline pass; returns the JSON-able run record and in-memory artifacts."""
    with _stage("partition", cfg):
        parts = make_partition(train, spec)
    with _stage("client_stats", cfg):
        bundles = client_bundles(train, parts, req)
        sizes = [len(serialize_bundle(b)) for b in bundles]
    with _stage("aggregate", cfg):
        if cfg.secure_agg.enabled:
            agg = secure_sum(bundles, cfg.secure_agg.round_seed)
        else:
            agg = sum_bundles(bundles)
    shrink = Shrinkage(cfg.shrinkage.alpha, cfg.shrinkage.class_alpha, cfg.shrinkage.variance_floor)
    with _stage("estimate_params", cfg), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        params = estimate_params(agg, shrink, cfg.min_count)

    record: Dict[str, Any] = {
        "partition": dataclasses.asdict(spec),
        "partition_label": spec.describe(),
        "partition_fingerprint": partition_fingerprint(parts),
        "client_bytes": sizes,
        "total_bytes": int(sum(sizes)),
        "empty_clients": int(sum(len(p) == 0 for p in parts)),
        "heads": {},
    }
    artifacts: Dict[str, Any] = {"params": params, "predictions": {}, "agg": agg}

    if cfg.diagnostics:
        with _stage("diagnostics", cfg):
            record["diagnostics"] = gaussianity(agg).summary()

    needs_fisher = cfg.head_space == "fisher" or bool(set(cfg.heads) & set(TRAINABLE))
    basis = params_f = None
    if needs_fisher:
        with _stage("fisher", cfg), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sel = FixedK(cfg.fisher.k) if cfg.fisher.select == "fixed" else Energy(cfg.fisher.threshold)
            basis = fit_fisher(params, sel)
            params_f = estimate_params(project_bundle_fisher(_drop_power_sums(agg), basis), shrink, cfg.min_count)
        record["fisher"] = {
            "k_f": basis.k_f,
            "energy": basis.captured_energy,
            "padded": basis.padded,
            "eigenvalues": basis.eigenvalues.tolist(),
        }
        artifacts["basis"] = basis
        artifacts["params_f"] = params_f

    y = test_in.labels

    def evaluate(name, head, X, fit_seconds, blob_basis=None):
        pred = head.predict(X)
        entry = {
            "accuracy": float(np.mean(pred == y)),
            "per_class_accuracy": _per_class_accuracy(pred, y),
            "fit_seconds": fit_seconds,
            "parameter_count": int(head.parameter_count()),
        }
        if out_dir is not None and cfg.save_heads:
            path = out_dir / f"{tag}_{name}.ghh"
            entry["blob"] = str(path)
            entry["blob_sha256"] = save_head(path, head, blob_basis)
        record["heads"][name] = entry
        artifacts["predictions"][name] = pred

    closed_params = params_f if cfg.head_space == "fisher" else params
    X_closed = basis.transform(test_in.features) if cfg.head_space == "fisher" else test_in.features
    for kind in cfg.heads:
        if kind not in CLOSED_FORM:
            continue
        with _stage(f"head:{kind}", cfg):
            t0 = time.perf_counter()
            rank = cfg.dlr_rank if kind == "dlr_qda" else None
            head = fit_head(closed_params, kind, rank)
            name = head.label
            evaluate(name, head, X_closed, time.perf_counter() - t0,
                     basis if cfg.head_space == "fisher" else None)

    synth_cfg = SynthConfig(**dataclasses.asdict(cfg.synth))
    if "fishermix" in cfg.heads:
        fm = cfg.fishermix
        with _stage("head:fishermix", cfg):
            t0 = time.perf_counter()
            head = train_fishermix(
                params_f, basis, synth_cfg,
                TrainConfig(fm.epochs, fm.batch_size, fm.lr, fm.momentum, fm.seed),
                fm.scale, fm.margin,
            )
            evaluate("fishermix", head, test_in.features, time.perf_counter() - t0)
            record["heads"]["fishermix"]["loss_history"] = [float(v) for v in head.history]
    if "protohyper" in cfg.heads:
        ph = cfg.protohyper
        with _stage("head:protohyper", cfg):
            t0 = time.perf_counter()
            head = train_protohyper(
                params_f, basis, ph.base, synth_cfg,
                TrainConfig(ph.epochs, ph.batch_size, ph.lr, ph.momentum, ph.seed),
                ph.rank, ph.beta, ph.temperature, ph.kd_weight, cfg.dlr_rank,
            )
            evaluate("protohyper", head, test_in.features, time.perf_counter() - t0)
            record["heads"]["protohyper"]["loss_history"] = [float(v) for v in head.history]
    return record, artifacts


def payload_table(req: StatsRequest, C: int, k: int) -> dict:
    table = {name: dataclasses.asdict(report_payload_bytes(r, C, k)) for name, r in FAMILY_REQUESTS.items()}
    table["requested"] = dataclasses.asdict(report_payload_bytes(req, C, k))
    return table


def run(cfg: ExperimentConfig, partitions: Optional[List[PartitionSpec]] = None) -> dict:
    """Execute every partition spec on the same data and return the report dict."""
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    with _stage("ingest", cfg):
        train, test = load_data(cfg)
    standardize = None
    with _stage("sketch", cfg):
        test_in = test
        if cfg.sketch.enabled:
            R = ProjectionMatrix(cfg.sketch.seed, train.dim, cfg.sketch.k)
            if cfg.sketch.standardize:
                # public per-feature normalizer, treated like the shared projection seed
                shift = train.features.mean(axis=0)
                scale = train.features.std(axis=0)
                scale[scale == 0] = 1.0
                standardize = (shift, scale)
            shift, scale = standardize if standardize else (None, None)
            test_in = project_set(test, R, shift, scale)
    req = stats_request(cfg, train.dim, standardize)
    specs = partitions if partitions is not None else [p.spec() for p in cfg.partitions]

    runs, arts = [], []
    for i, spec in enumerate(specs):
        record, artifacts = run_partition(cfg, train, test_in, spec, req, out_dir, f"p{i}")
        runs.append(record)
        arts.append(artifacts)
        logger.info("%s: %s", spec.describe(),
                    {h: round(v["accuracy"], 4) for h, v in record["heads"].items()})

    if out_dir is not None:
        (out_dir / "aggregate.ghb").write_bytes(serialize_bundle(arts[0]["agg"]))

    invariance = {}
    if len(arts) > 1:
        ref = arts[0]
        invariance["params_max_rel_diff"] = max(_params_max_rel_diff(ref["params"], a["params"]) for a in arts[1:])
        invariance["predictions_identical"] = {
            name: all(np.array_equal(ref["predictions"][name], a["predictions"][name]) for a in arts[1:])
            for name in ref["predictions"]
        }
        invariance["accuracy_spread"] = {
            name: float(max(r["heads"][name]["accuracy"] for r in runs) - min(r["heads"][name]["accuracy"] for r in runs))
            for name in runs[0]["heads"]
        }
    report = {
        "software_version": __version__,
        "config": cfg.to_dict(),
        "test_set_sha256": dataset_hash(test_in),
        "train_size": train.n,
        "test_size": test.n,
        "dim": train.dim,
        "stats_dim": req.output_dim(train.dim),
        "class_count": train.class_count,
        "payload": payload_table(req, train.class_count, req.output_dim(train.dim)),
        "runs": runs,
        "invariance": invariance,
    }
    if out_dir is not None:
        (out_dir / "report.json").write_text(json.dumps(report, indent=2, default=_jsonable))
        write_accuracy_csv(report, out_dir / "accuracy.csv")
    report["_artifacts"] = arts
    return report


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_accuracy_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "alpha", "clients", "head", "accuracy", "total_bytes", "parameter_count"])
        for r in report["runs"]:
            p = r["partition"]
            for name, h in r["heads"].items():
                w.writerow([p["scheme"], p["alpha"], p["num_clients"], name, f"{h['accuracy']:.6f}",
                            r["total_bytes"], h["parameter_count"]])


def parse_axes(axes: List[str]) -> Dict[str, list]:
    """``["alpha=0.05,0.5", "clients=5,50"]`` -> ``{"alpha": [0.05, 0.5], "clients": [5, 50]}``."""
    out: Dict[str, list] = {}
    for item in axes:
        for chunk in item.split(";"):
            if not chunk.strip():
                continue
            if "=" not in chunk:
                raise ConfigError(f"axis {chunk!r} is not name=v1,v2,...")
            name, values = chunk.split("=", 1)
            name = name.strip()
            if name not in ("alpha", "clients", "seed"):
                raise ConfigError(f"unknown sweep axis {name!r}")
            cast = float if name == "alpha" else int
            out[name] = [cast(v) for v in values.split(",") if v.strip()]
    return out


def sweep(cfg: ExperimentConfig, axes: Dict[str, list]) -> dict:
    """Cartesian product of Dirichlet partitions over the given axes, on one dataset."""
    base = cfg.partitions[0]
    alphas = axes.get("alpha", [base.alpha if base.alpha is not None else 0.5])
    clients = axes.get("clients", [base.num_clients])
    seeds = axes.get("seed", [base.seed])
    specs = [
        PartitionSpec.dirichlet(u, a, s, base.min_per_class_per_client)
        for a, u, s in itertools.product(alphas, clients, seeds)
    ]
    report = run(cfg, specs)
    report["sweep_axes"] = {"alpha": alphas, "clients": clients, "seed": seeds}
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        write_accuracy_csv(report, out / "sweep.csv")
        public = {k: v for k, v in report.items() if not k.startswith("_")}
        (out / "sweep.json").write_text(json.dumps(public, indent=2, default=_jsonable))
    return report
