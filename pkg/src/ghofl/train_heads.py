"""Server-side heads trained only on synthetic Fisher-space samples.

FisherMix is a cosine classifier with an additive margin on the target logit.
Proto-Hyper adds a low-rank residual ``V2 U1 z`` to standardized Gaussian base logits and
is distilled from a blended LDA/QDA teacher.  Both losses have closed-form gradients and
are optimized with momentum SGD.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .datamodel import GaussianParams
from .fisher import FisherBasis
from .gaussian_heads import GaussianHead, fit_head
from .synth import SynthConfig, SyntheticBatch, sample

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
STD_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"loss became {loss} at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    lr: Optional[float] = None  # None -> head default (0.05 FisherMix, 0.01 Proto-Hyper)
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or (self.lr is not None and self.lr <= 0):
            raise ValueError("epochs must be >= 0 and batch size / learning rate positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def _log_softmax(G: np.ndarray) -> np.ndarray:
    G = G - G.max(axis=1, keepdims=True)
    return G - np.log(np.exp(G).sum(axis=1, keepdims=True))


def _as_batch(batch, class_ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """``(Z, label_index)`` from a SyntheticBatch or a ``(features, labels)`` pair."""
    if isinstance(batch, SyntheticBatch):
        Z, labels = batch.features, batch.labels
    else:
        Z, labels = batch
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    labels = np.asarray(labels)
    if Z.shape[0] == 0:
        raise ValueError("empty batch")
    idx = np.searchsorted(class_ids, labels)
    idx = np.clip(idx, 0, class_ids.size - 1)
    if np.any(class_ids[idx] != labels):
        raise ValueError("batch contains labels the head does not know")
    return Z, idx


def _to_fisher(X: np.ndarray, basis: Optional[FisherBasis], k_f: int) -> np.ndarray:
    """Heads carrying a basis take input-space rows in ``scores``; others take Fisher rows."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    expected = basis.k_in if basis is not None else k_f
    if X.shape[1] != expected:
        raise ValueError(f"input has dim {X.shape[1]}, head expects {expected}")
    return basis.transform(X) if basis is not None else X


def standardize_logits(G: np.ndarray) -> np.ndarray:
    """Per-row z-score across classes: ``(g - mean) / (std + 1e-8)``."""
    G = np.atleast_2d(G)
    m = G.mean(axis=1, keepdims=True)
    s = G.std(axis=1, keepdims=True)
    return (G - m) / (s + STD_EPS)


# ---------------------------------------------------------------------------
# FisherMix
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class FisherMixHead:
    W: np.ndarray
    class_ids: np.ndarray
    scale: float = 16.0
    margin: float = 0.2
    basis: Optional[FisherBasis] = None
    center: Optional[np.ndarray] = None
    history: list = field(default_factory=list)

    kind = "fishermix"
    label = "fishermix"

    def _features(self, X: np.ndarray) -> np.ndarray:
        return _to_fisher(X, self.basis, self.W.shape[1])

    def centered(self, Z: np.ndarray) -> np.ndarray:
        return Z if self.center is None else Z - self.center

    def cosines(self, Z: np.ndarray) -> np.ndarray:
        Zn = Z / np.maximum(np.linalg.norm(Z, axis=1, keepdims=True), NORM_FLOOR)
        Wn = self.W / np.maximum(np.linalg.norm(self.W, axis=1, keepdims=True), NORM_FLOOR)
        return Zn @ Wn.T

    def scores(self, X: np.ndarray) -> np.ndarray:
        return self.scale * self.cosines(self.centered(self._features(X)))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.class_ids[np.argmax(self.scores(X), axis=1)]

    def parameter_count(self) -> int:
        return int(self.W.size)


def fishermix_loss_and_grad(head: FisherMixHead, batch) -> Tuple[float, np.ndarray]:
    """Mean margin cross-entropy and its gradient with respect to ``head.W``."""
    Z, y = _as_batch(batch, head.class_ids)
    if Z.shape[1] != head.W.shape[1]:
        raise ValueError(f"batch has dim {Z.shape[1]}, head expects {head.W.shape[1]}")
    Z = head.centered(Z)
    n = Z.shape[0]
    znorm = np.linalg.norm(Z, axis=1, keepdims=True)
    if np.any(znorm < NORM_FLOOR):
        warnings.warn("zero-norm input rows floored", stacklevel=2)
    Zn = Z / np.maximum(znorm, NORM_FLOOR)
    wnorm = np.maximum(np.linalg.norm(head.W, axis=1, keepdims=True), NORM_FLOOR)
    Wn = head.W / wnorm
    cos = Zn @ Wn.T
    rows = np.arange(n)
    logits = head.scale * cos
    logits[rows, y] -= head.scale * head.margin
    logp = _log_softmax(logits)
    loss = -float(logp[rows, y].mean())
    G = np.exp(logp)
    G[rows, y] -= 1.0
    G *= head.scale / n  # d loss / d cos
    dWn = G.T @ Zn
    radial = np.sum(dWn * Wn, axis=1, keepdims=True)
    grad = (dWn - radial * Wn) / wnorm
    return loss, grad


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_fishermix(
    params_f: GaussianParams,
    basis: Optional[FisherBasis],
    cfg: SynthConfig = SynthConfig(),
    tcfg: TrainConfig = TrainConfig(),
    scale: float = 16.0,
    margin: float = 0.2,
) -> FisherMixHead:
    """Train from normalized class prototypes on one cached synthetic batch.

    Inputs are centered on the prior-weighted global mean before normalization, so the
    cosine geometry is taken around the data rather than around the origin.
    """
    center = params_f.priors @ params_f.class_means
    mu = params_f.class_means - center
    W0 = mu / np.maximum(np.linalg.norm(mu, axis=1, keepdims=True), NORM_FLOOR)
    head = FisherMixHead(W0.copy(), params_f.class_ids, scale, margin, basis, center)
    data = sample(params_f, cfg)
    Z, y = data.features, data.labels
    lr = tcfg.lr if tcfg.lr is not None else 0.05
    rng = np.random.default_rng(tcfg.seed)
    velocity = np.zeros_like(head.W)
    head.history.append(fishermix_loss_and_grad(head, (Z, y))[0])
    step = 0
    for _ in range(tcfg.epochs):
        for idx in _batches(Z.shape[0], tcfg.batch_size, rng):
            loss, grad = fishermix_loss_and_grad(head, (Z[idx], y[idx]))
            if not np.isfinite(loss):
                raise TrainingDiverged(step, loss)
            velocity = tcfg.momentum * velocity + grad
            head.W = head.W - lr * velocity
            step += 1
        head.history.append(fishermix_loss_and_grad(head, (Z, y))[0])
    logger.debug("fishermix loss %.4f -> %.4f", head.history[0], head.history[-1])
    return head


# ---------------------------------------------------------------------------
# Proto-Hyper
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ProtoHyperHead:
    base: GaussianHead
    teacher_lda: GaussianHead
    U1: np.ndarray  # r_h x k_f
    V2: np.ndarray  # C x r_h
    teacher_qda: Optional[GaussianHead] = None
    beta: float = 0.5
    temperature: float = 2.0
    kd_weight: float = 0.7
    basis: Optional[FisherBasis] = None
    history: list = field(default_factory=list)

    kind = "protohyper"
    label = "protohyper"

    @property
    def class_ids(self) -> np.ndarray:
        return self.base.class_ids

    @property
    def rank(self) -> int:
        return self.U1.shape[0]

    def _features(self, X: np.ndarray) -> np.ndarray:
        return _to_fisher(X, self.basis, self.base.dim)

    def base_logits(self, Z: np.ndarray) -> np.ndarray:
        return standardize_logits(self.base.scores(Z))

    def forward(self, Z: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(Z)
        return self.base_logits(Z) + (Z @ self.U1.T) @ self.V2.T

    def teacher(self, Z: np.ndarray) -> np.ndarray:
        lda = standardize_logits(self.teacher_lda.scores(Z))
        if self.teacher_qda is None or self.beta == 0.0:
            return lda
        qda = standardize_logits(self.teacher_qda.scores(Z))
        if self.beta == 1.0:
            return qda
        return self.beta * qda + (1.0 - self.beta) * lda

    def scores(self, X: np.ndarray) -> np.ndarray:
        return self.forward(self._features(X))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.class_ids[np.argmax(self.scores(X), axis=1)]

    def parameter_count(self) -> int:
        return int(self.U1.size + self.V2.size + self.base.parameter_count())


def protohyper_forward(head: ProtoHyperHead, z: np.ndarray) -> np.ndarray:
    return head.forward(z)


def teacher_logits(head: ProtoHyperHead, z: np.ndarray) -> np.ndarray:
    return head.teacher(z)


def _protohyper_terms(head, Z, y, base_std, teach):
    T, a = head.temperature, head.kd_weight
    n = Z.shape[0]
    rows = np.arange(n)
    P = Z @ head.U1.T  # n x r
    student = base_std + P @ head.V2.T
    log_ps = _log_softmax(student)
    log_ps_T = _log_softmax(student / T)
    log_pt_T = _log_softmax(teach / T)
    pt_T = np.exp(log_pt_T)
    kl = np.sum(pt_T * (log_pt_T - log_ps_T), axis=1)
    ce = -log_ps[rows, y]
    loss = float(np.mean(a * T * T * kl + (1.0 - a) * ce))
    G = a * T * (np.exp(log_ps_T) - pt_T)
    ce_grad = np.exp(log_ps)
    ce_grad[rows, y] -= 1.0
    G += (1.0 - a) * ce_grad
    G /= n  # d loss / d student
    grad_V2 = G.T @ P
    grad_U1 = (G @ head.V2).T @ Z
    return loss, grad_U1, grad_V2


def protohyper_loss_and_grad(head: ProtoHyperHead, batch) -> Tuple[float, np.ndarray, np.ndarray]:
    """KD + CE blend and gradients on ``(U1, V2)``; the teacher is held constant."""
    Z, y = _as_batch(batch, head.class_ids)
    if Z.shape[1] != head.base.dim:
        raise ValueError(f"batch has dim {Z.shape[1]}, head expects {head.base.dim}")
    return _protohyper_terms(head, Z, y, head.base_logits(Z), head.teacher(Z))


def build_protohyper(
    params_f: GaussianParams,
    base_kind: str = "lda",
    rank: int = 8,
    beta: float = 0.5,
    temperature: float = 2.0,
    kd_weight: float = 0.7,
    basis: Optional[FisherBasis] = None,
    seed: int = 0,
    dlr_rank: Optional[int] = None,
) -> ProtoHyperHead:
    """Untrained head: ``U1`` small Gaussian (std 0.01), ``V2`` zero, so it starts at the base."""
    if base_kind not in ("nb_diag", "lda", "qda", "dlr_qda"):
        raise ValueError(f"unsupported Proto-Hyper base {base_kind!r}")
    if not 0 <= beta <= 1 or not 0 <= kd_weight <= 1 or temperature <= 0:
        raise ValueError("beta and kd_weight must lie in [0, 1] and temperature be positive")
    base = fit_head(params_f, base_kind, dlr_rank)
    lda = base if base_kind == "lda" else fit_head(params_f, "lda")
    qda = None
    if params_f.class_covs is not None:
        qda = base if base_kind == "qda" else fit_head(params_f, "qda")
    C, k = params_f.class_means.shape
    rng = np.random.default_rng([seed, 0x5048])
    U1 = 0.01 * rng.standard_normal((rank, k))
    V2 = np.zeros((C, rank))
    return ProtoHyperHead(base, lda, U1, V2, qda, beta, temperature, kd_weight, basis)


def train_protohyper(
    params_f: GaussianParams,
    basis: Optional[FisherBasis],
    base_kind: str = "lda",
    cfg: SynthConfig = SynthConfig(),
    tcfg: TrainConfig = TrainConfig(),
    rank: int = 8,
    beta: float = 0.5,
    temperature: float = 2.0,
    kd_weight: float = 0.7,
    dlr_rank: Optional[int] = None,
) -> ProtoHyperHead:
    head = build_protohyper(params_f, base_kind, rank, beta, temperature, kd_weight, basis, tcfg.seed, dlr_rank)
    data = sample(params_f, cfg)
    Z, y = _as_batch(data, head.class_ids)
    base_std = head.base_logits(Z)
    teach = head.teacher(Z)
    head.history.append(_protohyper_terms(head, Z, y, base_std, teach)[0])
    if rank == 0:
        return head
    lr = tcfg.lr if tcfg.lr is not None else 0.01
    rng = np.random.default_rng(tcfg.seed)
    vel_U, vel_V = np.zeros_like(head.U1), np.zeros_like(head.V2)
    step = 0
    for _ in range(tcfg.epochs):
        for idx in _batches(Z.shape[0], tcfg.batch_size, rng):
            loss, gU, gV = _protohyper_terms(head, Z[idx], y[idx], base_std[idx], teach[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(step, loss)
            vel_U = tcfg.momentum * vel_U + gU
            vel_V = tcfg.momentum * vel_V + gV
            head.U1 = head.U1 - lr * vel_U
            head.V2 = head.V2 - lr * vel_V
            step += 1
        head.history.append(_protohyper_terms(head, Z, y, base_std, teach)[0])
    logger.debug("protohyper loss %.4f -> %.4f", head.history[0], head.history[-1])
    return head
