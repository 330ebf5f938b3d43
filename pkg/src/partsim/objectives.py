"""Loss functions: masked triplet hinge, subspace norm loss, their total,
and the distillation target plus MSE used before main training.

Everything here runs in float64 regardless of network precision, and every
loss has a companion ``*_grad`` returning analytic gradients with respect
to the embeddings (and the norm-loss biases).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .encoder import N_CONDITIONS, masked_distance, subspace, teacher_encode

DEFAULT_MARGIN = 0.2
DEFAULT_LAMBDA = 0.1
EPSILON_LOG = 1e-8
EPSILON_BCE = 1e-7


@dataclass
class NormLossParams:
    """Learnable per-instrument biases and the numerical guards."""

    b: np.ndarray = field(default_factory=lambda: np.zeros(N_CONDITIONS))
    epsilon_log: float = EPSILON_LOG
    epsilon_bce: float = EPSILON_BCE

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.b.shape != (N_CONDITIONS,):
            raise ValueError(f"need {N_CONDITIONS} biases, got shape {self.b.shape}")
        if self.epsilon_log <= 0 or self.epsilon_bce <= 0:
            raise ValueError("epsilons must be positive")


@dataclass
class TripletEmbeddings:
    """One training triplet: embeddings, the condition, presence vectors."""

    a: np.ndarray
    p: np.ndarray
    n: np.ndarray
    c: int
    q_a: np.ndarray
    q_p: np.ndarray
    q_n: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        self.n = np.asarray(self.n, dtype=np.float64)
        if not (self.a.shape == self.p.shape == self.n.shape):
            raise ValueError("triplet members differ in dimension")
        if not 0 <= self.c < N_CONDITIONS:
            raise ValueError(f"condition {self.c} out of range")

    def members(self):
        return ((self.a, self.q_a), (self.p, self.q_p), (self.n, self.q_n))


def triplet_loss(a, p, n, c: int, margin: float = DEFAULT_MARGIN) -> float:
    """Hinge on the masked-distance gap: max(d(a,p) - d(a,n) + margin, 0)."""
    return max(masked_distance(a, p, c) - masked_distance(a, n, c) + margin, 0.0)


def triplet_loss_grad(a, p, n, c: int, margin: float = DEFAULT_MARGIN):
    """Loss plus gradients w.r.t. the three embeddings.

    The hinge kink and zero-distance points use subgradient 0.
    """
    a = np.asarray(a, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    d_ap = masked_distance(a, p, c)
    d_an = masked_distance(a, n, c)
    loss = d_ap - d_an + margin
    da = np.zeros_like(a)
    dp = np.zeros_like(p)
    dn = np.zeros_like(n)
    if loss <= 0.0:
        return 0.0, da, dp, dn
    if d_ap > 0.0:
        unit_ap = (subspace(a, c) - subspace(p, c)) / d_ap
        subspace(da, c)[:] += unit_ap
        subspace(dp, c)[:] -= unit_ap
    if d_an > 0.0:
        unit_an = (subspace(a, c) - subspace(n, c)) / d_an
        subspace(da, c)[:] -= unit_an
        subspace(dn, c)[:] += unit_an
    return loss, da, dp, dn


def subspace_logit(e, j: int, b_j: float, epsilon_log: float = EPSILON_LOG) -> float:
    """sigma(log(max(norm of slice j, epsilon)) + b_j), a presence probability."""
    norm = float(np.linalg.norm(subspace(np.asarray(e, dtype=np.float64), j)))
    return float(expit(np.log(max(norm, epsilon_log)) + b_j))


def norm_loss(trip: TripletEmbeddings, params: NormLossParams) -> float:
    """Mean over the three members of the 5-way mean binary cross entropy
    between predicted presence probabilities and the presence vectors."""
    lo, hi = params.epsilon_bce, 1.0 - params.epsilon_bce
    total = 0.0
    for e, q in trip.members():
        for j in range(N_CONDITIONS):
            p_hat = min(max(subspace_logit(e, j, params.b[j], params.epsilon_log), lo), hi)
            qj = float(q[j])
            total += -(qj * np.log(p_hat) + (1.0 - qj) * np.log(1.0 - p_hat))
    return total / (3 * N_CONDITIONS)


def norm_loss_grad(trip: TripletEmbeddings, params: NormLossParams):
    """Loss plus gradients w.r.t. the three embeddings and the biases.

    Per element, the logit-space gradient is (p - q)/15 when the
    probability is inside the clamp window and zero outside it; it maps
    back to the subspace as v / norm(v)^2 and to the bias directly.
    """
    lo, hi = params.epsilon_bce, 1.0 - params.epsilon_bce
    members = trip.members()
    grads = [np.zeros_like(trip.a) for _ in range(3)]
    db = np.zeros(N_CONDITIONS)
    total = 0.0
    for mi, (e, q) in enumerate(members):
        for j in range(N_CONDITIONS):
            v = subspace(e, j)
            norm = float(np.linalg.norm(v))
            p_raw = float(expit(np.log(max(norm, params.epsilon_log)) + params.b[j]))
            p_hat = min(max(p_raw, lo), hi)
            qj = float(q[j])
            total += -(qj * np.log(p_hat) + (1.0 - qj) * np.log(1.0 - p_hat))
            if not lo < p_raw < hi:
                continue  # clamped region is flat
            g_z = (p_raw - qj) / (3 * N_CONDITIONS)
            db[j] += g_z
            if norm > params.epsilon_log:
                subspace(grads[mi], j)[:] += g_z * v / (norm * norm)
    return total / (3 * N_CONDITIONS), grads[0], grads[1], grads[2], db


@dataclass
class LossReport:
    total: float
    triplet: float
    norm: float


def total_loss(
    batch: list[TripletEmbeddings],
    params: NormLossParams,
    lam: float = DEFAULT_LAMBDA,
    margin: float = DEFAULT_MARGIN,
) -> LossReport:
    """Batch-mean triplet loss plus lambda times batch-mean norm loss."""
    if not batch:
        raise ValueError("empty batch")
    trip = float(
        np.mean([triplet_loss(t.a, t.p, t.n, t.c, margin) for t in batch])
    )
    norm = float(np.mean([norm_loss(t, params) for t in batch]))
    return LossReport(total=trip + lam * norm, triplet=trip, norm=norm)


def total_loss_grad(
    batch: list[TripletEmbeddings],
    params: NormLossParams,
    lam: float = DEFAULT_LAMBDA,
    margin: float = DEFAULT_MARGIN,
):
    """Loss report, per-item (da, dp, dn) for the scalar total, and db.

    Gradients already carry the 1/batch and lambda factors, so they sum
    directly into per-embedding accumulators.
    """
    if not batch:
        raise ValueError("empty batch")
    scale = 1.0 / len(batch)
    item_grads = []
    trip_sum = 0.0
    norm_sum = 0.0
    db_total = np.zeros(N_CONDITIONS)
    for t in batch:
        lt, da_t, dp_t, dn_t = triplet_loss_grad(t.a, t.p, t.n, t.c, margin)
        ln, da_n, dp_n, dn_n, db = norm_loss_grad(t, params)
        trip_sum += lt
        norm_sum += ln
        item_grads.append(
            (
                scale * (da_t + lam * da_n),
                scale * (dp_t + lam * dp_n),
                scale * (dn_t + lam * dn_n),
            )
        )
        db_total += scale * lam * db
    report = LossReport(
        total=(trip_sum + lam * norm_sum) * scale,
        triplet=trip_sum * scale,
        norm=norm_sum * scale,
    )
    return report, item_grads, db_total


def pretrain_target(stem_grams, teachers, q) -> np.ndarray | None:
    """Unit-normalized concatenation of teacher embeddings, zero blocks for
    absent instruments; None when every instrument is absent (skip signal)."""
    q = np.asarray(q)
    if not q.any():
        return None
    blocks = []
    for j in range(N_CONDITIONS):
        if q[j]:
            blocks.append(np.asarray(teacher_encode(teachers[j], stem_grams[j]), dtype=np.float64))
        else:
            blocks.append(np.zeros(teachers[j].output_dim, dtype=np.float64))
    target = np.concatenate(blocks)
    norm = float(np.linalg.norm(target))
    if norm == 0.0:
        return None
    return target / norm


def pretrain_loss(embeddings: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared error over all dimensions, averaged over the batch."""
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if embeddings.shape != targets.shape:
        raise ValueError(
            f"shape mismatch: {embeddings.shape} vs {targets.shape}"
        )
    diff = embeddings - targets
    return float((diff * diff).mean())


def pretrain_loss_grad(embeddings: np.ndarray, targets: np.ndarray):
    """Loss and its gradient with respect to the embeddings."""
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if embeddings.shape != targets.shape:
        raise ValueError(
            f"shape mismatch: {embeddings.shape} vs {targets.shape}"
        )
    diff = embeddings - targets
    loss = float((diff * diff).mean())
    return loss, 2.0 * diff / diff.size
