"""Soft cross-modal contrastive loss and friends, with exact gradients.

All gradients are for the fixed-sample objective: each embedding's noise
``eps`` is drawn once from ``(batch.seed, emb.id)`` and held fixed, so a sample
``z = mu + exp(log_var / 2) * eps`` is a deterministic function of
``(mu, log_var)`` and central differences are exact up to truncation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .gaussian import (
    GaussianEmbedding,
    IncompatibleEmbeddingsError,
    MatchParams,
    SampleSet,
    standard_normal_noise,
)

__all__ = [
    "PROB_CLAMP",
    "PairBatch",
    "LossValueAndGrads",
    "LogitTable",
    "pairwise_logits",
    "soft_contrastive_from_logits",
    "weighted_contrastive_from_logits",
    "mil_from_logits",
    "soft_contrastive_loss",
    "mil_loss",
    "triplet_hnm_loss",
    "triplet_hnm_batch_loss",
    "kl_regularizer",
    "uniformity_loss",
    "total_loss",
]

PROB_CLAMP = 1e-12
UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class PairBatch:
    """Labelled cross-modal pairs plus the sampling setup used to score them."""

    pairs: list
    J: int = 7
    seed: int = 0

    def __post_init__(self):
        pairs = [(a, b, bool(m)) for a, b, m in self.pairs]
        if not pairs:
            raise ValueError("PairBatch needs at least one pair")
        if self.J < 1:
            raise ValueError(f"J must be >= 1, got {self.J}")
        dims = {e.dim for a, b, _ in pairs for e in (a, b)}
        if len(dims) != 1:
            raise IncompatibleEmbeddingsError(f"mixed embedding dimensions {sorted(dims)}")
        object.__setattr__(self, "pairs", pairs)

    @property
    def dim(self) -> int:
        return self.pairs[0][0].dim

    def embeddings(self) -> list[GaussianEmbedding]:
        """Distinct embeddings in first-appearance order (a side before b side per pair)."""
        seen: dict[str, GaussianEmbedding] = {}
        for a, b, _ in self.pairs:
            for e in (a, b):
                prev = seen.get(e.id)
                if prev is None:
                    seen[e.id] = e
                elif prev is not e and not prev.same_distribution(e):
                    raise ValueError(f"two different embeddings share id {e.id!r}")
        return list(seen.values())


@dataclass
class LossValueAndGrads:
    """Scalar loss with gradients keyed by embedding id, plus match-param grads."""

    value: float
    mu: dict = field(default_factory=dict)
    log_var: dict = field(default_factory=dict)
    a: float = 0.0
    b: float = 0.0
    clamp_count: int = 0
    components: dict = field(default_factory=dict)

    def is_finite(self) -> bool:
        arrays = list(self.mu.values()) + list(self.log_var.values())
        return bool(
            np.isfinite(self.value)
            and np.isfinite(self.a)
            and np.isfinite(self.b)
            and all(np.all(np.isfinite(g)) for g in arrays)
        )


@dataclass(frozen=True)
class LogitTable:
    logits: np.ndarray  # (J, J): -a * ||z_a^j - z_b^j'|| + b


def pairwise_logits(
    samples_a: SampleSet, samples_b: SampleSet, params: MatchParams
) -> LogitTable:
    if samples_a.samples.shape != samples_b.samples.shape:
        raise IncompatibleEmbeddingsError(
            f"sample sets differ in shape: {samples_a.samples.shape} vs {samples_b.samples.shape}"
        )
    za, zb = samples_a.samples, samples_b.samples
    dist = np.linalg.norm(za[:, None, :] - zb[None, :, :], axis=-1)
    return LogitTable(-params.a * dist + params.b)


# ---------------------------------------------------------------------------
# logit-level heads: value and dL/dlogits for a stack of (J, J) tables


def _as_stack(logits, labels):
    logits = np.asarray(getattr(logits, "logits", logits), dtype=np.float64)
    squeeze = logits.ndim == 2
    if squeeze:
        logits = logits[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=bool))
    if labels.shape != (logits.shape[0],):
        raise ValueError("need one label per logit table")
    return logits, labels, squeeze


def _bernoulli_nll(p, labels):
    """Clamped -log p (positives) / -log(1 - p) (negatives) and dL/dp."""
    clamped = (p < PROB_CLAMP) | (p > 1.0 - PROB_CLAMP)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = np.where(labels, -np.log(pc), -np.log1p(-pc))
    dloss_dp = np.where(labels, -1.0 / pc, 1.0 / (1.0 - pc))
    dloss_dp = np.where(clamped, 0.0, dloss_dp)
    return loss, dloss_dp, int(np.count_nonzero(clamped))


def weighted_contrastive_from_logits(logits, labels, weights):
    """Per-table loss with match probability ``sum(w * sigmoid(l))``.

    Uniform weights ``1/J^2`` give the soft contrastive loss.  Returns
    ``(losses, dL/dlogits, clamp_count)`` with one loss per table.
    """
    logits, labels, squeeze = _as_stack(logits, labels)
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), logits.shape)
    s = expit(logits)
    p = np.sum(weights * s, axis=(1, 2))
    loss, dloss_dp, n_clamped = _bernoulli_nll(p, labels)
    grad = dloss_dp[:, None, None] * weights * s * (1.0 - s)
    if squeeze:
        return float(loss[0]), grad[0], n_clamped
    return loss, grad, n_clamped


def soft_contrastive_from_logits(logits, labels):
    logits_arr = np.asarray(getattr(logits, "logits", logits))
    J2 = logits_arr.shape[-1] * logits_arr.shape[-2]
    return weighted_contrastive_from_logits(logits, labels, 1.0 / J2)


def mil_from_logits(logits, labels):
    """Best-candidate loss: max logit for positives, min logit for negatives.

    Ties resolve to the first entry in row-major order.
    """
    logits, labels, squeeze = _as_stack(logits, labels)
    n, J1, J2 = logits.shape
    flat = logits.reshape(n, -1)
    pick = np.where(labels, np.argmax(flat, axis=1), np.argmin(flat, axis=1))
    chosen = flat[np.arange(n), pick]
    s = expit(chosen)
    loss, dloss_dp, n_clamped = _bernoulli_nll(s, labels)
    grad = np.zeros_like(flat)
    grad[np.arange(n), pick] = dloss_dp * s * (1.0 - s)
    grad = grad.reshape(n, J1, J2)
    if squeeze:
        return float(loss[0]), grad[0], n_clamped
    return loss, grad, n_clamped


# ---------------------------------------------------------------------------
# batch plumbing


class _Packed:
    """Array view of a PairBatch: one row per distinct embedding."""

    def __init__(self, batch: PairBatch):
        embs = batch.embeddings()
        self.ids = [e.id for e in embs]
        row = {eid: i for i, eid in enumerate(self.ids)}
        self.mu = np.stack([e.mu for e in embs])
        self.log_var = np.stack([e.log_var for e in embs])
        self.eps = np.stack(
            [standard_normal_noise(batch.seed, e.id, batch.J, e.dim) for e in embs]
        )
        self.ia = np.array([row[a.id] for a, _, _ in batch.pairs])
        self.ib = np.array([row[b.id] for _, b, _ in batch.pairs])
        self.labels = np.array([m for _, _, m in batch.pairs], dtype=bool)
        self.sigma = np.exp(0.5 * self.log_var)
        self.z = self.mu[:, None, :] + self.sigma[:, None, :] * self.eps  # (N, J, D)

    def sample_grads_to_params(self, dz):
        """Chain dL/dz (N, J, D) back to dL/dmu and dL/dlog_var."""
        dmu = dz.sum(axis=1)
        dlv = np.sum(dz * 0.5 * self.sigma[:, None, :] * self.eps, axis=1)
        return dmu, dlv

    def result(self, value, dmu, dlv, **kw) -> LossValueAndGrads:
        return LossValueAndGrads(
            value=float(value),
            mu={eid: dmu[i] for i, eid in enumerate(self.ids)},
            log_var={eid: dlv[i] for i, eid in enumerate(self.ids)},
            **kw,
        )


def _contrastive(batch: PairBatch, params: MatchParams, head) -> LossValueAndGrads:
    pk = _Packed(batch)
    diff = pk.z[pk.ia][:, :, None, :] - pk.z[pk.ib][:, None, :, :]  # (P, J, J, D)
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    logits = -params.a * dist + params.b
    losses, dlogits, n_clamped = head(logits, pk.labels)
    n_pairs = len(pk.labels)
    value = float(np.sum(losses)) / n_pairs
    dlogits = dlogits / n_pairs

    grad_a = float(np.sum(dlogits * -dist))
    grad_b = float(np.sum(dlogits))
    safe = np.where(dist > 0, dist, 1.0)
    ddist = np.where(dist > 0, -params.a * dlogits / safe, 0.0)
    ddiff = ddist[..., None] * diff
    dz = np.zeros_like(pk.z)
    np.add.at(dz, pk.ia, ddiff.sum(axis=2))
    np.add.at(dz, pk.ib, -ddiff.sum(axis=1))
    dmu, dlv = pk.sample_grads_to_params(dz)
    return pk.result(value, dmu, dlv, a=grad_a, b=grad_b, clamp_count=n_clamped)


def soft_contrastive_loss(batch: PairBatch, params: MatchParams) -> LossValueAndGrads:
    """Mean over pairs of -log p (matches) and -log(1 - p) (non-matches)."""
    return _contrastive(batch, params, soft_contrastive_from_logits)


def mil_loss(batch: PairBatch, params: MatchParams) -> LossValueAndGrads:
    """Contrastive loss supervised only through each pair's best sample pair."""
    return _contrastive(batch, params, mil_from_logits)


# ---------------------------------------------------------------------------
# deterministic triplet baseline


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero mean vector")
    return v / n, n


def _unit_backward(u, n, du):
    return (du - u * np.sum(u * du, axis=-1, keepdims=True)) / n


def triplet_hnm_loss(
    anchor: GaussianEmbedding,
    positive: GaussianEmbedding,
    negatives: list,
    margin: float = 0.2,
) -> LossValueAndGrads:
    """Hinge on the hardest negative under cosine similarity of the means."""
    if not negatives:
        raise ValueError("triplet loss needs at least one negative")
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    dims = {e.dim for e in (anchor, positive, *negatives)}
    if len(dims) != 1:
        raise IncompatibleEmbeddingsError(f"mixed embedding dimensions {sorted(dims)}")

    ua, na = _unit(anchor.mu)
    up, np_ = _unit(positive.mu)
    un, nn = _unit(np.stack([e.mu for e in negatives]))
    sim_neg = un @ ua
    k = int(np.argmax(sim_neg))
    value = margin + sim_neg[k] - ua @ up

    grads_u = {anchor.id: np.zeros_like(ua), positive.id: np.zeros_like(up)}
    for e in negatives:
        grads_u.setdefault(e.id, np.zeros_like(ua))
    if value > 0:
        grads_u[anchor.id] = grads_u[anchor.id] + un[k] - up
        grads_u[positive.id] = grads_u[positive.id] - ua
        grads_u[negatives[k].id] = grads_u[negatives[k].id] + ua
    else:
        value = 0.0

    norm_of = {anchor.id: (ua, na), positive.id: (up, np_)}
    for i, e in enumerate(negatives):
        norm_of.setdefault(e.id, (un[i], nn[i]))
    mu = {eid: _unit_backward(*norm_of[eid], g) for eid, g in grads_u.items()}
    log_var = {eid: np.zeros_like(g) for eid, g in mu.items()}
    return LossValueAndGrads(value=float(value), mu=mu, log_var=log_var)


def triplet_hnm_batch_loss(
    batch: PairBatch, margin: float = 0.2, anchors=None
) -> LossValueAndGrads:
    """Both-direction hardest-negative triplet loss over a labelled batch.

    Each anchor pair ``(a, b)`` contributes one term anchored at ``a`` (the
    negatives are the b-side items labelled negative against ``a``) and one
    anchored at ``b``.  ``anchors`` is a list of ``(a_id, b_id)`` annotated
    pairs; by default every positive pair of the batch is an anchor.  Other
    positives are ignored, they are never pulled together.  Terms without any
    negative are skipped and the value is the mean over contributing terms.
    """
    embs = batch.embeddings()
    ids = [e.id for e in embs]
    row = {eid: i for i, eid in enumerate(ids)}
    u, n = _unit(np.stack([e.mu for e in embs]))
    sim = u @ u.T
    N = len(ids)
    label = np.full((N, N), -1, dtype=np.int8)  # -1 absent, 0 neg, 1 pos
    for a, b, m in batch.pairs:
        label[row[a.id], row[b.id]] = int(m)
        label[row[b.id], row[a.id]] = int(m)

    neg_sim = np.where(label == 0, sim, -np.inf)
    hard = np.argmax(neg_sim, axis=1)  # first maximal negative per anchor
    has_neg = np.any(label == 0, axis=1)

    if anchors is None:
        anchors = [(a.id, b.id) for a, b, m in batch.pairs if m]
    du = np.zeros_like(u)
    total, terms = 0.0, 0
    for a_id, b_id in anchors:
        if label[row[a_id], row[b_id]] != 1:
            raise ValueError(f"anchor pair ({a_id}, {b_id}) is not a positive of the batch")
        for anc, pos in ((row[a_id], row[b_id]), (row[b_id], row[a_id])):
            if not has_neg[anc]:
                continue
            terms += 1
            k = hard[anc]
            h = margin + sim[anc, k] - sim[anc, pos]
            if h > 0:
                total += h
                du[anc] += u[k] - u[pos]
                du[k] += u[anc]
                du[pos] -= u[anc]
    if terms == 0:
        zeros = np.zeros_like(u)
        return LossValueAndGrads(
            value=0.0,
            mu={eid: zeros[i] for i, eid in enumerate(ids)},
            log_var={eid: zeros[i] for i, eid in enumerate(ids)},
        )
    dmu = _unit_backward(u, n, du / terms)
    return LossValueAndGrads(
        value=total / terms,
        mu={eid: dmu[i] for i, eid in enumerate(ids)},
        log_var={eid: np.zeros(u.shape[1]) for eid in ids},
    )


# ---------------------------------------------------------------------------
# regularizers


def kl_regularizer(emb: GaussianEmbedding) -> LossValueAndGrads:
    """KL(N(mu, diag var) || N(0, I))."""
    var = emb.var
    value = 0.5 * float(np.sum(var + emb.mu**2 - 1.0 - emb.log_var))
    return LossValueAndGrads(
        value=value,
        mu={emb.id: emb.mu.copy()},
        log_var={emb.id: 0.5 * (var - 1.0)},
    )


def _uniformity(u):
    diff = u[:, None, :] - u[None, :, :]
    kern = np.exp(-2.0 * np.sum(diff * diff, axis=-1))
    value = float(np.sum(kern))
    grad = -8.0 * np.einsum("ik,ikd->id", kern, diff)
    return value, grad


def uniformity_loss(embeddings) -> LossValueAndGrads:
    """Sum of ``exp(-2 ||z - z'||^2)`` over all ordered pairs, self-pairs included.

    Input rows must be unit vectors.  Gradients are returned as an array under
    ``components["grad"]`` (one row per input vector).
    """
    u = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    norms = np.linalg.norm(u, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise ValueError("uniformity loss requires L2-normalized inputs")
    value, grad = _uniformity(u)
    return LossValueAndGrads(value=value, components={"grad": grad})


def total_loss(
    batch: PairBatch,
    params: MatchParams,
    lambda_kl: float = 0.0,
    lambda_unif: float = 0.0,
    contrastive: str = "soft",
) -> LossValueAndGrads:
    """Contrastive term + lambda_kl * mean KL + lambda_unif * uniformity.

    The uniformity term runs on every sample of every distinct embedding,
    each re-normalized to the unit sphere.
    """
    if lambda_kl < 0 or lambda_unif < 0:
        raise ValueError("regularizer weights must be nonnegative")
    head = {"soft": soft_contrastive_loss, "mil": mil_loss}[contrastive]
    out = head(batch, params)
    components = {"contrastive": out.value}
    value = out.value
    mu = {k: v.copy() for k, v in out.mu.items()}
    log_var = {k: v.copy() for k, v in out.log_var.items()}

    embs = batch.embeddings()
    if lambda_kl > 0:
        kl_total = 0.0
        for e in embs:
            r = kl_regularizer(e)
            kl_total += r.value
            mu[e.id] += lambda_kl / len(embs) * r.mu[e.id]
            log_var[e.id] += lambda_kl / len(embs) * r.log_var[e.id]
        components["kl"] = kl_total / len(embs)
        value += lambda_kl * components["kl"]
    if lambda_unif > 0:
        pk = _Packed(batch)
        N, J, D = pk.z.shape
        flat = pk.z.reshape(N * J, D)
        v, nrm = _unit(flat)
        unif_value, du = _uniformity(v)
        dz = _unit_backward(v, nrm, lambda_unif * du).reshape(N, J, D)
        dmu, dlv = pk.sample_grads_to_params(dz)
        for i, eid in enumerate(pk.ids):
            mu[eid] += dmu[i]
            log_var[eid] += dlv[i]
        components["uniformity"] = unif_value
        value += lambda_unif * unif_value
    return LossValueAndGrads(
        value=value,
        mu=mu,
        log_var=log_var,
        a=out.a,
        b=out.b,
        clamp_count=out.clamp_count,
        components=components,
    )
