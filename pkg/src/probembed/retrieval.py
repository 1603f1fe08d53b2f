"""Exhaustive retrieval over Gaussian embeddings under each test-time similarity.

Scores are oriented so that higher is better for every kind (distances are
negated).  Ties are broken by ascending gallery id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .gaussian import (
    GaussianEmbedding,
    IncompatibleEmbeddingsError,
    MatchParams,
    Metric,
    NumericOverflowError,
    closed_form_terms,
    sample_embeddings,
)

__all__ = [
    "SimilarityKind",
    "SimilaritySpec",
    "RankedList",
    "ModalityError",
    "score_matrix",
    "rank",
    "retrieve",
]


class SimilarityKind(str, Enum):
    MEAN_ONLY = "mean"
    KL = "kl"
    JS = "js"
    ELK = "elk"
    BK = "bk"
    W2 = "w2"
    AVG_L2_SAMPLED = "avg-l2"
    MATCH_PROB_SAMPLED = "match-prob"

    @classmethod
    def parse(cls, text) -> "SimilarityKind":
        if isinstance(text, cls):
            return text
        t = str(text).strip()
        for k in cls:
            if t.lower() == k.value or t.upper() == k.name:
                return k
        raise ValueError(f"unknown similarity kind {text!r}")

    @property
    def sampled(self) -> bool:
        return self in (SimilarityKind.AVG_L2_SAMPLED, SimilarityKind.MATCH_PROB_SAMPLED)


_CLOSED_FORM = {
    SimilarityKind.KL: Metric.KL,
    SimilarityKind.JS: Metric.JS,
    SimilarityKind.ELK: Metric.ELK,
    SimilarityKind.BK: Metric.BK,
    SimilarityKind.W2: Metric.W2,
}


class ModalityError(ValueError):
    pass


@dataclass(frozen=True)
class SimilaritySpec:
    kind: SimilarityKind = SimilarityKind.MEAN_ONLY
    J: int = 7
    seed: int = 0
    params: MatchParams = field(default_factory=MatchParams)

    def __post_init__(self):
        object.__setattr__(self, "kind", SimilarityKind.parse(self.kind))
        if self.kind.sampled and self.J < 1:
            raise ValueError("sampled similarity kinds need J >= 1")

    def storage_per_item(self, dim: int) -> int:
        """Reals stored per database entry."""
        if self.kind is SimilarityKind.MEAN_ONLY:
            return dim
        if self.kind.sampled:
            return self.J * dim
        return 2 * dim

    def distance_evaluations_per_pair(self) -> int:
        return self.J * self.J if self.kind.sampled else 1


@dataclass(frozen=True)
class RankedList:
    query_id: str
    gallery_ids: tuple
    scores: np.ndarray  # aligned with gallery_ids, best first
    evaluations: int = 0  # distance evaluations spent on this query

    def __len__(self):
        return len(self.gallery_ids)


def _validate(queries, gallery):
    if not gallery:
        raise ValueError("gallery is empty")
    if not queries:
        raise ValueError("no queries")
    dims = {e.dim for e in (*queries, *gallery)}
    if len(dims) != 1:
        raise IncompatibleEmbeddingsError(f"mixed embedding dimensions {sorted(dims)}")
    q_mod = {e.modality for e in queries}
    g_mod = {e.modality for e in gallery}
    if len(q_mod) != 1 or len(g_mod) != 1 or q_mod == g_mod:
        raise ModalityError("queries and gallery must come from opposite single modalities")


def score_matrix(queries, gallery, spec: SimilaritySpec):
    """Scores (Nq, Ng), higher is better, and the number of distance evaluations."""
    queries, gallery = list(queries), list(gallery)
    _validate(queries, gallery)
    kind = spec.kind
    mu_q = np.stack([e.mu for e in queries])
    mu_g = np.stack([e.mu for e in gallery])
    nq, ng = len(queries), len(gallery)

    if kind is SimilarityKind.MEAN_ONLY:
        diff = mu_q[:, None, :] - mu_g[None, :, :]
        scores = -np.sqrt(np.sum(diff * diff, axis=-1))
        evals = nq * ng
    elif kind in _CLOSED_FORM:
        lv_q = np.stack([e.log_var for e in queries])
        lv_g = np.stack([e.log_var for e in gallery])
        terms = closed_form_terms(
            _CLOSED_FORM[kind], mu_q[:, None, :], lv_q[:, None, :], mu_g[None], lv_g[None]
        )
        scores = -np.sum(terms, axis=-1)
        evals = nq * ng
    else:
        zq = np.stack([sample_embeddings(e, spec.J, spec.seed).samples for e in queries])
        zg = np.stack([sample_embeddings(e, spec.J, spec.seed).samples for e in gallery])
        scores = np.empty((nq, ng))
        evals = 0
        for i in range(nq):
            diff = zq[i][None, :, None, :] - zg[:, None, :, :]  # (Ng, J, J, D)
            dist = np.sqrt(np.sum(diff * diff, axis=-1))
            evals += dist.size
            if kind is SimilarityKind.AVG_L2_SAMPLED:
                scores[i] = -dist.mean(axis=(1, 2))
            else:
                logits = -spec.params.a * dist + spec.params.b
                log_sig = -np.logaddexp(0.0, -logits)
                # log-mean-exp around the max; subtracting log(J^2) after a
                # logsumexp would cancel log-sigmoids near zero
                top = log_sig.max(axis=(1, 2))
                scores[i] = top + np.log(np.mean(np.exp(log_sig - top[:, None, None]), axis=(1, 2)))
    if not np.all(np.isfinite(scores)):
        raise NumericOverflowError(f"non-finite {kind.value} scores")
    return scores, evals


def rank(query_id: str, gallery_ids, scores, evaluations: int = 0) -> RankedList:
    ids = np.asarray(list(gallery_ids))
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((ids, -scores))
    return RankedList(query_id, tuple(ids[order].tolist()), scores[order], evaluations)


def retrieve(queries, gallery, spec: SimilaritySpec) -> list[RankedList]:
    queries, gallery = list(queries), list(gallery)
    scores, evals = score_matrix(queries, gallery, spec)
    gallery_ids = [e.id for e in gallery]
    per_query = evals // len(queries)
    return [rank(q.id, gallery_ids, scores[i], per_query) for i, q in enumerate(queries)]
