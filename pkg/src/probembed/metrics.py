"""Retrieval metrics: Recall@k, R-Precision, Plausible-Match R-Precision, uncertainty bins."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .datagen import CrossModalDataset, corrupt, hamming
from .gaussian import Modality, uncertainty
from .retrieval import RankedList, SimilaritySpec, retrieve
from .trainer import embed_dataset

__all__ = [
    "DEFAULT_ZETAS",
    "DEFAULT_KS",
    "DEFAULT_BINS",
    "recall_at_k",
    "r_precision",
    "PMRPResult",
    "pmrp",
    "UncertaintyBin",
    "uncertainty_bins",
    "corruption_sweep",
    "DirectionReport",
    "MetricReport",
    "evaluate",
    "evaluate_direction",
]

DEFAULT_ZETAS = (0, 1, 2)
DEFAULT_KS = (1, 5, 10)
DEFAULT_BINS = 10


def _mean(values) -> float:
    """Correctly rounded mean, independent of summation order."""
    values = list(values)
    return math.fsum(values) / len(values)


def recall_at_k(ranked: RankedList, positives, k: int) -> int:
    if k < 1 or k > len(ranked):
        raise ValueError(f"k={k} outside [1, {len(ranked)}]")
    positives = set(positives)
    return int(any(g in positives for g in ranked.gallery_ids[:k]))


def r_precision(ranked: RankedList, positives) -> float:
    positives = set(positives)
    r = len(positives)
    if r == 0:
        raise ValueError(f"query {ranked.query_id!r} has no positives")
    hits = sum(1 for g in ranked.gallery_ids[:r] if g in positives)
    return hits / r


@dataclass
class PMRPResult:
    value: float
    per_zeta: dict  # zeta -> mean R-Precision over included queries
    excluded: dict  # zeta -> number of queries with an empty positive set


def pmrp(ranked_lists, attributes: dict, zetas=DEFAULT_ZETAS) -> PMRPResult:
    """R-Precision under the Hamming plausible-match relation, averaged over zetas.

    ``attributes`` maps every query and gallery id to its binary label vector.
    """
    zetas = tuple(sorted(set(int(z) for z in zetas)))
    if not zetas:
        raise ValueError("need at least one zeta")
    per_zeta, excluded = {}, {}
    for z in zetas:
        vals, skipped = [], 0
        for rl in ranked_lists:
            y_q = attributes[rl.query_id]
            pos = {g for g in rl.gallery_ids if hamming(y_q, attributes[g]) <= z}
            if not pos:
                skipped += 1
                continue
            vals.append(r_precision(rl, pos))
        per_zeta[z] = _mean(vals) if vals else float("nan")
        excluded[z] = skipped
    defined = [v for v in per_zeta.values() if not np.isnan(v)]
    value = _mean(defined) if defined else float("nan")
    return PMRPResult(value, per_zeta, excluded)


@dataclass
class UncertaintyBin:
    bin: int
    count: int
    mean_uncertainty: float
    mean_r1: float


def uncertainty_bins(query_ids, uncertainties, r1_values, num_bins: int = DEFAULT_BINS):
    """Equal-count bins over queries sorted by (uncertainty, id).

    When the count does not divide evenly the earliest (least uncertain) bins
    get one extra query each.
    """
    query_ids = list(query_ids)
    u = np.asarray(uncertainties, dtype=np.float64)
    r1 = np.asarray(r1_values, dtype=np.float64)
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    if len(query_ids) < num_bins:
        raise ValueError(f"{len(query_ids)} queries cannot fill {num_bins} bins")
    if not (len(query_ids) == u.size == r1.size):
        raise ValueError("query ids, uncertainties and R@1 values must align")
    order = np.lexsort((np.asarray(query_ids), u))
    out = []
    for b, chunk in enumerate(np.array_split(order, num_bins)):
        out.append(UncertaintyBin(b, len(chunk), float(u[chunk].mean()), float(r1[chunk].mean())))
    return out


def _item_seed(seed: int, item_id: str) -> int:
    h = hashlib.blake2b(f"{seed}:{item_id}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")


def corruption_sweep(model, dataset: CrossModalDataset, ratios, seed: int):
    """(ratio, mean uncertainty) after erasing a ratio of every item's features."""
    rows = []
    for ratio in ratios:
        ratio = float(ratio)
        feats = {
            it.id: corrupt(it.features, ratio, _item_seed(seed, it.id)) for it in dataset.items
        }
        embs = embed_dataset(model, dataset.with_features(feats))
        rows.append((ratio, float(np.mean([uncertainty(e) for e in embs]))))
    return rows


@dataclass
class DirectionReport:
    direction: str
    recall: dict
    r_precision: float
    pmrp: PMRPResult
    per_query_uncertainty: dict
    per_query_r1: dict
    distance_evaluations: int
    storage_per_item: int
    ranked: list = field(default_factory=list, repr=False)

    def bins(self, num_bins: int = DEFAULT_BINS):
        ids = list(self.per_query_r1)
        return uncertainty_bins(
            ids,
            [self.per_query_uncertainty[i] for i in ids],
            [self.per_query_r1[i] for i in ids],
            num_bins,
        )


@dataclass
class MetricReport:
    directions: dict  # "a2b" / "b2a" -> DirectionReport
    kind: str

    def rows(self):
        """(direction, metric, param, value) rows in a fixed order."""
        out = []
        for name, d in self.directions.items():
            for k, v in d.recall.items():
                out.append((name, "recall", k, v))
            out.append((name, "r_precision", "", d.r_precision))
            out.append((name, "pmrp", "", d.pmrp.value))
            for z, v in d.pmrp.per_zeta.items():
                out.append((name, "pmrp_zeta", z, v))
            for z, v in d.pmrp.excluded.items():
                out.append((name, "pmrp_excluded", z, v))
            out.append((name, "distance_evaluations", "", d.distance_evaluations))
            out.append((name, "storage_per_item", "", d.storage_per_item))
        return out


def _direction(name, queries, gallery, dataset, spec, zetas, ks):
    ranked = retrieve(queries, gallery, spec)
    attributes = {it.id: it.attributes for it in dataset.items}
    gallery_ids = {e.id for e in gallery}
    recall = {}
    rp_vals, r1 = [], {}
    for rl in ranked:
        pos = dataset.tau(rl.query_id) & gallery_ids
        if pos:
            rp_vals.append(r_precision(rl, pos))
        r1[rl.query_id] = recall_at_k(rl, pos, 1)
    for k in ks:
        if k <= len(gallery):
            recall[k] = _mean(
                recall_at_k(rl, dataset.tau(rl.query_id) & gallery_ids, k) for rl in ranked
            )
    return DirectionReport(
        direction=name,
        recall=recall,
        r_precision=_mean(rp_vals) if rp_vals else float("nan"),
        pmrp=pmrp(ranked, attributes, zetas),
        per_query_uncertainty={q.id: uncertainty(q) for q in queries},
        per_query_r1=r1,
        distance_evaluations=sum(rl.evaluations for rl in ranked),
        storage_per_item=spec.storage_per_item(queries[0].dim),
        ranked=ranked,
    )


def evaluate(
    embeddings,
    dataset: CrossModalDataset,
    spec: SimilaritySpec,
    zetas=DEFAULT_ZETAS,
    ks=DEFAULT_KS,
) -> MetricReport:
    """Both retrieval directions (a->b and b->a) over a mixed embedding list."""
    embeddings = list(embeddings)
    emb_a = [e for e in embeddings if e.modality is Modality.A]
    emb_b = [e for e in embeddings if e.modality is Modality.B]
    directions = {
        "a2b": _direction("a2b", emb_a, emb_b, dataset, spec, zetas, ks),
        "b2a": _direction("b2a", emb_b, emb_a, dataset, spec, zetas, ks),
    }
    return MetricReport(directions, spec.kind.value)


def evaluate_direction(
    queries,
    gallery,
    dataset: CrossModalDataset,
    spec: SimilaritySpec,
    zetas=DEFAULT_ZETAS,
    ks=DEFAULT_KS,
) -> MetricReport:
    """One retrieval direction, named from the query modality (``a2b`` or ``b2a``)."""
    queries, gallery = list(queries), list(gallery)
    if not queries:
        raise ValueError("no queries")
    m = queries[0].modality
    name = f"{m.value}2{m.other.value}"
    return MetricReport({name: _direction(name, queries, gallery, dataset, spec, zetas, ks)},
                        spec.kind.value)
