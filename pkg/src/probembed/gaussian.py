"""Diagonal Gaussian embeddings, reparametrized sampling and closed-form distances.

Every embedding stores ``mu`` and ``log_var`` (natural log of the diagonal
variance).  ``log_var`` is clamped to ``[-60, 60]`` on construction, which keeps
``exp`` and the variance ratios used by KL/JS finite.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

__all__ = [
    "LOG_VAR_MIN",
    "LOG_VAR_MAX",
    "Modality",
    "Metric",
    "GaussianEmbedding",
    "MatchParams",
    "SampleSet",
    "IncompatibleEmbeddingsError",
    "NumericOverflowError",
    "noise_generator",
    "standard_normal_noise",
    "sample_embeddings",
    "match_probability_mc",
    "closed_form_distance",
    "closed_form_terms",
    "uncertainty",
]

LOG_VAR_MIN = -60.0
LOG_VAR_MAX = 60.0


class Modality(str, Enum):
    A = "a"
    B = "b"

    @property
    def other(self) -> "Modality":
        return Modality.B if self is Modality.A else Modality.A


class Metric(str, Enum):
    KL = "KL"
    JS = "JS"
    ELK = "ELK"
    BK = "BK"
    W2 = "W2"
    MEAN_L2 = "MEAN_L2"


class IncompatibleEmbeddingsError(ValueError):
    """Raised when two embeddings (or sample sets) do not share a dimension."""


class NumericOverflowError(FloatingPointError):
    """Raised when a computation produced a non-finite value."""


def _frozen(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True).reshape(-1)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class GaussianEmbedding:
    """N(mu, diag(exp(log_var))) for one item."""

    id: str
    modality: Modality
    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mu = _frozen(self.mu)
        log_var = np.array(self.log_var, dtype=np.float64, copy=True).reshape(-1)
        if mu.size < 1:
            raise ValueError("embedding dimension must be >= 1")
        if mu.shape != log_var.shape:
            raise ValueError(
                f"mu and log_var lengths differ ({mu.size} vs {log_var.size})"
            )
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_var))):
            raise ValueError(f"embedding {self.id!r} has non-finite entries")
        log_var = _frozen(np.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_var", log_var)
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "id", str(self.id))

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)

    def same_distribution(self, other: "GaussianEmbedding") -> bool:
        return np.array_equal(self.mu, other.mu) and np.array_equal(
            self.log_var, other.log_var
        )


@dataclass(frozen=True)
class MatchParams:
    """Scale ``a`` and offset ``b`` of the match logit ``-a * dist + b``."""

    a: float = 5.0
    b: float = 5.0

    def __post_init__(self):
        a, b = float(self.a), float(self.b)
        if not (math.isfinite(a) and math.isfinite(b)):
            raise ValueError("match parameters must be finite")
        if a <= 0:
            raise ValueError(f"match scale a must be positive, got {a}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True, eq=False)
class SampleSet:
    owner_id: str
    samples: np.ndarray  # (J, D)

    @property
    def J(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def noise_generator(seed: int, key: str) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(seed, key)``.

    Streams for different keys are independent, so draws do not depend on the
    order in which embeddings are processed.
    """
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=16).digest()
    words = [int(w) for w in np.frombuffer(digest, dtype=np.uint32)]
    seq = np.random.SeedSequence([int(seed) % (1 << 64), *words])
    return np.random.Generator(np.random.Philox(seq))


def standard_normal_noise(seed: int, key: str, J: int, dim: int) -> np.ndarray:
    if J < 1:
        raise ValueError(f"J must be >= 1, got {J}")
    return noise_generator(seed, key).standard_normal((J, dim))


def sample_embeddings(emb: GaussianEmbedding, J: int, seed: int) -> SampleSet:
    """Draw ``z^j = mu + sigma * eps^j`` for ``j = 1..J``."""
    eps = standard_normal_noise(seed, emb.id, J, emb.dim)
    samples = emb.mu + emb.sigma * eps
    samples.flags.writeable = False
    return SampleSet(owner_id=emb.id, samples=samples)


def _check_dims(p, q):
    if p.dim != q.dim:
        raise IncompatibleEmbeddingsError(
            f"dimension mismatch: {p.dim} vs {q.dim}"
        )


def match_probability_mc(
    emb_a: GaussianEmbedding,
    emb_b: GaussianEmbedding,
    params: MatchParams,
    J: int,
    seed: int,
) -> float:
    """Monte-Carlo match probability averaged over all J*J sample pairs."""
    _check_dims(emb_a, emb_b)
    za = sample_embeddings(emb_a, J, seed).samples
    zb = sample_embeddings(emb_b, J, seed).samples
    dist = np.linalg.norm(za[:, None, :] - zb[None, :, :], axis=-1)
    return float(np.mean(expit(-params.a * dist + params.b)))


def closed_form_terms(metric, mu1, lv1, mu2, lv2) -> np.ndarray:
    """Per-dimension terms of a closed-form distance; broadcasts over inputs.

    For ``MEAN_L2`` the terms are squared coordinate differences (the caller
    takes the root of their sum).
    """
    metric = Metric(metric)
    dmu2 = (mu1 - mu2) ** 2
    if metric is Metric.MEAN_L2:
        return dmu2
    if metric is Metric.KL:
        return _kl_terms(dmu2, lv1, lv2)
    if metric is Metric.JS:
        return 0.5 * (_kl_terms(dmu2, lv1, lv2) + _kl_terms(dmu2, lv2, lv1))
    if metric is Metric.W2:
        return dmu2 + (np.exp(0.5 * lv1) - np.exp(0.5 * lv2)) ** 2
    var_sum = np.exp(lv1) + np.exp(lv2)
    if metric is Metric.ELK:
        return 0.5 * (dmu2 / var_sum + np.logaddexp(lv1, lv2))
    # BK: log(s2/s1 + s1/s2) with s2/s1 = exp((lv2 - lv1) / 2)
    half = 0.5 * (lv2 - lv1)
    return 0.25 * (dmu2 / var_sum + 2.0 * np.logaddexp(half, -half))


def _kl_terms(dmu2, lv1, lv2):
    return 0.5 * (lv2 - lv1 + np.exp(lv1 - lv2) + dmu2 * np.exp(-lv2) - 1.0)


def closed_form_distance(metric, p: GaussianEmbedding, q: GaussianEmbedding) -> float:
    """Closed-form distance between two diagonal Gaussians.

    ``W2`` is the *squared* 2-Wasserstein distance.  ``ELK`` and ``BK`` are the
    negative log kernels up to additive constants, so they are not zero at
    ``p == q``.  ``KL`` is ``KL(p || q)``.
    """
    try:
        metric = Metric(metric)
    except ValueError:
        raise ValueError(f"unknown metric {metric!r}") from None
    _check_dims(p, q)
    with np.errstate(over="ignore", invalid="ignore"):
        terms = closed_form_terms(metric, p.mu, p.log_var, q.mu, q.log_var)
        total = float(np.sum(terms))
    if metric is Metric.MEAN_L2:
        total = math.sqrt(total)
    if not math.isfinite(total):
        raise NumericOverflowError(f"{metric.value} distance overflowed")
    if metric in (Metric.KL, Metric.JS, Metric.W2):
        # exact zero at p == q can come out as -1e-17 from cancellation
        total = max(total, 0.0)
    return total


def uncertainty(emb: GaussianEmbedding) -> float:
    """Geometric mean of the per-dimension standard deviations."""
    return math.exp(0.5 * float(np.mean(emb.log_var)))
