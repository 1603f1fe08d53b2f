"""Seeded synthetic cross-modal data with one-to-many correspondences.

Each class owns one random unit prototype per modality and one binary
attribute vector.  Items are prototype plus isotropic noise.  A fraction of
modality-B items is blended 50/50 with another class's prototype, which makes
them plausibly close to two classes while their ground-truth label stays clean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gaussian import Modality

__all__ = [
    "DatasetConfig",
    "Item",
    "CrossModalDataset",
    "AttributeCollisionError",
    "generate",
    "corrupt",
    "plausible_match",
    "hamming",
]


class AttributeCollisionError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 3
    items_per_class_per_modality: int = 20
    feature_dim: int = 16
    attribute_dim: int = 8
    noise_sigma: float = 0.2
    ambiguity_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "items_per_class_per_modality", "feature_dim", "attribute_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if not 0.0 <= self.ambiguity_fraction <= 1.0:
            raise ValueError("ambiguity_fraction must lie in [0, 1]")
        need = math.ceil(math.log2(self.num_classes)) if self.num_classes > 1 else 0
        if self.attribute_dim < need:
            raise ValueError(
                f"attribute_dim={self.attribute_dim} cannot give {self.num_classes} distinct vectors"
            )


@dataclass(frozen=True, eq=False)
class Item:
    id: str
    modality: Modality
    features: np.ndarray
    class_id: int
    attributes: np.ndarray
    ambiguous: bool = False
    index: int = 0  # position within (class, modality); items sharing it form an annotated pair

    def __eq__(self, other):
        if not isinstance(other, Item):
            return NotImplemented
        return (
            self.id == other.id
            and self.modality == other.modality
            and self.class_id == other.class_id
            and self.ambiguous == other.ambiguous
            and self.index == other.index
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.attributes, other.attributes)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class CrossModalDataset:
    items: tuple
    config: DatasetConfig | None = None
    _by_id: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        items = tuple(self.items)
        by_id = {}
        for it in items:
            if it.id in by_id:
                raise ValueError(f"duplicate item id {it.id!r}")
            by_id[it.id] = it
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, item_id: str) -> Item:
        return self._by_id[item_id]

    def __eq__(self, other):
        if not isinstance(other, CrossModalDataset):
            return NotImplemented
        return self.items == other.items

    @property
    def feature_dim(self) -> int:
        return self.items[0].features.size

    def modality_items(self, modality) -> list[Item]:
        m = Modality(modality)
        return [it for it in self.items if it.modality is m]

    def tau(self, item_id: str) -> set[str]:
        """Ground-truth matches: opposite-modality items of the same class."""
        q = self[item_id]
        return {
            it.id
            for it in self.items
            if it.modality is not q.modality and it.class_id == q.class_id
        }

    def is_match(self, id_a: str, id_b: str) -> bool:
        a, b = self[id_a], self[id_b]
        return a.modality is not b.modality and a.class_id == b.class_id

    def annotated_pairs(self) -> list[tuple[Item, Item]]:
        """(a, b) item pairs sharing class and index, in a-side order."""
        b_side = {(it.class_id, it.index): it for it in self.modality_items(Modality.B)}
        out = []
        for a in self.modality_items(Modality.A):
            b = b_side.get((a.class_id, a.index))
            if b is not None:
                out.append((a, b))
        return out

    def split(self, test_fraction: float = 0.25):
        """Split by item index within each class: the highest indices are held out."""
        if not 0.0 < test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        n_per = {}
        for it in self.items:
            n_per[it.class_id] = max(n_per.get(it.class_id, 0), it.index + 1)
        train, test = [], []
        for it in self.items:
            n_test = max(1, round(test_fraction * n_per[it.class_id]))
            (test if it.index >= n_per[it.class_id] - n_test else train).append(it)
        return (
            CrossModalDataset(tuple(train), self.config),
            CrossModalDataset(tuple(test), self.config),
        )

    def with_features(self, features_by_id: dict) -> "CrossModalDataset":
        items = []
        for it in self.items:
            f = features_by_id.get(it.id, it.features)
            items.append(
                Item(it.id, it.modality, np.asarray(f, dtype=np.float64), it.class_id,
                     it.attributes, it.ambiguous, it.index)
            )
        return CrossModalDataset(tuple(items), self.config)


def _unit_vector(rng, dim):
    v = rng.standard_normal(dim)
    while np.linalg.norm(v) == 0:
        v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _attribute_vectors(rng, num_classes, dim, max_attempts=1000):
    vectors: list[np.ndarray] = []
    seen = set()
    for _ in range(num_classes):
        for _attempt in range(max_attempts):
            v = rng.integers(0, 2, size=dim, dtype=np.int64)
            key = v.tobytes()
            if key not in seen:
                seen.add(key)
                vectors.append(v)
                break
        else:
            raise AttributeCollisionError(
                f"could not draw {num_classes} distinct attribute vectors of length {dim}"
            )
    return vectors


def generate(config: DatasetConfig) -> CrossModalDataset:
    rng = np.random.default_rng(config.seed)
    C, n, F = config.num_classes, config.items_per_class_per_modality, config.feature_dim
    protos = {
        m: np.stack([_unit_vector(rng, F) for _ in range(C)]) for m in (Modality.A, Modality.B)
    }
    attrs = _attribute_vectors(rng, C, config.attribute_dim)

    n_b = C * n
    n_amb = int(round(config.ambiguity_fraction * n_b))
    ambiguous = np.zeros(n_b, dtype=bool)
    ambiguous[rng.permutation(n_b)[:n_amb]] = True

    items = []
    for m in (Modality.A, Modality.B):
        for c in range(C):
            for k in range(n):
                center = protos[m][c]
                amb = False
                if m is Modality.B and ambiguous[c * n + k] and C > 1:
                    other = int(rng.integers(0, C - 1))
                    other += other >= c
                    center = 0.5 * protos[m][c] + 0.5 * protos[m][other]
                    amb = True
                elif m is Modality.B and ambiguous[c * n + k]:
                    amb = True
                x = center + config.noise_sigma * rng.standard_normal(F)
                x.flags.writeable = False
                a = attrs[c].copy()
                a.flags.writeable = False
                items.append(Item(f"{m.value}-{c:03d}-{k:04d}", m, x, c, a, amb, k))
    return CrossModalDataset(tuple(items), config)


def corrupt(features, erase_ratio: float, seed: int) -> np.ndarray:
    """Zero ``floor(erase_ratio * dim)`` coordinates chosen without replacement."""
    if not 0.0 <= erase_ratio <= 1.0:
        raise ValueError("erase_ratio must lie in [0, 1]")
    x = np.array(features, dtype=np.float64, copy=True)
    # the slack keeps e.g. 0.57 * 100 from flooring to 56
    k = min(x.size, int(math.floor(erase_ratio * x.size + 1e-9)))
    if k:
        idx = np.random.default_rng(seed).permutation(x.size)[:k]
        x[idx] = 0.0
    return x


def hamming(y_a, y_b) -> int:
    y_a, y_b = np.asarray(y_a), np.asarray(y_b)
    if y_a.shape != y_b.shape:
        raise ValueError(f"attribute lengths differ: {y_a.shape} vs {y_b.shape}")
    return int(np.count_nonzero(y_a != y_b))


def plausible_match(y_a, y_b, zeta: int) -> bool:
    if zeta < 0:
        raise ValueError("zeta must be nonnegative")
    return hamming(y_a, y_b) <= zeta
