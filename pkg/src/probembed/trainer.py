"""Linear probabilistic encoders trained with SGD + momentum on a cosine schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from .datagen import CrossModalDataset, Item
from .gaussian import LOG_VAR_MAX, LOG_VAR_MIN, GaussianEmbedding, MatchParams, Modality
from .losses import PairBatch, total_loss, triplet_hnm_batch_loss

__all__ = [
    "Mode",
    "LossKind",
    "Head",
    "Model",
    "TrainConfig",
    "EpochRecord",
    "TrainHistory",
    "Minibatch",
    "DegenerateEncodingError",
    "NumericalFailure",
    "MU_ONLY_LOG_VAR",
    "init_model",
    "encode",
    "encode_many",
    "make_minibatch",
    "cosine_lr",
    "train",
    "embed_dataset",
]

MU_ONLY_LOG_VAR = LOG_VAR_MIN
MIN_SCALE = 1e-3
VAR_BIAS_INIT = -4.0


class Mode(str, Enum):
    PROBABILISTIC = "prob"
    MU_ONLY = "mu-only"


class LossKind(str, Enum):
    SOFT_CONTRASTIVE = "soft"
    MIL = "mil"
    TRIPLET_HNM = "triplet"


class DegenerateEncodingError(ValueError):
    """The mean head produced an exactly zero vector, which cannot be normalized."""


class NumericalFailure(FloatingPointError):
    def __init__(self, step: int, component: str, value: float):
        super().__init__(f"non-finite {component} ({value}) at step {step}")
        self.step = step
        self.component = component
        self.value = value


@dataclass
class Head:
    mu_weight: np.ndarray  # (feature_dim, D)
    mu_bias: np.ndarray  # (D,)
    var_weight: np.ndarray
    var_bias: np.ndarray

    def copy(self) -> "Head":
        return Head(*(np.array(p, copy=True) for p in self.params()))

    def params(self):
        return (self.mu_weight, self.mu_bias, self.var_weight, self.var_bias)

    @property
    def feature_dim(self) -> int:
        return self.mu_weight.shape[0]

    @property
    def dim(self) -> int:
        return self.mu_weight.shape[1]


@dataclass
class Model:
    heads: dict  # Modality -> Head
    match_params: MatchParams = field(default_factory=MatchParams)
    mode: Mode = Mode.PROBABILISTIC
    alt_mode: LossKind = LossKind.SOFT_CONTRASTIVE

    def copy(self) -> "Model":
        return Model(
            {m: h.copy() for m, h in self.heads.items()},
            self.match_params,
            self.mode,
            self.alt_mode,
        )

    @property
    def dim(self) -> int:
        return self.heads[Modality.A].dim

    def feature_dim(self, modality) -> int:
        return self.heads[Modality(modality)].feature_dim


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    samples: int = 7
    epochs: int = 200
    learning_rate: float = 0.1
    momentum: float = 0.9
    lambda_kl: float = 0.001
    lambda_unif: float = 0.0
    seed: int = 0
    mode: Mode = Mode.PROBABILISTIC
    alt_mode: LossKind = LossKind.SOFT_CONTRASTIVE
    margin: float = 0.2
    embed_dim: int = 16
    init_a: float = 5.0
    init_b: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "alt_mode", LossKind(self.alt_mode))
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.lambda_kl < 0 or self.lambda_unif < 0 or self.margin < 0:
            raise ValueError("regularizer weights and margin must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["alt_mode"] = self.alt_mode.value
        return d


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    loss: float
    components: dict
    mean_log_sigma: dict  # modality value -> mean over items and dims of log sigma


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def final_mean_log_sigma(self) -> float:
        last = self.records[-1].mean_log_sigma
        return float(np.mean(list(last.values())))


def init_model(feature_dims, config: TrainConfig) -> Model:
    """Seeded init: weights U(-1/sqrt(F), 1/sqrt(F)), variance bias -4."""
    if isinstance(feature_dims, int):
        feature_dims = {Modality.A: feature_dims, Modality.B: feature_dims}
    rng = np.random.default_rng(config.seed)
    D = config.embed_dim
    heads = {}
    for m in (Modality.A, Modality.B):
        F = feature_dims[m]
        scale = 1.0 / math.sqrt(F)
        heads[m] = Head(
            mu_weight=rng.uniform(-scale, scale, (F, D)),
            mu_bias=rng.uniform(-scale, scale, D),
            var_weight=rng.uniform(-scale, scale, (F, D)),
            var_bias=np.full(D, VAR_BIAS_INIT),
        )
    return Model(
        heads,
        MatchParams(config.init_a, config.init_b),
        config.mode,
        config.alt_mode,
    )


def _forward(model: Model, X: np.ndarray, modality: Modality):
    head = model.heads[modality]
    if X.shape[1] != head.feature_dim:
        raise ValueError(
            f"feature_dim mismatch: model expects {head.feature_dim}, got {X.shape[1]}"
        )
    with np.errstate(over="ignore", invalid="ignore"):
        raw = X @ head.mu_weight + head.mu_bias
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if not np.all(np.isfinite(norms)):
        raise DegenerateEncodingError("mean head produced a non-finite vector")
    if np.any(norms == 0):
        raise DegenerateEncodingError("mean head produced a zero vector")
    mu = raw / norms
    if model.mode is Mode.MU_ONLY:
        lv_raw = np.full_like(mu, MU_ONLY_LOG_VAR)
    else:
        lv_raw = X @ head.var_weight + head.var_bias
    lv = np.clip(lv_raw, LOG_VAR_MIN, LOG_VAR_MAX)
    return mu, norms, lv, lv_raw


def encode(model: Model, features, modality, item_id: str = "") -> GaussianEmbedding:
    m = Modality(modality)
    X = np.asarray(features, dtype=np.float64).reshape(1, -1)
    mu, _, lv, _ = _forward(model, X, m)
    return GaussianEmbedding(item_id, m, mu[0], lv[0])


def encode_many(model: Model, items) -> list[GaussianEmbedding]:
    """Encode items (any modality mix), preserving input order."""
    items = list(items)
    out: list = [None] * len(items)
    for m in (Modality.A, Modality.B):
        idx = [i for i, it in enumerate(items) if it.modality is m]
        if not idx:
            continue
        X = np.stack([items[i].features for i in idx])
        mu, _, lv, _ = _forward(model, X, m)
        for r, i in enumerate(idx):
            out[i] = GaussianEmbedding(items[i].id, m, mu[r], lv[r])
    return out


def embed_dataset(model: Model, dataset: CrossModalDataset) -> list[GaussianEmbedding]:
    return encode_many(model, dataset.items)


@dataclass(frozen=True)
class Minibatch:
    a_items: tuple
    b_items: tuple
    labels: np.ndarray  # (B, B): labels[i, k] = a_items[i] matches b_items[k]

    def pairs(self):
        for i, a in enumerate(self.a_items):
            for k, b in enumerate(self.b_items):
                yield a, b, bool(self.labels[i, k])

    def items(self) -> list[Item]:
        return list(self.a_items) + list(self.b_items)

    def to_pair_batch(self, embeddings: dict, J: int, seed: int) -> PairBatch:
        return PairBatch(
            [(embeddings[a.id], embeddings[b.id], m) for a, b, m in self.pairs()],
            J=J,
            seed=seed,
        )


def _steps_per_epoch(n_pairs: int, B: int) -> int:
    return n_pairs // B


def make_minibatch(dataset: CrossModalDataset, B: int, seed: int, step: int) -> Minibatch:
    """B annotated pairs without replacement, expanded to all B*B cross pairs.

    Pairs are drawn from a per-epoch permutation, so consecutive steps in an
    epoch never repeat a pair.  Labels follow the class relation, so
    same-class off-diagonal pairs are positives.
    """
    pairs = dataset.annotated_pairs()
    if B < 1 or len(pairs) < B:
        raise ValueError(f"need at least {B} annotated pairs, dataset has {len(pairs)}")
    spe = _steps_per_epoch(len(pairs), B)
    epoch, pos = divmod(step, spe)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) % (1 << 64), epoch]))
    chosen = rng.permutation(len(pairs))[pos * B : (pos + 1) * B]
    a_items = tuple(pairs[i][0] for i in chosen)
    b_items = tuple(pairs[i][1] for i in chosen)
    labels = np.array(
        [[a.class_id == b.class_id for b in b_items] for a in a_items], dtype=bool
    )
    return Minibatch(a_items, b_items, labels)


def cosine_lr(lr0: float, t: int, T: int) -> float:
    if T <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / T))


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed) % (1 << 64), step, 1]).generate_state(1)[0])


def _batch_gradients(model: Model, mb: Minibatch, config: TrainConfig, step_seed: int):
    """Loss result and parameter gradients for one minibatch."""
    items = mb.items()
    cache = {}
    embs = {}
    for m in (Modality.A, Modality.B):
        group = [it for it in items if it.modality is m]
        X = np.stack([it.features for it in group])
        mu, norms, lv, lv_raw = _forward(model, X, m)
        cache[m] = (group, X, mu, norms, lv_raw)
        for r, it in enumerate(group):
            embs[it.id] = GaussianEmbedding(it.id, m, mu[r], lv[r])
    batch = mb.to_pair_batch(embs, config.samples, step_seed)

    if config.alt_mode is LossKind.TRIPLET_HNM:
        # hinge terms only for the B annotated pairs
        anchors = [(a.id, b.id) for a, b in zip(mb.a_items, mb.b_items)]
        out = triplet_hnm_batch_loss(batch, config.margin, anchors)
        out.components = {"triplet": out.value}
    else:
        contrastive = "mil" if config.alt_mode is LossKind.MIL else "soft"
        lambda_kl = config.lambda_kl if model.mode is Mode.PROBABILISTIC else 0.0
        out = total_loss(batch, model.match_params, lambda_kl, config.lambda_unif, contrastive)

    grads = {}
    for m, (group, X, mu, norms, lv_raw) in cache.items():
        g_mu = np.stack([out.mu[it.id] for it in group])
        g_raw = (g_mu - mu * np.sum(mu * g_mu, axis=1, keepdims=True)) / norms
        head_grads = [X.T @ g_raw, g_raw.sum(axis=0)]
        if model.mode is Mode.PROBABILISTIC:
            g_lv = np.stack([out.log_var[it.id] for it in group])
            g_lv = np.where((lv_raw < LOG_VAR_MIN) | (lv_raw > LOG_VAR_MAX), 0.0, g_lv)
            head_grads += [X.T @ g_lv, g_lv.sum(axis=0)]
        else:
            head_grads += [np.zeros_like(model.heads[m].var_weight), np.zeros(model.dim)]
        grads[m] = head_grads
    return out, grads


def _mean_log_sigma(model: Model, dataset: CrossModalDataset) -> dict:
    out = {}
    for m in (Modality.A, Modality.B):
        group = dataset.modality_items(m)
        if group:
            _, _, lv, _ = _forward(model, np.stack([it.features for it in group]), m)
            out[m.value] = float(np.mean(0.5 * lv))
    return out


def train(dataset: CrossModalDataset, config: TrainConfig, model: Model | None = None):
    """Train on ``dataset``; returns ``(model, history)``.

    Raises :class:`NumericalFailure` naming the step and loss component when a
    non-finite value appears.
    """
    feature_dims = {
        m: dataset.modality_items(m)[0].features.size for m in (Modality.A, Modality.B)
    }
    model = init_model(feature_dims, config) if model is None else model.copy()
    history = TrainHistory()
    if config.epochs == 0:
        return model, history

    n_pairs = len(dataset.annotated_pairs())
    if n_pairs < config.batch_size:
        raise ValueError(
            f"need at least {config.batch_size} annotated pairs, dataset has {n_pairs}"
        )
    spe = _steps_per_epoch(n_pairs, config.batch_size)
    T = config.epochs * spe
    velocity = {m: [np.zeros_like(p) for p in model.heads[m].params()] for m in model.heads}
    v_ab = np.zeros(2)

    step = 0
    for epoch in range(config.epochs):
        lr_epoch = cosine_lr(config.learning_rate, step, T)
        losses, comps = [], {}
        for _ in range(spe):
            lr = cosine_lr(config.learning_rate, step, T)
            mb = make_minibatch(dataset, config.batch_size, config.seed, step)
            try:
                out, grads = _batch_gradients(model, mb, config, _step_seed(config.seed, step))
            except DegenerateEncodingError as exc:
                raise NumericalFailure(step, "encoding", float("nan")) from exc
            for name, value in [("loss", out.value), *out.components.items()]:
                if not math.isfinite(value):
                    raise NumericalFailure(step, name, value)
            if not out.is_finite():
                raise NumericalFailure(step, "gradient", float("nan"))

            with np.errstate(over="ignore", invalid="ignore"):
                for m, head in model.heads.items():
                    for p, g, v in zip(head.params(), grads[m], velocity[m]):
                        v *= config.momentum
                        v += g
                        p -= lr * v
            if config.alt_mode is not LossKind.TRIPLET_HNM:
                v_ab *= config.momentum
                v_ab += (out.a, out.b)
                a = max(model.match_params.a - lr * v_ab[0], MIN_SCALE)
                b = model.match_params.b - lr * v_ab[1]
                if not (math.isfinite(a) and math.isfinite(b)):
                    raise NumericalFailure(step, "match_params", a if not math.isfinite(a) else b)
                model.match_params = MatchParams(a, b)
            for head in model.heads.values():
                if not all(np.all(np.isfinite(p)) for p in head.params()):
                    raise NumericalFailure(step, "parameters", float("nan"))

            losses.append(out.value)
            for k, v in out.components.items():
                comps.setdefault(k, []).append(v)
            step += 1
        history.records.append(
            EpochRecord(
                epoch=epoch,
                learning_rate=lr_epoch,
                loss=float(np.mean(losses)),
                components={k: float(np.mean(v)) for k, v in comps.items()},
                mean_log_sigma=_mean_log_sigma(model, dataset),
            )
        )
    return model, history


def with_mode(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
