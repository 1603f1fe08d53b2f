"""Probabilistic cross-modal embeddings: Gaussian embeddings, losses, training, retrieval."""

from .gaussian import (
    GaussianEmbedding,
    MatchParams,
    Metric,
    Modality,
    SampleSet,
    closed_form_distance,
    match_probability_mc,
    sample_embeddings,
    uncertainty,
)
from .datagen import CrossModalDataset, DatasetConfig, corrupt, generate, plausible_match
from .losses import (
    PairBatch,
    kl_regularizer,
    mil_loss,
    pairwise_logits,
    soft_contrastive_loss,
    total_loss,
    triplet_hnm_loss,
    uniformity_loss,
)
from .trainer import LossKind, Mode, Model, TrainConfig, embed_dataset, encode, make_minibatch, train
from .retrieval import SimilarityKind, SimilaritySpec, retrieve
from .metrics import corruption_sweep, evaluate, pmrp, r_precision, recall_at_k, uncertainty_bins

__version__ = "0.1.0"
