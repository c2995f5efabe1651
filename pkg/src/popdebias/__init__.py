"""Popularity debiasing for learning-to-rank matrix factorization.

Train point-wise or pair-wise factor models with popularity-balanced
negative sampling and a loss/popularity correlation penalty, then measure
popularity bias (item statistical parity, item equal opportunity) next to
accuracy, novelty and coverage.
"""

from .data import (
    Bucket,
    Interaction,
    InteractionDataset,
    PopularityStats,
    SplitDataset,
    build_balanced_test,
    compute_popularity,
    generate_synthetic,
    load_interactions,
    temporal_split,
)
from .errors import ConfigError, DataError, NumericalError, PopDebiasError
from .metrics import (
    MetricReport,
    coverage,
    evaluate,
    exposure_probability,
    gini,
    ieo,
    isp,
    novelty,
    pairwise_accuracy_buckets,
    ranking_accuracy,
    relevance_distribution_sample,
    true_positive_rate,
)
from .model import (
    BatchResult,
    FactorModel,
    RecommendationRun,
    TrainConfig,
    baseline_mostpop,
    baseline_random,
    correlation_penalty,
    init_model,
    pairwise_loss,
    pointwise_loss,
    recommend_topk,
    score,
    train,
)
from .rerank import binary_xquad, pop_weighted_rerank, smooth_xquad
from .sampling import sample_balanced_popularity, sample_standard

__version__ = "0.1.0"
