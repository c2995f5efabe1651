"""Dot-product factor model, point-wise and pair-wise losses, the
loss/popularity correlation penalty, and the SGD trainer that minimizes

    (1 - lam) * accuracy_loss + lam * |pearson(per_example_loss, observed_item_pop)|

per batch. Also top-k retrieval and the Random / MostPop baselines.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import PopularityStats, SplitDataset
from .errors import ConfigError, DataError, NumericalError
from .sampling import PairwiseExamples, PointwiseExamples, sample_balanced_popularity, sample_standard
from .seeds import rng_stream

log = logging.getLogger(__name__)

EPS = 1e-7
SAMPLERS = ("standard", "balanced")
OBJECTIVES = ("pointwise", "pairwise")


@dataclass(eq=False)
class FactorModel:
    W: np.ndarray
    X: np.ndarray

    @property
    def n_users(self) -> int:
        return self.W.shape[0]

    @property
    def n_items(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "FactorModel":
        return FactorModel(self.W.copy(), self.X.copy())

    def score(self, u: int, i: int) -> float:
        return score(self, u, i)

    def user_scores(self, users) -> np.ndarray:
        """Score matrix ``(len(users), n_items)``."""
        return self.W[users] @ self.X.T


def init_model(n_users: int, n_items: int, dim: int, seed=0) -> FactorModel:
    """Uniform [0, 1) initialization of both factor matrices."""
    if min(n_users, n_items, dim) <= 0:
        raise ConfigError("model dimensions must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    W = rng.random((n_users, dim))
    X = rng.random((n_items, dim))
    return FactorModel(W, X)


def score(model: FactorModel, u: int, i: int) -> float:
    if not (0 <= u < model.n_users and 0 <= i < model.n_items):
        raise IndexError(f"(user {u}, item {i}) outside a {model.n_users}x{model.n_items} model")
    return float(model.W[u] @ model.X[i])


@dataclass
class TrainConfig:
    dim: int = 64
    learning_rate: float = 0.05
    l2: float = 0.001
    lam: float = 0.2
    t: int = 4
    batch_size: int = 256
    epochs: int = 30
    seed: int = 0
    sampler: str = "standard"
    objective: str = "pairwise"

    def validate(self) -> None:
        if not 0 <= self.lam <= 1:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.t < 1 or (self.sampler == "balanced" and self.t % 2):
            raise ConfigError("t must be >= 1, and even for the balanced sampler")
        if self.batch_size < 1 or (self.lam > 0 and self.batch_size < 2):
            raise ConfigError("batch_size must be >= 2 when lambda > 0")
        if self.dim < 1 or self.epochs < 0 or self.learning_rate <= 0 or self.l2 < 0:
            raise ConfigError("dim, epochs, learning_rate and l2 out of range")

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class BatchResult:
    per_example_loss: np.ndarray
    per_example_pop: np.ndarray
    accuracy_loss: float
    penalty: float
    objective: float


@dataclass
class Gradients:
    """Row gradients; row indices may repeat and are summed on apply."""

    user_rows: np.ndarray
    user_grads: np.ndarray
    item_rows: np.ndarray
    item_grads: np.ndarray

    def dense(self, model: FactorModel) -> tuple[np.ndarray, np.ndarray]:
        gW = np.zeros_like(model.W)
        gX = np.zeros_like(model.X)
        np.add.at(gW, self.user_rows, self.user_grads)
        np.add.at(gX, self.item_rows, self.item_grads)
        return gW, gX

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.user_grads).all() and np.isfinite(self.item_grads).all())


def _pearson_parts(a: np.ndarray, b: np.ndarray):
    """Signed Pearson r with centered vectors and norms; None on zero variance."""
    if len(a) < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return None
    ac = a - a.mean()
    bc = b - b.mean()
    na = np.sqrt(ac @ ac)
    nb = np.sqrt(bc @ bc)
    if na == 0 or nb == 0:
        return None
    r = float(np.clip((ac @ bc) / (na * nb), -1.0, 1.0))
    return r, ac, bc, na, nb


def pearson(a, b) -> float:
    """Pearson correlation, 0 when either side has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    parts = _pearson_parts(a, b)
    return 0.0 if parts is None else parts[0]


def correlation_penalty(a1, a2) -> float:
    """``|pearson(a1, a2)|``; 0 when either vector is constant."""
    a1 = np.asarray(a1, dtype=np.float64)
    a2 = np.asarray(a2, dtype=np.float64)
    if a1.shape != a2.shape:
        raise ValueError(f"length mismatch: {a1.shape} vs {a2.shape}")
    if len(a1) < 2:
        raise ValueError("correlation needs at least two points")
    return abs(pearson(a1, a2))


def _penalty_and_grad(a1: np.ndarray, a2: np.ndarray) -> tuple[float, np.ndarray]:
    """``|r|`` and its gradient w.r.t. ``a1`` (``a2`` is constant).

    dr/da = bc / (|ac| |bc|) - r * ac / |ac|^2, and d|r| = sign(r) dr with
    sign(0) = 0.
    """
    parts = _pearson_parts(a1, a2)
    if parts is None:
        return 0.0, np.zeros_like(a1)
    r, ac, bc, na, nb = parts
    dr = bc / (na * nb) - r * ac / (na * na)
    return abs(r), np.sign(r) * dr


def _pointwise_terms(batch: PointwiseExamples, model: FactorModel):
    Wu = model.W[batch.users]
    Xi = model.X[batch.items]
    s = np.einsum("bd,bd->b", Wu, Xi)
    p = np.clip(expit(s), EPS, 1 - EPS)
    y = batch.labels
    loss = -y * np.log(p) - (1 - y) * np.log1p(-p)
    # derivative of the unclamped cross-entropy; the clamp guards the value only
    dloss = expit(s) - y
    sq = (Wu * Wu).sum(1) + (Xi * Xi).sum(1)
    return loss, dloss, sq, Wu, Xi


def _pairwise_terms(batch: PairwiseExamples, model: FactorModel):
    Wu = model.W[batch.users]
    Xi = model.X[batch.pos_items]
    Xj = model.X[batch.neg_items]
    x = np.einsum("bd,bd->b", Wu, Xi - Xj)
    p = np.clip(expit(x), EPS, 1 - EPS)
    loss = -np.log(p)
    dloss = -expit(-x)
    sq = (Wu * Wu).sum(1) + (Xi * Xi).sum(1) + (Xj * Xj).sum(1)
    return loss, dloss, sq, Wu, Xi, Xj


def _result(loss, pop, sq, l2, lam, use_penalty) -> tuple[BatchResult, np.ndarray]:
    """Assemble the batch objective; also returns d(objective)/d(loss_b)
    (without the L2 part)."""
    b = len(loss)
    acc = float(loss.mean() + l2 * sq.mean())
    coef = np.full(b, (1 - lam) / b)
    penalty = 0.0
    if use_penalty and b >= 2:
        penalty, dpen = _penalty_and_grad(loss, pop)
        coef = coef + lam * dpen
    obj = (1 - lam) * acc + lam * penalty
    return BatchResult(loss, pop, acc, penalty, obj), coef


def pointwise_loss(batch: PointwiseExamples, model: FactorModel, l2: float = 0.0, lam: float = 0.0) -> BatchResult:
    """Binary cross-entropy of sigmoid(score) against the label per example;
    L2 over the rows each example touches is added to the batch mean."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    loss, _, sq, *_ = _pointwise_terms(batch, model)
    return _result(loss, batch.item_pop, sq, l2, lam, True)[0]


def pairwise_loss(batch: PairwiseExamples, model: FactorModel, l2: float = 0.0, lam: float = 0.0) -> BatchResult:
    """``-ln sigmoid(score(u, i) - score(u, j))`` per triplet; L2 as in
    `pointwise_loss`."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    loss, _, sq, *_ = _pairwise_terms(batch, model)
    return _result(loss, batch.pos_pop, sq, l2, lam, True)[0]


def batch_loss(batch, model: FactorModel, l2: float = 0.0, lam: float = 0.0) -> BatchResult:
    if isinstance(batch, PairwiseExamples):
        return pairwise_loss(batch, model, l2, lam)
    return pointwise_loss(batch, model, l2, lam)


def objective_and_gradients(batch, model: FactorModel, l2: float, lam: float) -> tuple[BatchResult, Gradients]:
    """Regularized batch objective and its gradient w.r.t. the touched rows.

    The penalty is skipped (treated as 0) when ``lam == 0`` or the batch has a
    single example.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    use_penalty = lam > 0
    reg = (1 - lam) * l2 * 2.0 / len(batch)
    if isinstance(batch, PairwiseExamples):
        loss, dloss, sq, Wu, Xi, Xj = _pairwise_terms(batch, model)
        res, coef = _result(loss, batch.pos_pop, sq, l2, lam, use_penalty)
        g = (coef * dloss)[:, None]
        grads = Gradients(
            user_rows=batch.users,
            user_grads=g * (Xi - Xj) + reg * Wu,
            item_rows=np.concatenate([batch.pos_items, batch.neg_items]),
            item_grads=np.concatenate([g * Wu + reg * Xi, -g * Wu + reg * Xj]),
        )
    else:
        loss, dloss, sq, Wu, Xi = _pointwise_terms(batch, model)
        res, coef = _result(loss, batch.item_pop, sq, l2, lam, use_penalty)
        g = (coef * dloss)[:, None]
        grads = Gradients(
            user_rows=batch.users,
            user_grads=g * Xi + reg * Wu,
            item_rows=batch.items,
            item_grads=g * Wu + reg * Xi,
        )
    return res, grads


def regularized_objective(batch, model: FactorModel, l2: float, lam: float) -> float:
    """Objective value with the same penalty rule as the trainer."""
    return objective_and_gradients(batch, model, l2, lam)[0].objective


@dataclass
class EpochTrace:
    epoch: int
    mean_loss: float
    mean_penalty: float
    mean_pop_relevance_corr: float


TRACE_HEADER = ["epoch", "mean_loss", "mean_penalty", "mean_pop_relevance_corr"]


def _pop_relevance_corr(batch, model: FactorModel) -> float | None:
    """Pearson(popularity, predicted relevance) over the batch's observed items."""
    if isinstance(batch, PairwiseExamples):
        users, items, pop = batch.users, batch.pos_items, batch.pos_pop
    else:
        pos = batch.labels == 1
        users, items, pop = batch.users[pos], batch.items[pos], batch.item_pop[pos]
    if len(users) < 2:
        return None
    rel = np.einsum("bd,bd->b", model.W[users], model.X[items])
    parts = _pearson_parts(rel, pop)
    return None if parts is None else parts[0]


def mine_examples(split: SplitDataset, stats: PopularityStats, cfg: TrainConfig, rng: np.random.Generator):
    if cfg.sampler == "balanced":
        return sample_balanced_popularity(split, stats, cfg.objective, cfg.t, rng)
    return sample_standard(split, cfg.objective, cfg.t, rng, stats=stats)


def train(
    split: SplitDataset,
    stats: PopularityStats,
    cfg: TrainConfig,
    model: FactorModel | None = None,
) -> tuple[FactorModel, list[EpochTrace]]:
    """Mini-batch SGD on the regularized objective; examples are re-mined
    every epoch. Returns the model and one `EpochTrace` per epoch."""
    cfg.validate()
    if model is None:
        model = init_model(split.n_users, split.n_items, cfg.dim, rng_stream(cfg.seed, "init"))
    sampler_rng = rng_stream(cfg.seed, "sampler")
    trace: list[EpochTrace] = []
    for epoch in range(1, cfg.epochs + 1):
        examples = mine_examples(split, stats, cfg, sampler_rng)
        losses, penalties, corrs = [], [], []
        for b, start in enumerate(range(0, len(examples), cfg.batch_size)):
            batch = examples[start : start + cfg.batch_size]
            # divergence is reported below as NumericalError, not as warnings
            with np.errstate(over="ignore", invalid="ignore"):
                res, grads = objective_and_gradients(batch, model, cfg.l2, cfg.lam)
            if not grads.is_finite() or not np.isfinite(res.objective):
                raise NumericalError(f"non-finite gradient at epoch {epoch}, batch {b}")
            corr = _pop_relevance_corr(batch, model)
            if corr is not None:
                corrs.append(corr)
            losses.append(res.accuracy_loss)
            if cfg.lam > 0 and len(batch) >= 2:
                penalties.append(res.penalty)
            np.add.at(model.W, grads.user_rows, -cfg.learning_rate * grads.user_grads)
            np.add.at(model.X, grads.item_rows, -cfg.learning_rate * grads.item_grads)
        row = EpochTrace(
            epoch=epoch,
            mean_loss=float(np.mean(losses)) if losses else 0.0,
            mean_penalty=float(np.mean(penalties)) if penalties else 0.0,
            mean_pop_relevance_corr=float(np.mean(corrs)) if corrs else 0.0,
        )
        log.info(
            "epoch %d: loss %.5f penalty %.5f pop/relevance corr %.4f",
            epoch, row.mean_loss, row.mean_penalty, row.mean_pop_relevance_corr,
        )
        trace.append(row)
    return model, trace


def write_trace(trace: list[EpochTrace], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for r in trace:
            writer.writerow([r.epoch, repr(r.mean_loss), repr(r.mean_penalty), repr(r.mean_pop_relevance_corr)])


def save_model(model: FactorModel, path: str | Path, cfg: TrainConfig | None = None) -> None:
    header = {
        "M": model.n_users,
        "N": model.n_items,
        "D": model.dim,
        "seed": None if cfg is None else cfg.seed,
        "config_hash": None if cfg is None else cfg.digest(),
    }
    with open(path, "wb") as fh:
        np.savez(fh, W=model.W, X=model.X, header=np.array(json.dumps(header, sort_keys=True)))


def load_model(path: str | Path) -> tuple[FactorModel, dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        model = FactorModel(z["W"].copy(), z["X"].copy())
    if (model.n_users, model.n_items, model.dim) != (header["M"], header["N"], header["D"]):
        raise DataError(f"checkpoint {path}: header does not match matrix shapes")
    return model, header


@dataclass(eq=False)
class RecommendationRun:
    """Per-user ranked lists. Rows are padded with -1 (item) / nan (score)
    when a user has fewer than ``k`` candidates."""

    k: int
    items: np.ndarray
    scores: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return self.items.shape[0]

    def lists(self) -> list[list[int]]:
        return [[int(i) for i in row if i >= 0] for row in self.items]

    def user_list(self, u: int) -> np.ndarray:
        row = self.items[u]
        return row[row >= 0]

    @property
    def short_users(self) -> np.ndarray:
        return np.flatnonzero((self.items < 0).any(axis=1))

    def truncate(self, k: int) -> "RecommendationRun":
        return RecommendationRun(k, self.items[:, :k].copy(), self.scores[:, :k].copy(), dict(self.provenance))


def _topk_rows(scores: np.ndarray, excluded: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k per row by descending score, ascending item index on ties;
    ``excluded`` entries never appear."""
    s = np.where(excluded, -np.inf, scores)
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(s, order, axis=1)
    invalid = excluded[np.arange(len(s))[:, None], order]
    items = np.where(invalid, -1, order)
    return items, np.where(invalid, np.nan, top)


def _train_mask(split: SplitDataset, users: np.ndarray) -> np.ndarray:
    return split.train[users].toarray().astype(bool)


def _rank_all(split: SplitDataset, k: int, score_block, block: int = 512) -> tuple[np.ndarray, np.ndarray]:
    if k < 1:
        raise ValueError("k must be >= 1")
    kk = min(k, split.n_items)
    items = np.full((split.n_users, k), -1, dtype=np.int64)
    scores = np.full((split.n_users, k), np.nan)
    for start in range(0, split.n_users, block):
        users = np.arange(start, min(start + block, split.n_users))
        it, sc = _topk_rows(score_block(users), _train_mask(split, users), kk)
        items[users, :kk] = it
        scores[users, :kk] = sc
    return items, scores


def recommend_topk(model: FactorModel, split: SplitDataset, k: int) -> RecommendationRun:
    """Rank every item for every user, excluding the user's train items."""
    if (model.n_users, model.n_items) != (split.n_users, split.n_items):
        raise DataError("model and split disagree on the index space")
    items, scores = _rank_all(split, k, model.user_scores)
    run = RecommendationRun(k, items, scores, {"source": "model"})
    if len(run.short_users):
        log.warning("%d users have fewer than %d candidate items", len(run.short_users), k)
    return run


def baseline_random(split: SplitDataset, k: int, seed=0) -> RecommendationRun:
    """``k`` distinct unobserved items per user, uniformly at random."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    items, scores = _rank_all(split, k, lambda users: rng.random((len(users), split.n_items)))
    return RecommendationRun(k, items, scores, {"source": "random"})


def baseline_mostpop(split: SplitDataset, stats: PopularityStats, k: int) -> RecommendationRun:
    """Most popular unobserved items by train count."""
    counts = stats.count.astype(np.float64)
    items, scores = _rank_all(split, k, lambda users: np.broadcast_to(counts, (len(users), len(counts))))
    return RecommendationRun(k, items, scores, {"source": "mostpop"})
