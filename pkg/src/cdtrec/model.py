"""Translation-based factorization: scoring, pairwise-ranking training, top-n.

The scorer combines a global bias, per-column linear weights, and a pairwise
term over active feature pairs.  In the default variant the pair weight is
the squared Euclidean distance between the lower-indexed feature's translated
embedding (v + v') and the higher-indexed feature's embedding, multiplied by
``interaction_sign`` (default -1: closeness raises the score).  The
``inner_product`` variant swaps the distance for a dot product, which with
zero translations is the classical factorization-machine pair term.

Training minimizes the pairwise ranking loss -ln sigmoid(score_pos -
score_neg) with L2 regularization by stochastic gradient descent over
observed items, drawing uniform target negatives for each positive.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .coclustering import SourceWeights
from .data import DatasetBundle, RatingMatrix
from .errors import ConfigError, DivergenceError, ValidationError
from .features import (
    FeatureBuilder,
    FeatureIndex,
    FeatureVector,
    build_index,
    build_positive_pool,
    sample_negatives,
)

VARIANTS = ("translated_distance", "inner_product")


@dataclass
class ModelParams:
    """Learned parameters: bias, linear weights, embeddings, translations."""

    w0: float
    w: np.ndarray
    embeddings: np.ndarray
    translations: np.ndarray

    @classmethod
    def initialize(cls, n_columns: int, q: int, rng: np.random.Generator) -> "ModelParams":
        """Zero bias and linear weights; normal(0, 0.1/sqrt(q)) embeddings."""
        scale = 0.1 / np.sqrt(q)
        return cls(
            w0=0.0,
            w=np.zeros(n_columns),
            embeddings=rng.normal(0.0, scale, size=(n_columns, q)),
            translations=rng.normal(0.0, scale, size=(n_columns, q)),
        )

    @property
    def n_columns(self) -> int:
        return int(self.w.size)

    @property
    def q(self) -> int:
        return int(self.embeddings.shape[1])

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.w0, self.w.copy(), self.embeddings.copy(), self.translations.copy()
        )

    def validate_finite(self) -> None:
        if not (
            np.isfinite(self.w0)
            and np.all(np.isfinite(self.w))
            and np.all(np.isfinite(self.embeddings))
            and np.all(np.isfinite(self.translations))
        ):
            raise DivergenceError("model parameters contain non-finite values")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for pairwise-ranking SGD."""

    q: int = 10
    learn_rate: float = 0.05
    reg_w: float = 1e-5
    reg_v: float = 1e-5
    negatives_per_positive: int = 5
    epochs: int = 10
    seed: int = 0
    interaction_sign: int = -1
    variant: str = "translated_distance"
    source_positive_ranking: bool = True
    freeze_translations: bool = False

    def __post_init__(self) -> None:
        if self.q < 1:
            raise ConfigError("q must be at least 1")
        if self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive must be at least 1")
        if self.interaction_sign not in (-1, 1):
            raise ConfigError("interaction_sign must be -1 or +1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")


@dataclass(frozen=True)
class TrainStats:
    """Per-epoch mean pairwise loss and the number of update steps taken."""

    epoch_mean_loss: tuple[float, ...]
    samples_processed: int


def score(
    params: ModelParams, x: FeatureVector, sign: int = -1, variant: str = "translated_distance"
) -> float:
    """Reference scorer: explicit double loop over active feature pairs."""
    cols = x.columns
    if cols.size and cols[-1] >= params.n_columns:
        raise ValidationError("feature column out of range for the model")
    vals = x.values
    total = params.w0
    for r in range(cols.size):
        total += params.w[cols[r]] * vals[r]
    pair_sum = 0.0
    for r in range(cols.size):
        a = params.embeddings[cols[r]] + params.translations[cols[r]]
        for s in range(r + 1, cols.size):
            b = params.embeddings[cols[s]]
            if variant == "translated_distance":
                diff = a - b
                pair = float(diff @ diff)
            else:
                pair = float(a @ b)
            pair_sum += pair * vals[r] * vals[s]
    return float(total + sign * pair_sum)


def _pair_terms(
    params: ModelParams, cols: np.ndarray, vals: np.ndarray, variant: str
) -> tuple[float, np.ndarray, np.ndarray]:
    """Pair sum and its gradients w.r.t. the translated (A) and raw (B) roles.

    Uses running prefix/suffix sums over the (ascending) active columns, so
    the cost is linear in the number of active entries.  The value column,
    x*A, and x*B prefix sums share one cumulative pass.
    """
    k = cols.size
    q = params.q
    a = params.embeddings[cols] + params.translations[cols]
    b = params.embeddings[cols]
    stacked = np.empty((k, 2 * q + 1))
    stacked[:, 0] = vals
    np.multiply(vals[:, None], a, out=stacked[:, 1 : q + 1])
    np.multiply(vals[:, None], b, out=stacked[:, q + 1 :])
    xa = stacked[:, 1 : q + 1]
    xb = stacked[:, q + 1 :]
    cum = np.cumsum(stacked, axis=0)
    sum_x_gt = cum[-1, 0] - cum[:, 0]  # sum of values after r
    sum_x_lt = cum[:, 0] - vals  # sum of values before s
    sum_xa_lt = cum[:, 1 : q + 1] - xa
    sum_xb_gt = cum[-1:, q + 1 :] - cum[:, q + 1 :]
    if variant == "translated_distance":
        pair_sum = float(
            np.dot(vals * np.einsum("rq,rq->r", a, a), sum_x_gt)
            + np.dot(vals * np.einsum("rq,rq->r", b, b), sum_x_lt)
            - 2.0 * np.einsum("rq,rq->", xa, sum_xb_gt)
        )
        grad_a = 2.0 * vals[:, None] * (a * sum_x_gt[:, None] - sum_xb_gt)
        grad_b = 2.0 * vals[:, None] * (b * sum_x_lt[:, None] - sum_xa_lt)
    else:
        pair_sum = float(np.einsum("rq,rq->", xa, sum_xb_gt))
        grad_a = vals[:, None] * sum_xb_gt
        grad_b = vals[:, None] * sum_xa_lt
    return pair_sum, grad_a, grad_b


def _score_arrays(
    params: ModelParams, cols: np.ndarray, vals: np.ndarray, sign: int, variant: str
) -> float:
    linear = params.w0 + float(params.w[cols] @ vals)
    if cols.size < 2:
        return linear
    pair_sum, _, _ = _pair_terms(params, cols, vals, variant)
    return linear + sign * pair_sum


def score_fast(
    params: ModelParams, x: FeatureVector, sign: int = -1, variant: str = "translated_distance"
) -> float:
    """Same contract as :func:`score`, linear in the active entry count."""
    if x.columns.size and x.columns[-1] >= params.n_columns:
        raise ValidationError("feature column out of range for the model")
    return _score_arrays(params, x.columns, x.values, sign, variant)


def bpr_pair_loss(s_pos: float, s_neg: float) -> float:
    """-ln sigmoid(s_pos - s_neg), computed as a stable softplus."""
    return float(np.logaddexp(0.0, -(s_pos - s_neg)))


def _score_and_grads(
    params: ModelParams, x: FeatureVector, sign: int, variant: str
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Score plus d(score)/d(w rows), d/d(embedding rows), d/d(translation rows)."""
    cols, vals = x.columns, x.values
    value = params.w0 + float(params.w[cols] @ vals)
    if cols.size < 2:
        zeros = np.zeros((cols.size, params.q))
        return value, cols, vals.copy(), zeros, zeros.copy()
    pair_sum, grad_a, grad_b = _pair_terms(params, cols, vals, variant)
    value += sign * pair_sum
    grad_emb = sign * (grad_a + grad_b)
    grad_tr = sign * grad_a
    return value, cols, vals.copy(), grad_emb, grad_tr


def train_step(
    params: ModelParams, x_pos: FeatureVector, x_neg: FeatureVector, config: TrainConfig
) -> float:
    """One SGD update on the ranking loss for a (positive, negative) pair.

    Gradients of the pairwise term follow the chain rule through the loss
    slope sigmoid(score_neg - score_pos); L2 regularization is applied once
    per touched parameter.  Updates mutate ``params`` in place.
    """
    if x_pos.user != x_neg.user:
        raise ValidationError("positive and negative vectors must share the user")
    y_pos, cols_p, xw_p, ge_p, gt_p = _score_and_grads(
        params, x_pos, config.interaction_sign, config.variant
    )
    y_neg, cols_n, xw_n, ge_n, gt_n = _score_and_grads(
        params, x_neg, config.interaction_sign, config.variant
    )
    diff = y_pos - y_neg
    loss = float(np.logaddexp(0.0, -diff))
    if not np.isfinite(loss):
        raise DivergenceError("ranking loss became non-finite during training")
    slope = float(expit(-diff))  # d(loss)/d(y_pos) = -slope, d/d(y_neg) = +slope

    # Sum the two vectors' contributions per unique column before applying,
    # so that exactly opposite contributions cancel exactly.
    q = params.q
    cols = np.concatenate([cols_p, cols_n])
    stacked = np.empty((cols.size, 1 + 2 * q))
    kp = cols_p.size
    stacked[:kp, 0] = -slope * xw_p
    stacked[kp:, 0] = slope * xw_n
    stacked[:kp, 1 : q + 1] = -slope * ge_p
    stacked[kp:, 1 : q + 1] = slope * ge_n
    stacked[:kp, q + 1 :] = -slope * gt_p
    stacked[kp:, q + 1 :] = slope * gt_n
    order = np.argsort(cols, kind="stable")
    sorted_cols = cols[order]
    starts = np.flatnonzero(np.diff(sorted_cols)) + 1
    starts = np.concatenate(([0], starts))
    uniq = sorted_cols[starts]
    summed = np.add.reduceat(stacked[order], starts, axis=0)

    lr = config.learn_rate
    params.w0 -= lr * config.reg_w * params.w0
    params.w[uniq] -= lr * (summed[:, 0] + config.reg_w * params.w[uniq])
    params.embeddings[uniq] -= lr * (
        summed[:, 1 : q + 1] + config.reg_v * params.embeddings[uniq]
    )
    if not config.freeze_translations:
        params.translations[uniq] -= lr * (
            summed[:, q + 1 :] + config.reg_v * params.translations[uniq]
        )
    return loss


def _positive_list(
    pool_target: dict[int, np.ndarray],
    pool_source: tuple[dict[int, np.ndarray], ...],
    include_source: bool,
) -> list[tuple[int, int, int]]:
    """(user, domain, item) positives; domain 0 is the target."""
    out: list[tuple[int, int, int]] = []
    for u in sorted(pool_target):
        for i in pool_target[u].tolist():
            out.append((u, 0, i))
    if include_source:
        for p, per_user in enumerate(pool_source, start=1):
            for u in sorted(per_user):
                for h in per_user[u].tolist():
                    out.append((u, p, h))
    return out


def train(
    bundle: DatasetBundle,
    weights: list[SourceWeights] | tuple[SourceWeights, ...],
    train_split: RatingMatrix,
    config: TrainConfig,
    builder: FeatureBuilder | None = None,
) -> tuple[ModelParams, TrainStats]:
    """Fit the model by epoch-shuffled SGD with uniform negative sampling.

    Every epoch walks all positives (target train items, plus aligned source
    items when ``source_positive_ranking`` is on) in a seeded shuffled order
    and applies one :func:`train_step` per drawn negative.
    """
    if builder is None:
        builder = FeatureBuilder(bundle, weights)
    index = builder.index
    pool = build_positive_pool(bundle, train_split)
    positives = _positive_list(
        pool.target_items, pool.source_items, config.source_positive_ranking
    )
    rng = np.random.default_rng(config.seed)
    params = ModelParams.initialize(index.total_dim, config.q, rng)
    if config.freeze_translations:
        params.translations[:] = 0.0

    losses: list[float] = []
    steps = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(positives))
        epoch_loss = 0.0
        epoch_steps = 0
        for pos_idx in order.tolist():
            u, domain, item = positives[pos_idx]
            if domain == 0:
                x_pos = builder.vector(u, item)
            else:
                x_pos = builder.source_positive_vector(u, domain - 1, item)
            negatives = sample_negatives(
                u, config.negatives_per_positive, pool, bundle.target, rng
            )
            for j in negatives.tolist():
                x_neg = builder.vector(u, j)
                epoch_loss += train_step(params, x_pos, x_neg, config)
                epoch_steps += 1
        losses.append(epoch_loss / max(epoch_steps, 1))
        steps += epoch_steps
    params.validate_finite()
    return params, TrainStats(epoch_mean_loss=tuple(losses), samples_processed=steps)


def score_candidates(
    params: ModelParams,
    u: int,
    items: np.ndarray,
    builder: FeatureBuilder,
    sign: int = -1,
    variant: str = "translated_distance",
) -> np.ndarray:
    """Scores of many target items for one user in a single pass.

    Algebraically identical to calling :func:`score_fast` on each item's
    feature vector: the shared user-plus-context part is scored once and the
    per-item columns contribute closed-form deltas.
    """
    items = np.asarray(items, dtype=np.int64)
    u_col = builder.index.user_column(u)
    ctx_cols, ctx_vals = builder.context(u)
    base_cols = np.concatenate(([u_col], ctx_cols))
    base_vals = np.concatenate(([1.0], ctx_vals))
    base = _score_arrays(params, base_cols, base_vals, sign, variant)

    item_cols = builder.index.item_offset + items
    a_user = params.embeddings[u_col] + params.translations[u_col]
    a_items = params.embeddings[item_cols] + params.translations[item_cols]
    b_items = params.embeddings[item_cols]
    b_ctx = params.embeddings[ctx_cols]
    sum_x = float(ctx_vals.sum())
    sum_xb = ctx_vals @ b_ctx if ctx_cols.size else np.zeros(params.q)
    if variant == "translated_distance":
        user_pair = (
            float(a_user @ a_user) + (b_items * b_items).sum(axis=1) - 2.0 * b_items @ a_user
        )
        ctx_pair = (
            sum_x * (a_items * a_items).sum(axis=1)
            + float(ctx_vals @ (b_ctx * b_ctx).sum(axis=1) if ctx_cols.size else 0.0)
            - 2.0 * a_items @ sum_xb
        )
    else:
        user_pair = b_items @ a_user
        ctx_pair = a_items @ sum_xb
    return base + params.w[item_cols] + sign * (user_pair + ctx_pair)


def recommend_topn(
    params: ModelParams,
    u: int,
    n: int,
    exclusions: set[int] | np.ndarray,
    builder: FeatureBuilder,
    sign: int = -1,
    variant: str = "translated_distance",
) -> np.ndarray:
    """Top-n non-excluded target items by score, ties broken by item index."""
    excluded = np.asarray(sorted(exclusions), dtype=np.int64)
    candidates = np.setdiff1d(
        np.arange(builder.index.n_target_items, dtype=np.int64), excluded
    )
    if candidates.size == 0:
        return candidates
    scores = score_candidates(params, u, candidates, builder, sign, variant)
    order = np.lexsort((candidates, -scores))
    return candidates[order[: min(n, candidates.size)]]


def save_checkpoint(path: str | Path, params: ModelParams, index: FeatureIndex) -> None:
    """Write parameters plus the column layout; arrays round-trip bit-exactly."""
    np.savez(
        path,
        w0=np.float64(params.w0),
        w=params.w,
        embeddings=params.embeddings,
        translations=params.translations,
        n_target_users=np.int64(index.n_target_users),
        n_target_items=np.int64(index.n_target_items),
        source_dims=np.asarray(index.source_dims, dtype=np.int64),
        source_ids=np.asarray(index.source_ids, dtype="U"),
    )


def load_checkpoint(path: str | Path) -> tuple[ModelParams, FeatureIndex]:
    with np.load(path, allow_pickle=False) as data:
        params = ModelParams(
            w0=float(data["w0"]),
            w=data["w"].copy(),
            embeddings=data["embeddings"].copy(),
            translations=data["translations"].copy(),
        )
        index = FeatureIndex(
            n_target_users=int(data["n_target_users"]),
            n_target_items=int(data["n_target_items"]),
            source_dims=tuple(int(v) for v in data["source_dims"]),
            source_ids=tuple(str(v) for v in data["source_ids"]),
        )
    return params, index
