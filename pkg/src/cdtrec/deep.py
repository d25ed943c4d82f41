"""Deep variant: a rectifier MLP over field-pooled translated features.

Each feature vector is pooled into one fixed-size block per field group
(target user, active item, one group per source domain): the sum of
x_c * (v_c + v'_c) over the group's active columns.  The concatenated blocks
feed a feed-forward network with rectifier hidden layers and a scalar head;
the final score adds the global bias and linear term.  Training minimizes
the same pairwise ranking loss as the shallow model, backpropagating through
the network, the pooling, and the embedding tables jointly, with mini-batch
adaptive-moment updates.
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
    build_positive_pool,
    sample_negatives,
)
from .model import ModelParams, TrainConfig, TrainStats, _pair_terms, _positive_list


@dataclass
class MlpParams:
    """Weight matrices and bias vectors: hidden layers plus a scalar head."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def initialize(
        cls, input_dim: int, hidden_width: int, depth: int, rng: np.random.Generator
    ) -> "MlpParams":
        """Fan-in-scaled normal weights (rectifier gain), zero biases."""
        dims = [input_dim] + [hidden_width] * depth + [1]
        weights = []
        biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights=weights, biases=biases)

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[0])

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def validate_finite(self) -> None:
        for arr in (*self.weights, *self.biases):
            if not np.all(np.isfinite(arr)):
                raise DivergenceError("network parameters contain non-finite values")


@dataclass(frozen=True)
class DeepConfig:
    """Mini-batch training settings for the deep variant."""

    batch_size: int = 512
    learn_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    hidden_width: int = 64
    depth: int = 5
    epochs: int = 10
    seed: int = 0
    include_pairwise_interaction: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.depth < 1:
            raise ConfigError("need at least one hidden layer")
        if self.hidden_width < 1:
            raise ConfigError("hidden_width must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("moment decay rates must lie in [0, 1)")


def n_field_groups(index: FeatureIndex) -> int:
    """User group, active-item group, and one group per source domain."""
    return 2 + len(index.source_dims)


def _column_groups(columns: np.ndarray, index: FeatureIndex) -> np.ndarray:
    """Physical block id per column: 0 user, 1 target item, 2+p source p."""
    boundaries = [0, index.n_target_users, index.n_target_users + index.n_target_items]
    for p in range(len(index.source_dims) - 1):
        boundaries.append(index.source_offset(p + 1))
    return np.searchsorted(np.asarray(boundaries), columns, side="right") - 1


def _field_groups(x: FeatureVector, index: FeatureIndex) -> np.ndarray:
    """Group id per active column; the designated item column is group 1."""
    groups = _column_groups(x.columns, index)
    groups[x.columns == x.item_column] = 1
    return groups


def pool_fields(params: ModelParams, x: FeatureVector, index: FeatureIndex) -> np.ndarray:
    """Per-group sums of x_c * (v_c + v'_c), concatenated; empty groups zero."""
    q = params.q
    pooled = np.zeros((n_field_groups(index), q))
    if x.columns.size:
        translated = params.embeddings[x.columns] + params.translations[x.columns]
        np.add.at(pooled, _field_groups(x, index), x.values[:, None] * translated)
    return pooled.ravel()


def mlp_forward(mlp: MlpParams, pooled: np.ndarray) -> float:
    """Rectifier hidden layers, then the linear scalar head."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.shape != (mlp.input_dim,):
        raise ValidationError(
            f"input of length {pooled.shape} does not match network input "
            f"dimension {mlp.input_dim}"
        )
    h = pooled
    for w, b in zip(mlp.weights[:-1], mlp.biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
    return float((h @ mlp.weights[-1] + mlp.biases[-1])[0])


def deep_score(
    params: ModelParams,
    mlp: MlpParams,
    x: FeatureVector,
    index: FeatureIndex,
    include_pairwise: bool = False,
    sign: int = -1,
) -> float:
    """Bias and linear term plus the network output on the pooled features.

    ``include_pairwise`` adds the shallow model's distance interaction term
    back on top, for comparison runs.
    """
    value = params.w0 + float(params.w[x.columns] @ x.values)
    value += mlp_forward(mlp, pool_fields(params, x, index))
    if include_pairwise and x.columns.size >= 2:
        pair_sum, _, _ = _pair_terms(params, x.columns, x.values, "translated_distance")
        value += sign * pair_sum
    return value


def _forward_batch(mlp: MlpParams, z: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    activations = [z]
    h = z
    for w, b in zip(mlp.weights[:-1], mlp.biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
        activations.append(h)
    out = (h @ mlp.weights[-1] + mlp.biases[-1]).ravel()
    return out, activations


def _backward_batch(
    mlp: MlpParams, activations: list[np.ndarray], d_out: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Gradients for every layer and for the pooled input, given d(loss)/d(out)."""
    grad_w = [np.zeros_like(w) for w in mlp.weights]
    grad_b = [np.zeros_like(b) for b in mlp.biases]
    delta = d_out[:, None]
    grad_w[-1] = activations[-1].T @ delta
    grad_b[-1] = delta.sum(axis=0)
    dh = delta @ mlp.weights[-1].T
    for layer in range(mlp.depth - 1, -1, -1):
        dh = dh * (activations[layer + 1] > 0)
        grad_w[layer] = activations[layer].T @ dh
        grad_b[layer] = dh.sum(axis=0)
        dh = dh @ mlp.weights[layer].T
    return grad_w, grad_b, dh


@dataclass
class _Batch:
    """Flattened sparse layout of one side (positive or negative) of a batch."""

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    groups: np.ndarray
    size: int
    vectors: list[FeatureVector]


def _assemble(vectors: list[FeatureVector], index: FeatureIndex) -> _Batch:
    rows = np.concatenate(
        [np.full(v.columns.size, b, dtype=np.int64) for b, v in enumerate(vectors)]
    )
    cols = np.concatenate([v.columns for v in vectors])
    vals = np.concatenate([v.values for v in vectors])
    groups = np.concatenate([_field_groups(v, index) for v in vectors])
    return _Batch(rows, cols, vals, groups, len(vectors), vectors)


class _DeepGradients:
    """Accumulated per-batch gradients for every parameter tensor."""

    def __init__(self, params: ModelParams, mlp: MlpParams) -> None:
        self.w0 = 0.0
        self.w = np.zeros_like(params.w)
        self.embeddings = np.zeros_like(params.embeddings)
        self.translations = np.zeros_like(params.translations)
        self.mlp_weights = [np.zeros_like(w) for w in mlp.weights]
        self.mlp_biases = [np.zeros_like(b) for b in mlp.biases]


def deep_pair_gradients(
    params: ModelParams,
    mlp: MlpParams,
    pairs: list[tuple[FeatureVector, FeatureVector]],
    index: FeatureIndex,
    include_pairwise: bool = False,
    sign: int = -1,
) -> tuple[float, _DeepGradients]:
    """Mean ranking loss over the pairs and its full gradient.

    This is the training forward/backward pass; it is also the hook the test
    suite uses to compare backpropagation against finite differences.
    """
    q = params.q
    n_groups = n_field_groups(index)
    sides = []
    for which in (0, 1):
        batch = _assemble([pair[which] for pair in pairs], index)
        pooled = np.zeros((batch.size, n_groups, q))
        translated = params.embeddings[batch.cols] + params.translations[batch.cols]
        np.add.at(pooled, (batch.rows, batch.groups), batch.vals[:, None] * translated)
        scores, activations = _forward_batch(mlp, pooled.reshape(batch.size, -1))
        scores = scores + params.w0 + np.bincount(
            batch.rows, weights=params.w[batch.cols] * batch.vals, minlength=batch.size
        )
        sides.append((batch, pooled, scores, activations))

    (batch_p, _, scores_p, acts_p), (batch_n, _, scores_n, acts_n) = sides
    pair_grads = []
    if include_pairwise:
        for which, batch in ((0, batch_p), (1, batch_n)):
            side_scores = scores_p if which == 0 else scores_n
            side_pairs = []
            for b, v in enumerate(batch.vectors):
                if v.columns.size >= 2:
                    pair_sum, ga, gb = _pair_terms(
                        params, v.columns, v.values, "translated_distance"
                    )
                    side_scores[b] += sign * pair_sum
                    side_pairs.append((ga, gb))
                else:
                    side_pairs.append(None)
            pair_grads.append(side_pairs)

    diff = scores_p - scores_n
    losses = np.logaddexp(0.0, -diff)
    loss = float(losses.mean())
    if not np.isfinite(loss):
        raise DivergenceError("ranking loss became non-finite during training")
    slope = expit(-diff) / len(pairs)  # d(mean loss)/d(score_pos) = -slope

    grads = _DeepGradients(params, mlp)
    for direction, batch, acts in ((-1.0, batch_p, acts_p), (1.0, batch_n, acts_n)):
        d_out = direction * slope
        grad_w_layers, grad_b_layers, d_pool = _backward_batch(mlp, acts, d_out)
        for gw, acc in zip(grad_w_layers, grads.mlp_weights):
            acc += gw
        for gb, acc in zip(grad_b_layers, grads.mlp_biases):
            acc += gb
        grads.w0 += float(d_out.sum())
        np.add.at(grads.w, batch.cols, d_out[batch.rows] * batch.vals)
        # d_pool already carries the loss slope; entry (b, c) contributed
        # vals * (v_c + v'_c) to its group block.
        d_pool = d_pool.reshape(batch.size, n_groups, q)
        d_translated = d_pool[batch.rows, batch.groups] * batch.vals[:, None]
        np.add.at(grads.embeddings, batch.cols, d_translated)
        np.add.at(grads.translations, batch.cols, d_translated)
        if include_pairwise:
            side_pairs = pair_grads[0 if direction < 0 else 1]
            for b, v in enumerate(batch.vectors):
                if side_pairs[b] is None:
                    continue
                ga, gb = side_pairs[b]
                coef = direction * slope[b] * sign
                np.add.at(grads.embeddings, v.columns, coef * (ga + gb))
                np.add.at(grads.translations, v.columns, coef * ga)
    return loss, grads


class _Adam:
    def __init__(self, shape_like: np.ndarray | float, config: DeepConfig) -> None:
        if isinstance(shape_like, np.ndarray):
            self.m = np.zeros_like(shape_like)
            self.v = np.zeros_like(shape_like)
        else:
            self.m = 0.0
            self.v = 0.0
        self.config = config

    def update(self, grad, t: int):
        c = self.config
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        m_hat = self.m / (1 - c.beta1**t)
        v_hat = self.v / (1 - c.beta2**t)
        return c.learn_rate * m_hat / (np.sqrt(v_hat) + c.epsilon)


def train_deep(
    bundle: DatasetBundle,
    weights: list[SourceWeights] | tuple[SourceWeights, ...],
    train_split: RatingMatrix,
    config: DeepConfig,
    train_config: TrainConfig,
    builder: FeatureBuilder | None = None,
) -> tuple[ModelParams, MlpParams, TrainStats]:
    """Joint mini-batch training of embeddings, translations, and the network.

    Positives and negative draws follow the shallow trainer; pairs are
    processed in mini-batches of ``batch_size`` with adaptive-moment updates.
    L2 regularization (train_config.reg_w / reg_v) is added to the dense
    gradients of the linear weights, the embedding tables, and the network
    weight matrices each step.
    """
    if builder is None:
        builder = FeatureBuilder(bundle, weights)
    index = builder.index
    pool = build_positive_pool(bundle, train_split)
    positives = _positive_list(
        pool.target_items, pool.source_items, train_config.source_positive_ranking
    )
    rng = np.random.default_rng(config.seed)
    params = ModelParams.initialize(index.total_dim, train_config.q, rng)
    mlp = MlpParams.initialize(
        n_field_groups(index) * train_config.q, config.hidden_width, config.depth, rng
    )

    opt = {
        "w0": _Adam(0.0, config),
        "w": _Adam(params.w, config),
        "embeddings": _Adam(params.embeddings, config),
        "translations": _Adam(params.translations, config),
    }
    opt_w = [_Adam(w, config) for w in mlp.weights]
    opt_b = [_Adam(b, config) for b in mlp.biases]

    losses: list[float] = []
    total_pairs = 0
    t = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(positives))
        pending: list[tuple[FeatureVector, FeatureVector]] = []
        epoch_loss = 0.0
        epoch_pairs = 0

        def flush() -> None:
            nonlocal t, epoch_loss, epoch_pairs
            if not pending:
                return
            loss, grads = deep_pair_gradients(
                params,
                mlp,
                pending,
                index,
                include_pairwise=config.include_pairwise_interaction,
                sign=train_config.interaction_sign,
            )
            grads.w += train_config.reg_w * params.w
            grads.embeddings += train_config.reg_v * params.embeddings
            grads.translations += train_config.reg_v * params.translations
            for gw, w in zip(grads.mlp_weights, mlp.weights):
                gw += train_config.reg_v * w
            t += 1
            params.w0 -= opt["w0"].update(grads.w0 + train_config.reg_w * params.w0, t)
            params.w -= opt["w"].update(grads.w, t)
            params.embeddings -= opt["embeddings"].update(grads.embeddings, t)
            params.translations -= opt["translations"].update(grads.translations, t)
            for w, o, g in zip(mlp.weights, opt_w, grads.mlp_weights):
                w -= o.update(g, t)
            for b, o, g in zip(mlp.biases, opt_b, grads.mlp_biases):
                b -= o.update(g, t)
            epoch_loss += loss * len(pending)
            epoch_pairs += len(pending)
            pending.clear()

        for pos_idx in order.tolist():
            u, domain, item = positives[pos_idx]
            if domain == 0:
                x_pos = builder.vector(u, item)
            else:
                x_pos = builder.source_positive_vector(u, domain - 1, item)
            negatives = sample_negatives(
                u, train_config.negatives_per_positive, pool, bundle.target, rng
            )
            for j in negatives.tolist():
                pending.append((x_pos, builder.vector(u, j)))
                if len(pending) >= config.batch_size:
                    flush()
        flush()
        losses.append(epoch_loss / max(epoch_pairs, 1))
        total_pairs += epoch_pairs
    params.validate_finite()
    mlp.validate_finite()
    return params, mlp, TrainStats(epoch_mean_loss=tuple(losses), samples_processed=total_pairs)


def deep_score_candidates(
    params: ModelParams,
    mlp: MlpParams,
    u: int,
    items: np.ndarray,
    builder: FeatureBuilder,
    include_pairwise: bool = False,
    sign: int = -1,
) -> np.ndarray:
    """Deep scores of many target items for one user in one network pass.

    The user and source-context pooled blocks are shared across items; only
    the active-item block varies.  With ``include_pairwise`` the per-item
    interaction term forces a per-item loop, so that path is slower.
    """
    index = builder.index
    items = np.asarray(items, dtype=np.int64)
    if include_pairwise:
        return np.array(
            [
                deep_score(params, mlp, builder.vector(u, int(i)), index, True, sign)
                for i in items
            ]
        )
    q = params.q
    base = np.zeros((n_field_groups(index), q))
    u_col = index.user_column(u)
    base[0] = params.embeddings[u_col] + params.translations[u_col]
    ctx_cols, ctx_vals = builder.context(u)
    if ctx_cols.size:
        translated = params.embeddings[ctx_cols] + params.translations[ctx_cols]
        np.add.at(base, _column_groups(ctx_cols, index), ctx_vals[:, None] * translated)
    item_cols = index.item_offset + items
    pooled = np.tile(base.ravel(), (items.size, 1))
    pooled[:, q : 2 * q] = params.embeddings[item_cols] + params.translations[item_cols]
    scores, _ = _forward_batch(mlp, pooled)
    linear = params.w0 + params.w[u_col] + float(ctx_vals @ params.w[ctx_cols])
    return scores + linear + params.w[item_cols]


def save_deep_checkpoint(
    path: str | Path, params: ModelParams, mlp: MlpParams, index: FeatureIndex
) -> None:
    """Shallow checkpoint fields plus per-layer shapes and weights."""
    layers = {}
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        layers[f"layer_{i}_w"] = w
        layers[f"layer_{i}_b"] = b
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
        n_layers=np.int64(len(mlp.weights)),
        **layers,
    )


def load_deep_checkpoint(path: str | Path) -> tuple[ModelParams, MlpParams, FeatureIndex]:
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
        n_layers = int(data["n_layers"])
        mlp = MlpParams(
            weights=[data[f"layer_{i}_w"].copy() for i in range(n_layers)],
            biases=[data[f"layer_{i}_b"].copy() for i in range(n_layers)],
        )
    return params, mlp, index
