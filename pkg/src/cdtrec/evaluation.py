"""Ranking metrics and the end-to-end experiment protocol.

One experiment run splits the target domain, clusters users, solves the
cross-domain weights, trains the selected model, and scores every test user
with at least one relevant item over the full candidate set (all target
items minus the user's train items).  Reports average recall@n and NDCG@n
over the runs and serialize to JSON and TSV.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from .coclustering import (
    ClusterAssignment,
    CoclusterConfig,
    SourceWeights,
    build_user_similarity,
    compute_q,
    solve_cocluster,
    spectral_cluster,
)
from .data import (
    DatasetBundle,
    RatingMatrix,
    RelevanceSets,
    SplitSpec,
    label_relevance,
    split_target,
)
from .deep import DeepConfig, MlpParams, deep_score_candidates, train_deep
from .errors import ConfigError, ValidationError
from .features import FeatureBuilder
from .model import ModelParams, TrainConfig, score_candidates, train

MODEL_KINDS = ("cdt", "deepcdt", "fm")


def recall_at_n(ranked: list[int] | np.ndarray, relevant: set[int] | frozenset[int], n: int) -> float:
    """Fraction of the relevant items present in the top n of the ranking.

    Returns NaN for an empty relevant set; callers skip such users.
    """
    ranked = list(ranked)
    if len(set(ranked)) != len(ranked):
        raise ValidationError("ranked list contains duplicates")
    if not relevant:
        return math.nan
    hits = sum(1 for item in ranked[:n] if item in relevant)
    return hits / len(relevant)


def ndcg_at_n(ranked: list[int] | np.ndarray, relevant: set[int] | frozenset[int], n: int) -> float:
    """Binary-relevance NDCG: position-discounted hits over the ideal placement.

    The ideal ranking puts min(|relevant|, n) relevant items first, so NDCG
    is 1 exactly when the top positions are all relevant.
    """
    ranked = list(ranked)
    if len(set(ranked)) != len(ranked):
        raise ValidationError("ranked list contains duplicates")
    if not relevant:
        return math.nan
    dcg = sum(
        1.0 / math.log2(rank + 2)
        for rank, item in enumerate(ranked[:n])
        if item in relevant
    )
    ideal = sum(1.0 / math.log2(rank + 2) for rank in range(min(len(relevant), n)))
    return dcg / ideal


@dataclass(frozen=True)
class ExperimentConfig:
    """Protocol settings: model kind, ranking cutoff, runs, and seeds."""

    target_domain: str = "target"
    source_domains: tuple[str, ...] = ()
    n: int = 10
    runs: int = 5
    q_grid: tuple[int, ...] = (10, 20, 30, 40, 50, 60, 70, 80, 90, 100)
    model: str = "cdt"
    seed: int = 0
    exclude_val_candidates: bool = False

    def __post_init__(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}")
        if not self.q_grid:
            raise ConfigError("q_grid must be non-empty")
        if self.runs < 1 or self.n < 1:
            raise ConfigError("runs and n must be positive")


@dataclass(frozen=True)
class MetricsReport:
    """Per-run and averaged ranking metrics."""

    model: str
    n: int
    per_run_recall: tuple[float, ...]
    per_run_ndcg: tuple[float, ...]
    users_evaluated: tuple[int, ...]
    users_skipped: tuple[int, ...]
    per_user: tuple[dict[int, tuple[float, float]], ...] | None = None

    def __post_init__(self) -> None:
        for values in (self.per_run_recall, self.per_run_ndcg):
            if any(not (0.0 <= v <= 1.0) for v in values):
                raise ValidationError("metric values must lie in [0, 1]")

    @property
    def runs(self) -> int:
        return len(self.per_run_recall)

    @property
    def recall(self) -> float:
        return float(np.mean(self.per_run_recall))

    @property
    def ndcg(self) -> float:
        return float(np.mean(self.per_run_ndcg))

    def to_json(self) -> str:
        payload = {
            "model": self.model,
            "n": self.n,
            "runs": self.runs,
            "average": {"recall": self.recall, "ndcg": self.ndcg},
            "per_run": [
                {
                    "run": r,
                    "recall": self.per_run_recall[r],
                    "ndcg": self.per_run_ndcg[r],
                    "users_evaluated": self.users_evaluated[r],
                    "users_skipped": self.users_skipped[r],
                }
                for r in range(self.runs)
            ],
        }
        if self.per_user is not None:
            payload["per_user"] = [
                {str(u): list(pair) for u, pair in sorted(detail.items())}
                for detail in self.per_user
            ]
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_tsv(self) -> str:
        lines = [
            "\t".join(
                ["run", f"recall@{self.n}", f"ndcg@{self.n}", "users_evaluated", "users_skipped"]
            )
        ]
        for r in range(self.runs):
            lines.append(
                "\t".join(
                    [
                        str(r),
                        repr(self.per_run_recall[r]),
                        repr(self.per_run_ndcg[r]),
                        str(self.users_evaluated[r]),
                        str(self.users_skipped[r]),
                    ]
                )
            )
        lines.append(
            "\t".join(["AVG", repr(self.recall), repr(self.ndcg), "", ""])
        )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        payload = json.loads(text)
        per_user = None
        if "per_user" in payload:
            per_user = tuple(
                {int(u): (pair[0], pair[1]) for u, pair in detail.items()}
                for detail in payload["per_user"]
            )
        return cls(
            model=payload["model"],
            n=payload["n"],
            per_run_recall=tuple(row["recall"] for row in payload["per_run"]),
            per_run_ndcg=tuple(row["ndcg"] for row in payload["per_run"]),
            users_evaluated=tuple(row["users_evaluated"] for row in payload["per_run"]),
            users_skipped=tuple(row["users_skipped"] for row in payload["per_run"]),
            per_user=per_user,
        )


@dataclass
class RunResult:
    """Everything one pipeline run produced, for inspection and tests."""

    seed: int
    model: str
    params: ModelParams
    mlp: MlpParams | None
    builder: FeatureBuilder
    weights: tuple[SourceWeights, ...]
    assignments: tuple[ClusterAssignment, ...]
    train_split: RatingMatrix
    val_split: RatingMatrix
    test_split: RatingMatrix
    relevance: RelevanceSets
    recall: float
    ndcg: float
    users_evaluated: int
    users_skipped: int
    per_user: dict[int, tuple[float, float]]


def _select_sources(bundle: DatasetBundle, config: ExperimentConfig) -> DatasetBundle:
    if bundle.target.domain_id != config.target_domain:
        raise ConfigError(
            f"bundle target is {bundle.target.domain_id!r}, config expects "
            f"{config.target_domain!r}"
        )
    if not config.source_domains:
        return bundle
    by_id = {source.domain_id: k for k, source in enumerate(bundle.sources)}
    missing = [d for d in config.source_domains if d not in by_id]
    if missing:
        raise ConfigError(f"unknown source domains: {missing}")
    picks = [by_id[d] for d in config.source_domains]
    return DatasetBundle(
        target=bundle.target,
        sources=tuple(bundle.sources[k] for k in picks),
        overlaps=tuple(bundle.overlaps[k] for k in picks),
    )


def cluster_and_weigh(
    bundle: DatasetBundle,
    train_split: RatingMatrix,
    config: CoclusterConfig,
    seed: int,
) -> tuple[tuple[ClusterAssignment, ...], tuple[SourceWeights, ...]]:
    """Cluster target (train ratings) and sources (full), then solve each Y and Q.

    Returns the assignments (target first) and one SourceWeights per source.
    """
    assign_t = spectral_cluster(
        build_user_similarity(train_split, config.knn_k),
        min(config.c_t, train_split.n_users),
        seed,
        domain_id=bundle.target.domain_id,
    )
    assignments = [assign_t]
    weights: list[SourceWeights] = []
    for p, (source, overlap) in enumerate(zip(bundle.sources, bundle.overlaps)):
        assign_p = spectral_cluster(
            build_user_similarity(source, config.knn_k),
            min(config.c_p, source.n_users),
            seed + 10007 * (p + 1),
            domain_id=source.domain_id,
        )
        local = dataclasses.replace(
            config, c_p=assign_p.n_clusters, c_t=assign_t.n_clusters
        )
        similarity = solve_cocluster(overlap, assign_p, assign_t, local)
        weights.append(compute_q(similarity, assign_p, assign_t, source))
        assignments.append(assign_p)
    return tuple(assignments), tuple(weights)


def _fit_model(
    bundle: DatasetBundle,
    weights: tuple[SourceWeights, ...],
    train_split: RatingMatrix,
    kind: str,
    train_config: TrainConfig,
    deep_config: DeepConfig | None,
    seed: int,
) -> tuple[ModelParams, MlpParams | None, FeatureBuilder, TrainConfig]:
    if kind == "fm":
        bundle = bundle.without_sources()
        weights = ()
        train_config = dataclasses.replace(
            train_config,
            variant="inner_product",
            interaction_sign=1,
            freeze_translations=True,
            source_positive_ranking=False,
            seed=seed,
        )
    else:
        train_config = dataclasses.replace(train_config, seed=seed)
    builder = FeatureBuilder(bundle, weights)
    if kind == "deepcdt":
        deep_config = dataclasses.replace(deep_config or DeepConfig(), seed=seed)
        params, mlp, _ = train_deep(
            bundle, weights, train_split, deep_config, train_config, builder=builder
        )
        return params, mlp, builder, train_config
    params, _ = train(bundle, weights, train_split, train_config, builder=builder)
    return params, None, builder, train_config


def run_pipeline_once(
    bundle: DatasetBundle,
    config: ExperimentConfig,
    train_config: TrainConfig,
    cocluster_config: CoclusterConfig | None = None,
    deep_config: DeepConfig | None = None,
    split_spec: SplitSpec | None = None,
    seed: int = 0,
) -> RunResult:
    """One full run: split, cluster, weigh, train, and evaluate at cutoff n."""
    bundle = _select_sources(bundle, config)
    base_split = split_spec if split_spec is not None else SplitSpec()
    train_split, val_split, test_split = split_target(
        bundle.target, dataclasses.replace(base_split, seed=seed)
    )
    if config.model != "fm" and bundle.sources:
        assignments, weights = cluster_and_weigh(
            bundle, train_split, cocluster_config or CoclusterConfig(), seed
        )
    else:
        assignments, weights = (), ()
    params, mlp, builder, effective_config = _fit_model(
        bundle, weights, train_split, config.model, train_config, deep_config, seed
    )
    relevance = label_relevance(test_split, train_split)

    def scorer(u: int, items: np.ndarray) -> np.ndarray:
        if mlp is not None:
            include_pairwise = bool(
                deep_config.include_pairwise_interaction if deep_config else False
            )
            return deep_score_candidates(
                params, mlp, u, items, builder,
                include_pairwise=include_pairwise,
                sign=effective_config.interaction_sign,
            )
        return score_candidates(
            params, u, items, builder,
            sign=effective_config.interaction_sign,
            variant=effective_config.variant,
        )

    train_items = train_split.items_by_user()
    val_items = val_split.items_by_user() if config.exclude_val_candidates else {}
    all_items = np.arange(bundle.target.n_items, dtype=np.int64)
    per_user: dict[int, tuple[float, float]] = {}
    skipped = 0
    for u in sorted(relevance.relevant):
        relevant = relevance.relevant[u]
        if not relevant:
            skipped += 1
            continue
        excluded = train_items.get(u, np.empty(0, dtype=np.int64))
        if config.exclude_val_candidates:
            excluded = np.union1d(excluded, val_items.get(u, np.empty(0, dtype=np.int64)))
        candidates = np.setdiff1d(all_items, excluded)
        scores = scorer(u, candidates)
        order = np.lexsort((candidates, -scores))
        ranked = candidates[order[: config.n]]
        per_user[u] = (
            recall_at_n(ranked, relevant, config.n),
            ndcg_at_n(ranked, relevant, config.n),
        )
    if not per_user:
        raise ValidationError("no test user has a relevant item; cannot evaluate")
    recalls = [pair[0] for pair in per_user.values()]
    ndcgs = [pair[1] for pair in per_user.values()]
    return RunResult(
        seed=seed,
        model=config.model,
        params=params,
        mlp=mlp,
        builder=builder,
        weights=weights,
        assignments=assignments,
        train_split=train_split,
        val_split=val_split,
        test_split=test_split,
        relevance=relevance,
        recall=float(np.mean(recalls)),
        ndcg=float(np.mean(ndcgs)),
        users_evaluated=len(per_user),
        users_skipped=skipped,
        per_user=per_user,
    )


def run_experiment(
    bundle: DatasetBundle,
    config: ExperimentConfig,
    train_config: TrainConfig,
    cocluster_config: CoclusterConfig | None = None,
    deep_config: DeepConfig | None = None,
    split_spec: SplitSpec | None = None,
    per_user_detail: bool = False,
    collect_runs: list[RunResult] | None = None,
) -> MetricsReport:
    """Repeat the pipeline ``config.runs`` times with seeds base, base+1, ...

    Each run reshuffles the split, the clustering, the initialization, and
    the negative draws.  ``collect_runs``, when given, receives every
    :class:`RunResult` for further inspection.
    """
    results = []
    for r in range(config.runs):
        result = run_pipeline_once(
            bundle,
            config,
            train_config,
            cocluster_config,
            deep_config,
            split_spec,
            seed=config.seed + r,
        )
        results.append(result)
        if collect_runs is not None:
            collect_runs.append(result)
    return MetricsReport(
        model=config.model,
        n=config.n,
        per_run_recall=tuple(res.recall for res in results),
        per_run_ndcg=tuple(res.ndcg for res in results),
        users_evaluated=tuple(res.users_evaluated for res in results),
        users_skipped=tuple(res.users_skipped for res in results),
        per_user=tuple(res.per_user for res in results) if per_user_detail else None,
    )


@dataclass(frozen=True)
class GridResult:
    """Validation recall per grid point and the selected latent dimension."""

    best_q: int
    val_recall: dict[int, float]


def grid_search(
    bundle: DatasetBundle,
    config: ExperimentConfig,
    grid: tuple[int, ...] | list[int] | None = None,
    train_config: TrainConfig = TrainConfig(),
    cocluster_config: CoclusterConfig | None = None,
    deep_config: DeepConfig | None = None,
    split_spec: SplitSpec | None = None,
) -> GridResult:
    """Pick the latent dimension with the best validation recall@n.

    Trains one model per grid point on the train split and evaluates
    recall@n on the validation split (relevance thresholded by train-split
    means, candidates excluding train items).  Ties go to the smaller q.
    """
    grid = tuple(grid) if grid is not None else config.q_grid
    if not grid:
        raise ConfigError("grid must be non-empty")
    bundle = _select_sources(bundle, config)
    seed = config.seed
    base_split = split_spec if split_spec is not None else SplitSpec()
    train_split, val_split, _ = split_target(
        bundle.target, dataclasses.replace(base_split, seed=seed)
    )
    if val_split.n_entries == 0:
        raise ConfigError("validation split is empty")
    if config.model != "fm" and bundle.sources:
        _, weights = cluster_and_weigh(
            bundle, train_split, cocluster_config or CoclusterConfig(), seed
        )
    else:
        weights = ()
    relevance = label_relevance(val_split, train_split)
    train_items = train_split.items_by_user()
    all_items = np.arange(bundle.target.n_items, dtype=np.int64)

    scores_by_q: dict[int, float] = {}
    for q in grid:
        params, mlp, builder, effective_config = _fit_model(
            bundle,
            weights,
            train_split,
            config.model,
            dataclasses.replace(train_config, q=q),
            deep_config,
            seed,
        )
        recalls = []
        for u in sorted(relevance.relevant):
            relevant = relevance.relevant[u]
            if not relevant:
                continue
            excluded = train_items.get(u, np.empty(0, dtype=np.int64))
            candidates = np.setdiff1d(all_items, excluded)
            if mlp is not None:
                scores = deep_score_candidates(params, mlp, u, candidates, builder)
            else:
                scores = score_candidates(
                    params, u, candidates, builder,
                    sign=effective_config.interaction_sign,
                    variant=effective_config.variant,
                )
            order = np.lexsort((candidates, -scores))
            recalls.append(recall_at_n(candidates[order[: config.n]], relevant, config.n))
        if not recalls:
            raise ValidationError("no validation user has a relevant item")
        scores_by_q[q] = float(np.mean(recalls))
    best_q = max(sorted(scores_by_q), key=lambda q: (scores_by_q[q], -q))
    return GridResult(best_q=best_q, val_recall=scores_by_q)
