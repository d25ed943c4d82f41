"""Sparse cross-domain feature vectors and ranking sample pools.

The feature space concatenates target-user columns, target-item columns, and
one column block per source domain's items.  A target interaction (u, i)
activates the user and item columns with value 1.0 and, for every source
where u has an aligned account, one column per source item that account
rated, valued by the transfer weight Q[h, u].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coclustering import SourceWeights
from .data import DatasetBundle, RatingMatrix
from .errors import ConfigError, SamplingError, ValidationError


@dataclass(frozen=True)
class FeatureIndex:
    """Column layout of the combined feature space.

    Target users occupy ``[0, n_users)``, target items the next block, then
    one contiguous block per source domain in bundle order.
    """

    n_target_users: int
    n_target_items: int
    source_dims: tuple[int, ...]
    source_ids: tuple[str, ...]

    @property
    def total_dim(self) -> int:
        return self.n_target_users + self.n_target_items + sum(self.source_dims)

    @property
    def item_offset(self) -> int:
        return self.n_target_users

    def source_offset(self, p: int) -> int:
        return self.n_target_users + self.n_target_items + sum(self.source_dims[:p])

    def user_column(self, u: int) -> int:
        if not 0 <= u < self.n_target_users:
            raise ValidationError(f"user index {u} out of range")
        return u

    def item_column(self, i: int) -> int:
        if not 0 <= i < self.n_target_items:
            raise ValidationError(f"item index {i} out of range")
        return self.item_offset + i

    def source_column(self, p: int, h: int) -> int:
        if not 0 <= h < self.source_dims[p]:
            raise ValidationError(f"source item index {h} out of range")
        return self.source_offset(p) + h

    def source_block(self, p: int) -> range:
        start = self.source_offset(p)
        return range(start, start + self.source_dims[p])


@dataclass(frozen=True)
class FeatureVector:
    """Sparse vector: parallel (column, value) arrays with increasing columns."""

    columns: np.ndarray
    values: np.ndarray
    user: int
    item_column: int

    def __post_init__(self) -> None:
        cols = np.asarray(self.columns, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if cols.shape != vals.shape or cols.ndim != 1:
            raise ValidationError("columns and values must be 1-d and equally long")
        if cols.size > 1 and not np.all(np.diff(cols) > 0):
            raise ValidationError("feature columns must be strictly increasing")
        cols.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "values", vals)

    @property
    def n_active(self) -> int:
        return int(self.columns.size)

    @classmethod
    def _trusted(
        cls, columns: np.ndarray, values: np.ndarray, user: int, item_column: int
    ) -> "FeatureVector":
        """Construction bypass for builder-internal arrays known to be valid."""
        self = object.__new__(cls)
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "user", user)
        object.__setattr__(self, "item_column", item_column)
        return self


@dataclass(frozen=True)
class PositivePool:
    """Observed items per target user, split by origin domain.

    ``target_items[u]`` holds u's train-split target items; ``source_items``
    holds, per source domain, the items of u's aligned accounts.  Negative
    sampling excludes only the target positives.
    """

    n_target_items: int
    target_items: dict[int, np.ndarray]
    source_items: tuple[dict[int, np.ndarray], ...]

    def target_set(self, u: int) -> np.ndarray:
        return self.target_items.get(u, np.empty(0, dtype=np.int64))

    def global_items(self, u: int) -> set[tuple[int, int]]:
        """All train-observed (domain, item) pairs; domain 0 is the target."""
        out = {(0, int(i)) for i in self.target_set(u)}
        for p, per_user in enumerate(self.source_items, start=1):
            out.update((p, int(h)) for h in per_user.get(u, ()))
        return out


def build_index(bundle: DatasetBundle) -> FeatureIndex:
    """Deterministic column layout for a bundle."""
    return FeatureIndex(
        n_target_users=bundle.target.n_users,
        n_target_items=bundle.target.n_items,
        source_dims=tuple(source.n_items for source in bundle.sources),
        source_ids=tuple(source.domain_id for source in bundle.sources),
    )


def build_positive_pool(bundle: DatasetBundle, train: RatingMatrix) -> PositivePool:
    """Collect per-user positives: target train items plus aligned source items."""
    source_items: list[dict[int, np.ndarray]] = []
    for source, overlap in zip(bundle.sources, bundle.overlaps):
        rated = source.items_by_user()
        per_user: dict[int, np.ndarray] = {}
        for u, aligned in overlap.target_to_sources().items():
            items = np.unique(np.concatenate([rated.get(int(k), np.empty(0, dtype=np.int64)) for k in aligned]))
            if items.size:
                per_user[u] = items
        source_items.append(per_user)
    return PositivePool(
        n_target_items=bundle.target.n_items,
        target_items=train.items_by_user(),
        source_items=tuple(source_items),
    )


class FeatureBuilder:
    """Constructs feature vectors against a fixed bundle and transfer weights.

    The per-user source context (columns and Q values) is precomputed once;
    vector construction is then a cheap concatenation.  ``context_value``
    selects how source entries are valued: ``"weight"`` uses Q[h, u] alone,
    ``"rating_weight"`` multiplies by the source rating scaled to [0, 1].
    """

    def __init__(
        self,
        bundle: DatasetBundle,
        weights: list[SourceWeights] | tuple[SourceWeights, ...],
        index: FeatureIndex | None = None,
        context_value: str = "weight",
    ) -> None:
        if context_value not in ("weight", "rating_weight"):
            raise ConfigError("context_value must be 'weight' or 'rating_weight'")
        if len(weights) != len(bundle.sources):
            raise ValidationError("need one SourceWeights per source domain")
        self.bundle = bundle
        self.index = index if index is not None else build_index(bundle)
        self.context_value = context_value
        self._context = self._precompute_context(weights)
        self._templates: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _precompute_context(
        self, weights: list[SourceWeights] | tuple[SourceWeights, ...]
    ) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        per_user: dict[int, tuple[list[np.ndarray], list[np.ndarray]]] = {}
        for p, (source, overlap, sw) in enumerate(
            zip(self.bundle.sources, self.bundle.overlaps, weights)
        ):
            if sw.matrix.shape != (source.n_items, self.bundle.target.n_users):
                raise ValidationError(
                    f"weights for {source.domain_id!r} have the wrong shape"
                )
            rated = source.items_by_user()
            ratings_csr = source.to_csr()
            scale = float(source.ratings.max()) if source.n_entries else 1.0
            offset = self.index.source_offset(p)
            for u, aligned in overlap.target_to_sources().items():
                items = np.unique(
                    np.concatenate(
                        [rated.get(int(k), np.empty(0, dtype=np.int64)) for k in aligned]
                    )
                )
                if not items.size:
                    continue
                vals = sw.matrix[items, u]
                if self.context_value == "rating_weight":
                    row = ratings_csr[np.asarray(aligned)].max(axis=0).toarray().ravel()
                    vals = vals * (row[items] / scale)
                cols, values = per_user.setdefault(u, ([], []))
                cols.append(items + offset)
                values.append(vals)
        return {
            u: (np.concatenate(cols), np.concatenate(values))
            for u, (cols, values) in per_user.items()
        }

    def context(self, u: int) -> tuple[np.ndarray, np.ndarray]:
        """Source-context (columns, values) for user u; empty if unaligned."""
        empty = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))
        return self._context.get(u, empty)

    def vector(self, u: int, i: int) -> FeatureVector:
        """Feature vector for target interaction (u, i)."""
        i_col = self.index.item_column(i)
        template = self._templates.get(u)
        if template is None:
            u_col = self.index.user_column(u)
            ctx_cols, ctx_vals = self.context(u)
            cols = np.concatenate(([u_col, -1], ctx_cols))
            vals = np.concatenate(([1.0, 1.0], ctx_vals))
            vals.setflags(write=False)
            template = (cols, vals)
            self._templates[u] = template
        # the item slot sits between the user column and all source columns,
        # so filling it keeps the columns strictly increasing
        columns = template[0].copy()
        columns[1] = i_col
        return FeatureVector._trusted(columns, template[1], user=u, item_column=i_col)

    def source_positive_vector(self, u: int, p: int, h: int) -> FeatureVector:
        """Vector ranking source item h as the active item for user u.

        The item's own column carries 1.0 and is dropped from the weighted
        context so it cannot interact with itself; there is no target-item
        column.
        """
        u_col = self.index.user_column(u)
        h_col = self.index.source_column(p, h)
        ctx_cols, ctx_vals = self.context(u)
        keep = ctx_cols != h_col
        pos = int(np.searchsorted(ctx_cols[keep], h_col))
        columns = np.concatenate(([u_col], np.insert(ctx_cols[keep], pos, h_col)))
        values = np.concatenate(([1.0], np.insert(ctx_vals[keep], pos, 1.0)))
        return FeatureVector(columns=columns, values=values, user=u, item_column=h_col)


def sample_negatives(
    u: int,
    count: int,
    pool: PositivePool,
    target: RatingMatrix,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw ``count`` distinct target items outside u's train positives."""
    positives = pool.target_set(u)
    candidates = np.setdiff1d(
        np.arange(target.n_items, dtype=np.int64), positives, assume_unique=False
    )
    if candidates.size < count:
        raise SamplingError(
            f"user {u}: only {candidates.size} unobserved items, need {count}"
        )
    return rng.choice(candidates, size=count, replace=False)
