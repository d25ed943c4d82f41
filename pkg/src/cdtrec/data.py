"""Multi-domain rating data: loading, validation, splitting, and synthesis.

A dataset is one target domain plus zero or more source domains.  Every
domain gets its own dense user/item index space; the only cross-domain
identity is the explicit user alignment stored in :class:`OverlapMatrix`.
All containers are immutable after construction and safe to share between
workers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ParseError, ValidationError


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RatingMatrix:
    """Sparse user-item preference matrix for one domain.

    Entries are parallel arrays ``(users[i], items[i], ratings[i])`` with
    dense indices.  ``user_labels``/``item_labels`` map dense indices back to
    the raw ids of the source file; they are None for synthetic data.
    """

    domain_id: str
    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_labels: tuple[str, ...] | None = None
    item_labels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        ratings = np.asarray(self.ratings, dtype=np.float64)
        if not (users.shape == items.shape == ratings.shape) or users.ndim != 1:
            raise ValidationError("entry arrays must be 1-d and equally long")
        if users.size:
            if users.min() < 0 or users.max() >= self.n_users:
                raise ValidationError(
                    f"{self.domain_id}: user index out of range [0, {self.n_users})"
                )
            if items.min() < 0 or items.max() >= self.n_items:
                raise ValidationError(
                    f"{self.domain_id}: item index out of range [0, {self.n_items})"
                )
            keys = users * max(self.n_items, 1) + items
            if np.unique(keys).size != keys.size:
                raise ValidationError(f"{self.domain_id}: duplicate (user, item) entry")
        if not np.all(np.isfinite(ratings)):
            raise ValidationError(f"{self.domain_id}: non-finite rating")
        object.__setattr__(self, "users", _freeze(users))
        object.__setattr__(self, "items", _freeze(items))
        object.__setattr__(self, "ratings", _freeze(ratings))

    @property
    def n_entries(self) -> int:
        return int(self.users.size)

    def entry_set(self) -> set[tuple[int, int, float]]:
        return set(zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()))

    def to_csr(self) -> sp.csr_matrix:
        """Entries as an n_users x n_items CSR matrix of rating values."""
        return sp.csr_matrix(
            (self.ratings, (self.users, self.items)), shape=(self.n_users, self.n_items)
        )

    def items_by_user(self) -> dict[int, np.ndarray]:
        """Rated item indices per user (users with no entries are absent)."""
        order = np.lexsort((self.items, self.users))
        out: dict[int, np.ndarray] = {}
        users, items = self.users[order], self.items[order]
        bounds = np.flatnonzero(np.diff(users)) + 1
        for chunk_u, chunk_i in zip(
            np.split(users, bounds), np.split(items, bounds)
        ):
            if chunk_u.size:
                out[int(chunk_u[0])] = _freeze(chunk_i)
        return out

    def replace_entries(
        self, users: np.ndarray, items: np.ndarray, ratings: np.ndarray
    ) -> "RatingMatrix":
        """New matrix with the same domain shape but different entries."""
        return RatingMatrix(
            domain_id=self.domain_id,
            n_users=self.n_users,
            n_items=self.n_items,
            users=users,
            items=items,
            ratings=ratings,
            user_labels=self.user_labels,
            item_labels=self.item_labels,
        )


@dataclass(frozen=True)
class OverlapMatrix:
    """Binary user alignment between a source domain and the target.

    A pair ``(source_users[i], target_users[i])`` marks the two indices as
    the same person.  Pairs are deduplicated and stored sorted.
    """

    source_domain: str
    source_users: np.ndarray
    target_users: np.ndarray

    def __post_init__(self) -> None:
        src = np.asarray(self.source_users, dtype=np.int64)
        tgt = np.asarray(self.target_users, dtype=np.int64)
        if src.shape != tgt.shape or src.ndim != 1:
            raise ValidationError("overlap pair arrays must be 1-d and equally long")
        if src.size:
            if src.min() < 0 or tgt.min() < 0:
                raise ValidationError("negative user index in overlap pair")
            pairs = np.stack([src, tgt], axis=1)
            pairs = np.unique(pairs, axis=0)
            src, tgt = pairs[:, 0], pairs[:, 1]
        object.__setattr__(self, "source_users", _freeze(src))
        object.__setattr__(self, "target_users", _freeze(tgt))

    @property
    def n_pairs(self) -> int:
        return int(self.source_users.size)

    def target_to_sources(self) -> dict[int, np.ndarray]:
        """Aligned source user indices per target user."""
        out: dict[int, list[int]] = {}
        for k, u in zip(self.source_users.tolist(), self.target_users.tolist()):
            out.setdefault(u, []).append(k)
        return {u: _freeze(np.asarray(ks, dtype=np.int64)) for u, ks in out.items()}


@dataclass(frozen=True)
class DatasetBundle:
    """One target domain, its source domains, and the user alignments."""

    target: RatingMatrix
    sources: tuple[RatingMatrix, ...] = ()
    overlaps: tuple[OverlapMatrix, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "overlaps", tuple(self.overlaps))
        if len(self.sources) != len(self.overlaps):
            raise ValidationError("need exactly one overlap matrix per source domain")
        for source, overlap in zip(self.sources, self.overlaps):
            if overlap.source_domain != source.domain_id:
                raise ValidationError(
                    f"overlap domain {overlap.source_domain!r} does not match "
                    f"source {source.domain_id!r}"
                )
            if overlap.n_pairs:
                if overlap.source_users.max() >= source.n_users:
                    raise ValidationError(
                        f"overlap references unknown user in {source.domain_id!r}"
                    )
                if overlap.target_users.max() >= self.target.n_users:
                    raise ValidationError("overlap references unknown target user")

    @property
    def n_domains(self) -> int:
        return 1 + len(self.sources)

    def without_sources(self) -> "DatasetBundle":
        """Target-only view, used by single-domain ablations."""
        return DatasetBundle(target=self.target)


@dataclass(frozen=True)
class SplitSpec:
    """Fractions for the train/validation/test partition of target entries."""

    train_fraction: float = 0.5
    val_fraction: float = 0.1
    test_fraction: float = 0.4
    seed: int = 0

    def __post_init__(self) -> None:
        fracs = (self.train_fraction, self.val_fraction, self.test_fraction)
        if min(fracs) <= 0:
            raise ConfigError("split fractions must be positive")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")


@dataclass(frozen=True)
class RelevanceSets:
    """Per-user relevant test items and the mean used as the threshold."""

    relevant: dict[int, frozenset[int]]
    user_mean: dict[int, float]

    def users_with_relevant(self) -> list[int]:
        return sorted(u for u, items in self.relevant.items() if items)


def load_ratings(path: str | Path, domain_id: str, has_header: bool = False) -> RatingMatrix:
    """Read a ``user_id,item_id,rating`` CSV into a densely indexed matrix.

    Raw ids become dense indices in order of first appearance; the mapping is
    kept in ``user_labels``/``item_labels`` so overlap files can refer to the
    raw ids.
    """
    path = Path(path)
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    users: list[int] = []
    items: list[int] = []
    ratings: list[float] = []
    seen: set[tuple[int, int]] = set()
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and has_header:
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            raw_user, raw_item, raw_rating = (field.strip() for field in row)
            try:
                rating = float(raw_rating)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad rating {raw_rating!r}") from None
            u = user_index.setdefault(raw_user, len(user_index))
            i = item_index.setdefault(raw_item, len(item_index))
            if (u, i) in seen:
                raise ValidationError(
                    f"{path}:{lineno}: duplicate entry for user {raw_user!r}, "
                    f"item {raw_item!r}"
                )
            seen.add((u, i))
            users.append(u)
            items.append(i)
            ratings.append(rating)
    return RatingMatrix(
        domain_id=domain_id,
        n_users=len(user_index),
        n_items=len(item_index),
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        ratings=np.asarray(ratings, dtype=np.float64),
        user_labels=tuple(user_index),
        item_labels=tuple(item_index),
    )


def load_overlap(path: str | Path, source: RatingMatrix, target: RatingMatrix) -> OverlapMatrix:
    """Read ``source_user_id,target_user_id`` alignment pairs.

    Both matrices must come from :func:`load_ratings` so their raw-id
    registries are available; unknown ids raise.  Repeated pairs collapse to
    one.
    """
    if source.user_labels is None or target.user_labels is None:
        raise ValidationError("overlap loading needs matrices with raw-id registries")
    path = Path(path)
    src_index = {label: i for i, label in enumerate(source.user_labels)}
    tgt_index = {label: i for i, label in enumerate(target.user_labels)}
    src: list[int] = []
    tgt: list[int] = []
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        for lineno, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            raw_src, raw_tgt = (field.strip() for field in row)
            if raw_src not in src_index:
                raise ValidationError(
                    f"{path}:{lineno}: unknown user {raw_src!r} in domain "
                    f"{source.domain_id!r}"
                )
            if raw_tgt not in tgt_index:
                raise ValidationError(
                    f"{path}:{lineno}: unknown user {raw_tgt!r} in domain "
                    f"{target.domain_id!r}"
                )
            src.append(src_index[raw_src])
            tgt.append(tgt_index[raw_tgt])
    return OverlapMatrix(
        source_domain=source.domain_id,
        source_users=np.asarray(src, dtype=np.int64),
        target_users=np.asarray(tgt, dtype=np.int64),
    )


def split_target(
    target: RatingMatrix, spec: SplitSpec
) -> tuple[RatingMatrix, RatingMatrix, RatingMatrix]:
    """Partition target entries into train/val/test by a seeded shuffle.

    The three outputs are disjoint and their union is the input; cut points
    are the rounded cumulative fractions, so 100 entries under the default
    spec give exactly 50/10/40.
    """
    n = target.n_entries
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n)
    cut_train = int(round(spec.train_fraction * n))
    cut_val = int(round((spec.train_fraction + spec.val_fraction) * n))

    def take(sel: np.ndarray) -> RatingMatrix:
        order = sel[np.lexsort((target.items[sel], target.users[sel]))]
        return target.replace_entries(
            target.users[order], target.items[order], target.ratings[order]
        )

    return take(perm[:cut_train]), take(perm[cut_train:cut_val]), take(perm[cut_val:])


def label_relevance(test: RatingMatrix, reference: RatingMatrix) -> RelevanceSets:
    """Mark each test item relevant iff its rating strictly exceeds the user mean.

    Means come from ``reference`` (normally the training split).  A user with
    no reference ratings falls back to the mean of their own test ratings.
    """
    ref_sum = np.zeros(test.n_users)
    ref_cnt = np.zeros(test.n_users)
    np.add.at(ref_sum, reference.users, reference.ratings)
    np.add.at(ref_cnt, reference.users, 1.0)

    relevant: dict[int, set[int]] = {}
    test_sum: dict[int, float] = {}
    test_cnt: dict[int, int] = {}
    for u, r in zip(test.users.tolist(), test.ratings.tolist()):
        test_sum[u] = test_sum.get(u, 0.0) + r
        test_cnt[u] = test_cnt.get(u, 0) + 1
        relevant.setdefault(u, set())
    user_mean = {
        u: (ref_sum[u] / ref_cnt[u]) if ref_cnt[u] > 0 else test_sum[u] / test_cnt[u]
        for u in relevant
    }
    for u, i, r in zip(test.users.tolist(), test.items.tolist(), test.ratings.tolist()):
        if r > user_mean[u]:
            relevant[u].add(i)
    return RelevanceSets(
        relevant={u: frozenset(items) for u, items in relevant.items()},
        user_mean=user_mean,
    )


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings for planted-cluster multi-domain data.

    ``domains`` counts the target plus its sources.  Every domain plants the
    same cluster structure: user ``u`` belongs to cluster ``u % clusters``
    and items split into contiguous per-cluster blocks whose first half are
    "strong" items (rated 5.0) and second half "mild" items (rated 3.0).
    The target domain is kept sparse (``target_density``) while sources are
    dense (``source_density``), mimicking the sparse-target setting that
    cross-domain transfer is meant to fix.
    """

    domains: int = 2
    users_per_domain: int = 300
    items_per_domain: int = 100
    clusters: int = 5
    overlap_fraction: float = 0.6
    noise: float = 0.0
    seed: int = 0
    target_density: float = 0.25
    source_density: float = 0.75

    def __post_init__(self) -> None:
        if self.domains < 1:
            raise ConfigError("need at least one domain")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ConfigError("overlap_fraction must lie in [0, 1]")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError("noise must lie in [0, 1]")
        if self.clusters < 1 or self.clusters > self.items_per_domain:
            raise ConfigError("clusters must lie in [1, items_per_domain]")
        if self.users_per_domain < 1:
            raise ConfigError("users_per_domain must be positive")


def planted_user_clusters(spec: SyntheticSpec) -> np.ndarray:
    """Planted cluster index of each user (identical in every domain)."""
    return np.arange(spec.users_per_domain, dtype=np.int64) % spec.clusters


def planted_item_blocks(spec: SyntheticSpec) -> np.ndarray:
    """Planted cluster block of each item (contiguous, near-equal sizes)."""
    j = np.arange(spec.items_per_domain, dtype=np.int64)
    return (j * spec.clusters) // spec.items_per_domain


def planted_strong_items(spec: SyntheticSpec) -> np.ndarray:
    """Boolean mask of the strong (rating 5.0) half of each item block."""
    blocks = planted_item_blocks(spec)
    strong = np.zeros(spec.items_per_domain, dtype=bool)
    for b in range(spec.clusters):
        members = np.flatnonzero(blocks == b)
        strong[members[: (members.size + 1) // 2]] = True
    return strong


def _synth_domain(
    spec: SyntheticSpec, domain_id: str, density: float, rng: np.random.Generator
) -> RatingMatrix:
    clusters = planted_user_clusters(spec)
    blocks = planted_item_blocks(spec)
    strong = planted_strong_items(spec)
    block_items = [np.flatnonzero(blocks == b) for b in range(spec.clusters)]

    users: list[int] = []
    items: list[int] = []
    ratings: list[float] = []
    for u in range(spec.users_per_domain):
        own = block_items[clusters[u]]
        picked = own[rng.random(own.size) < density]
        taken = set()
        for i in picked.tolist():
            value = 5.0 if strong[i] else 3.0
            if spec.noise > 0 and rng.random() < spec.noise:
                i = int(rng.integers(spec.items_per_domain))
                value = float(rng.integers(1, 6))
                if i in taken:
                    continue
            if i in taken:
                continue
            taken.add(i)
            users.append(u)
            items.append(i)
            ratings.append(value)
    return RatingMatrix(
        domain_id=domain_id,
        n_users=spec.users_per_domain,
        n_items=spec.items_per_domain,
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        ratings=np.asarray(ratings, dtype=np.float64),
    )


def _synth_overlap(
    spec: SyntheticSpec, source_id: str, rng: np.random.Generator
) -> OverlapMatrix:
    clusters = planted_user_clusters(spec)
    n = spec.users_per_domain
    n_pairs = int(round(spec.overlap_fraction * n))
    chosen = np.sort(rng.permutation(n)[:n_pairs])
    pools = {
        g: rng.permutation(np.flatnonzero(clusters == g)).tolist()
        for g in range(spec.clusters)
    }
    src: list[int] = []
    tgt: list[int] = []
    for u in chosen.tolist():
        pool = pools[int(clusters[u])]
        if not pool:
            raise ConfigError("overlap demand exceeds same-cluster source users")
        src.append(pool.pop())
        tgt.append(u)
    return OverlapMatrix(
        source_domain=source_id,
        source_users=np.asarray(src, dtype=np.int64),
        target_users=np.asarray(tgt, dtype=np.int64),
    )


def synth_generate(spec: SyntheticSpec, seed: int | None = None) -> DatasetBundle:
    """Generate a planted-cluster bundle; deterministic for a given seed.

    Same-cluster users rate the same item block, overlap pairs connect
    same-cluster users across domains, and ``noise`` is the probability that
    a rating is redirected to a uniformly random item with a uniformly random
    value in {1..5}.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    target = _synth_domain(spec, "target", spec.target_density, rng)
    sources: list[RatingMatrix] = []
    overlaps: list[OverlapMatrix] = []
    for p in range(1, spec.domains):
        source_id = f"source_{p}"
        sources.append(_synth_domain(spec, source_id, spec.source_density, rng))
        overlaps.append(_synth_overlap(spec, source_id, rng))
    return DatasetBundle(target=target, sources=tuple(sources), overlaps=tuple(overlaps))
