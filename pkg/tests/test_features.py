import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdtrec.coclustering import SourceWeights
from cdtrec.data import DatasetBundle, OverlapMatrix, RatingMatrix
from cdtrec.errors import SamplingError, ValidationError
from cdtrec.features import (
    FeatureBuilder,
    FeatureVector,
    build_index,
    build_positive_pool,
    sample_negatives,
)


def small_bundle():
    """Target: 3 users x 4 items; one source: 2 users x 5 items.

    Target user 0 aligns with source user 1, who rated source items 0, 2, 4.
    Target user 2 aligns with source user 0, who rated source item 1.
    Target user 1 is unaligned.
    """
    target = RatingMatrix(
        "t", 3, 4, users=[0, 0, 1, 2], items=[0, 1, 2, 3], ratings=[5.0, 3.0, 4.0, 2.0]
    )
    source = RatingMatrix(
        "s", 2, 5, users=[1, 1, 1, 0], items=[0, 2, 4, 1], ratings=[5.0, 4.0, 3.0, 2.0]
    )
    overlap = OverlapMatrix("s", source_users=[1, 0], target_users=[0, 2])
    return DatasetBundle(target=target, sources=(source,), overlaps=(overlap,))


def q_for(bundle, fill=None):
    source = bundle.sources[0]
    if fill is None:
        rng = np.random.default_rng(0)
        fill = rng.random((source.n_items, bundle.target.n_users))
    return SourceWeights(source_domain=source.domain_id, matrix=fill)


class TestBuildIndex:
    def test_layout_arithmetic(self):
        bundle = small_bundle()
        index = build_index(bundle)
        assert index.total_dim == 3 + 4 + 5
        assert list(index.source_block(0)) == list(range(7, 12))

    def test_no_sources(self):
        bundle = small_bundle().without_sources()
        index = build_index(bundle)
        assert index.total_dim == 3 + 4

    def test_two_sources_blocks_disjoint_in_order(self):
        base = small_bundle()
        extra = RatingMatrix("s2", 2, 3, users=[0], items=[1], ratings=[4.0])
        bundle = DatasetBundle(
            target=base.target,
            sources=(base.sources[0], extra),
            overlaps=(base.overlaps[0], OverlapMatrix("s2", [0], [1])),
        )
        index = build_index(bundle)
        first = index.source_block(0)
        second = index.source_block(1)
        assert first.stop == second.start
        assert index.total_dim == second.stop


class TestFeatureBuilder:
    def test_unaligned_user_has_two_entries(self):
        bundle = small_bundle()
        builder = FeatureBuilder(bundle, [q_for(bundle)])
        vec = builder.vector(1, 2)
        assert vec.n_active == 2
        assert vec.values.tolist() == [1.0, 1.0]
        assert vec.columns.tolist() == [1, 3 + 2]

    def test_context_entries_carry_q_values(self):
        bundle = small_bundle()
        q = np.zeros((5, 3))
        q[1, 2] = 0.6
        builder = FeatureBuilder(bundle, [q_for(bundle, q)])
        vec = builder.vector(2, 0)
        assert vec.n_active == 3
        assert vec.columns.tolist() == [2, 3, 7 + 1]
        assert vec.values[2] == pytest.approx(0.6)

    def test_three_source_items_give_five_entries(self):
        bundle = small_bundle()
        builder = FeatureBuilder(bundle, [q_for(bundle)])
        vec = builder.vector(0, 1)
        assert vec.n_active == 5
        assert np.all(np.diff(vec.columns) > 0)

    def test_context_values_equal_q_exactly(self):
        bundle = small_bundle()
        weights = q_for(bundle)
        builder = FeatureBuilder(bundle, [weights])
        index = builder.index
        vec = builder.vector(0, 1)
        offset = index.source_offset(0)
        for col, val in zip(vec.columns[2:].tolist(), vec.values[2:].tolist()):
            assert val - weights.matrix[col - offset, 0] == 0.0

    def test_source_positive_vector_promotes_item(self):
        bundle = small_bundle()
        weights = q_for(bundle)
        builder = FeatureBuilder(bundle, [weights])
        vec = builder.source_positive_vector(0, 0, 2)
        item_col = builder.index.source_column(0, 2)
        assert vec.item_column == item_col
        # user column + the three rated source items; item column now 1.0
        assert vec.n_active == 4
        at = int(np.flatnonzero(vec.columns == item_col)[0])
        assert vec.values[at] == 1.0
        # no target-item column present
        assert not np.any(
            (vec.columns >= builder.index.item_offset)
            & (vec.columns < builder.index.source_offset(0))
        )

    def test_rating_weight_mode_scales_by_rating(self):
        bundle = small_bundle()
        q = np.full((5, 3), 0.5)
        builder = FeatureBuilder(bundle, [q_for(bundle, q)], context_value="rating_weight")
        vec = builder.vector(0, 1)
        # source user 1 rated items 0, 2, 4 with 5, 4, 3; scale is 5.0
        assert vec.values[2:].tolist() == pytest.approx([0.5, 0.4, 0.3])

    def test_columns_strictly_increasing_validated(self):
        with pytest.raises(ValidationError):
            FeatureVector(columns=[3, 3], values=[1.0, 1.0], user=0, item_column=3)


class TestPositivePool:
    def test_pool_contents(self):
        bundle = small_bundle()
        train = RatingMatrix("t", 3, 4, users=[0, 2], items=[0, 3], ratings=[5.0, 2.0])
        pool = build_positive_pool(bundle, train)
        assert pool.target_set(0).tolist() == [0]
        assert pool.target_set(1).tolist() == []
        assert pool.global_items(0) == {(0, 0), (1, 0), (1, 2), (1, 4)}
        assert pool.global_items(2) == {(0, 3), (1, 1)}
        assert pool.global_items(1) == set()


class TestSampleNegatives:
    def make_pool(self, n_items=10, positives=(1,)):
        target = RatingMatrix(
            "t",
            1,
            n_items,
            users=[0] * len(positives),
            items=list(positives),
            ratings=[5.0] * len(positives),
        )
        bundle = DatasetBundle(target=target)
        return target, build_positive_pool(bundle, target)

    def test_negatives_avoid_positives(self):
        target, pool = self.make_pool(10, positives=(1,))
        rng = np.random.default_rng(0)
        negs = sample_negatives(0, 5, pool, target, rng)
        assert negs.size == 5
        assert np.unique(negs).size == 5
        assert 1 not in negs

    def test_full_complement(self):
        target, pool = self.make_pool(6, positives=(0, 3))
        rng = np.random.default_rng(0)
        negs = sample_negatives(0, 4, pool, target, rng)
        assert sorted(negs.tolist()) == [1, 2, 4, 5]

    def test_deterministic_per_stream_state(self):
        target, pool = self.make_pool(30, positives=(2, 7))
        a = sample_negatives(0, 5, pool, target, np.random.default_rng(42))
        b = sample_negatives(0, 5, pool, target, np.random.default_rng(42))
        assert np.array_equal(a, b)

    def test_insufficient_candidates(self):
        target, pool = self.make_pool(4, positives=(0, 1, 2))
        with pytest.raises(SamplingError):
            sample_negatives(0, 2, pool, target, np.random.default_rng(0))

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_never_hits_positives(self, seed):
        target, pool = self.make_pool(12, positives=(0, 5, 9))
        negs = sample_negatives(0, 5, pool, target, np.random.default_rng(seed))
        assert not set(negs.tolist()) & {0, 5, 9}
