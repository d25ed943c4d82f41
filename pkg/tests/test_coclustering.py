import numpy as np
import pytest

from cdtrec.coclustering import (
    ClusterAssignment,
    CoclusterConfig,
    build_user_similarity,
    cocluster_objective,
    compute_q,
    load_assignment,
    load_matrix,
    save_assignment,
    save_matrix,
    solve_cocluster,
    spectral_cluster,
)
from cdtrec.data import OverlapMatrix, RatingMatrix
from cdtrec.errors import ConfigError


def matrix_from_dense(dense, domain_id="d"):
    dense = np.asarray(dense, dtype=float)
    users, items = np.nonzero(dense)
    return RatingMatrix(
        domain_id=domain_id,
        n_users=dense.shape[0],
        n_items=dense.shape[1],
        users=users,
        items=items,
        ratings=dense[users, items],
    )


def identity_assignment(n, domain_id="d"):
    return ClusterAssignment(domain_id=domain_id, n_clusters=n, assignment=np.arange(n))


def dense_objective(y, overlap, assign_p, assign_t, lam):
    """Brute-force reference: materialize O and the indicator matrices."""
    o = np.zeros((assign_p.n_users, assign_t.n_users))
    o[overlap.source_users, overlap.target_users] = 1.0
    cp = np.zeros((assign_p.n_users, assign_p.n_clusters))
    cp[np.arange(assign_p.n_users), assign_p.assignment] = 1.0
    ct = np.zeros((assign_t.n_users, assign_t.n_clusters))
    ct[np.arange(assign_t.n_users), assign_t.assignment] = 1.0
    fit = np.sum((o - cp @ y @ ct.T) ** 2)
    return fit + lam * np.linalg.norm(y, axis=1).sum()


class TestUserSimilarity:
    def test_identical_rows_have_similarity_one(self):
        mat = matrix_from_dense([[1, 2, 0], [1, 2, 0], [0, 0, 3]])
        w = build_user_similarity(mat, knn_k=2).toarray()
        assert w[0, 1] == pytest.approx(1.0)

    def test_orthogonal_rows_have_similarity_zero(self):
        mat = matrix_from_dense([[1, 0], [0, 1]])
        w = build_user_similarity(mat, knn_k=1).toarray()
        assert w[0, 1] == 0.0

    def test_symmetric_zero_diagonal(self):
        rng = np.random.default_rng(0)
        dense = rng.random((12, 6)) * (rng.random((12, 6)) < 0.5)
        dense[3] = 0.0  # isolated user
        w = build_user_similarity(matrix_from_dense(dense), knn_k=3).toarray()
        assert np.array_equal(w, w.T)
        assert np.all(np.diag(w) == 0.0)
        assert np.all(w[3] == 0.0)

    def test_union_rule_keeps_asymmetric_neighbors(self):
        # Vertex 0's top neighbor may not reciprocate; the edge must survive.
        dense = [[5, 1, 0], [5, 0, 1], [5, 0, 2], [5, 0, 3]]
        w = build_user_similarity(matrix_from_dense(dense), knn_k=1).toarray()
        assert np.count_nonzero(w) > 0
        assert np.array_equal(w, w.T)


class TestSpectralCluster:
    def block_graph(self, sizes, seed=0):
        rng = np.random.default_rng(seed)
        n = sum(sizes)
        w = np.zeros((n, n))
        start = 0
        labels = np.zeros(n, dtype=int)
        for b, size in enumerate(sizes):
            block = slice(start, start + size)
            vals = rng.random((size, size)) * 0.5 + 0.5
            w[block, block] = np.maximum(vals, vals.T)
            labels[block] = b
            start += size
        np.fill_diagonal(w, 0.0)
        return w, labels

    @staticmethod
    def same_partition(a, b):
        mapping = {}
        for x, y in zip(a.tolist(), b.tolist()):
            if mapping.setdefault(x, y) != y:
                return False
        return len(set(mapping.values())) == len(mapping)

    def test_disconnected_blocks_recovered(self):
        w, labels = self.block_graph([6, 9])
        result = spectral_cluster(w, c=2, seed=0)
        assert self.same_partition(labels, result.assignment)

    def test_three_components_recovered(self):
        w, labels = self.block_graph([5, 7, 4], seed=3)
        result = spectral_cluster(w, c=3, seed=1)
        assert self.same_partition(labels, result.assignment)

    def test_permutation_equivariance(self):
        w, labels = self.block_graph([6, 9], seed=5)
        rng = np.random.default_rng(11)
        perm = rng.permutation(w.shape[0])
        permuted = spectral_cluster(w[np.ix_(perm, perm)], c=2, seed=0)
        assert self.same_partition(labels[perm], permuted.assignment)

    def test_deterministic_per_seed(self):
        w, _ = self.block_graph([6, 9], seed=7)
        a = spectral_cluster(w, c=2, seed=4)
        b = spectral_cluster(w, c=2, seed=4)
        assert np.array_equal(a.assignment, b.assignment)

    def test_too_many_clusters_rejected(self):
        w, _ = self.block_graph([3, 3])
        with pytest.raises(ConfigError):
            spectral_cluster(w, c=7, seed=0)


class TestObjective:
    def test_zero_matrix_gives_pair_count(self):
        overlap = OverlapMatrix("s", source_users=[0, 1, 2], target_users=[0, 1, 2])
        assign = identity_assignment(3)
        y = np.zeros((3, 3))
        assert cocluster_objective(y, overlap, assign, assign, lam=5.0) == 3.0

    def test_exact_fit_is_zero(self):
        overlap = OverlapMatrix("s", source_users=[0, 2], target_users=[1, 0])
        assign = identity_assignment(3)
        y = np.zeros((3, 3))
        y[0, 1] = 1.0
        y[2, 0] = 1.0
        assert cocluster_objective(y, overlap, assign, assign, lam=0.0) == 0.0

    def test_one_by_one_arithmetic(self):
        overlap = OverlapMatrix("s", source_users=[0], target_users=[0])
        assign = identity_assignment(1)
        y = np.array([[0.5]])
        value = cocluster_objective(y, overlap, assign, assign, lam=2.0)
        assert value == pytest.approx(1.25)

    def test_matches_dense_oracle_on_random_instances(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            n_p, n_t = rng.integers(4, 12, size=2)
            c_p, c_t = rng.integers(2, 5, size=2)
            assign_p = ClusterAssignment("p", int(c_p), rng.integers(0, c_p, size=n_p))
            assign_t = ClusterAssignment("t", int(c_t), rng.integers(0, c_t, size=n_t))
            n_pairs = int(rng.integers(1, n_p * n_t // 2 + 2))
            flat = rng.choice(n_p * n_t, size=n_pairs, replace=False)
            overlap = OverlapMatrix("p", flat // n_t, flat % n_t)
            y = rng.random((c_p, c_t))
            lam = float(rng.random())
            fast = cocluster_objective(y, overlap, assign_p, assign_t, lam)
            slow = dense_objective(y, overlap, assign_p, assign_t, lam)
            assert fast == pytest.approx(slow, abs=1e-9)


class TestSolver:
    def test_identity_instance_recovers_identity(self):
        n = 4
        overlap = OverlapMatrix("s", np.arange(n), np.arange(n))
        assign = identity_assignment(n)
        config = CoclusterConfig(c_p=n, c_t=n, lam=0.0, ortho_penalty=1e-4)
        result = solve_cocluster(overlap, assign, assign, config)
        assert np.max(np.abs(result.matrix - np.eye(n))) < 1e-3
        assert result.constraint_residuals[1] < 1e-3

    def test_huge_sparsity_drives_to_zero(self):
        rng = np.random.default_rng(0)
        assign_p = ClusterAssignment("p", 3, rng.integers(0, 3, size=15))
        assign_t = ClusterAssignment("t", 3, rng.integers(0, 3, size=12))
        flat = rng.choice(15 * 12, size=20, replace=False)
        overlap = OverlapMatrix("p", flat // 12, flat % 12)
        config = CoclusterConfig(c_p=3, c_t=3, lam=1e6, ortho_penalty=0.0)
        result = solve_cocluster(overlap, assign_p, assign_t, config)
        assert np.all(result.matrix == 0.0)

    def random_instance(self, seed):
        rng = np.random.default_rng(seed)
        assign_p = ClusterAssignment("p", 3, rng.integers(0, 3, size=20))
        assign_t = ClusterAssignment("t", 3, rng.integers(0, 3, size=18))
        flat = rng.choice(20 * 18, size=30, replace=False)
        overlap = OverlapMatrix("p", flat // 18, flat % 18)
        return overlap, assign_p, assign_t

    def test_objective_never_exceeds_initialization(self):
        for seed in range(5):
            overlap, assign_p, assign_t = self.random_instance(seed)
            config = CoclusterConfig(c_p=3, c_t=3, lam=0.5, ortho_penalty=2.0)
            result = solve_cocluster(overlap, assign_p, assign_t, config)
            final = cocluster_objective(
                result.matrix, overlap, assign_p, assign_t, config.lam
            ) + config.ortho_penalty * np.sum(
                (result.matrix.T @ result.matrix - np.eye(3)) ** 2
            )
            assert final <= result.objective_trace[0] + 1e-9

    def test_trace_non_increasing(self):
        overlap, assign_p, assign_t = self.random_instance(7)
        config = CoclusterConfig(c_p=3, c_t=3, lam=0.3, ortho_penalty=1.0)
        result = solve_cocluster(overlap, assign_p, assign_t, config)
        diffs = np.diff(result.objective_trace)
        assert np.all(diffs <= 1e-8)

    def test_solution_exactly_nonnegative(self):
        overlap, assign_p, assign_t = self.random_instance(11)
        config = CoclusterConfig(c_p=3, c_t=3, lam=0.1, ortho_penalty=5.0)
        result = solve_cocluster(overlap, assign_p, assign_t, config)
        assert result.matrix.min() >= 0.0
        assert result.constraint_residuals[0] == 0.0


class TestComputeQ:
    def make_similarity(self, y):
        from cdtrec.coclustering import ClusterSimilarity

        return ClusterSimilarity(
            matrix=y,
            lam=0.0,
            constraint_residuals=(0.0, 0.0),
            n_iters=0,
            converged=True,
            objective_trace=np.array([0.0]),
        )

    def test_singleton_mean(self):
        y = np.array([[0.7, 0.1], [0.4, 0.8]])
        assign_p = ClusterAssignment("p", 2, [0, 1, 1])
        assign_t = ClusterAssignment("t", 2, [0, 1])
        source = matrix_from_dense([[4, 0], [0, 0], [0, 0]], domain_id="p")
        q = compute_q(self.make_similarity(y), assign_p, assign_t, source)
        assert q.matrix[0, 0] == pytest.approx(0.7)
        assert q.matrix[0, 1] == pytest.approx(0.1)

    def test_mean_of_two_raters(self):
        y = np.array([[0.4], [0.8]])
        assign_p = ClusterAssignment("p", 2, [0, 1])
        assign_t = ClusterAssignment("t", 1, [0])
        source = matrix_from_dense([[3], [5]], domain_id="p")
        q = compute_q(self.make_similarity(y), assign_p, assign_t, source)
        assert q.matrix[0, 0] == pytest.approx(0.6)

    def test_unrated_item_row_is_zero(self):
        y = np.array([[0.9]])
        assign_p = ClusterAssignment("p", 1, [0])
        assign_t = ClusterAssignment("t", 1, [0, 0])
        source = matrix_from_dense([[2, 0]], domain_id="p")
        q = compute_q(self.make_similarity(y), assign_p, assign_t, source)
        assert np.all(q.matrix[1] == 0.0)

    def test_rated_rows_within_y_range(self):
        rng = np.random.default_rng(5)
        y = rng.random((3, 4))
        assign_p = ClusterAssignment("p", 3, rng.integers(0, 3, size=10))
        assign_t = ClusterAssignment("t", 4, rng.integers(0, 4, size=8))
        dense = (rng.random((10, 6)) < 0.4) * rng.integers(1, 6, size=(10, 6))
        source = matrix_from_dense(dense, domain_id="p")
        q = compute_q(self.make_similarity(y), assign_p, assign_t, source)
        rated = np.flatnonzero(np.diff(source.to_csr().tocsc().indptr) > 0)
        rated_items = np.unique(source.items)
        assert np.all(q.matrix[rated_items] >= y.min() - 1e-12)
        assert np.all(q.matrix[rated_items] <= y.max() + 1e-12)


class TestPersistence:
    def test_assignment_roundtrip(self, tmp_path):
        assign = ClusterAssignment("d", 4, [0, 3, 1, 1, 2])
        path = tmp_path / "assign.csv"
        save_assignment(path, assign)
        loaded = load_assignment(path, "d", n_clusters=4)
        assert np.array_equal(loaded.assignment, assign.assignment)

    def test_matrix_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        y = rng.random((3, 5))
        path = tmp_path / "y.csv"
        save_matrix(path, y)
        assert np.array_equal(load_matrix(path), y)
