"""Per-domain user clustering and the cross-domain cluster-similarity solver.

Users are clustered domain by domain with the symmetric normalized graph
Laplacian over a cosine kNN graph.  For each (source, target) pair a small
nonnegative cluster-to-cluster weight matrix Y is fitted to the binary user
overlap by proximal gradient descent: least-squares fit plus a soft
orthogonality penalty, a row-sparsity (L2,1) proximal step, and projection
onto the nonnegative orthant.  The item-level transfer weights Q average Y
over each item's raters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from sklearn.cluster import KMeans
from sklearn.metrics.pairwise import cosine_similarity

from .data import OverlapMatrix, RatingMatrix
from .errors import ConfigError, DivergenceError, ValidationError


@dataclass(frozen=True)
class ClusterAssignment:
    """Cluster index per user for one domain."""

    domain_id: str
    n_clusters: int
    assignment: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.assignment, dtype=np.int64)
        if arr.ndim != 1:
            raise ValidationError("assignment must be a 1-d vector")
        if arr.size and (arr.min() < 0 or arr.max() >= self.n_clusters):
            raise ValidationError("cluster index out of range")
        arr.setflags(write=False)
        object.__setattr__(self, "assignment", arr)

    @property
    def n_users(self) -> int:
        return int(self.assignment.size)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_clusters)


@dataclass(frozen=True)
class ClusterSimilarity:
    """Solved cluster-to-cluster weights between one source and the target.

    ``constraint_residuals`` is (nonnegativity violation, ||Y'Y - I||_F); the
    first is exactly 0.0 after projection, the second reports how far the
    soft orthogonality penalty got.  ``objective_trace`` holds the penalized
    objective at initialization and after each accepted step.
    """

    matrix: np.ndarray
    lam: float
    constraint_residuals: tuple[float, float]
    n_iters: int
    converged: bool
    objective_trace: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        for name in ("matrix", "objective_trace"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class SourceWeights:
    """Item-by-target-user transfer weights for one source domain."""

    source_domain: str
    matrix: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.matrix, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "matrix", arr)


@dataclass(frozen=True)
class CoclusterConfig:
    """Hyperparameters for user clustering and the Y solver."""

    c_p: int = 20
    c_t: int = 20
    knn_k: int = 10
    lam: float = 0.01
    ortho_penalty: float = 1.0
    step_size: float = 1e-2
    max_iters: int = 500
    tol: float = 1e-6
    seed: int = 0
    l21_axis: str = "rows"

    def __post_init__(self) -> None:
        if min(self.c_p, self.c_t, self.knn_k, self.max_iters) < 1:
            raise ConfigError("counts must be positive")
        if self.tol <= 0 or self.step_size <= 0:
            raise ConfigError("tol and step_size must be positive")
        if self.lam < 0 or self.ortho_penalty < 0:
            raise ConfigError("penalties must be nonnegative")
        if self.l21_axis not in ("rows", "columns"):
            raise ConfigError("l21_axis must be 'rows' or 'columns'")


def build_user_similarity(ratings: RatingMatrix, knn_k: int) -> sp.csr_matrix:
    """Cosine kNN graph over rating rows, union rule, symmetrized by max.

    An edge survives if either endpoint lists the other among its knn_k most
    similar users.  Users with empty rating rows become isolated vertices.
    """
    if ratings.n_entries == 0:
        raise ValidationError("cannot build a similarity graph from an empty matrix")
    sim = cosine_similarity(ratings.to_csr())
    np.fill_diagonal(sim, 0.0)
    n = sim.shape[0]
    k = min(knn_k, n - 1)
    keep = np.zeros_like(sim, dtype=bool)
    if k > 0:
        top = np.argpartition(-sim, kth=k - 1, axis=1)[:, :k]
        np.put_along_axis(keep, top, True, axis=1)
    keep |= keep.T
    w = np.where(keep, sim, 0.0)
    w = np.maximum(w, w.T)
    return sp.csr_matrix(w)


def spectral_cluster(
    weights: sp.spmatrix | np.ndarray, c: int, seed: int, domain_id: str = ""
) -> ClusterAssignment:
    """Cluster graph vertices via the symmetric normalized Laplacian.

    Takes the c eigenvectors with smallest eigenvalues, normalizes the rows
    to unit length, and runs seeded k-means++ on them.
    """
    w = np.asarray(weights.todense() if sp.issparse(weights) else weights, dtype=np.float64)
    n = w.shape[0]
    if c > n:
        raise ConfigError(f"requested {c} clusters for {n} vertices")
    degrees = w.sum(axis=1)
    inv_sqrt = np.zeros(n)
    positive = degrees > 0
    inv_sqrt[positive] = 1.0 / np.sqrt(degrees[positive])
    lap = np.eye(n) - inv_sqrt[:, None] * w * inv_sqrt[None, :]
    lap = 0.5 * (lap + lap.T)
    _, vectors = scipy.linalg.eigh(lap, subset_by_index=[0, c - 1])
    norms = np.linalg.norm(vectors, axis=1)
    norms[norms == 0] = 1.0
    embedding = vectors / norms[:, None]
    labels = KMeans(n_clusters=c, init="k-means++", n_init=10, random_state=seed).fit_predict(
        embedding
    )
    return ClusterAssignment(domain_id=domain_id, n_clusters=c, assignment=labels)


def _crosstab(
    overlap: OverlapMatrix, assign_p: ClusterAssignment, assign_t: ClusterAssignment
) -> np.ndarray:
    """Count overlap pairs per (source cluster, target cluster) cell."""
    counts = np.zeros((assign_p.n_clusters, assign_t.n_clusters))
    np.add.at(
        counts,
        (
            assign_p.assignment[overlap.source_users],
            assign_t.assignment[overlap.target_users],
        ),
        1.0,
    )
    return counts


def _l21(matrix: np.ndarray, axis: str) -> float:
    ax = 1 if axis == "rows" else 0
    return float(np.linalg.norm(matrix, axis=ax).sum())


def cocluster_objective(
    matrix: np.ndarray,
    overlap: OverlapMatrix,
    assign_p: ClusterAssignment,
    assign_t: ClusterAssignment,
    lam: float,
    l21_axis: str = "rows",
) -> float:
    """Fit error ||O - C_p Y C_t'||_F^2 plus lam times the L2,1 norm of Y.

    Evaluated through per-cell counts, which is exact: each (source user,
    target user) pair contributes through its cluster cell only.
    """
    y = np.asarray(matrix, dtype=np.float64)
    if y.shape != (assign_p.n_clusters, assign_t.n_clusters):
        raise ValidationError("Y shape does not match the cluster counts")
    pair_counts = _crosstab(overlap, assign_p, assign_t)
    cell_sizes = np.outer(assign_p.sizes(), assign_t.sizes()).astype(np.float64)
    fit = overlap.n_pairs - 2.0 * np.sum(pair_counts * y) + np.sum(cell_sizes * y * y)
    return float(fit + lam * _l21(y, l21_axis))


def _shrink(matrix: np.ndarray, threshold: float, axis: str) -> np.ndarray:
    """Group-soft-threshold rows (or columns) by their Euclidean norm."""
    ax = 1 if axis == "rows" else 0
    norms = np.linalg.norm(matrix, axis=ax, keepdims=True)
    scale = np.zeros_like(norms)
    np.divide(np.maximum(norms - threshold, 0.0), norms, out=scale, where=norms > 0)
    return matrix * scale


def solve_cocluster(
    overlap: OverlapMatrix,
    assign_p: ClusterAssignment,
    assign_t: ClusterAssignment,
    config: CoclusterConfig,
) -> ClusterSimilarity:
    """Fit Y by monotone proximal gradient descent.

    Each iteration takes a gradient step on the smooth part (fit error plus
    the soft orthogonality penalty mu*||Y'Y - I||_F^2), applies the L2,1
    shrinkage with threshold step*lam, and clamps negatives to zero.  The
    step is halved until the full penalized objective does not increase, so
    the objective trace is non-increasing; convergence is declared when its
    relative change drops below tol.
    """
    mu = config.ortho_penalty
    lam = config.lam
    pair_counts = _crosstab(overlap, assign_p, assign_t)
    cell_sizes = np.outer(assign_p.sizes(), assign_t.sizes()).astype(np.float64)
    eye = np.eye(assign_t.n_clusters)

    def smooth(y: np.ndarray) -> float:
        fit = overlap.n_pairs - 2.0 * np.sum(pair_counts * y) + np.sum(cell_sizes * y * y)
        gram = y.T @ y
        return float(fit + mu * np.sum((gram - eye) ** 2))

    def grad(y: np.ndarray) -> np.ndarray:
        return 2.0 * (cell_sizes * y - pair_counts) + 4.0 * mu * (y @ (y.T @ y - eye))

    def total(y: np.ndarray) -> float:
        return smooth(y) + lam * _l21(y, config.l21_axis)

    # Normalized closed form of the fit term; empty clusters get zero rows
    # (the pseudo-inverse convention).
    y = np.divide(
        pair_counts, cell_sizes, out=np.zeros_like(pair_counts), where=cell_sizes > 0
    )
    y = np.maximum(y, 0.0)

    trace = [total(y)]
    converged = False
    step = config.step_size
    for _ in range(config.max_iters):
        g = grad(y)
        accepted = None
        trial = step
        while trial > 1e-15 * config.step_size:
            candidate = np.maximum(_shrink(y - trial * g, trial * lam, config.l21_axis), 0.0)
            value = total(candidate)
            if not np.isfinite(value):
                raise DivergenceError(
                    "co-cluster objective became non-finite; lower step_size"
                )
            if value <= trace[-1] + 1e-12:
                accepted = (candidate, value)
                break
            trial /= 2.0
        if accepted is None:
            converged = True
            break
        y, value = accepted
        step = min(trial * 2.0, config.step_size)
        trace.append(value)
        previous = trace[-2]
        if abs(previous - value) <= config.tol * max(1.0, abs(previous)):
            converged = True
            break

    ortho_residual = float(np.linalg.norm(y.T @ y - eye))
    return ClusterSimilarity(
        matrix=y,
        lam=lam,
        constraint_residuals=(float(max(0.0, -(y.min() if y.size else 0.0))), ortho_residual),
        n_iters=len(trace) - 1,
        converged=converged,
        objective_trace=np.asarray(trace),
    )


def compute_q(
    similarity: ClusterSimilarity,
    assign_p: ClusterAssignment,
    assign_t: ClusterAssignment,
    source: RatingMatrix,
) -> SourceWeights:
    """Item-level transfer weights: mean of Y over each item's raters.

    Q[h, u] averages Y[cluster(k), cluster(u)] over the source users k who
    rated item h; items nobody rated get a zero row.
    """
    y = similarity.matrix
    if y.shape != (assign_p.n_clusters, assign_t.n_clusters):
        raise ValidationError("Y shape does not match the cluster counts")
    if assign_p.n_users != source.n_users:
        raise ValidationError("source assignment does not cover the rating matrix")
    rater_clusters = np.zeros((source.n_items, assign_p.n_clusters))
    np.add.at(rater_clusters, (source.items, assign_p.assignment[source.users]), 1.0)
    raters = rater_clusters.sum(axis=1, keepdims=True)
    shares = np.divide(
        rater_clusters, raters, out=np.zeros_like(rater_clusters), where=raters > 0
    )
    q = (shares @ y)[:, assign_t.assignment]
    return SourceWeights(source_domain=source.domain_id, matrix=q)


def save_assignment(path: str | Path, assignment: ClusterAssignment) -> None:
    """Write ``user_index,cluster`` rows with a one-line header."""
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["user_index", "cluster"])
        for u, g in enumerate(assignment.assignment.tolist()):
            writer.writerow([u, g])


def load_assignment(
    path: str | Path, domain_id: str, n_clusters: int | None = None
) -> ClusterAssignment:
    """Read an assignment CSV written by :func:`save_assignment`."""
    rows: list[int] = []
    with Path(path).open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        next(reader, None)
        for row in reader:
            if row:
                rows.append(int(row[1]))
    arr = np.asarray(rows, dtype=np.int64)
    if n_clusters is None:
        n_clusters = int(arr.max()) + 1 if arr.size else 0
    return ClusterAssignment(domain_id=domain_id, n_clusters=n_clusters, assignment=arr)


def save_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Write a dense matrix as full-precision CSV."""
    np.savetxt(path, np.asarray(matrix), delimiter=",", fmt="%.17g")


def load_matrix(path: str | Path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", ndmin=2))
