"""Domain discovery and expert grouping.

Three pieces: seeded Lloyd k-means with k-means++ initialization over
token hidden states, Spearman rank correlation (fractional ranks for
ties) turned into a [0, 1] performance-similarity matrix, and bottom-up
agglomerative clustering of performance vectors under the minimum
increase in total error sum of squares. Every tie anywhere resolves
toward the lowest index so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_store
from .metrics import PerformanceMatrix


@dataclass
class DomainLabeling:
    labels: np.ndarray      # [N] in [0, k)
    centroids: np.ndarray   # [k, d]
    wcss: float
    iterations_run: int
    wcss_history: list[float] = field(default_factory=list)


@dataclass
class SimilarityMatrix:
    s: np.ndarray              # [c, c], symmetric, unit diagonal, entries in [0, 1]
    candidate_ids: np.ndarray  # [c] expert indices

    def __post_init__(self) -> None:
        self.s = np.asarray(self.s, dtype=np.float64)
        self.candidate_ids = np.asarray(self.candidate_ids, dtype=np.int64)
        c = self.candidate_ids.size
        if self.s.shape != (c, c):
            raise ValueError("similarity matrix shape does not match candidate count")


@dataclass
class ExpertPartition:
    """Disjoint grouping of candidate experts, plus the merge record."""

    groups: list[list[int]]
    merge_trace: list[tuple[tuple[int, ...], tuple[int, ...], float]]
    distance_diag: np.ndarray | None = None  # 1 - similarity, diagnostic only

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for group in self.groups:
            if not group:
                raise ValueError("partition contains an empty group")
            members = set(group)
            if members & seen:
                raise ValueError("partition groups overlap")
            seen |= members
        for _, _, cost in self.merge_trace:
            if cost < 0:
                raise ValueError("merge costs must be nonnegative")

    def member_set(self) -> set[int]:
        return {i for group in self.groups for i in group}


# ---------------------------------------------------------------------------
# k-means


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            pick = rng.choice(n, p=d2 / total)
        else:
            pick = int(rng.integers(n))  # all remaining points coincide
        centroids[j] = points[pick]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _assign_with_repair(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Assign points (ties to the lowest centroid index); reseed empty clusters
    at the point farthest from its assigned centroid until none are empty."""
    k = centroids.shape[0]
    for _ in range(k + 1):
        d2 = _sq_dists(points, centroids)
        labels = d2.argmin(axis=1)
        counts = np.bincount(labels, minlength=k)
        empties = np.flatnonzero(counts == 0)
        if empties.size == 0:
            return labels
        own = d2[np.arange(points.shape[0]), labels].copy()
        for j in empties:
            far = int(own.argmax())
            centroids[j] = points[far]
            own[far] = -1.0  # a second empty cluster must grab a different point
    raise ValueError("could not repair empty clusters; k exceeds distinct points")


def _group_means(points: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    for j in range(k):
        centroids[j] = points[labels == j].mean(axis=0)
    return centroids


def _wcss(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def _lloyd(pts: np.ndarray, k: int, max_iters: int, rng: np.random.Generator) -> DomainLabeling:
    centroids = _kmeanspp_init(pts, k, rng)
    labels = _assign_with_repair(pts, centroids)
    history = [_wcss(pts, labels, centroids)]
    iterations_run = 0
    for _ in range(max_iters):
        iterations_run += 1
        centroids = _group_means(pts, labels, k)
        new_labels = _assign_with_repair(pts, centroids)
        history.append(_wcss(pts, new_labels, centroids))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return DomainLabeling(
        labels=labels.astype(np.int32),
        centroids=centroids,
        wcss=_wcss(pts, labels, centroids),
        iterations_run=iterations_run,
        wcss_history=history,
    )


def kmeans(
    points: np.ndarray, k: int, seed: int, max_iters: int = 100, n_init: int = 1
) -> DomainLabeling:
    """Seeded Lloyd iterations from a k-means++ start.

    Stops when labels are unchanged or after max_iters centroid updates;
    the within-cluster sum of squares is recomputed from the returned
    labels and centroids. With n_init > 1 the whole procedure reruns
    from fresh draws of the same generator and the lowest-WCSS labeling
    wins (k-means++ can seed two centers inside one true cluster, which
    Lloyd cannot undo).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be a 2-D matrix")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain non-finite values")
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k {k} outside [1, {n}]")
    if max_iters < 1 or n_init < 1:
        raise ValueError("max_iters and n_init must be >= 1")

    rng = np.random.default_rng(seed)
    best: DomainLabeling | None = None
    for _ in range(n_init):
        candidate = _lloyd(pts, k, max_iters, rng)
        if best is None or candidate.wcss < best.wcss:
            best = candidate
    assert best is not None
    return best


# ---------------------------------------------------------------------------
# rank correlation


def fractional_ranks(values: np.ndarray) -> np.ndarray:
    """Ascending ranks starting at 1; tied values share their average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    start = 0
    while start < v.size:
        stop = start
        while stop + 1 < v.size and v[order[stop + 1]] == v[order[start]]:
            stop += 1
        ranks[order[start : stop + 1]] = 0.5 * (start + stop) + 1.0
        start = stop + 1
    return ranks


def spearman_rho(u: np.ndarray, v: np.ndarray) -> float:
    """Rank correlation of two equal-length vectors (K >= 2).

    Pearson correlation of fractional ranks; a constant vector has zero
    rank variance and maps to 0 by convention.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError("inputs must be 1-D vectors of equal length")
    if u.size < 2:
        raise ValueError("rank correlation needs at least 2 entries")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ValueError("inputs contain non-finite values")
    ru = fractional_ranks(u)
    rv = fractional_ranks(v)
    cu = ru - ru.mean()
    cv = rv - rv.mean()
    ss_u = float(np.dot(cu, cu))
    ss_v = float(np.dot(cv, cv))
    if ss_u == 0.0 or ss_v == 0.0:
        return 0.0
    rho = float(np.dot(cu, cv)) / np.sqrt(ss_u * ss_v)
    return float(min(1.0, max(-1.0, rho)))


def similarity_matrix(perf: PerformanceMatrix) -> SimilarityMatrix:
    """Pairwise (1 + rho)/2 over performance-vector rows; diagonal forced to 1.

    With a single domain column every row is constant, so the constant-
    vector convention (rho := 0) applies directly: all off-diagonal 0.5.
    """
    errors = perf.errors
    c, n_domains = errors.shape
    s = np.full((c, c), 0.5, dtype=np.float64)
    if n_domains >= 2:
        for i in range(c):
            for j in range(i + 1, c):
                rho = spearman_rho(errors[i], errors[j])
                s[i, j] = s[j, i] = min(1.0, max(0.0, 0.5 * (1.0 + rho)))
    np.fill_diagonal(s, 1.0)
    return SimilarityMatrix(s=s, candidate_ids=perf.candidate_ids.copy())


# ---------------------------------------------------------------------------
# agglomerative grouping


def ward_partition(
    perf: PerformanceMatrix, sim: SimilarityMatrix, target_groups: int
) -> ExpertPartition:
    """Merge candidate experts bottom-up until target_groups remain.

    Every expert starts as a singleton whose feature vector is its
    performance-matrix row. Each step merges the pair with the smallest
    increase in total error sum of squares,
    |a||b|/(|a|+|b|) * ||mean_a - mean_b||^2, ties resolved by the
    lexicographically smallest (min member of a, min member of b). The
    1 - similarity matrix rides along as a diagnostic only.
    """
    ids = [int(i) for i in sim.candidate_ids]
    if list(perf.candidate_ids) != ids:
        raise ValueError("performance matrix and similarity matrix disagree on candidates")
    c = len(ids)
    if not 1 <= target_groups <= c:
        raise ValueError(f"target_groups {target_groups} outside [1, {c}]")

    members: list[list[int]] = [[ids[i]] for i in range(c)]
    centroids: list[np.ndarray] = [perf.errors[i].astype(np.float64) for i in range(c)]
    order = sorted(range(c), key=lambda i: members[i][0])
    members = [members[i] for i in order]
    centroids = [centroids[i] for i in order]

    trace: list[tuple[tuple[int, ...], tuple[int, ...], float]] = []
    while len(members) > target_groups:
        best: tuple[float, int, int] | None = None
        best_pair = (-1, -1)
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                na, nb = len(members[a]), len(members[b])
                delta = centroids[a] - centroids[b]
                cost = (na * nb / (na + nb)) * float(np.dot(delta, delta))
                key = (cost, members[a][0], members[b][0])
                if best is None or key < best:
                    best = key
                    best_pair = (a, b)
        a, b = best_pair
        assert best is not None
        cost = best[0]
        na, nb = len(members[a]), len(members[b])
        merged = sorted(members[a] + members[b])
        centroid = (na * centroids[a] + nb * centroids[b]) / (na + nb)
        trace.append((tuple(members[a]), tuple(members[b]), cost))
        keep = [i for i in range(len(members)) if i not in (a, b)]
        members = [members[i] for i in keep] + [merged]
        centroids = [centroids[i] for i in keep] + [centroid]
        order = sorted(range(len(members)), key=lambda i: members[i][0])
        members = [members[i] for i in order]
        centroids = [centroids[i] for i in order]

    return ExpertPartition(
        groups=members,
        merge_trace=trace,
        distance_diag=1.0 - sim.s,
    )


# ---------------------------------------------------------------------------
# serialization


def save_labeling(labeling: DomainLabeling, path: str):
    return tensor_store.write_archive(
        path,
        [("labels", labeling.labels), ("centroids", labeling.centroids)],
        {
            "kind": "domain_labeling",
            "wcss": repr(labeling.wcss),
            "iterations_run": str(labeling.iterations_run),
        },
    )


def load_labeling(path: str) -> DomainLabeling:
    manifest, arrays = tensor_store.read_archive(path)
    if manifest.metadata.get("kind") != "domain_labeling":
        raise tensor_store.ArchiveError("archive does not hold a domain_labeling")
    return DomainLabeling(
        labels=arrays["labels"],
        centroids=arrays["centroids"].astype(np.float64),
        wcss=float(manifest.metadata["wcss"]),
        iterations_run=int(manifest.metadata["iterations_run"]),
    )


def encode_groups(groups: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Ragged encoding: offsets[i]..offsets[i+1] index members of group i."""
    offsets = np.zeros(len(groups) + 1, dtype=np.int32)
    flat: list[int] = []
    for i, group in enumerate(groups):
        flat.extend(group)
        offsets[i + 1] = len(flat)
    return offsets, np.asarray(flat, dtype=np.int32)


def decode_groups(offsets: np.ndarray, flat: np.ndarray) -> list[list[int]]:
    return [
        [int(x) for x in flat[offsets[i] : offsets[i + 1]]]
        for i in range(len(offsets) - 1)
    ]


def save_partition(partition: ExpertPartition, sim: SimilarityMatrix, path: str):
    offsets, flat = encode_groups(partition.groups)
    arrays: list[tuple[str, np.ndarray]] = [
        ("groups_offsets", offsets),
        ("groups_members", flat),
        ("similarity", sim.s),
        ("candidate_ids", sim.candidate_ids),
    ]
    if partition.distance_diag is not None:
        arrays.append(("distance_diag", partition.distance_diag))
    return tensor_store.write_archive(path, arrays, {"kind": "expert_partition"})


def load_partition(path: str) -> tuple[ExpertPartition, SimilarityMatrix]:
    manifest, arrays = tensor_store.read_archive(path)
    if manifest.metadata.get("kind") != "expert_partition":
        raise tensor_store.ArchiveError("archive does not hold an expert_partition")
    partition = ExpertPartition(
        groups=decode_groups(arrays["groups_offsets"], arrays["groups_members"]),
        merge_trace=[],  # the trace is not archived; groups and costs diagnostics are
        distance_diag=arrays.get("distance_diag", np.asarray([])).astype(np.float64)
        if "distance_diag" in arrays
        else None,
    )
    sim = SimilarityMatrix(
        s=arrays["similarity"].astype(np.float64),
        candidate_ids=arrays["candidate_ids"],
    )
    return partition, sim
