"""
clustering.py — k-medoids (PAM) and agglomerative clustering over precomputed distances.

Every function takes a dense n×n distance matrix (the "distance accessor" for a
fixed alpha). Costs are squared distances throughout, so PAM minimizes exactly
the distortion it reports. All ties break toward the lowest index.
"""

from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage
from scipy.spatial.distance import squareform

from common import ClusteringError, log, write_csv, write_json

LINKAGES  = ("average", "complete")
PAM_INITS = ("build", "random")
SWAP_TOL  = 1e-12


@dataclass(frozen=True)
class Clustering:
    k: int
    assignment: np.ndarray
    medoids: tuple
    distortion: float
    alpha: float = 0.0
    method_tag: str = ""

    @property
    def n(self) -> int:
        return int(self.assignment.shape[0])

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == c)

    def partition(self) -> frozenset:
        """Label-free view for comparing clusterings."""
        return frozenset(frozenset(int(i) for i in self.members(c)) for c in range(self.k))

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)


def _check_k(k, n):
    if k < 1:
        raise ClusteringError(f"k must be >= 1, got {k}")
    if k > n:
        raise ClusteringError(f"k={k} exceeds the number of points n={n}")


# ─────────────────────────────────────────────
#  Centers & cost
# ─────────────────────────────────────────────
def clustroid(member_ids, dist) -> int:
    """Member with the lowest mean squared distance to the other members (ties → lowest id)."""
    members = np.sort(np.asarray(member_ids, dtype=int))
    if members.size == 0:
        raise ClusteringError("clustroid of an empty member list")
    sub = np.asarray(dist)[np.ix_(members, members)]
    return int(members[np.argmin((sub ** 2).sum(axis=1))])


def distortion(clustering: Clustering, dist) -> float:
    """Σ over points of squared distance to the point's cluster medoid."""
    centers = np.asarray(clustering.medoids, dtype=int)[clustering.assignment]
    d = np.asarray(dist)[np.arange(clustering.n), centers]
    return float((d ** 2).sum())


def clustering_from_assignment(assignment, dist, alpha: float = 0.0, method_tag: str = "") -> Clustering:
    """
    Canonical Clustering for a partition: clusters renumbered by lowest member,
    medoids backfilled as clustroids under dist, distortion recomputed.
    """
    raw = np.asarray(assignment)
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(first)
    labels = np.unique(raw)[order]
    remap = {int(lab): c for c, lab in enumerate(labels)}
    canon = np.array([remap[int(x)] for x in raw], dtype=int)
    k = len(labels)
    medoids = tuple(clustroid(np.flatnonzero(canon == c), dist) for c in range(k))
    tmp = Clustering(k, canon, medoids, 0.0, alpha, method_tag)
    return Clustering(k, canon, medoids, distortion(tmp, dist), alpha, method_tag)


def a_distortion(assignment, a_matrix) -> float:
    """Distortion of a partition in accuracy space, clustroids taken under the a-distance."""
    return clustering_from_assignment(assignment, a_matrix).distortion


# ─────────────────────────────────────────────
#  PAM
# ─────────────────────────────────────────────
def _assign(sq, medoids):
    """Nearest-medoid labels for sorted medoids; each medoid keeps its own cluster."""
    medoids = np.asarray(medoids, dtype=int)
    labels = np.argmin(sq[:, medoids], axis=1)
    labels[medoids] = np.arange(medoids.size)
    return labels


def _build(sq, k):
    n = sq.shape[0]
    first = int(np.argmin(sq.sum(axis=1)))
    medoids = [first]
    nearest = sq[:, first].copy()
    for _ in range(1, k):
        # gain of adding candidate h: Σ_i max(0, nearest_i − sq[i, h])
        gain = np.maximum(nearest[:, None] - sq, 0.0).sum(axis=0)
        gain[medoids] = -np.inf
        h = int(np.argmax(gain))
        medoids.append(h)
        nearest = np.minimum(nearest, sq[:, h])
    return medoids


def _best_swap(sq, medoids):
    """Return (delta, position, candidate) of the best single swap."""
    n = sq.shape[0]
    med = np.asarray(medoids, dtype=int)
    dm = sq[:, med]
    order = np.argsort(dm, axis=1, kind="stable")
    near = dm[np.arange(n), order[:, 0]]
    second = dm[np.arange(n), order[:, 1]] if med.size > 1 else np.full(n, np.inf)
    is_medoid = np.zeros(n, dtype=bool)
    is_medoid[med] = True

    best = (0.0, -1, -1)
    for pos in range(med.size):
        owned = order[:, 0] == pos
        # cost of every point if medoid `pos` is replaced by candidate h (columns)
        keep = np.where(owned, second, near)[:, None]
        new = np.minimum(keep, sq)
        delta = new.sum(axis=0) - near.sum()
        delta[is_medoid] = np.inf
        h = int(np.argmin(delta))
        if delta[h] < best[0]:
            best = (float(delta[h]), pos, h)
    return best


def k_medoids(dist, k: int, seed: int = 0, init: str = "build", max_swaps: int = 10_000,
              verbose: bool = False) -> Clustering:
    """
    PAM: greedy BUILD (or seeded random) initialization, then SWAP until no
    single medoid/non-medoid exchange lowers the summed squared distance.
    """
    dist = np.asarray(dist, dtype=float)
    n = dist.shape[0]
    _check_k(k, n)
    if init not in PAM_INITS:
        raise ClusteringError(f"unknown PAM init {init!r}")
    sq = dist ** 2

    if init == "build":
        medoids = _build(sq, k)
    else:
        medoids = list(np.random.default_rng(seed).choice(n, size=k, replace=False))

    current = float(sq[:, medoids].min(axis=1).sum())
    swaps, converged = 0, False
    while swaps < max_swaps:
        delta, pos, h = _best_swap(sq, sorted(medoids))
        if pos < 0 or delta >= -SWAP_TOL * max(1.0, current):
            converged = True
            break
        medoids = sorted(medoids)
        medoids[pos] = h
        current += delta
        swaps += 1
    if not converged:
        log("CLUS", f"pam k={k}: stopped at the {max_swaps}-swap limit; medoids may not be a local optimum")

    medoids = sorted(int(m) for m in medoids)
    labels = _assign(sq, medoids)
    tmp = Clustering(k, labels, tuple(medoids), 0.0, 0.0, "pam")
    result = Clustering(k, labels, tuple(medoids), distortion(tmp, dist), 0.0, "pam")
    if verbose:
        log("CLUS", f"pam k={k} ({init}): {swaps} swap(s), distortion={result.distortion:.6g}")
    return result


# ─────────────────────────────────────────────
#  Agglomerative
# ─────────────────────────────────────────────
def hierarchical_cluster(dist, k: int, method: str = "average", verbose: bool = False) -> Clustering:
    """Agglomerative merge down to exactly k clusters; medoids backfilled as clustroids."""
    dist = np.asarray(dist, dtype=float)
    n = dist.shape[0]
    _check_k(k, n)
    if method not in LINKAGES:
        raise ClusteringError(f"unknown linkage {method!r}; expected one of {LINKAGES}")
    if k == n:
        labels = np.arange(n)
    elif k == 1:
        labels = np.zeros(n, dtype=int)
    else:
        condensed = squareform(0.5 * (dist + dist.T), checks=False)
        tree = linkage(condensed, method=method)
        labels = cut_tree(tree, n_clusters=k).ravel()
    result = clustering_from_assignment(labels, dist, method_tag=f"hierarchical-{method}")
    if verbose:
        log("CLUS", f"{result.method_tag} k={k}: sizes {result.sizes().tolist()}")
    return result


# ─────────────────────────────────────────────
#  Variance & elbow
# ─────────────────────────────────────────────
def within_cluster_variance(clustering: Clustering, series) -> float:
    """Σ_clusters Σ_members ‖series − cluster mean series‖²."""
    x = np.asarray(series, dtype=float)
    if x.ndim != 2 or x.shape[0] != clustering.n:
        raise ClusteringError("series must be an n×L matrix of equal-length rows")
    total = 0.0
    for c in range(clustering.k):
        block = x[clustering.members(c)]
        total += float(((block - block.mean(axis=0)) ** 2).sum())
    return total


def elbow_k(distortions: dict) -> int:
    """k maximizing D(k−1) − 2·D(k) + D(k+1) over interior grid points (ties → smallest k)."""
    ks = sorted(int(k) for k in distortions)
    if len(ks) < 3:
        raise ClusteringError("elbow needs at least 3 grid points")
    if ks != list(range(ks[0], ks[-1] + 1)):
        raise ClusteringError(f"elbow needs a contiguous k grid, got {ks}")
    d = np.array([float(distortions[k]) for k in ks])
    if not np.isfinite(d).all():
        raise ClusteringError("elbow distortions must be finite")
    second = d[:-2] - 2 * d[1:-1] + d[2:]
    return ks[1 + int(np.argmax(second))]


# ─────────────────────────────────────────────
#  Export
# ─────────────────────────────────────────────
def write_clusters_csv(path, dataset, clustering: Clustering):
    rows = [(d.id, d.label, float(d.weight), int(clustering.assignment[d.id])) for d in dataset.demographics]
    return write_csv(path, ("id", "label", "weight", "cluster"), rows)


def clustering_to_dict(clustering: Clustering) -> dict:
    return {
        "k": clustering.k,
        "alpha": float(clustering.alpha),
        "method": clustering.method_tag,
        "medoids": [int(m) for m in clustering.medoids],
        "distortion": clustering.distortion,
        "assignment": [int(x) for x in clustering.assignment],
    }


def write_clustering_json(path, clustering: Clustering):
    return write_json(path, clustering_to_dict(clustering))
