"""
evolve.py — multi-objective clustering: combined-distance sweep,
lexicographic two-stage clustering and an evolutionary Pareto search.

Genomes use the locus-based adjacency representation: links[i] = j draws an
edge i — j, and a partition is the connected components of those edges. Any
integer vector in 0..n-1 decodes, so crossover and mutation never need repair.
"""

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.neighbors import NearestNeighbors

from clustering import (Clustering, clustering_from_assignment, clustering_to_dict,
                        elbow_k, hierarchical_cluster, within_cluster_variance)
from common import ClusteringError, log, write_csv, write_json
from explain_tree import DEFAULT_DEPTH, per_cluster_trees, weighted_average_f1

ORDERS           = ("ts-then-feature", "feature-then-ts")
DEFAULT_ALPHAS   = (0.25, 0.5, 0.75)
NEIGHBORS        = 10
POPULATION       = 20
GENERATIONS      = 30
MUTATION_RATE    = 0.05
SEED_K_RANGE     = (2, 11)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# ─────────────────────────────────────────────
#  Genome
# ─────────────────────────────────────────────
@dataclass(eq=False)
class Genome:
    links: np.ndarray
    fitness: tuple = None     # (within-cluster variance, weighted F1)

    @property
    def n(self) -> int:
        return int(self.links.shape[0])

    def digest(self) -> str:
        return hashlib.sha1(np.asarray(self.links, dtype=np.int64).tobytes()).hexdigest()


def encode(clustering: Clustering, a_matrix) -> Genome:
    """
    Prim's MST inside every cluster, grown from its lowest id. Edge
    (tree node i → new node j) is stored in slot i if that slot is still
    free, otherwise in slot j.
    """
    a = np.asarray(a_matrix, dtype=float)
    links = np.arange(clustering.n)
    for c in range(clustering.k):
        members = np.sort(clustering.members(c))
        if members.size < 2:
            continue
        sub = a[np.ix_(members, members)]
        in_tree = np.zeros(members.size, dtype=bool)
        in_tree[0] = True
        best = sub[0].copy()
        source = np.zeros(members.size, dtype=int)
        for _ in range(members.size - 1):
            cand = np.where(in_tree, np.inf, best)
            j = int(np.argmin(cand))
            i = int(source[j])
            gi, gj = int(members[i]), int(members[j])
            if links[gi] == gi:
                links[gi] = gj
            else:
                links[gj] = gi
            in_tree[j] = True
            closer = sub[j] < best
            best = np.where(closer, sub[j], best)
            source = np.where(closer, j, source)
    return Genome(links)


def decode(genome: Genome, dist=None) -> Clustering:
    """Connected components of {i — links[i]}; medoids are clustroids under dist."""
    links = np.asarray(genome.links, dtype=int)
    n = links.shape[0]
    if ((links < 0) | (links >= n)).any():
        raise ClusteringError("genome links must lie in 0..n-1")
    rows = np.arange(n)
    mask = rows != links
    graph = coo_matrix((np.ones(int(mask.sum())), (rows[mask], links[mask])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    if dist is None:
        dist = np.zeros((n, n))
    return clustering_from_assignment(labels, dist, method_tag="genome")


def crossover(parent_a: Genome, parent_b: Genome, seed=0) -> Genome:
    """⌊n/2⌋ positions chosen uniformly take parent_a's links, the rest parent_b's."""
    if parent_a.n != parent_b.n:
        raise ClusteringError(f"crossover of genomes with lengths {parent_a.n} and {parent_b.n}")
    rng = _rng(seed)
    mask = rng.choice(parent_a.n, size=parent_a.n // 2, replace=False)
    child = np.array(parent_b.links, copy=True)
    child[mask] = parent_a.links[mask]
    return Genome(child)


def mutate(genome: Genome, rate: float, neighbors, seed=0) -> Genome:
    """Each position, with probability rate, jumps to a random neighbor of its current target."""
    rng = _rng(seed)
    links = np.array(genome.links, copy=True)
    for i in np.flatnonzero(rng.random(links.shape[0]) < rate):
        pool = neighbors[int(links[i])]
        if len(pool):
            links[i] = pool[int(rng.integers(len(pool)))]
    return Genome(links)


def neighbor_lists(ctx, m: int = NEIGHBORS) -> list:
    """Per node: union of its m nearest by a-distance and m nearest by e-distance."""
    m = min(int(m), ctx.n - 1)
    if m < 1:
        return [np.array([], dtype=int) for _ in range(ctx.n)]
    near = [set() for _ in range(ctx.n)]
    for matrix in (ctx.a_matrix, ctx.e_matrix):
        # kneighbors() without a query leaves each point out of its own list
        index = NearestNeighbors(n_neighbors=m, metric="precomputed").fit(matrix)
        for i, row in enumerate(index.kneighbors(return_distance=False)):
            near[i].update(int(x) for x in row)
    return [np.array(sorted(s), dtype=int) for s in near]


# ─────────────────────────────────────────────
#  Pareto front
# ─────────────────────────────────────────────
def pareto_dominates(a, b) -> bool:
    """a = (variance, f1) dominates b: no worse in both, strictly better in one."""
    return (a[0] <= b[0] and a[1] >= b[1]) and (a[0] < b[0] or a[1] > b[1])


@dataclass
class FrontMember:
    genome: Genome
    clustering: Clustering
    variance: float
    f1: float

    @property
    def point(self) -> tuple:
        return self.variance, self.f1


class ParetoFront:
    def __init__(self, members, evaluated=None):
        self.members = sorted(members, key=lambda m: (m.variance, -m.f1, m.genome.digest()))
        self.evaluated = list(evaluated) if evaluated is not None else list(self.members)

    @classmethod
    def from_candidates(cls, candidates) -> "ParetoFront":
        candidates = list(candidates)
        front = [c for c in candidates
                 if not any(pareto_dominates(o.point, c.point) for o in candidates if o is not c)]
        return cls(front, candidates)

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def closest_to_utopia(self) -> FrontMember:
        """Member nearest (0 variance, F1 1) with variance scaled by the front's maximum."""
        if not self.members:
            raise ClusteringError("empty Pareto front")
        vmax = max(m.variance for m in self.members) or 1.0
        scores = [np.hypot(m.variance / vmax, 1.0 - m.f1) for m in self.members]
        return self.members[int(np.argmin(scores))]


# ─────────────────────────────────────────────
#  Evolutionary search
# ─────────────────────────────────────────────
def _seed_clustering(dist, k_range, linkage):
    n = dist.shape[0]
    ks = list(range(max(1, k_range[0]), min(k_range[1], n) + 1))
    if len(ks) < 3:
        return hierarchical_cluster(dist, ks[len(ks) // 2], linkage)
    runs = {k: hierarchical_cluster(dist, k, linkage) for k in ks}
    return runs[elbow_k({k: c.distortion for k, c in runs.items()})]


class _Fitness:
    """Partition-keyed fitness cache shared by one evolutionary run."""

    def __init__(self, dataset, ctx, max_depth):
        self.dataset = dataset
        self.ctx = ctx
        self.max_depth = max_depth
        self.series = dataset.series_matrix
        self.members = {}

    def score(self, genome: Genome) -> FrontMember:
        clustering = decode(genome, self.ctx.a_matrix)
        known = self.members.get(clustering.partition())
        if known is not None:
            variance, f1 = known.point
        else:
            variance = within_cluster_variance(clustering, self.series)
            trees = per_cluster_trees(self.dataset, clustering, self.max_depth, verbose=False)
            f1 = weighted_average_f1(trees, clustering, self.dataset.weights)
        genome.fitness = (variance, f1)
        return FrontMember(genome, clustering, variance, f1)

    def add(self, member: FrontMember):
        # first genome to reach a partition represents it
        self.members.setdefault(member.clustering.partition(), member)


def evolve_pareto(dataset, ctx, generations: int = GENERATIONS, population: int = POPULATION,
                  rate: float = MUTATION_RATE, seed: int = 0, k_range=SEED_K_RANGE,
                  linkage: str = "average", max_depth: int = DEFAULT_DEPTH,
                  neighbors: int = NEIGHBORS, workers: int = 1) -> ParetoFront:
    """
    Start from hierarchical clusterings on the a- and e-distances, then breed
    `population` children per generation by crossover of two random parents
    from the previous generation followed by mutation. Returns the
    non-dominated set over every distinct partition ever evaluated.
    """
    if population < 2:
        raise ClusteringError(f"population must be >= 2, got {population}")
    if generations < 0:
        raise ClusteringError(f"generations must be >= 0, got {generations}")
    if not 0.0 <= rate <= 1.0:
        raise ClusteringError(f"mutation rate must be in [0, 1], got {rate}")

    fitness = _Fitness(dataset, ctx, max_depth)
    pools = neighbor_lists(ctx, neighbors)
    seeds = [encode(_seed_clustering(matrix, k_range, linkage), ctx.a_matrix)
             for matrix in (ctx.a_matrix, ctx.e_matrix)]
    for g in seeds:
        fitness.add(fitness.score(g))
    parents = seeds

    workers = max(1, int(workers or 1))
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for gen in range(1, generations + 1):
            children = []
            for idx in range(population):
                rng = np.random.default_rng([seed, gen, idx])
                a, b = rng.choice(len(parents), size=2, replace=False)
                child = crossover(parents[a], parents[b], rng)
                children.append(mutate(child, rate, pools, rng))
            scored = pool.map(fitness.score, children) if pool is not None else map(fitness.score, children)
            # registered in child order so results do not depend on thread timing
            for member in list(scored):
                fitness.add(member)
            parents = children
            if gen % 10 == 0 or gen == generations:
                log("EVO", f"generation {gen}/{generations}: {len(fitness.members)} distinct partitions")
    finally:
        if pool is not None:
            pool.shutdown()

    front = ParetoFront.from_candidates(fitness.members.values())
    log("EVO", f"front of {len(front)} from {len(front.evaluated)} partitions")
    return front


# ─────────────────────────────────────────────
#  Lexicographic & combined sweep
# ─────────────────────────────────────────────
def lexicographic(dataset, ctx, order: str = "ts-then-feature", k1: int = 3, k2: int = 2,
                  linkage: str = "average") -> Clustering:
    """Cluster on the first metric into k1 groups, then split each group on the second into ≤ k2."""
    if order not in ORDERS:
        raise ClusteringError(f"unknown order {order!r}; expected one of {ORDERS}")
    if k1 < 1 or k2 < 1:
        raise ClusteringError(f"k1 and k2 must be >= 1, got {k1}, {k2}")
    first, second = ((ctx.a_matrix, ctx.e_matrix) if order == "ts-then-feature"
                     else (ctx.e_matrix, ctx.a_matrix))

    stage = hierarchical_cluster(first, k1, linkage, verbose=True)
    labels = np.zeros(dataset.n, dtype=int)
    next_label = 0
    for c in range(stage.k):
        members = stage.members(c)
        kk = min(k2, members.size)
        if kk == 1:
            labels[members] = next_label
        else:
            sub = hierarchical_cluster(second[np.ix_(members, members)], kk, linkage)
            labels[members] = next_label + sub.assignment
        next_label += kk
    return clustering_from_assignment(labels, ctx.a_matrix, method_tag=f"lexicographic-{order}")


def combined_sweep(dataset, ctx, alphas=DEFAULT_ALPHAS, k: int = 3, linkage: str = "average") -> list:
    """One agglomerative clustering on the combined distance per alpha."""
    if k > dataset.n:
        raise ClusteringError(f"k={k} exceeds the number of demographics n={dataset.n}")
    return [replace(hierarchical_cluster(ctx.combined(a), k, linkage), alpha=float(a), method_tag="combined")
            for a in alphas]


# ─────────────────────────────────────────────
#  Export
# ─────────────────────────────────────────────
def write_front_csv(path, front: ParetoFront):
    rows = [(m.variance, m.f1, m.clustering.k, m.genome.digest()) for m in front]
    return write_csv(path, ("variance", "weighted_f1", "k", "genome"), rows)


def write_front_members(outdir, front: ParetoFront) -> list:
    outdir = Path(outdir)
    paths = []
    for i, m in enumerate(front):
        data = clustering_to_dict(m.clustering)
        data.update({"variance": m.variance, "weighted_f1": m.f1, "genome": [int(x) for x in m.genome.links]})
        paths.append(write_json(outdir / f"front_{i:03d}.json", data))
    return paths
