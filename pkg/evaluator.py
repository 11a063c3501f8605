"""
evaluator.py — the memoized (k, alpha) → (D, N) black box the optimizers call.

A Measure produces raw numbers for one grid point; the Evaluator caches them
under (k, round(alpha·1e6)), normalizes against two corner references and
adds λ·N. Raw measurements are cached, not objectives, so evaluators with a
different λ can share one cache.
"""

import threading
from abc import ABC, abstractmethod
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, replace

from clustering import Clustering, a_distortion, hierarchical_cluster, k_medoids, LINKAGES
from common import EvaluationError, XClustersError, log, warn, write_csv
from explain_tree import CartTrainer, DEFAULT_DEPTH, count_nodes, multiclass_tree, per_cluster_trees

ALPHA_QUANTUM = 1_000_000
CLUSTERERS    = ("pam", "hierarchical")
TREE_MODES    = ("multiclass", "per-cluster")


def cache_key(k: int, alpha: float) -> tuple:
    return int(k), int(round(float(alpha) * ALPHA_QUANTUM))


# ─────────────────────────────────────────────
#  Records
# ─────────────────────────────────────────────
@dataclass(frozen=True)
class Measurement:
    D_raw: float
    N_raw: float
    clustering: Clustering = None
    tree: object = None       # ExplainTree, or a tuple of per-cluster trees


@dataclass(frozen=True, eq=False)
class Evaluation:
    k: int
    alpha: float
    D_raw: float
    N_raw: float
    D: float
    N: float
    objective: float
    lam: float
    clustering: Clustering = None
    tree: object = None

    def point(self) -> tuple:
        return self.k, self.alpha

    def to_dict(self) -> dict:
        return {
            "k": self.k, "alpha": self.alpha,
            "D_raw": self.D_raw, "N_raw": self.N_raw,
            "D": self.D, "N": self.N,
            "objective": self.objective, "lambda": self.lam,
        }


class EvalCache:
    """
    Thread-safe map (k, quantized alpha) → Measurement.

    Concurrent requests for a key that is still being computed wait on the
    owner's Future, so every key is measured at most once.
    """

    def __init__(self):
        self.entries = {}
        self.alphas = {}          # key → alpha as first requested
        self.hits = 0
        self.misses = 0
        self.D_ref = None
        self.N_ref = None
        self._lock = threading.Lock()
        self._pending = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def record_hit(self):
        with self._lock:
            self.hits += 1

    def lookup(self, key):
        """The stored measurement for key, or None."""
        with self._lock:
            return self.entries.get(key)

    def get_or_compute(self, key, alpha, compute):
        with self._lock:
            if key in self.entries:
                self.hits += 1
                return self.entries[key]
            fut = self._pending.get(key)
            owner = fut is None
            if owner:
                fut = Future()
                self._pending[key] = fut
                self.misses += 1
            else:
                self.hits += 1
        if not owner:
            return fut.result()

        try:
            value = compute()
        except BaseException as e:
            with self._lock:
                del self._pending[key]
            fut.set_exception(e)
            raise
        with self._lock:
            self.entries[key] = value
            self.alphas[key] = float(alpha)
            del self._pending[key]
        fut.set_result(value)
        return value

    def items(self):
        """(k, alpha, Measurement) in stable (k, alpha) order."""
        with self._lock:
            keys = sorted(self.entries)
            return [(k, self.alphas[(k, q)], self.entries[(k, q)]) for k, q in keys]


# ─────────────────────────────────────────────
#  Measures
# ─────────────────────────────────────────────
class Measure(ABC):
    """Anything that maps one (k, alpha) to raw (D, N)."""

    @abstractmethod
    def measure(self, k: int, alpha: float) -> Measurement:
        ...

    def distortion(self, k: int, alpha: float) -> float:
        """Raw D alone; subclasses skip tree training here when they can."""
        return self.measure(k, alpha).D_raw


def make_clusterer(kind: str = "pam", linkage: str = "average", seed: int = 0, pam_init: str = "build"):
    """Return a callable (distance matrix, k) → Clustering."""
    if kind == "pam":
        return lambda dist, k: k_medoids(dist, k, seed=seed, init=pam_init)
    if kind == "hierarchical":
        if linkage not in LINKAGES:
            raise XClustersError(f"unknown linkage {linkage!r}")
        return lambda dist, k: hierarchical_cluster(dist, k, linkage)
    raise XClustersError(f"unknown clusterer {kind!r}; expected one of {CLUSTERERS}")


class ClusteringMeasure(Measure):
    """
    The real measure: cluster on the alpha-blended distance, report D as the
    a-space distortion of that partition and N as the explaining tree's size.
    """

    def __init__(self, dataset, ctx, clusterer=None, trainer=None,
                 tree_mode: str = "multiclass", max_depth: int = DEFAULT_DEPTH):
        if tree_mode not in TREE_MODES:
            raise XClustersError(f"unknown tree mode {tree_mode!r}; expected one of {TREE_MODES}")
        self.dataset = dataset
        self.ctx = ctx
        self.clusterer = clusterer or make_clusterer()
        self.trainer = trainer or CartTrainer()
        self.tree_mode = tree_mode
        self.max_depth = max_depth
        self.clusterings_run = 0
        self.trees_trained = 0
        self._clusterings = {}
        self._lock = threading.Lock()

    def cluster(self, k: int, alpha: float) -> Clustering:
        key = cache_key(k, alpha)
        with self._lock:
            if key in self._clusterings:
                return self._clusterings[key]
        result = self.clusterer(self.ctx.combined(alpha), k)
        result = replace(result, alpha=float(alpha))
        with self._lock:
            self.clusterings_run += 1
            return self._clusterings.setdefault(key, result)

    def distortion(self, k: int, alpha: float) -> float:
        return a_distortion(self.cluster(k, alpha).assignment, self.ctx.a_matrix)

    def measure(self, k: int, alpha: float) -> Measurement:
        clustering = self.cluster(k, alpha)
        d_raw = a_distortion(clustering.assignment, self.ctx.a_matrix)
        if self.tree_mode == "multiclass":
            tree = multiclass_tree(self.dataset, clustering, self.trainer)
            n_raw = count_nodes(tree)
            trained = 1
        else:
            tree = tuple(per_cluster_trees(self.dataset, clustering, self.max_depth, verbose=False))
            n_raw = sum(count_nodes(t) for t in tree)
            trained = len(tree)
        with self._lock:
            self.trees_trained += trained
        return Measurement(float(d_raw), float(n_raw), clustering, tree)


# ─────────────────────────────────────────────
#  Evaluator
# ─────────────────────────────────────────────
class Evaluator:
    def __init__(self, measure: Measure, lam: float = 1.0, k_min: int = 3, k_max: int = 11,
                 normalize: bool = True, workers: int = 1, cache: EvalCache = None):
        if k_min > k_max:
            raise XClustersError(f"empty k range [{k_min}, {k_max}]")
        self.measure = measure
        self.lam = float(lam)
        self.k_min = int(k_min)
        self.k_max = int(k_max)
        self.normalize = normalize
        self.workers = max(1, int(workers or 1))
        self.cache = cache if cache is not None else EvalCache()
        self.distortion_calls = 0
        self._evaluations = {}
        self._lock = threading.RLock()

    @property
    def evaluations(self) -> int:
        """Distinct (k, alpha) points measured so far."""
        return self.cache.misses

    def with_lambda(self, lam: float) -> "Evaluator":
        return Evaluator(self.measure, lam, self.k_min, self.k_max,
                         self.normalize, self.workers, self.cache)

    def _check(self, k, alpha):
        if not self.k_min <= k <= self.k_max:
            raise EvaluationError(k, alpha, f"k outside [{self.k_min}, {self.k_max}]")
        if not 0.0 <= alpha <= 1.0:
            raise EvaluationError(k, alpha, "alpha outside [0, 1]")

    def _raw(self, k: int, alpha: float) -> Measurement:
        self._check(k, alpha)

        def compute():
            try:
                return self.measure.measure(k, alpha)
            except EvaluationError:
                raise
            except Exception as e:
                raise EvaluationError(k, alpha, e) from e

        return self.cache.get_or_compute(cache_key(k, alpha), alpha, compute)

    def init_normalization(self) -> tuple:
        """D_ref = D_raw(k_min, 1), N_ref = N_raw(k_max, 0); zeros fall back to 1."""
        with self._lock:
            if self.cache.D_ref is not None:
                return self.cache.D_ref, self.cache.N_ref
            if not self.normalize:
                self.cache.D_ref, self.cache.N_ref = 1.0, 1.0
                return 1.0, 1.0
            d_ref = self._raw(self.k_min, 1.0).D_raw
            n_ref = self._raw(self.k_max, 0.0).N_raw
            if d_ref == 0:
                warn(f"D_raw({self.k_min}, 1) is 0; using 1 as the D reference")
                d_ref = 1.0
            if n_ref == 0:
                warn(f"N_raw({self.k_max}, 0) is 0; using 1 as the N reference")
                n_ref = 1.0
            self.cache.D_ref, self.cache.N_ref = float(d_ref), float(n_ref)
            log("EVAL", f"references D_ref={d_ref:.6g} N_ref={n_ref:.6g}")
            return self.cache.D_ref, self.cache.N_ref

    def evaluate(self, k: int, alpha: float) -> Evaluation:
        key = (cache_key(k, alpha), self.lam)
        with self._lock:
            hit = self._evaluations.get(key)
        if hit is not None:
            self.cache.record_hit()
            return hit
        d_ref, n_ref = self.init_normalization()
        raw = self._raw(k, alpha)
        d, n = raw.D_raw / d_ref, raw.N_raw / n_ref
        result = Evaluation(int(k), float(alpha), raw.D_raw, raw.N_raw, d, n, d + self.lam * n,
                            self.lam, raw.clustering, raw.tree)
        with self._lock:
            return self._evaluations.setdefault(key, result)

    def evaluate_many(self, points, on_done=None) -> list:
        """Evaluations in input order; distinct points run on up to `workers` threads."""
        points = [(int(k), float(a)) for k, a in points]
        self.init_normalization()

        def one(point):
            result = self.evaluate(*point)
            if on_done is not None:
                on_done()
            return result

        if self.workers == 1 or len(points) < 2:
            return [one(p) for p in points]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(one, points))

    def distortion(self, k: int, alpha: float) -> float:
        """Raw D for (k, alpha), reusing a cached measurement when one exists."""
        self._check(k, alpha)
        cached = self.cache.lookup(cache_key(k, alpha))
        if cached is not None:
            return cached.D_raw
        try:
            value = self.measure.distortion(k, alpha)
        except Exception as e:
            raise EvaluationError(k, alpha, e) from e
        with self._lock:
            self.distortion_calls += 1
        return float(value)

    def rows(self) -> list:
        """(k, alpha, D, N, objective) for every cached point under this λ."""
        d_ref, n_ref = self.init_normalization()
        out = []
        for k, alpha, m in self.cache.items():
            d, n = m.D_raw / d_ref, m.N_raw / n_ref
            out.append((k, alpha, d, n, d + self.lam * n))
        return out


def write_cache_csv(path, evaluator: Evaluator):
    return write_csv(path, ("k", "alpha", "D", "N", "objective"), evaluator.rows())
