"""
distances.py — distance kernels and the alpha-blended combined distance.

a-distance compares accuracy features (the series, DTW or Euclidean);
e-distance compares explainability features (one-hot bits, Jaccard or Cosine).
Both pairwise matrices are computed once per dataset and shared read-only.
"""

import io
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from common import DistanceError, atomic_write_text, log, warn

try:
    import numba
    NUMBA_OK = True
except ImportError:
    NUMBA_OK = False

A_METRICS          = ("dtw", "euclidean")
E_METRICS          = ("jaccard", "cosine")
ALPHA_ORIENTATIONS = ("explain", "trend")    # explain: alpha weights e-distance


# ─────────────────────────────────────────────
#  Kernels
# ─────────────────────────────────────────────
def _dtw_table(a, b):
    n, m = a.shape[0], b.shape[0]
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = acc[i - 1, j - 1]
            if acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = abs(a[i - 1] - b[j - 1]) + best
    return acc[n, m]


if NUMBA_OK:
    _dtw_table = numba.njit(cache=True)(_dtw_table)


def dtw_distance(a, b) -> float:
    """Classic symmetric DTW: local cost |a_i - b_j|, no window, no length normalization."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DistanceError("dtw_distance of an empty series")
    return float(_dtw_table(a, b))


def euclidean_distance(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DistanceError(f"euclidean_distance length mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def jaccard_distance(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DistanceError(f"jaccard_distance length mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        raise DistanceError("jaccard_distance undefined for two all-zero vectors")
    return 1.0 - np.count_nonzero(a & b) / union


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DistanceError(f"cosine_distance length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DistanceError("cosine_distance undefined for an all-zero vector")
    return float(max(0.0, 1.0 - np.dot(a, b) / (na * nb)))


# ─────────────────────────────────────────────
#  Distance context
# ─────────────────────────────────────────────
@dataclass(frozen=True)
class DistanceContext:
    a_matrix: np.ndarray
    e_matrix: np.ndarray
    a_max: float
    e_max: float
    a_metric: str = "dtw"
    e_metric: str = "jaccard"
    alpha_orientation: str = "explain"

    @property
    def n(self) -> int:
        return self.a_matrix.shape[0]

    @property
    def degenerate(self) -> bool:
        return self.a_max == 0 or self.e_max == 0

    @property
    def a_scale(self) -> float:
        return self.a_max if self.a_max > 0 else 1.0

    @property
    def e_scale(self) -> float:
        return self.e_max if self.e_max > 0 else 1.0

    def weights_for(self, alpha: float):
        """(weight on normalized a-distance, weight on normalized e-distance)."""
        if not 0.0 <= alpha <= 1.0:
            raise DistanceError(f"alpha must be in [0, 1], got {alpha}")
        if self.alpha_orientation == "trend":
            return alpha, 1.0 - alpha
        return 1.0 - alpha, alpha

    def combined(self, alpha: float) -> np.ndarray:
        wa, we = self.weights_for(alpha)
        return wa * self.a_matrix / self.a_scale + we * self.e_matrix / self.e_scale


def combined_distance(i: int, j: int, alpha: float, ctx: DistanceContext) -> float:
    if not (0 <= i < ctx.n and 0 <= j < ctx.n):
        raise DistanceError(f"ids ({i}, {j}) out of range for n={ctx.n}")
    wa, we = ctx.weights_for(alpha)
    return float(wa * ctx.a_matrix[i, j] / ctx.a_scale + we * ctx.e_matrix[i, j] / ctx.e_scale)


def _pairwise(rows, kernel) -> np.ndarray:
    n = len(rows)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = kernel(rows[i], rows[j])
    return out


def build_context(dataset, a_metric: str = "dtw", e_metric: str = "jaccard",
                  alpha_orientation: str = "explain") -> DistanceContext:
    if dataset.n < 2:
        raise DistanceError(f"need at least 2 demographics, got {dataset.n}")
    if a_metric not in A_METRICS:
        raise DistanceError(f"unknown a_metric {a_metric!r}; expected one of {A_METRICS}")
    if e_metric not in E_METRICS:
        raise DistanceError(f"unknown e_metric {e_metric!r}; expected one of {E_METRICS}")
    if alpha_orientation not in ALPHA_ORIENTATIONS:
        raise DistanceError(f"unknown alpha_orientation {alpha_orientation!r}")

    series = dataset.series_matrix
    if a_metric == "dtw":
        a_matrix = _pairwise(series, dtw_distance)
    else:
        a_matrix = squareform(pdist(series, metric="euclidean"))

    bits = dataset.features.astype(bool)
    if not bits.any(axis=1).all():
        raise DistanceError("every demographic needs at least one feature bit")
    e_matrix = squareform(pdist(bits, metric=e_metric))
    np.clip(e_matrix, 0.0, None, out=e_matrix)

    a_max, e_max = float(a_matrix.max()), float(e_matrix.max())
    if a_max == 0:
        warn("all a-distances are 0; using 1 as the a-distance divisor")
    if e_max == 0:
        warn("all e-distances are 0; using 1 as the e-distance divisor")
    log("DIST", f"{a_metric}/{e_metric} matrices for n={dataset.n} (a_max={a_max:.4g}, e_max={e_max:.4g})")
    return DistanceContext(a_matrix, e_matrix, a_max, e_max, a_metric, e_metric, alpha_orientation)


def write_matrices_csv(ctx: DistanceContext, path_prefix) -> list:
    """Dump both matrices row-major, each under a "# n=..,metric=.." header line."""
    paths = []
    for name, matrix, metric in (("a", ctx.a_matrix, ctx.a_metric), ("e", ctx.e_matrix, ctx.e_metric)):
        buf = io.StringIO()
        np.savetxt(buf, matrix, delimiter=",", fmt="%.17g", header=f"n={ctx.n},metric={metric}")
        paths.append(atomic_write_text(f"{path_prefix}_{name}.csv", buf.getvalue()))
    return paths
