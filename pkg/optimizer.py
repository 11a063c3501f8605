"""
optimizer.py — branch-and-bound over (k, alpha) blocks, plus the grid-search
and 2-step baselines, the λ sweep and the monotonicity check.

Objective D + λN is treated as a difference of monotone functions: D falls
with k and rises with alpha, N does the opposite. For a block
[k_lo, k_hi] × [alpha_lo, alpha_hi] the corner (k_hi, alpha_lo) minimizes D and
(k_lo, alpha_hi) minimizes N, which gives a cheap lower bound from exactly
two evaluations.
"""

import heapq
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from rich.progress import Progress

import common
from clustering import elbow_k
from common import OptimizerError, log, write_csv, write_json
from evaluator import Evaluation, Evaluator

DEFAULT_EPS_B       = 0.05
DEFAULT_DELTA_ALPHA = 0.01
ALPHA_GRID          = tuple(round(i * 0.05, 10) for i in range(21))
TRACE_COLUMNS       = ("step", "action", "block", "k_lo", "k_hi", "alpha_lo", "alpha_hi",
                       "lower", "upper", "incumbent")


# ─────────────────────────────────────────────
#  Blocks
# ─────────────────────────────────────────────
@dataclass
class Block:
    k_lo: int
    k_hi: int
    alpha_lo: float
    alpha_hi: float
    lower: float = None
    upper: float = None
    witness: Evaluation = None
    id: int = 0

    def __post_init__(self):
        if self.k_lo > self.k_hi or self.alpha_lo > self.alpha_hi:
            raise OptimizerError(f"invalid block k[{self.k_lo},{self.k_hi}] "
                                 f"alpha[{self.alpha_lo},{self.alpha_hi}]")

    @property
    def alpha_width(self) -> float:
        return self.alpha_hi - self.alpha_lo

    def is_atomic(self, delta_alpha: float) -> bool:
        return self.k_lo == self.k_hi and self.alpha_width <= delta_alpha

    def contains(self, k, alpha) -> bool:
        return self.k_lo <= k <= self.k_hi and self.alpha_lo <= alpha <= self.alpha_hi

    def __str__(self):
        return f"k[{self.k_lo},{self.k_hi}]×α[{self.alpha_lo:g},{self.alpha_hi:g}]"


@dataclass
class OptimizerReport:
    method: str
    best: Evaluation
    evaluations: int
    blocks_created: int = 0
    blocks_pruned: int = 0
    wall_time: float = 0.0
    trace: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "best": self.best.to_dict(),
            "evaluations": self.evaluations,
            "blocks_created": self.blocks_created,
            "blocks_pruned": self.blocks_pruned,
            "trace_events": len(self.trace),
            **self.extra,
        }


def write_report_json(path, report: OptimizerReport):
    data = report.to_dict()
    data["trace"] = report.trace
    return write_json(path, data)


def write_trace_csv(path, report: OptimizerReport):
    return write_csv(path, TRACE_COLUMNS, ([e[c] for c in TRACE_COLUMNS] for e in report.trace))


# ─────────────────────────────────────────────
#  Bounds & splitting
# ─────────────────────────────────────────────
def compute_bounds(block: Block, evaluator: Evaluator) -> tuple:
    """
    (lower, upper, witness) from the two corners (k_hi, alpha_lo) and
    (k_lo, alpha_hi). The witness is the corner with the smaller objective,
    ties going to (k_hi, alpha_lo).
    """
    e1, e2 = evaluator.evaluate_many([(block.k_hi, block.alpha_lo), (block.k_lo, block.alpha_hi)])
    lower = e1.D + evaluator.lam * e2.N
    witness = e1 if e1.objective <= e2.objective else e2
    # only reachable when the measure is not monotone inside the block
    lower = min(lower, witness.objective)
    return lower, witness.objective, witness


def split(block: Block, k_min: int, k_max: int, delta_alpha: float = DEFAULT_DELTA_ALPHA) -> tuple:
    """
    Halve the block along its longer normalized side. A k split shares the
    midpoint between both children; a k range of width 1 splits into its two
    single-k blocks.
    """
    if block.is_atomic(delta_alpha):
        raise OptimizerError(f"block {block} is atomic and cannot be split")
    k_width = (block.k_hi - block.k_lo) / (k_max - k_min) if k_max > k_min else 0.0
    split_k = block.k_hi > block.k_lo and (k_width > block.alpha_width or block.alpha_width <= delta_alpha)

    if split_k:
        if block.k_hi - block.k_lo == 1:
            lo_k, hi_k = (block.k_lo, block.k_lo), (block.k_hi, block.k_hi)
        else:
            mid = (block.k_lo + block.k_hi) // 2
            lo_k, hi_k = (block.k_lo, mid), (mid, block.k_hi)
        return (Block(lo_k[0], lo_k[1], block.alpha_lo, block.alpha_hi),
                Block(hi_k[0], hi_k[1], block.alpha_lo, block.alpha_hi))

    mid = 0.5 * (block.alpha_lo + block.alpha_hi)
    return (Block(block.k_lo, block.k_hi, block.alpha_lo, mid),
            Block(block.k_lo, block.k_hi, mid, block.alpha_hi))


# ─────────────────────────────────────────────
#  Branch and bound
# ─────────────────────────────────────────────
class _Search:
    """Bookkeeping shared by one optimizer run: block ids, trace, incumbent."""

    def __init__(self, evaluator: Evaluator):
        self.evaluator = evaluator
        self.created = 0
        self.pruned = 0
        self.step = 0
        self.trace = []
        self.best = None

    def bound(self, block: Block) -> Block:
        block.lower, block.upper, block.witness = compute_bounds(block, self.evaluator)
        block.id = self.created
        self.created += 1
        self.event("bound", block)
        return block

    def offer(self, block: Block) -> bool:
        if self.best is None or block.upper < self.best.upper:
            self.best = block
            self.event("incumbent", block)
            log("BNB", f"incumbent k={block.witness.k} alpha={block.witness.alpha:.6g} "
                       f"objective={block.upper:.6g}")
            return True
        return False

    def event(self, action: str, block: Block):
        self.trace.append({
            "step": self.step, "action": action, "block": block.id,
            "k_lo": block.k_lo, "k_hi": block.k_hi,
            "alpha_lo": block.alpha_lo, "alpha_hi": block.alpha_hi,
            "lower": block.lower, "upper": block.upper,
            "incumbent": self.best.upper if self.best is not None else None,
        })


def xclusters_optimize(evaluator: Evaluator, k_min: int = None, k_max: int = None, lam: float = None,
                       eps_b: float = DEFAULT_EPS_B, delta_alpha: float = DEFAULT_DELTA_ALPHA) -> OptimizerReport:
    """
    Best-first branch-and-bound. Blocks are popped by lowest lower bound
    (creation order on ties), split, and their children bounded; any queued
    block with lower + eps_b >= incumbent upper is dropped. Atomic blocks
    retire without splitting.
    """
    k_min = evaluator.k_min if k_min is None else int(k_min)
    k_max = evaluator.k_max if k_max is None else int(k_max)
    if k_min < 1 or k_min > k_max:
        raise OptimizerError(f"empty k range [{k_min}, {k_max}]")
    if eps_b < 0:
        raise OptimizerError(f"eps_b must be >= 0, got {eps_b}")
    if delta_alpha <= 0:
        raise OptimizerError(f"delta_alpha must be > 0, got {delta_alpha}")
    if lam is not None and float(lam) != evaluator.lam:
        evaluator = evaluator.with_lambda(lam)

    t0 = time.monotonic()
    misses0 = evaluator.cache.misses
    search = _Search(evaluator)

    root = search.bound(Block(k_min, k_max, 0.0, 1.0))
    search.offer(root)
    queue = [(root.lower, root.id, root)]

    while queue:
        _, _, block = heapq.heappop(queue)
        search.step += 1
        if block.is_atomic(delta_alpha):
            search.event("retire", block)
            continue
        search.event("split", block)
        children = [search.bound(child) for child in split(block, k_min, k_max, delta_alpha)]
        for child in children:
            search.offer(child)
        for child in children:
            if child.lower + eps_b >= search.best.upper:
                search.pruned += 1
                search.event("prune", child)
            else:
                heapq.heappush(queue, (child.lower, child.id, child))

        kept = []
        for entry in queue:
            if entry[2].lower + eps_b >= search.best.upper:
                search.pruned += 1
                search.event("prune", entry[2])
            else:
                kept.append(entry)
        if len(kept) != len(queue):
            heapq.heapify(kept)
            queue = kept

    best = search.best.witness
    report = OptimizerReport("xclusters", best, evaluator.cache.misses - misses0,
                             search.created, search.pruned, time.monotonic() - t0, search.trace,
                             {"eps_b": eps_b, "delta_alpha": delta_alpha, "lambda": evaluator.lam})
    log("BNB", f"done: k={best.k} alpha={best.alpha:.6g} objective={best.objective:.6g} "
               f"({report.evaluations} evaluations, {search.created} blocks, {search.pruned} pruned)")
    return report


# ─────────────────────────────────────────────
#  Baselines
# ─────────────────────────────────────────────
def _k_grid(evaluator, k_grid):
    return list(range(evaluator.k_min, evaluator.k_max + 1)) if k_grid is None else [int(k) for k in k_grid]


def _evaluate_with_progress(evaluator: Evaluator, points, description: str) -> list:
    """evaluate_many behind a transient bar; the bar only draws on a terminal."""
    points = list(points)
    with Progress(console=common.console, transient=True, disable=not common.console.is_terminal) as progress:
        task = progress.add_task(description, total=len(points))
        return evaluator.evaluate_many(points, on_done=lambda: progress.advance(task))


def grid_search(evaluator: Evaluator, k_grid=None, alpha_grid=ALPHA_GRID, lam: float = None) -> OptimizerReport:
    """Evaluate every (k, alpha) pair; the first minimum in (k, alpha) order wins."""
    ks = _k_grid(evaluator, k_grid)
    alphas = [float(a) for a in alpha_grid]
    if not ks or not alphas:
        raise OptimizerError("grid search needs non-empty k and alpha grids")
    if lam is not None and float(lam) != evaluator.lam:
        evaluator = evaluator.with_lambda(lam)

    t0 = time.monotonic()
    misses0 = evaluator.cache.misses
    results = _evaluate_with_progress(evaluator, [(k, a) for k in ks for a in alphas], "grid search")
    best = results[int(np.argmin([e.objective for e in results]))]
    report = OptimizerReport("grid", best, evaluator.cache.misses - misses0, wall_time=time.monotonic() - t0,
                             extra={"k_grid": ks, "alpha_grid": alphas, "lambda": evaluator.lam})
    log("GRID", f"{len(ks)}×{len(alphas)} grid: k={best.k} alpha={best.alpha:.6g} "
                f"objective={best.objective:.6g} ({report.evaluations} evaluations)")
    return report


def two_step(evaluator: Evaluator, k_grid=None, lam: float = None) -> OptimizerReport:
    """Cluster on the time series alone (alpha = 0), pick k by elbow, explain once."""
    ks = _k_grid(evaluator, k_grid)
    if len(ks) < 3:
        raise OptimizerError(f"2-step needs at least 3 k values, got {ks}")
    if lam is not None and float(lam) != evaluator.lam:
        evaluator = evaluator.with_lambda(lam)

    t0 = time.monotonic()
    misses0 = evaluator.cache.misses
    distortions = {k: evaluator.distortion(k, 0.0) for k in ks}
    k_star = elbow_k(distortions)
    best = evaluator.evaluate(k_star, 0.0)
    report = OptimizerReport("two-step", best, evaluator.cache.misses - misses0, wall_time=time.monotonic() - t0,
                             extra={"elbow_k": k_star, "lambda": evaluator.lam,
                                    "distortions": {str(k): d for k, d in distortions.items()}})
    log("2STEP", f"elbow k={k_star}: objective={best.objective:.6g}")
    return report


def lambda_sweep(evaluator: Evaluator, lambdas=(0.25, 0.5, 1.0, 2.0, 4.0), eps_b: float = DEFAULT_EPS_B,
                 delta_alpha: float = DEFAULT_DELTA_ALPHA) -> list:
    """One branch-and-bound run per λ, all sharing the evaluator's cache."""
    reports = []
    for lam in lambdas:
        report = xclusters_optimize(evaluator.with_lambda(lam), eps_b=eps_b, delta_alpha=delta_alpha)
        reports.append(report)
    return reports


def write_sweep_csv(path, reports):
    rows = [(r.extra["lambda"], r.best.k, r.best.alpha, r.best.D, r.best.N, r.best.objective, r.evaluations)
            for r in reports]
    return write_csv(path, ("lambda", "k", "alpha", "D", "N", "objective", "evaluations"), rows)


# ─────────────────────────────────────────────
#  Monotonicity
# ─────────────────────────────────────────────
# series name → (grouping axis, measured column, expected direction: +1 rising, -1 falling)
MONOTONE_SERIES = {
    "k_D":     ("k", "D", -1),
    "k_N":     ("k", "N", +1),
    "alpha_D": ("alpha", "D", +1),
    "alpha_N": ("alpha", "N", -1),
}
MONOTONE_TOL = 1e-12


@dataclass
class MonotonicityReport:
    series: dict        # name → DataFrame(x, mean)
    violations: dict    # name → count of adjacent pairs moving the wrong way

    def to_dict(self) -> dict:
        return {
            "violations": dict(self.violations),
            "series": {name: frame.values.tolist() for name, frame in self.series.items()},
        }

    def write(self, outdir) -> list:
        outdir = Path(outdir)
        paths = [write_csv(outdir / f"monotonicity_{name}.csv", tuple(frame.columns), frame.values.tolist())
                 for name, frame in self.series.items()]
        paths.append(write_json(outdir / "monotonicity.json", self.to_dict()))
        return paths


def count_violations(values, direction: int, tol: float = MONOTONE_TOL) -> int:
    steps = np.diff(np.asarray(values, dtype=float)) * direction
    return int((steps < -tol).sum())


def monotonicity_report(evaluator: Evaluator, k_grid=None, alpha_grid=ALPHA_GRID) -> MonotonicityReport:
    """
    Average normalized D and N over the grid: per k across all alphas, and per
    alpha across all k. Non-strict monotonicity counts as no violation.
    """
    ks = _k_grid(evaluator, k_grid)
    alphas = [float(a) for a in alpha_grid]
    results = _evaluate_with_progress(evaluator, [(k, a) for k in ks for a in alphas], "monotonicity grid")
    frame = pd.DataFrame([(e.k, e.alpha, e.D, e.N) for e in results], columns=["k", "alpha", "D", "N"])

    series, violations = {}, {}
    for name, (axis, column, direction) in MONOTONE_SERIES.items():
        means = frame.groupby(axis, sort=True)[column].mean().reset_index()
        means.columns = [axis, f"mean_{column}"]
        series[name] = means
        violations[name] = count_violations(means.iloc[:, 1], direction)
    log("GRID", "monotonicity violations: " + ", ".join(f"{n}={v}" for n, v in violations.items()))
    return MonotonicityReport(series, violations)
