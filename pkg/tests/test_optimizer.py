import unittest
from unittest.mock import patch
import io
import json
import os
import shutil
import sys
import tempfile
import threading
from pathlib import Path

import numpy as np

# Add project root to sys.path to import the xclusters modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from rich.console import Console

import common
import optimizer
from common import OptimizerError
from demographics import gen_synthetic
from distances import build_context
from evaluator import ClusteringMeasure, Evaluator
from optimizer import (
    ALPHA_GRID, TRACE_COLUMNS, Block, compute_bounds, count_violations, grid_search,
    lambda_sweep, monotonicity_report, split, two_step, write_report_json,
    write_sweep_csv, write_trace_csv, xclusters_optimize,
)
from stubs import (
    AnalyticMeasure, ConstantMeasure, CountingMeasure, KneeMeasure, LinearMeasure, objective,
)

# normalization references of AnalyticMeasure over k in [3, 11]
D_REF, N_REF = 2 / 3, 22.0
FINE_ALPHAS = np.linspace(0.0, 1.0, 1001)


def true_block_min(block_row, lam=1.0):
    """Exact minimum of the normalized stub objective over a fine grid inside a traced block."""
    measure = AnalyticMeasure()
    alphas = FINE_ALPHAS[(FINE_ALPHAS >= block_row["alpha_lo"] - 1e-12) &
                         (FINE_ALPHAS <= block_row["alpha_hi"] + 1e-12)]
    alphas = np.union1d(alphas, [block_row["alpha_lo"], block_row["alpha_hi"]])
    return min(objective(measure, k, a, lam, D_REF, N_REF)
               for k in range(block_row["k_lo"], block_row["k_hi"] + 1) for a in alphas)


class QuietTestCase(unittest.TestCase):
    def setUp(self):
        self.buf = io.StringIO()
        self.console_patcher = patch.object(common, "console", Console(file=self.buf, width=200))
        self.console_patcher.start()

    def tearDown(self):
        self.console_patcher.stop()


class TestBounds(QuietTestCase):
    def test_corners_by_hand(self):
        ev = Evaluator(AnalyticMeasure(), k_min=2, k_max=4, normalize=False)
        lower, upper, witness = compute_bounds(Block(2, 4, 0.0, 1.0), ev)
        self.assertAlmostEqual(lower, 2.25)
        self.assertAlmostEqual(upper, 3.0)
        self.assertEqual(witness.point(), (2, 1.0))

    def test_tie_goes_to_high_k_low_alpha(self):
        ev = Evaluator(ConstantMeasure(), k_min=3, k_max=6, normalize=False)
        lower, upper, witness = compute_bounds(Block(3, 6, 0.2, 0.7), ev)
        self.assertEqual((lower, upper), (3.5, 3.5))
        self.assertEqual(witness.point(), (6, 0.2))

    def test_single_point_block(self):
        ev = Evaluator(AnalyticMeasure(), k_min=3, k_max=11, normalize=False)
        lower, upper, witness = compute_bounds(Block(5, 5, 0.3, 0.3), ev)
        self.assertAlmostEqual(lower, upper)
        self.assertAlmostEqual(upper, 1.3 / 5 + 5 * 1.7)
        self.assertEqual(ev.evaluations, 1)

    def test_invalid_block(self):
        with self.assertRaises(OptimizerError):
            Block(5, 4, 0.0, 1.0)
        with self.assertRaises(OptimizerError):
            Block(4, 5, 0.6, 0.5)


class TestSplit(unittest.TestCase):
    def test_k_split_shares_midpoint(self):
        a, b = split(Block(1, 8, 0.0, 0.5), 1, 8)
        self.assertEqual((a.k_lo, a.k_hi, b.k_lo, b.k_hi), (1, 4, 4, 8))
        self.assertEqual((a.alpha_lo, a.alpha_hi), (0.0, 0.5))

    def test_alpha_split_on_equal_widths(self):
        a, b = split(Block(3, 11, 0.0, 1.0), 3, 11)
        self.assertEqual((a.alpha_lo, a.alpha_hi, b.alpha_lo, b.alpha_hi), (0.0, 0.5, 0.5, 1.0))
        self.assertEqual((a.k_lo, a.k_hi), (3, 11))

    def test_width_one_k_splits_into_single_ks(self):
        a, b = split(Block(3, 4, 0.5, 0.5), 3, 11)
        self.assertEqual((a.k_lo, a.k_hi, b.k_lo, b.k_hi), (3, 3, 4, 4))

    def test_alpha_atomic_forces_k_split(self):
        a, b = split(Block(3, 7, 0.25, 0.255), 3, 11, delta_alpha=0.01)
        self.assertEqual((a.k_lo, a.k_hi, b.k_lo, b.k_hi), (3, 5, 5, 7))

    def test_single_k_splits_alpha(self):
        a, b = split(Block(6, 6, 0.0, 0.25), 3, 11)
        self.assertEqual((a.alpha_hi, b.alpha_lo), (0.125, 0.125))

    def test_atomic_raises(self):
        with self.assertRaises(OptimizerError):
            split(Block(3, 3, 0.5, 0.505), 3, 11, delta_alpha=0.01)


class TestBranchAndBound(QuietTestCase):
    def test_close_to_fine_grid_optimum(self):
        report = xclusters_optimize(Evaluator(AnalyticMeasure()))
        oracle = grid_search(Evaluator(AnalyticMeasure()), alpha_grid=np.linspace(0, 1, 101))
        self.assertLessEqual(report.best.objective, oracle.best.objective + 0.05)

    def test_uses_at_most_half_the_grid(self):
        report = xclusters_optimize(Evaluator(AnalyticMeasure()))
        self.assertLessEqual(report.evaluations, 189 // 2)
        self.assertEqual(report.blocks_created, sum(1 for e in report.trace if e["action"] == "bound"))

    def test_bounds_are_sound(self):
        report = xclusters_optimize(Evaluator(AnalyticMeasure()))
        bound_rows = [e for e in report.trace if e["action"] == "bound"]
        self.assertGreater(len(bound_rows), 1)
        for row in bound_rows:
            self.assertLessEqual(row["lower"], row["upper"] + 1e-12)
            self.assertLessEqual(row["lower"], true_block_min(row) + 1e-9)

    def test_pruned_blocks_hold_nothing_much_better(self):
        eps = 0.05
        report = xclusters_optimize(Evaluator(AnalyticMeasure()), eps_b=eps)
        for row in report.trace:
            if row["action"] == "prune":
                self.assertGreaterEqual(true_block_min(row), report.best.objective - eps - 1e-9)

    def test_incumbent_never_gets_worse(self):
        report = xclusters_optimize(Evaluator(AnalyticMeasure()))
        seen = [e["incumbent"] for e in report.trace if e["incumbent"] is not None]
        self.assertTrue(all(b <= a for a, b in zip(seen, seen[1:])))
        self.assertEqual(seen[-1], report.best.objective)

    def test_exact_with_zero_tolerance(self):
        ev = Evaluator(AnalyticMeasure())
        report = xclusters_optimize(ev, eps_b=0.0)
        dyadic = min(ev.evaluate(k, m / 128).objective for k in range(3, 12) for m in range(129))
        self.assertAlmostEqual(report.best.objective, dyadic, places=12)

    def test_tolerance_trades_quality_for_work(self):
        objectives, evaluations = [], []
        for eps in (0.01, 0.05, 0.1, 0.2):
            report = xclusters_optimize(Evaluator(AnalyticMeasure()), eps_b=eps)
            objectives.append(report.best.objective)
            evaluations.append(report.evaluations)
        self.assertLessEqual(count_violations(objectives, +1, tol=1e-12), 1)
        self.assertLessEqual(count_violations(evaluations, -1, tol=0), 1)

    def test_constant_stops_after_first_split(self):
        report = xclusters_optimize(Evaluator(ConstantMeasure()))
        self.assertEqual(report.blocks_created, 3)
        self.assertEqual(report.blocks_pruned, 2)
        self.assertEqual(report.best.point(), (11, 0.0))

    def test_lambda_override(self):
        ev = Evaluator(AnalyticMeasure(), lam=1.0)
        report = xclusters_optimize(ev, lam=0.0)
        self.assertEqual(report.extra["lambda"], 0.0)
        self.assertEqual(report.best.k, 11)
        self.assertEqual(report.best.alpha, 0.0)

    def test_bad_arguments(self):
        ev = Evaluator(AnalyticMeasure())
        with self.assertRaises(OptimizerError):
            xclusters_optimize(ev, k_min=5, k_max=4)
        with self.assertRaises(OptimizerError):
            xclusters_optimize(ev, eps_b=-0.1)
        with self.assertRaises(OptimizerError):
            xclusters_optimize(ev, delta_alpha=0.0)

    def test_deterministic_trace(self):
        a = xclusters_optimize(Evaluator(AnalyticMeasure()))
        b = xclusters_optimize(Evaluator(AnalyticMeasure()))
        self.assertEqual(a.trace, b.trace)
        self.assertEqual(a.to_dict(), b.to_dict())


class TestBaselines(QuietTestCase):
    def test_one_point_grid(self):
        ev = Evaluator(AnalyticMeasure(), normalize=False)
        report = grid_search(ev, k_grid=[5], alpha_grid=[0.3])
        self.assertEqual(report.best.point(), (5, 0.3))
        self.assertEqual(report.evaluations, 1)

    def test_full_grid_counts(self):
        report = grid_search(Evaluator(AnalyticMeasure()))
        self.assertEqual(report.evaluations, 9 * 21)
        self.assertEqual(len(ALPHA_GRID), 21)
        scan = min(objective(AnalyticMeasure(), k, a, 1.0, D_REF, N_REF) for k in range(3, 12) for a in ALPHA_GRID)
        self.assertAlmostEqual(report.best.objective, scan, places=12)

    def test_grid_reuses_cache(self):
        ev = Evaluator(AnalyticMeasure())
        grid_search(ev)
        self.assertEqual(grid_search(ev).evaluations, 0)

    def test_empty_grid_raises(self):
        with self.assertRaises(OptimizerError):
            grid_search(Evaluator(AnalyticMeasure()), k_grid=[])

    def test_two_step_knee(self):
        counting = CountingMeasure(KneeMeasure(knee=6))
        report = two_step(Evaluator(counting, normalize=False))
        self.assertEqual(report.extra["elbow_k"], 6)
        self.assertEqual(report.best.point(), (6, 0.0))
        self.assertEqual(counting.total, 1)
        self.assertEqual(sum(counting.distortion_calls.values()), 9)

    def test_two_step_normalized_measures_the_reference_corners(self):
        counting = CountingMeasure(KneeMeasure(knee=6))
        report = two_step(Evaluator(counting))
        self.assertEqual(set(counting.calls), {(6, 0.0), (3, 1.0), (11, 0.0)})
        self.assertEqual(counting.total, 3)
        self.assertEqual(report.evaluations, 3)

    def test_two_step_linear_takes_smallest_interior(self):
        report = two_step(Evaluator(LinearMeasure(), normalize=False))
        self.assertEqual(report.extra["elbow_k"], 4)

    def test_two_step_needs_three_ks(self):
        with self.assertRaises(OptimizerError):
            two_step(Evaluator(LinearMeasure()), k_grid=[3, 4])

    def test_lambda_sweep_trends(self):
        ev = Evaluator(AnalyticMeasure())
        reports = lambda_sweep(ev, eps_b=0.0)
        self.assertEqual([r.extra["lambda"] for r in reports], [0.25, 0.5, 1.0, 2.0, 4.0])
        Ns = [r.best.N for r in reports]
        Ds = [r.best.D for r in reports]
        self.assertTrue(all(b <= a + 1e-9 for a, b in zip(Ns, Ns[1:])))
        self.assertTrue(all(b >= a - 1e-9 for a, b in zip(Ds, Ds[1:])))


class TestMonotonicity(QuietTestCase):
    def test_stub_has_no_violations(self):
        report = monotonicity_report(Evaluator(AnalyticMeasure()))
        self.assertEqual(set(report.violations), {"k_D", "k_N", "alpha_D", "alpha_N"})
        self.assertEqual(sum(report.violations.values()), 0)
        self.assertEqual(len(report.series["k_D"]), 9)
        self.assertEqual(len(report.series["alpha_N"]), 21)

    def test_flat_measure_has_no_violations(self):
        report = monotonicity_report(Evaluator(ConstantMeasure()))
        self.assertEqual(sum(report.violations.values()), 0)

    def test_count_violations(self):
        self.assertEqual(count_violations([3, 2, 2, 4, 1], -1), 1)
        self.assertEqual(count_violations([1, 2, 1, 3], +1), 1)

    def test_write(self):
        tmp = tempfile.mkdtemp()
        try:
            report = monotonicity_report(Evaluator(AnalyticMeasure()), k_grid=[3, 4, 5], alpha_grid=[0.0, 1.0])
            paths = report.write(tmp)
            self.assertEqual(len(paths), 5)
            header = (Path(tmp) / "monotonicity_k_D.csv").read_text().splitlines()[0]
            self.assertEqual(header, "k,mean_D")
            data = json.loads((Path(tmp) / "monotonicity.json").read_text())
            self.assertEqual(data["violations"]["k_N"], 0)
        finally:
            shutil.rmtree(tmp)


class TestProgress(QuietTestCase):
    def test_silent_off_terminal(self):
        grid_search(Evaluator(AnalyticMeasure()), k_grid=[3, 4], alpha_grid=[0.0, 1.0])
        monotonicity_report(Evaluator(AnalyticMeasure()), k_grid=[3, 4], alpha_grid=[0.0, 1.0])
        out = self.buf.getvalue()
        self.assertNotIn("grid search", out)
        self.assertNotIn("monotonicity grid", out)
        self.assertNotIn("\x1b", out)
        self.assertTrue(all(line.startswith(("[GRID]", "[EVAL]")) for line in out.splitlines()))

    def test_bar_enabled_on_a_terminal(self):
        made = []
        real = optimizer.Progress

        def spy(*args, **kwargs):
            made.append(kwargs)
            return real(*args, **kwargs)

        with patch.object(common, "console", Console(file=io.StringIO(), width=120, force_terminal=True)), \
                patch.object(optimizer, "Progress", side_effect=spy):
            report = grid_search(Evaluator(AnalyticMeasure(), k_min=3, k_max=5, workers=2))
        self.assertEqual(report.evaluations, 3 * len(ALPHA_GRID))
        self.assertEqual(len(made), 1)
        self.assertFalse(made[0]["disable"])
        self.assertTrue(made[0]["transient"])

    def test_on_done_counts_every_point(self):
        done = []
        lock = threading.Lock()

        def tick():
            with lock:
                done.append(1)

        points = [(k, a) for k in (3, 4, 5) for a in (0.0, 0.5, 0.5)]
        Evaluator(AnalyticMeasure(), workers=4).evaluate_many(points, on_done=tick)
        self.assertEqual(len(done), len(points))


def inversions(values, direction):
    """Adjacent steps against direction (+1 non-decreasing, -1 non-increasing)."""
    return count_violations(values, direction, tol=1e-9)


class TestSyntheticSearch(QuietTestCase):
    """Searches over the real clustering measure on planted n = 60 data (4 groups of 15)."""

    SEEDS = range(5)
    EPS = (0.01, 0.05, 0.1, 0.2)

    @classmethod
    def setUpClass(cls):
        cls.measures = {}
        with patch.object(common, "console", Console(file=io.StringIO(), width=200)):
            for alignment in (0.9, 0.8):
                for seed in (cls.SEEDS if alignment == 0.9 else (0,)):
                    ds, _ = gen_synthetic(4, 15, 30, noise_sd=0.0, feature_alignment=alignment, seed=seed)
                    cls.measures[(alignment, seed)] = ClusteringMeasure(ds, build_context(ds))
            cls.evaluators = {key: Evaluator(m) for key, m in cls.measures.items()}
            cls.grids = {key: grid_search(ev) for key, ev in cls.evaluators.items()}

    def test_grid_covers_every_point(self):
        for report in self.grids.values():
            self.assertEqual(report.evaluations, 9 * len(ALPHA_GRID))

    def test_branch_and_bound_within_tolerance_of_grid(self):
        for seed in self.SEEDS:
            measure, grid = self.measures[(0.9, seed)], self.grids[(0.9, seed)]
            objectives, evaluations = [], []
            for eps in self.EPS:
                report = xclusters_optimize(Evaluator(measure), eps_b=eps)
                self.assertLessEqual(report.best.objective, grid.best.objective + eps + 1e-9)
                self.assertLessEqual(report.evaluations, 189 // 2)
                objectives.append(report.best.objective)
                evaluations.append(report.evaluations)
            self.assertLessEqual(inversions(objectives, +1), 1)
            self.assertLessEqual(inversions(evaluations, -1), 1)

    def test_monotone_on_average(self):
        report = monotonicity_report(self.evaluators[(0.9, 0)])
        for name, count in report.violations.items():
            self.assertLessEqual(count, 1, name)

    def test_two_step_never_beats_branch_and_bound(self):
        for ev in self.evaluators.values():
            best = xclusters_optimize(ev, eps_b=0.0).best
            self.assertGreaterEqual(two_step(ev).best.objective, best.objective - 1e-9)

    def test_lambda_sweep_trades_size_for_distortion(self):
        reports = lambda_sweep(self.evaluators[(0.9, 1)], eps_b=0.0)
        self.assertLessEqual(inversions([r.best.N for r in reports], -1), 1)
        self.assertLessEqual(inversions([r.best.D for r in reports], +1), 1)


class TestReports(QuietTestCase):
    def test_report_files(self):
        tmp = tempfile.mkdtemp()
        try:
            ev = Evaluator(AnalyticMeasure())
            report = xclusters_optimize(ev)
            json.dumps(report.to_dict())
            self.assertNotIn("wall_time", report.to_dict())
            data = json.loads(Path(write_report_json(Path(tmp) / "r.json", report)).read_text())
            self.assertEqual(len(data["trace"]), len(report.trace))

            lines = Path(write_trace_csv(Path(tmp) / "trace.csv", report)).read_text().splitlines()
            self.assertEqual(lines[0], ",".join(TRACE_COLUMNS))
            self.assertEqual(len(lines), len(report.trace) + 1)

            sweep = lambda_sweep(ev, lambdas=(0.5, 2.0))
            lines = Path(write_sweep_csv(Path(tmp) / "sweep.csv", sweep)).read_text().splitlines()
            self.assertEqual(lines[0], "lambda,k,alpha,D,N,objective,evaluations")
            self.assertEqual(len(lines), 3)
        finally:
            shutil.rmtree(tmp)

    def test_two_step_report_serializes(self):
        report = two_step(Evaluator(KneeMeasure(), normalize=False))
        data = json.loads(json.dumps(report.to_dict()))
        self.assertEqual(data["elbow_k"], 6)
        self.assertEqual(len(data["distortions"]), 9)


if __name__ == "__main__":
    unittest.main()
