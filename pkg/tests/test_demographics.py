import unittest
from unittest.mock import patch
import io
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

# Add project root to sys.path to import the xclusters modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from rich.console import Console
from scipy.spatial.distance import pdist, squareform

import common
from clustering import k_medoids
from common import DataError
from demographics import (
    TemporalRecord, aggregate_demographics, dataset_from_dict, dataset_to_dict,
    gen_synthetic, load_temporal_relation, minmax_normalize, moving_average,
    smooth_dataset,
)

SCHEMA = {"timestamp": "date", "value": "sales", "features": ["region", "channel"]}


def rec(day, value, region, channel="web"):
    return TemporalRecord(day, float(value), (("region", region), ("channel", channel)))


class QuietTestCase(unittest.TestCase):
    def setUp(self):
        self.buf = io.StringIO()
        self.console_patcher = patch.object(common, "console", Console(file=self.buf, width=200))
        self.console_patcher.start()
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        self.console_patcher.stop()
        shutil.rmtree(self.tmp)

    def write(self, name, text):
        path = Path(self.tmp) / name
        path.write_text(text)
        return path


class TestLoadRelation(QuietTestCase):
    def test_parses_rows(self):
        path = self.write("r.csv",
                          "date,sales,region,channel\n"
                          "2024-01-01,5,north,web\n"
                          "2024-01-03,7,north,web\n"
                          "2024-01-02,2,south,shop\n")
        rel = load_temporal_relation(path, SCHEMA)
        self.assertEqual(len(rel), 3)
        self.assertEqual(rel.skipped, 0)
        self.assertEqual(rel.start_date, "2024-01-01")
        self.assertEqual(rel.days, 3)
        self.assertEqual([r.timestamp for r in rel], [0, 2, 1])
        self.assertEqual(rel[2].feature("region"), "south")

    def test_bad_value_is_skipped_and_counted(self):
        path = self.write("r.csv",
                          "date,sales,region,channel\n"
                          "2024-01-01,5,north,web\n"
                          "2024-01-02,abc,north,web\n"
                          "not-a-date,4,south,web\n")
        rel = load_temporal_relation(path, SCHEMA)
        self.assertEqual(len(rel), 1)
        self.assertEqual(rel.skipped, 2)
        self.assertIn("skipped 2 row(s)", self.buf.getvalue())

    def test_empty_file_raises(self):
        path = self.write("empty.csv", "")
        with self.assertRaises(DataError):
            load_temporal_relation(path, SCHEMA)

    def test_header_only_raises(self):
        path = self.write("h.csv", "date,sales,region,channel\n")
        with self.assertRaises(DataError):
            load_temporal_relation(path, SCHEMA)

    def test_missing_column_raises(self):
        path = self.write("r.csv", "date,sales,region\n2024-01-01,5,north\n")
        with self.assertRaises(DataError) as ctx:
            load_temporal_relation(path, SCHEMA)
        self.assertIn("channel", str(ctx.exception))

    def test_missing_file_raises(self):
        with self.assertRaises(DataError):
            load_temporal_relation(Path(self.tmp) / "nope.csv", SCHEMA)


class TestAggregate(QuietTestCase):
    def test_threshold_drops_light_combinations(self):
        records = [rec(0, 85, "a"), rec(0, 10, "b"), rec(0, 5, "c")]
        ds = aggregate_demographics(records, ["region"], 0.10)
        self.assertEqual(ds.labels, ["region=a", "region=b"])
        self.assertAlmostEqual(ds.total_weight, 95.0)
        self.assertAlmostEqual(ds.dropped_weight, 5.0)
        self.assertEqual(ds.feature_names, ["region=a", "region=b"])

    def test_zero_fraction_keeps_everything(self):
        records = [rec(0, 85, "a"), rec(0, 10, "b"), rec(0, 5, "c")]
        ds = aggregate_demographics(records, ["region"], 0.0)
        self.assertEqual(ds.n, 3)
        self.assertEqual(ds.dropped_weight, 0.0)

    def test_series_zero_filled(self):
        records = [rec(0, 5, "a"), rec(2, 7, "a"), rec(1, 1, "b")]
        ds = aggregate_demographics(records, ["region"], 0.0)
        a = ds.demographics[0]
        np.testing.assert_array_equal(a.series, [5.0, 0.0, 7.0])
        self.assertEqual(a.weight, 12.0)

    def test_weight_is_conserved_in_series(self):
        rng = np.random.default_rng(3)
        records = [rec(int(rng.integers(0, 10)), float(rng.uniform(0, 5)),
                       str(rng.integers(0, 3)), str(rng.integers(0, 2)))
                   for _ in range(200)]
        ds = aggregate_demographics(records, ["region", "channel"], 0.0)
        self.assertAlmostEqual(ds.series_matrix.sum(), ds.total_weight, places=9)
        np.testing.assert_allclose(ds.series_matrix.sum(axis=1), ds.weights)

    def test_one_hot_per_attribute(self):
        records = [rec(0, 1, "a", "web"), rec(0, 1, "b", "shop"), rec(0, 1, "a", "shop")]
        ds = aggregate_demographics(records, ["region", "channel"], 0.0)
        self.assertEqual(ds.features.shape, (3, 4))
        np.testing.assert_array_equal(ds.features.sum(axis=1), [2, 2, 2])
        self.assertEqual(len(set(ds.labels)), 3)

    def test_unknown_feature_raises(self):
        with self.assertRaises(DataError):
            aggregate_demographics([rec(0, 1, "a")], ["colour"], 0.0)

    def test_nothing_survives_raises(self):
        with self.assertRaises(DataError):
            aggregate_demographics([rec(0, 0, "a")], ["region"], 0.5)

    def test_bad_fraction_raises(self):
        with self.assertRaises(DataError):
            aggregate_demographics([rec(0, 1, "a")], ["region"], 1.5)


class TestSeries(unittest.TestCase):
    def test_moving_average_prefix(self):
        np.testing.assert_allclose(moving_average([1, 2, 3, 4], 2), [1.0, 1.5, 2.5, 3.5])

    def test_moving_average_window_one_is_identity(self):
        np.testing.assert_allclose(moving_average([3, 1, 4], 1), [3, 1, 4])

    def test_moving_average_long_window(self):
        np.testing.assert_allclose(moving_average([2, 4, 6], 7), [2.0, 3.0, 4.0])

    def test_moving_average_bad_window(self):
        with self.assertRaises(DataError):
            moving_average([1, 2], 0)

    def test_minmax(self):
        np.testing.assert_allclose(minmax_normalize([2, 4, 6]), [0.0, 0.5, 1.0])

    def test_minmax_flat_is_zero(self):
        np.testing.assert_array_equal(minmax_normalize([5, 5, 5]), [0.0, 0.0, 0.0])

    def test_smooth_dataset_keeps_weights(self):
        ds, _ = gen_synthetic(2, 3, 10, seed=1)
        out = smooth_dataset(ds, window=3)
        np.testing.assert_array_equal(out.weights, ds.weights)
        self.assertTrue((out.series_matrix <= 1.0).all())
        self.assertTrue((out.series_matrix >= 0.0).all())


class TestSynthetic(unittest.TestCase):
    def test_deterministic(self):
        a, ta = gen_synthetic(3, 4, 12, seed=7)
        b, tb = gen_synthetic(3, 4, 12, seed=7)
        np.testing.assert_array_equal(a.series_matrix, b.series_matrix)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(ta, tb)

    def test_truth_and_shape(self):
        ds, truth = gen_synthetic(3, 4, 12)
        self.assertEqual(ds.n, 12)
        self.assertEqual(ds.series_matrix.shape, (12, 12))
        np.testing.assert_array_equal(truth, np.repeat([0, 1, 2], 4))

    def test_full_alignment_segment_is_group(self):
        ds, truth = gen_synthetic(3, 4, 12, feature_alignment=1.0)
        np.testing.assert_array_equal(ds.features[:, :3].argmax(axis=1), truth)

    def test_features_separate_the_groups(self):
        for alignment in (1.0, 0.9):
            ds, truth = gen_synthetic(4, 15, 8, feature_alignment=alignment, seed=1)
            e = squareform(pdist(ds.features.astype(bool), "jaccard"))
            same = truth[:, None] == truth[None, :]
            off = ~np.eye(ds.n, dtype=bool)
            self.assertLess(e[same & off].max(), e[~same].min(), alignment)

    def test_features_alone_recover_the_groups(self):
        ds, truth = gen_synthetic(4, 15, 8, feature_alignment=0.9, seed=2)
        c = k_medoids(squareform(pdist(ds.features.astype(bool), "jaccard")), 4)
        expected = frozenset(frozenset(np.flatnonzero(truth == g).tolist()) for g in range(4))
        self.assertEqual(c.partition(), expected)

    def test_misaligned_cells_are_spread_over_members(self):
        ds, truth = gen_synthetic(3, 10, 8, feature_alignment=0.85, seed=5)
        other = ds.features[:, [j for j, name in enumerate(ds.feature_names) if name.endswith("=other")]]
        per_member = other.sum(axis=1)
        for g in range(3):
            self.assertEqual(per_member[truth == g].sum(), round(0.15 * 10 * 4))
        self.assertLessEqual(per_member.max(), 1)

    def test_no_shared_bit_outside_the_traits(self):
        ds, _ = gen_synthetic(3, 4, 8, feature_alignment=0.0)
        members = [j for j, name in enumerate(ds.feature_names) if name.startswith("member=")]
        np.testing.assert_array_equal(ds.features[:, members], np.eye(ds.n, dtype=np.uint8))

    def test_combinations_are_unique(self):
        ds, _ = gen_synthetic(4, 5, 8, feature_alignment=0.0, seed=2)
        self.assertEqual(len(set(ds.labels)), ds.n)

    def test_noiseless_groups_share_a_series(self):
        ds, truth = gen_synthetic(3, 4, 12, noise_sd=0.0)
        S = ds.series_matrix
        for g in range(3):
            rows = S[truth == g]
            np.testing.assert_array_equal(rows, np.tile(rows[0], (4, 1)))
        self.assertFalse(np.array_equal(S[0], S[4]))

    def test_bad_arguments(self):
        with self.assertRaises(DataError):
            gen_synthetic(1, 4, 12)
        with self.assertRaises(DataError):
            gen_synthetic(3, 4, 12, feature_alignment=2.0)

    def test_dict_reload(self):
        ds, _ = gen_synthetic(2, 3, 6, seed=4)
        back = dataset_from_dict(dataset_to_dict(ds))
        np.testing.assert_allclose(back.series_matrix, ds.series_matrix)
        np.testing.assert_array_equal(back.features, ds.features)
        self.assertEqual(back.labels, ds.labels)
        self.assertEqual(back.meta, ds.meta)

    def test_malformed_dump_raises(self):
        with self.assertRaises(DataError):
            dataset_from_dict({"demographics": [{"id": 0}]})


if __name__ == "__main__":
    unittest.main()
