import math

import numpy as np
import pytest

from landmark_diffusion.data import SpacingRule
from landmark_diffusion.evaluation import (
    EvaluationReport,
    aggregate_runs,
    build_report,
    compute_spacing,
    radial_errors,
    render_table,
    sdr,
)
from landmark_diffusion.heatmaps import LandmarkSet


def lset(points, size=(100, 100)):
    return LandmarkSet(points=points, image_size=size)


class TestRadialErrors:
    def test_perfect_prediction(self):
        truth = lset([(1, 2), (3, 4)])
        np.testing.assert_array_equal(radial_errors(truth, truth), [0.0, 0.0])

    def test_345_triangle(self):
        errs = radial_errors(lset([(13, 14)]), lset([(10, 10)]))
        np.testing.assert_allclose(errs, [5.0])

    def test_spacing_conversion(self):
        errs = radial_errors(lset([(13, 14)]), lset([(10, 10)]), spacing=0.1)
        np.testing.assert_allclose(errs, [0.5])

    def test_count_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            radial_errors(lset([(1, 1)]), lset([(1, 1), (2, 2)]))

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(17)
        pred = rng.uniform(0, 1000, size=(1000, 2))
        truth = rng.uniform(0, 1000, size=(1000, 2))
        errs = radial_errors(lset(pred, (1000, 1000)), lset(truth, (1000, 1000)))
        for i in range(1000):
            expected = math.sqrt(
                (pred[i][0] - truth[i][0]) ** 2 + (pred[i][1] - truth[i][1]) ** 2
            )
            assert abs(errs[i] - expected) <= 1e-9 * max(expected, 1.0)

    def test_unit_invariance(self):
        rng = np.random.default_rng(2)
        pred = rng.uniform(0, 100, size=(10, 2))
        truth = rng.uniform(0, 100, size=(10, 2))
        base = radial_errors(lset(pred), lset(truth), spacing=0.1)
        scaled = radial_errors(lset(pred * 4), lset(truth * 4), spacing=0.1 / 4)
        np.testing.assert_allclose(base, scaled, rtol=1e-12)


class TestSdr:
    def test_two_thirds(self):
        out = sdr([1.0, 5.0, 10.0], [6.0])
        assert abs(out[6.0] - 200.0 / 3.0) < 1e-9

    def test_all_zero_errors(self):
        out = sdr([0.0, 0.0], [2.0, 2.5, 3.0, 4.0])
        assert all(v == 100.0 for v in out.values())

    def test_inclusive_threshold(self):
        assert sdr([3.0], [3.0])[3.0] == 100.0

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(33)
        errs = rng.exponential(5.0, size=200)
        for _ in range(100):
            thresholds = np.sort(rng.uniform(0.1, 30.0, size=5))
            out = sdr(errs, thresholds)
            vals = [out[float(t)] for t in thresholds]
            assert all(a <= b for a, b in zip(vals, vals[1:]))
            assert all(0.0 <= v <= 100.0 for v in vals)

    def test_empty_errors_rejected(self):
        with pytest.raises(ValueError):
            sdr([], [1.0])

    def test_dataset_threshold_conventions(self):
        errs = [1.0, 2.2, 2.7, 3.5, 9.0]
        chest = sdr(errs, [3.0, 6.0, 9.0])
        ceph = sdr(errs, [2.0, 2.5, 3.0, 4.0])
        hand = sdr(errs, [2.0, 4.0, 10.0])
        assert list(chest) == [3.0, 6.0, 9.0]
        assert list(ceph) == [2.0, 2.5, 3.0, 4.0]
        assert list(hand) == [2.0, 4.0, 10.0]


class TestComputeSpacing:
    def test_fixed(self):
        rule = SpacingRule(rule="fixed_spacing", mm_per_px=0.1)
        assert compute_spacing(rule, lset([(0, 0)])) == 0.1

    def test_wrist_pair(self):
        rule = SpacingRule(rule="wrist_pair", wrist_indices=(0, 1), reference_length_mm=50.0)
        truth = lset([(0, 0), (100, 0)])
        assert compute_spacing(rule, truth) == 0.5

    def test_none(self):
        assert compute_spacing(SpacingRule(rule="none"), lset([(0, 0)])) is None

    def test_coincident_wrist_points(self):
        rule = SpacingRule(rule="wrist_pair", wrist_indices=(0, 1))
        with pytest.raises(ValueError, match="coincident"):
            compute_spacing(rule, lset([(5, 5), (5, 5)]))


class TestAggregateAndReports:
    def make_report(self, mre_target, k=5):
        return build_report(
            dataset="toy",
            per_image_errors=[[mre_target, mre_target]],
            thresholds=[2.0, 4.0],
            label_budget=k,
        )

    def test_single_run_zero_std(self):
        agg = aggregate_runs([self.make_report(3.0)])
        assert agg.mre_std == 0.0 and agg.run_count == 1

    def test_mean_and_population_std(self):
        agg = aggregate_runs([self.make_report(4.0), self.make_report(6.0)])
        assert agg.mre == 5.0 and agg.mre_std == 1.0

    def test_identical_runs(self):
        agg = aggregate_runs([self.make_report(2.0)] * 3)
        assert agg.mre_std == 0.0
        assert all(v == 0.0 for v in agg.sdr_std.values())

    def test_inconsistent_datasets_rejected(self):
        other = build_report("other", [[1.0]], [2.0], label_budget=5)
        with pytest.raises(ValueError, match="inconsistent"):
            aggregate_runs([self.make_report(1.0), other])

    def test_mre_is_mean_over_all_pairs(self):
        rng = np.random.default_rng(8)
        per_image = [list(rng.uniform(0, 10, size=4)) for _ in range(7)]
        rep = build_report("toy", per_image, [5.0])
        flat = [e for row in per_image for e in row]
        assert abs(rep.mre - sum(flat) / len(flat)) <= 1e-9 * rep.mre

    def test_json_roundtrip(self, tmp_path):
        rep = self.make_report(3.25)
        path = tmp_path / "report.json"
        rep.save(path)
        again = EvaluationReport.load(path)
        assert again == rep

    def test_render_table(self):
        reps = [self.make_report(3.0, k=1), self.make_report(2.0, k=5)]
        text = render_table(reps)
        assert "MRE (px)" in text and "SDR 2px (%)" in text
        assert text.count("\n") >= 4
        csv = render_table(reps, delimiter=",")
        assert csv.splitlines()[0].startswith("dataset,k,runs")
