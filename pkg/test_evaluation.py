"""
Tests for one-pass evaluation: per-frame metrics, curves, aggregation and
attribute tables.
"""

import numpy as np
import pytest

from services.dataset_io import results_path, write_boxes
from services.domain_models import PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS, BBox, Sequence
from services.errors import DatasetError
from services.evaluation import attribute_results, cle, evaluate_benchmark, iou, mean_result, ope_curves


def raster_iou(a, b, extent=24):
    """Pixel-count IoU for boxes with integer corners."""
    def mask(box):
        grid = np.zeros((extent, extent), dtype=bool)
        grid[int(box.y):int(box.y + box.h), int(box.x):int(box.x + box.w)] = True
        return grid
    first, second = mask(a), mask(b)
    return (first & second).sum() / (first | second).sum()


def make_sequence(name, boxes, attributes=()):
    return Sequence(name, [f'{name}/{k:06d}.png' for k in range(len(boxes))], boxes, attributes)


# =============================================================================
# Per-frame metrics
# =============================================================================

class TestFrameMetrics:
    def test_iou_of_half_shifted_squares(self):
        assert iou(BBox(0, 0, 2, 2), BBox(1, 0, 2, 2)) == pytest.approx(1.0 / 3.0)

    def test_iou_identity_and_disjoint(self):
        assert iou(BBox(3, 4, 5, 6), BBox(3, 4, 5, 6)) == 1.0
        assert iou(BBox(0, 0, 2, 2), BBox(2, 0, 2, 2)) == 0.0

    def test_iou_matches_rasterization(self, rng):
        for _ in range(1000):
            boxes = []
            for _ in range(2):
                x, y = rng.integers(0, 12, size=2)
                w, h = rng.integers(1, 12, size=2)
                boxes.append(BBox(x, y, w, h))
            assert iou(*boxes) == raster_iou(*boxes)
            assert iou(*boxes) == iou(*reversed(boxes))

    def test_center_error(self):
        assert cle(BBox(0, 0, 2, 2), BBox(3, 4, 2, 2)) == 5.0

    def test_non_positive_boxes_rejected(self):
        with pytest.raises(ValueError):
            iou(BBox(0, 0, 0, 2), BBox(0, 0, 2, 2))
        with pytest.raises(ValueError):
            cle(BBox(0, 0, 2, 2), BBox(0, 0, 2, -1))


# =============================================================================
# Curves
# =============================================================================

class TestCurves:
    def test_threshold_grids(self):
        assert PRECISION_THRESHOLDS == list(range(51))
        assert len(SUCCESS_THRESHOLDS) == 21
        assert SUCCESS_THRESHOLDS[0] == 0.0 and SUCCESS_THRESHOLDS[-1] == 1.0

    def test_perfect_tracking(self):
        boxes = [BBox(k, k, 10, 10) for k in range(5)]
        result = ope_curves(boxes, boxes)
        assert result.precision_curve == [1.0] * 51
        assert result.precision_at_20 == 1.0
        assert result.auc == pytest.approx(20.0 / 21.0)

    def test_evenly_spread_overlaps_give_half_auc(self):
        overlaps = [0.025 + 0.05 * k for k in range(20)]
        truth = [BBox(0, 0, 10, 10)] * 20
        predicted = [BBox(0, 0, 10.0 / v, 10) for v in overlaps]
        result = ope_curves(predicted, truth)
        np.testing.assert_allclose(result.iou_trace, overlaps, atol=1e-12)
        assert result.auc == pytest.approx(0.5)

    def test_precision_counts_errors_at_most_threshold(self):
        truth = [BBox(0, 0, 2, 2)] * 4
        predicted = [BBox(dx, 0, 2, 2) for dx in (0, 5, 20, 30)]
        result = ope_curves(predicted, truth)
        assert result.precision_curve[0] == 0.25
        assert result.precision_curve[5] == 0.5
        assert result.precision_at_20 == 0.75
        assert result.precision_curve[30] == 1.0
        assert result.frames_over(20) == [3]

    def test_length_mismatch_rejected(self):
        with pytest.raises(DatasetError, match='results=1 gt=2'):
            ope_curves([BBox(0, 0, 1, 1)], [BBox(0, 0, 1, 1)] * 2)

    def test_empty_sequence_rejected(self):
        with pytest.raises(DatasetError):
            ope_curves([], [])


# =============================================================================
# Aggregation
# =============================================================================

class TestAggregation:
    def test_sequences_weigh_equally(self):
        perfect = ope_curves([BBox(0, 0, 2, 2)] * 10, [BBox(0, 0, 2, 2)] * 10)
        lost = ope_curves([BBox(100, 100, 2, 2)], [BBox(0, 0, 2, 2)])
        aggregate = mean_result([perfect, lost])
        assert aggregate.precision_at_20 == 0.5
        assert aggregate.auc == pytest.approx((20.0 / 21.0) / 2)

    def test_no_results_gives_none(self):
        assert mean_result([]) is None

    def test_attribute_table_uses_tagged_sequences_only(self):
        good = make_sequence('good', [BBox(0, 0, 2, 2)] * 3, {'SV'})
        bad = make_sequence('bad', [BBox(0, 0, 2, 2)] * 3, {'POC', 'SV'})
        results = {'good': ope_curves(good.ground_truth, good.ground_truth),
                   'bad': ope_curves([BBox(50, 50, 2, 2)] * 3, bad.ground_truth)}
        table = attribute_results([good, bad], results)
        assert sorted(table) == ['POC', 'SV']
        assert table['POC'].precision_at_20 == 0.0
        assert table['SV'].precision_at_20 == 0.5


class TestEvaluateBenchmark:
    def test_missing_results_are_skipped_with_warning(self, tmp_path):
        first = make_sequence('first', [BBox(1, 1, 4, 4)] * 3)
        second = make_sequence('second', [BBox(1, 1, 4, 4)] * 3)
        write_boxes(results_path(tmp_path, 'first'), first.ground_truth)
        report = evaluate_benchmark([first, second], tmp_path)
        assert report.evaluated == 1
        assert report.aggregate.precision_at_20 == 1.0
        assert len(report.warnings) == 1 and 'second' in report.warnings[0]

    def test_frame_count_mismatch_names_the_sequence(self, tmp_path):
        sequence = make_sequence('short', [BBox(1, 1, 4, 4)] * 3)
        write_boxes(results_path(tmp_path, 'short'), sequence.ground_truth[:2])
        with pytest.raises(DatasetError, match='short'):
            evaluate_benchmark([sequence], tmp_path)

    def test_nothing_evaluated(self, tmp_path):
        report = evaluate_benchmark([make_sequence('alone', [BBox(1, 1, 4, 4)])], tmp_path)
        assert report.aggregate is None
        assert report.to_dict()['aggregate'] is None

    def test_report_dictionary(self, tmp_path):
        sequence = make_sequence('seq', [BBox(1, 1, 4, 4)] * 2, {'IV'})
        write_boxes(results_path(tmp_path, 'seq'), [BBox(1, 1, 4, 4), BBox(40, 40, 4, 4)])
        report = evaluate_benchmark([sequence], tmp_path).to_dict()
        assert report['evaluated_sequences'] == 1
        assert report['sequences']['seq']['frames_over_20px'] == [1]
        assert report['attributes']['IV']['precision_at_20'] == 0.5
