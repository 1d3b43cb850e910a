"""
One-Pass Evaluation Service

- iou / cle per frame
- ope_curves: precision (CLE <= t, t = 0..50 px) and success (IoU > tau, tau = 0..1 step 0.05)
- evaluate_benchmark: per-sequence curves, mean-over-sequences aggregate and
  per-attribute aggregates over sequence-level tags
"""

import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence as SequenceType, Union

from services.dataset_io import read_boxes, results_path
from services.domain_models import (PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS, BBox, BenchmarkReport, OpeResult,
                                    Sequence)
from services.errors import DatasetError

logger = logging.getLogger(__name__)


def _require_positive(box: BBox):
    if not (box.w > 0 and box.h > 0):
        raise ValueError(f'Box extents must be positive, got {box}')


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union in [0, 1]; disjoint boxes give 0."""
    _require_positive(a)
    _require_positive(b)
    inter_w = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    inter_h = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    return inter / (a.area + b.area - inter)


def cle(a: BBox, b: BBox) -> float:
    """Center location error: Euclidean distance of the box centers."""
    _require_positive(a)
    _require_positive(b)
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def ope_curves(predicted: SequenceType[BBox], ground_truth: SequenceType[BBox]) -> OpeResult:
    if len(predicted) != len(ground_truth):
        raise DatasetError(f'Result/ground-truth length mismatch: results={len(predicted)} gt={len(ground_truth)}')
    if not predicted:
        raise DatasetError('Cannot evaluate an empty sequence')
    errors = [cle(p, g) for p, g in zip(predicted, ground_truth)]
    overlaps = [iou(p, g) for p, g in zip(predicted, ground_truth)]
    frames = len(errors)
    precision = [sum(1 for e in errors if e <= t) / frames for t in PRECISION_THRESHOLDS]
    success = [sum(1 for o in overlaps if o > tau) / frames for tau in SUCCESS_THRESHOLDS]
    return OpeResult(precision, success, cle_trace=errors, iou_trace=overlaps)


def mean_result(results: SequenceType[OpeResult]) -> Optional[OpeResult]:
    """Equal-weight mean of several sequences' curves."""
    if not results:
        return None
    count = len(results)
    precision = [sum(r.precision_curve[k] for r in results) / count for k in range(len(PRECISION_THRESHOLDS))]
    success = [sum(r.success_curve[k] for r in results) / count for k in range(len(SUCCESS_THRESHOLDS))]
    return OpeResult(precision, success)


def attribute_results(sequences: SequenceType[Sequence], results: Dict[str, OpeResult]) -> Dict[str, OpeResult]:
    tags = sorted({tag for sequence in sequences for tag in sequence.attributes})
    table = {}
    for tag in tags:
        tagged = [results[s.name] for s in sequences if s.has_attribute(tag) and s.name in results]
        if tagged:
            table[tag] = mean_result(tagged)
    return table


def evaluate_benchmark(sequences: SequenceType[Sequence], results_dir: Union[str, Path]) -> BenchmarkReport:
    """
    Evaluate every sequence whose results file exists in ``results_dir``.

    Missing results files are skipped with a warning recorded in the report;
    length mismatches raise DatasetError naming the sequence.
    """
    per_sequence: Dict[str, OpeResult] = {}
    warnings: List[str] = []
    for sequence in sequences:
        path = results_path(results_dir, sequence.name)
        if not path.exists():
            message = f'{sequence.name}: no results file at {path}, skipped'
            logger.warning(message)
            warnings.append(message)
            continue
        predicted = read_boxes(path)
        if len(predicted) != len(sequence.ground_truth):
            raise DatasetError(
                f'{sequence.name}: results={len(predicted)} gt={len(sequence.ground_truth)} frame count mismatch')
        per_sequence[sequence.name] = ope_curves(predicted, sequence.ground_truth)
        logger.info(f'{sequence.name}: precision@20={per_sequence[sequence.name].precision_at_20:.3f} '
                    f'auc={per_sequence[sequence.name].auc:.3f}')
    aggregate = mean_result(list(per_sequence.values()))
    return BenchmarkReport(per_sequence, aggregate, attribute_results(sequences, per_sequence), warnings)
