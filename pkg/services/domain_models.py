import math

PRECISION_THRESHOLDS = list(range(51))
SUCCESS_THRESHOLDS = [round(0.05 * k, 2) for k in range(21)]
RANKING_THRESHOLD = 20


class BBox:
    """Axis-aligned box: top-left corner (x, y) and extents (w, h) in pixels."""

    def __init__(self, x, y, w, h):
        self.x = float(x)
        self.y = float(y)
        self.w = float(w)
        self.h = float(h)

    def is_valid(self):
        return self.w > 0 and self.h > 0 and all(math.isfinite(v) for v in self.as_tuple())

    @property
    def center(self):
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    @property
    def area(self):
        return self.w * self.h

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    def as_tuple(self):
        return self.x, self.y, self.w, self.h

    def clipped(self, frame_width, frame_height):
        """Intersection with the frame [0, W] x [0, H]; keeps at least one pixel of extent."""
        x1 = min(max(self.x, 0.0), frame_width - 1.0)
        y1 = min(max(self.y, 0.0), frame_height - 1.0)
        x2 = min(max(self.x + self.w, x1 + 1.0), float(frame_width))
        y2 = min(max(self.y + self.h, y1 + 1.0), float(frame_height))
        return BBox(x1, y1, x2 - x1, y2 - y1)

    def to_line(self):
        return ','.join(repr(v) for v in self.as_tuple())

    def to_dict(self):
        return {'x': self.x, 'y': self.y, 'w': self.w, 'h': self.h}

    def __eq__(self, other):
        return isinstance(other, BBox) and self.as_tuple() == other.as_tuple()

    def __hash__(self):
        return hash(self.as_tuple())

    def __repr__(self):
        return f'BBox({self.x:g}, {self.y:g}, {self.w:g}, {self.h:g})'


class Sequence:
    def __init__(self, name, frame_paths, ground_truth, attributes=None, frame_attributes=None):
        self.name = name
        self.frame_paths = list(frame_paths)
        self.ground_truth = list(ground_truth)
        self.attributes = set(attributes or ())
        self.frame_attributes = list(frame_attributes) if frame_attributes is not None else None

    def is_valid(self):
        return len(self.frame_paths) == len(self.ground_truth) and all(b.is_valid() for b in self.ground_truth)

    def __len__(self):
        return len(self.frame_paths)

    def has_attribute(self, tag):
        return tag in self.attributes

    def to_dict(self):
        return {
            'name': self.name,
            'frames': len(self.frame_paths),
            'attributes': sorted(self.attributes),
        }


class OpeResult:
    """One-pass evaluation curves for one sequence or an aggregate."""

    def __init__(self, precision_curve, success_curve, cle_trace=None, iou_trace=None):
        self.precision_curve = list(precision_curve)
        self.success_curve = list(success_curve)
        self.cle_trace = list(cle_trace) if cle_trace is not None else []
        self.iou_trace = list(iou_trace) if iou_trace is not None else []

    @property
    def precision_at_20(self):
        return self.precision_curve[RANKING_THRESHOLD]

    @property
    def auc(self):
        return sum(self.success_curve) / len(self.success_curve)

    def frames_over(self, limit=RANKING_THRESHOLD):
        """Frame indices whose center error exceeds ``limit`` pixels."""
        return [index for index, error in enumerate(self.cle_trace) if error > limit]

    def to_dict(self):
        result = {
            'precision_at_20': self.precision_at_20,
            'auc': self.auc,
            'precision_curve': self.precision_curve,
            'success_curve': self.success_curve,
        }
        if self.cle_trace:
            result['cle_trace'] = self.cle_trace
            result['iou_trace'] = self.iou_trace
            result['frames_over_20px'] = self.frames_over()
        return result


class BenchmarkReport:
    def __init__(self, sequences, aggregate, attributes, warnings):
        self.sequences = dict(sequences)
        self.aggregate = aggregate
        self.attributes = dict(attributes)
        self.warnings = list(warnings)

    @property
    def evaluated(self):
        return len(self.sequences)

    def to_dict(self):
        return {
            'evaluated_sequences': self.evaluated,
            'aggregate': self.aggregate.to_dict() if self.aggregate is not None else None,
            'attributes': {tag: result.to_dict() for tag, result in sorted(self.attributes.items())},
            'sequences': {name: result.to_dict() for name, result in self.sequences.items()},
            'warnings': self.warnings,
            'thresholds': {'precision': PRECISION_THRESHOLDS, 'success': SUCCESS_THRESHOLDS},
        }
