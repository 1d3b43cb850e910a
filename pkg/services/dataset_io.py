"""
Benchmark-format dataset I/O.

Sequence directory layout:
    <name>/img/000001.png ...     zero-padded frames, sorted by file name
    <name>/groundtruth_rect.txt   one "x,y,w,h" per frame (comma or tab separated)
    <name>/att.txt                optional sequence tags, e.g. "ARC,POC"
    <name>/frame_att.txt          optional per-frame tags, one line per frame

Results files use the ground-truth box format, one file per sequence.
"""

import logging
import re
from pathlib import Path
from typing import List, Sequence as SequenceType, Set, Union

from services.domain_models import BBox, Sequence
from services.errors import DatasetError

logger = logging.getLogger(__name__)

GROUND_TRUTH_FILE = 'groundtruth_rect.txt'
ATTRIBUTE_FILE = 'att.txt'
FRAME_ATTRIBUTE_FILE = 'frame_att.txt'
FRAME_DIR = 'img'
FRAME_SUFFIXES = {'.png', '.jpg', '.jpeg', '.bmp'}

_SEPARATORS = re.compile(r'[,\t]')


def parse_box_line(line: str, number: int, source: Union[str, Path]) -> BBox:
    fields = [f.strip() for f in _SEPARATORS.split(line.strip())]
    if len(fields) != 4:
        raise DatasetError(f'{source}: line {number} needs 4 fields "x,y,w,h", got {line.strip()!r}')
    try:
        x, y, w, h = (float(f) for f in fields)
    except ValueError as error:
        raise DatasetError(f'{source}: line {number} is not numeric: {line.strip()!r}') from error
    return BBox(x, y, w, h)


def read_boxes(path: Union[str, Path]) -> List[BBox]:
    lines = Path(path).read_text(encoding='utf-8').splitlines()
    return [parse_box_line(line, number, path) for number, line in enumerate(lines, start=1) if line.strip()]


def write_boxes(path: Union[str, Path], boxes: SequenceType[BBox]):
    """Write one "x,y,w,h" line per box; floats use repr so they read back exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(''.join(box.to_line() + '\n' for box in boxes), encoding='utf-8')


def results_path(results_dir: Union[str, Path], name: str) -> Path:
    return Path(results_dir) / f'{name}.txt'


def parse_tags(text: str) -> Set[str]:
    return {tag.strip().upper() for tag in re.split(r'[,\s]+', text) if tag.strip()}


def load_sequence(directory: Union[str, Path]) -> Sequence:
    """
    Read one sequence directory.

    Raises:
        DatasetError: missing ground truth, frame/ground-truth count mismatch,
            malformed line or non-positive box
    """
    directory = Path(directory)
    gt_path = directory / GROUND_TRUTH_FILE
    if not gt_path.is_file():
        raise DatasetError(f'{directory.name}: missing {GROUND_TRUTH_FILE}')
    frame_dir = directory / FRAME_DIR
    frames = sorted(p for p in frame_dir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES) if frame_dir.is_dir() else []
    boxes = read_boxes(gt_path)
    if len(frames) != len(boxes):
        raise DatasetError(f'{directory.name}: frames={len(frames)} gt={len(boxes)}')
    for number, box in enumerate(boxes, start=1):
        if not (box.w > 0 and box.h > 0):
            raise DatasetError(f'{gt_path}: line {number} has non-positive extents {box}')

    attributes: Set[str] = set()
    if (directory / ATTRIBUTE_FILE).is_file():
        attributes = parse_tags((directory / ATTRIBUTE_FILE).read_text(encoding='utf-8'))
    frame_attributes = None
    if (directory / FRAME_ATTRIBUTE_FILE).is_file():
        lines = (directory / FRAME_ATTRIBUTE_FILE).read_text(encoding='utf-8').split('\n')
        frame_attributes = [parse_tags(line) for line in lines[:len(frames)]]
        frame_attributes += [set() for _ in range(len(frames) - len(frame_attributes))]
    return Sequence(directory.name, frames, boxes, attributes, frame_attributes)


def list_sequences(root: Union[str, Path]) -> List[Sequence]:
    """Load every sequence directory directly under ``root`` (or ``root`` itself if it is one)."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f'Dataset directory not found: {root}')
    if (root / GROUND_TRUTH_FILE).is_file():
        return [load_sequence(root)]
    sequences = [load_sequence(child) for child in sorted(root.iterdir()) if (child / GROUND_TRUTH_FILE).is_file()]
    if not sequences:
        raise DatasetError(f'No sequences (directories with {GROUND_TRUTH_FILE}) under {root}')
    return sequences


def write_tags(directory: Union[str, Path], attributes: Set[str], frame_attributes: SequenceType[Set[str]]):
    directory = Path(directory)
    (directory / ATTRIBUTE_FILE).write_text(','.join(sorted(attributes)) + '\n', encoding='utf-8')
    (directory / FRAME_ATTRIBUTE_FILE).write_text(
        ''.join(','.join(sorted(tags)) + '\n' for tags in frame_attributes), encoding='utf-8')
