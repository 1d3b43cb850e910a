"""
Weights container (PRLW) and checkpoint metadata.

Layout, little-endian, no padding:
    b"PRLW" | u32 version=1 | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 rank | u32 extent * rank | float32 * prod(extents)
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from services.errors import WeightsFormatError

logger = logging.getLogger(__name__)

MAGIC = b'PRLW'
VERSION = 1


def encode_weights(weights: Dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack('<II', VERSION, len(weights))]
    for name, array in weights.items():
        encoded = name.encode('utf-8')
        array = np.asarray(array, dtype='<f4')
        if len(encoded) > 0xFFFF:
            raise WeightsFormatError(f'Entry name too long ({len(encoded)} bytes): {name[:40]}...')
        if array.ndim > 4:
            raise WeightsFormatError(f'{name}: rank {array.ndim} exceeds 4')
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())
    return b''.join(chunks)


def decode_weights(payload: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(payload)
    offset = 0

    def take(count: int, what: str) -> memoryview:
        nonlocal offset
        if offset + count > len(view):
            raise WeightsFormatError(f'Container truncated while reading {what} at byte {offset}')
        chunk = view[offset:offset + count]
        offset += count
        return chunk

    if bytes(take(4, 'magic')) != MAGIC:
        raise WeightsFormatError('Not a PRLW container (bad magic bytes)')
    version, count = struct.unpack('<II', take(8, 'header'))
    if version != VERSION:
        raise WeightsFormatError(f'Unsupported PRLW version {version}')

    weights: Dict[str, np.ndarray] = {}
    for index in range(count):
        (name_length,) = struct.unpack('<H', take(2, f'entry {index} name length'))
        name = bytes(take(name_length, f'entry {index} name')).decode('utf-8')
        (rank,) = struct.unpack('<B', take(1, f'{name} rank'))
        shape = struct.unpack(f'<{rank}I', take(4 * rank, f'{name} extents'))
        values = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(bytes(take(4 * values, f'{name} data')), dtype='<f4')
        weights[name] = data.reshape(shape).astype(np.float32)
    if offset != len(view):
        raise WeightsFormatError(f'{len(view) - offset} trailing bytes after {count} entries')
    return weights


def save_weights(path: Union[str, Path], weights: Dict[str, np.ndarray]):
    Path(path).write_bytes(encode_weights(weights))
    logger.info(f'Saved {len(weights)} tensors to {path}')


def load_weights(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return decode_weights(Path(path).read_bytes())


def write_metadata(path: Union[str, Path], record: Dict[str, object]):
    """Plain-text key=value side record (step, lr, loss, ...)."""
    lines = [f'{key}={value}' for key, value in record.items()]
    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')


def read_metadata(path: Union[str, Path]) -> Dict[str, str]:
    record = {}
    for number, line in enumerate(Path(path).read_text(encoding='utf-8').splitlines(), start=1):
        if not line.strip():
            continue
        if '=' not in line:
            raise WeightsFormatError(f'{path}: line {number} is not key=value')
        key, value = line.split('=', 1)
        record[key.strip()] = value.strip()
    return record
