"""Variable-precision storage of operator surpluses.

A value stored with ``p3`` bytes, ``2 <= p3 <= 7``, is laid out MSB first as

    [sign:1][mantissa:m][exponent:8]      m = 8 * (p3 - 1) - 1

where the mantissa holds the top ``m`` fraction bits of the IEEE double
(implicit leading one, truncated towards zero) and the exponent byte is the
unbiased binary exponent as a two's-complement ``signed char``. ``p3 = 8``
stores the raw big-endian IEEE bytes and ``p3 = 0`` stores nothing.

Exponents above 127 clamp to 127. Values whose exponent lies below -128
flush to a signed zero; the pattern (mantissa 0, exponent -128) is reserved
for zero.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

PRECISIONS = (0, 2, 3, 4, 5, 6, 7, 8)
UNCOMPRESSED_CELL_BYTES = 128  # 4x4 element matrix in doubles
STREAM_MAGIC = b"LMG1"
DEFAULT_THRESHOLD = 1e-8

_FRAC_BITS = 52
_FRAC_MASK = (1 << _FRAC_BITS) - 1
_EXP_MIN, _EXP_MAX = -128, 127


class CodecError(ValueError):
    """Non-finite input or a byte sequence that does not match its header."""


def mantissa_bits(p3: int) -> int:
    if not 2 <= p3 <= 7:
        raise CodecError(f"no truncated mantissa for p3={p3}")
    return 8 * (p3 - 1) - 1


def _check_p3(p3):
    if p3 not in PRECISIONS or p3 == 0:
        raise CodecError(f"p3 must be one of 2..8, got {p3}")


def encode_words(x, p3: int) -> np.ndarray:
    """Encode doubles into unsigned integer words holding ``8 * p3`` bits."""
    _check_p3(p3)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise CodecError("operator entries must be finite")
    bits = x.view(np.uint64)
    if p3 == 8:
        return bits.copy()
    m = mantissa_bits(p3)
    sign = bits >> np.uint64(63)
    biased = ((bits >> np.uint64(_FRAC_BITS)) & np.uint64(0x7FF)).astype(np.int64)
    frac = bits & np.uint64(_FRAC_MASK)
    e = biased - 1023
    mant = frac >> np.uint64(_FRAC_BITS - m)
    underflow = (biased == 0) | (e < _EXP_MIN)
    e = np.clip(e, _EXP_MIN, _EXP_MAX)
    mant = np.where(underflow, np.uint64(0), mant)
    e = np.where(underflow, _EXP_MIN, e)
    exp_byte = (e & 0xFF).astype(np.uint64)
    return (sign << np.uint64(8 * p3 - 1)) | (mant << np.uint64(8)) | exp_byte


def decode_words(words, p3: int) -> np.ndarray:
    _check_p3(p3)
    words = np.asarray(words, dtype=np.uint64)
    if p3 == 8:
        return words.view(np.float64).copy()
    m = mantissa_bits(p3)
    sign = (words >> np.uint64(8 * p3 - 1)) & np.uint64(1)
    mant = (words >> np.uint64(8)) & np.uint64((1 << m) - 1)
    e = (words & np.uint64(0xFF)).astype(np.int64)
    e = np.where(e >= 128, e - 256, e)
    zero = (mant == 0) & (e == _EXP_MIN)
    bits = (sign << np.uint64(63)) | ((e + 1023).astype(np.uint64) << np.uint64(_FRAC_BITS)) \
        | (mant << np.uint64(_FRAC_BITS - m))
    bits = np.where(zero, sign << np.uint64(63), bits)
    return bits.view(np.float64)


def words_to_bytes(words, p3: int) -> bytes:
    words = np.asarray(words, dtype=np.uint64).ravel()
    if p3 == 0 or len(words) == 0:
        return b""
    raw = words.astype(">u8").view(np.uint8).reshape(-1, 8)
    return raw[:, 8 - p3:].tobytes()


def bytes_to_words(data: bytes, p3: int, count: int) -> np.ndarray:
    if len(data) != p3 * count:
        raise CodecError(f"expected {p3 * count} bytes, got {len(data)}")
    if count == 0:
        return np.zeros(0, dtype=np.uint64)
    raw = np.zeros((count, 8), dtype=np.uint8)
    raw[:, 8 - p3:] = np.frombuffer(data, dtype=np.uint8).reshape(count, p3)
    return raw.view(">u8").ravel().astype(np.uint64)


def encode_value(x: float, p3: int) -> bytes:
    """Encode one double into ``p3`` bytes."""
    return words_to_bytes(encode_words(np.array([x]), p3), p3)


def decode_value(data: bytes, p3: int) -> float:
    """Inverse of :func:`encode_value`."""
    if len(data) != p3:
        raise CodecError(f"expected {p3} bytes, got {len(data)}")
    return float(decode_words(bytes_to_words(data, p3, 1), p3)[0])


def roundtrip(x, p3: int) -> np.ndarray:
    """Values as they read back after storage with ``p3`` bytes."""
    x = np.asarray(x, dtype=np.float64)
    if p3 == 0:
        return np.zeros_like(x)
    return decode_words(encode_words(x.ravel(), p3), p3).reshape(x.shape)


def choose_precision(surplus, threshold: float = DEFAULT_THRESHOLD) -> int:
    """Smallest byte count whose absolute round-trip error stays within ``threshold``."""
    return int(choose_precision_rows(np.asarray(surplus, dtype=float).reshape(1, -1), threshold)[0])


def choose_precision_rows(rows, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Row-wise :func:`choose_precision` for an ``(m, entries)`` array."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    rows = np.asarray(rows, dtype=np.float64)
    rows = rows.reshape(len(rows), -1)
    if not np.isfinite(rows).all():
        raise CodecError("operator entries must be finite")
    out = np.full(len(rows), 8, dtype=np.int64)
    undecided = np.ones(len(rows), dtype=bool)
    if rows.shape[1] == 0:
        return np.zeros(len(rows), dtype=np.int64)
    elided = np.abs(rows).max(axis=1) <= threshold
    out[elided] = 0
    undecided &= ~elided
    for p3 in PRECISIONS[1:-1]:
        if not undecided.any():
            break
        sub = rows[undecided]
        err = np.abs(roundtrip(sub, p3) - sub).max(axis=1)
        ok = err <= threshold
        idx = np.flatnonzero(undecided)[ok]
        out[idx] = p3
        undecided[idx] = False
    return out


# -- cell records ---------------------------------------------------------------

P1_BOTTOM, P1_NUMERIC, P1_TOP = 0, 1, 2
_P3_CODE = {p: i for i, p in enumerate(PRECISIONS)}


def pack_header(p1_class: int, p2: bool, p3: int) -> int:
    """Header byte: bits 0-1 p1 class, bit 2 in-flight flag, bits 3-5 precision code."""
    if p3 not in _P3_CODE:
        raise CodecError(f"invalid p3 {p3}")
    return (p1_class & 0x3) | (int(bool(p2)) << 2) | (_P3_CODE[p3] << 3)


def unpack_header(byte: int) -> Tuple[int, bool, int]:
    code = (byte >> 3) & 0x7
    p1_class = byte & 0x3
    if p1_class == 3 or byte >> 6:
        raise CodecError(f"corrupt header byte {byte:#04x}")
    return p1_class, bool((byte >> 2) & 1), PRECISIONS[code]


def record_length(p1_class: int, p3: int, entries: int) -> int:
    if p1_class == P1_BOTTOM:
        return 1
    return 1 + p3 * entries


def write_cell_record(p1_class: int, p2: bool, surplus, threshold: float = DEFAULT_THRESHOLD,
                      p3: Optional[int] = None) -> Tuple[bytes, np.ndarray]:
    """Serialise one cell: header byte plus the surplus at the chosen precision.

    Returns the record and the surplus as it reads back.
    """
    surplus = np.asarray(surplus, dtype=np.float64).ravel()
    if p1_class == P1_BOTTOM:
        return bytes([pack_header(P1_BOTTOM, p2, 0)]), np.zeros_like(surplus)
    if p3 is None:
        p3 = choose_precision(surplus, threshold)
    header = bytes([pack_header(p1_class, p2, p3)])
    if p3 == 0:
        return header, np.zeros_like(surplus)
    words = encode_words(surplus, p3)
    return header + words_to_bytes(words, p3), decode_words(words, p3)


def read_cell_record(data: bytes, offset: int, entries: int) -> Tuple[Tuple[int, bool, int], np.ndarray, int]:
    """Parse the record at ``offset``; returns (header fields, surplus, next offset)."""
    if offset >= len(data):
        raise CodecError("stream ended before record header")
    p1_class, p2, p3 = unpack_header(data[offset])
    if p1_class == P1_BOTTOM:
        return (p1_class, p2, p3), None, offset + 1
    end = offset + 1 + p3 * entries
    if end > len(data):
        raise CodecError("stream ended inside record payload")
    if p3 == 0:
        return (p1_class, p2, p3), np.zeros(entries), end
    words = bytes_to_words(data[offset + 1:end], p3, entries)
    return (p1_class, p2, p3), decode_words(words, p3), end


@dataclass
class CellStream:
    """Concatenated cell records in traversal order."""

    data: bytes = b""
    entries: List[int] = field(default_factory=list)   # surplus entries per record
    offsets: List[int] = field(default_factory=list)

    def append(self, record: bytes, entries: int):
        self.offsets.append(len(self.data))
        self.entries.append(entries)
        self.data += record

    def records(self):
        offset = 0
        for entries in self.entries:
            header, surplus, nxt = read_cell_record(self.data, offset, entries)
            yield header, surplus, nxt - offset
            offset = nxt
        if offset != len(self.data):
            raise CodecError("trailing bytes after last record")

    def to_bytes(self) -> bytes:
        head = STREAM_MAGIC + struct.pack(">I", len(self.entries))
        counts = np.asarray(self.entries, dtype=">u2").tobytes()
        return head + counts + self.data

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CellStream":
        if blob[:4] != STREAM_MAGIC:
            raise CodecError("bad stream magic")
        (count,) = struct.unpack(">I", blob[4:8])
        entries = np.frombuffer(blob[8:8 + 2 * count], dtype=">u2").astype(int).tolist()
        stream = cls(data=blob[8 + 2 * count:], entries=entries)
        offset = 0
        for e in entries:
            stream.offsets.append(offset)
            _, _, offset = read_cell_record(stream.data, offset, e)
        return stream


@dataclass
class CompressionStats:
    """Stored versus uncompressed bytes for a set of fine-grid records."""

    cells: int = 0
    stored_bytes: int = 0
    uncompressed_bytes: int = 0
    mean_of_ratios: float = 1.0
    p3_histogram: Dict[int, int] = field(default_factory=dict)
    max_error: float = 0.0
    max_n: int = 0
    avg_n: float = 0.0

    @property
    def factor(self) -> float:
        return self.uncompressed_bytes / self.stored_bytes if self.stored_bytes else 1.0


def compression_stats(record_lengths: Sequence[int], p3: Sequence[int] = (),
                      n_values: Sequence[int] = (), max_error: float = 0.0) -> CompressionStats:
    """Compression accounting over fine-cell records (``128`` bytes per cell uncompressed)."""
    lengths = np.asarray(record_lengths, dtype=np.int64)
    stats = CompressionStats(cells=len(lengths), stored_bytes=int(lengths.sum()),
                             uncompressed_bytes=UNCOMPRESSED_CELL_BYTES * len(lengths),
                             max_error=float(max_error))
    if len(lengths):
        stats.mean_of_ratios = float(np.mean(UNCOMPRESSED_CELL_BYTES / lengths))
    if len(p3):
        vals, counts = np.unique(np.asarray(p3), return_counts=True)
        stats.p3_histogram = {int(v): int(c) for v, c in zip(vals, counts)}
    if len(n_values):
        n_values = np.asarray(n_values)
        stats.max_n = int(n_values.max())
        stats.avg_n = float(n_values.mean())
    return stats


def stream_stats(stream: CellStream, fine: Optional[Iterable[bool]] = None) -> CompressionStats:
    """:func:`compression_stats` read directly off a serialised stream."""
    lengths, p3s = [], []
    fine = list(fine) if fine is not None else None
    for i, (header, _, length) in enumerate(stream.records()):
        if fine is not None and not fine[i]:
            continue
        lengths.append(length)
        p3s.append(header[2])
    return compression_stats(lengths, p3s)
