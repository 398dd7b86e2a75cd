"""Core grid types, block partitioning and the QAMP on-disk map format.

Parametric maps are 2-D grids of physical values (e.g. speed of sound in
m/s).  Reconstruction operates block-wise: a map is partitioned into B x B
tiles (zero-padded at the bottom/right edges when the size does not divide),
each tile is vectorized row-major into a length-B^2 column, and the inverse
reassembly crops the padding again.  Partition and reassembly are exact
adjoint/inverse operations on the unpadded region.

File format "QAMP":
    bytes 0-3    magic ``51 41 4D 50`` ("QAMP")
    bytes 4-7    version, u32 little-endian (1 = f64 map, 2 = u8 binary mask)
    bytes 8-11   rows, u32 LE
    bytes 12-15  cols, u32 LE
    payload      rows*cols f64 LE row-major (v1) or u8 in {0,1} (v2)
    trailer      1 byte unit-label length L, then L bytes UTF-8 label
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"QAMP"
VERSION_MAP = 1
VERSION_MASK = 2

# rows*cols capped so payload sizes stay well inside u32/file-offset math
MAX_CELLS = 2**31


class MapFormatError(ValueError):
    """Malformed QAMP file."""


class BadMagicError(MapFormatError):
    pass


class TruncatedFileError(MapFormatError):
    pass


class SizeOverflowError(MapFormatError):
    pass


@dataclass
class ParametricMap:
    """2-D grid of physical values with a free-text unit label."""

    data: np.ndarray
    unit: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.size == 0:
            raise ValueError("empty input")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("map values must be finite")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class BlockGrid:
    """Tiling of a source map into B x B blocks with bottom/right zero-padding."""

    block_size: int
    n_block_rows: int
    n_block_cols: int
    pad_rows: int
    pad_cols: int
    source_rows: int
    source_cols: int

    def __post_init__(self):
        b = self.block_size
        if b < 1:
            raise ValueError("block size must be >= 1")
        if not (0 <= self.pad_rows < b and 0 <= self.pad_cols < b):
            raise ValueError("padding must be smaller than the block size")
        if self.n_block_rows * b != self.source_rows + self.pad_rows:
            raise ValueError("row tiling inconsistent")
        if self.n_block_cols * b != self.source_cols + self.pad_cols:
            raise ValueError("column tiling inconsistent")

    @property
    def n_blocks(self) -> int:
        return self.n_block_rows * self.n_block_cols


def _as_array(m) -> np.ndarray:
    """Accept a ParametricMap or any 2-D array-like and return float64 data."""
    if isinstance(m, ParametricMap):
        return m.data
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("empty input")
    return a


def block_partition(m, block_size: int):
    """Split a map into B x B blocks in row-major block order.

    Out-of-bounds cells at the bottom/right are zero-padded.  Returns
    ``(blocks, grid)`` where ``blocks`` has shape ``(n_blocks, B, B)``.
    Use :func:`vectorize_blocks` for the row-major length-B^2 columns.
    """
    a = _as_array(m)
    b = int(block_size)
    if b < 1:
        raise ValueError("block size must be >= 1")
    rows, cols = a.shape
    nbr = -(-rows // b)
    nbc = -(-cols // b)
    grid = BlockGrid(
        block_size=b,
        n_block_rows=nbr,
        n_block_cols=nbc,
        pad_rows=nbr * b - rows,
        pad_cols=nbc * b - cols,
        source_rows=rows,
        source_cols=cols,
    )
    padded = np.zeros((nbr * b, nbc * b), dtype=np.float64)
    padded[:rows, :cols] = a
    blocks = (
        padded.reshape(nbr, b, nbc, b).transpose(0, 2, 1, 3).reshape(nbr * nbc, b, b)
    )
    return blocks, grid


def block_reassemble(blocks, grid: BlockGrid) -> ParametricMap:
    """Inverse of :func:`block_partition`; padding is cropped away."""
    blocks = np.asarray(blocks, dtype=np.float64)
    b = grid.block_size
    if blocks.shape != (grid.n_blocks, b, b):
        raise ValueError(
            f"expected {grid.n_blocks} blocks of {b}x{b}, got array of shape {blocks.shape}"
        )
    padded = (
        blocks.reshape(grid.n_block_rows, grid.n_block_cols, b, b)
        .transpose(0, 2, 1, 3)
        .reshape(grid.n_block_rows * b, grid.n_block_cols * b)
    )
    return ParametricMap(padded[: grid.source_rows, : grid.source_cols].copy())


def vectorize_blocks(blocks) -> np.ndarray:
    """Row-major vectorization: (n_blocks, B, B) -> (B^2, n_blocks)."""
    blocks = np.asarray(blocks, dtype=np.float64)
    n, b, b2 = blocks.shape
    return blocks.reshape(n, b * b2).T.copy()


def unvectorize_blocks(x: np.ndarray, block_size: int) -> np.ndarray:
    """Inverse of :func:`vectorize_blocks`: (B^2, n_blocks) -> (n_blocks, B, B)."""
    x = np.asarray(x, dtype=np.float64)
    b = block_size
    return x.T.reshape(-1, b, b).copy()


def save_map(m: ParametricMap, path) -> None:
    """Write a map as QAMP v1 (f64 payload)."""
    label = m.unit.encode("utf-8")
    if len(label) > 255:
        raise ValueError("unit label longer than 255 bytes")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION_MAP, m.rows, m.cols))
        fh.write(m.data.astype("<f8").tobytes())
        fh.write(struct.pack("B", len(label)))
        fh.write(label)


def save_mask(cells: np.ndarray, path, unit: str = "") -> None:
    """Write a binary mask as QAMP v2 (u8 payload in {0,1})."""
    cells = np.asarray(cells)
    if cells.ndim != 2 or cells.size == 0:
        raise ValueError("empty input")
    if not np.all((cells == 0) | (cells == 1)):
        raise ValueError("mask cells must be 0 or 1")
    label = unit.encode("utf-8")
    if len(label) > 255:
        raise ValueError("unit label longer than 255 bytes")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION_MASK, cells.shape[0], cells.shape[1]))
        fh.write(cells.astype(np.uint8).tobytes())
        fh.write(struct.pack("B", len(label)))
        fh.write(label)


def load_map(path):
    """Read a QAMP file.

    Returns a :class:`ParametricMap` for v1 files and ``(cells, unit)`` with a
    uint8 array for v2 masks.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError("bad magic")
    if len(raw) < 16:
        raise TruncatedFileError("truncated header")
    version, rows, cols = struct.unpack("<III", raw[4:16])
    if version not in (VERSION_MAP, VERSION_MASK):
        raise MapFormatError(f"unsupported version {version}")
    if rows == 0 or cols == 0 or rows * cols > MAX_CELLS:
        raise SizeOverflowError(f"unreasonable dimensions {rows}x{cols}")
    itemsize = 8 if version == VERSION_MAP else 1
    nbytes = rows * cols * itemsize
    if len(raw) < 16 + nbytes + 1:
        raise TruncatedFileError("truncated payload")
    payload = raw[16 : 16 + nbytes]
    label_len = raw[16 + nbytes]
    label_bytes = raw[17 + nbytes : 17 + nbytes + label_len]
    if len(label_bytes) != label_len:
        raise TruncatedFileError("truncated unit label")
    unit = label_bytes.decode("utf-8")
    if version == VERSION_MAP:
        data = np.frombuffer(payload, dtype="<f8").reshape(rows, cols)
        return ParametricMap(data.copy(), unit=unit)
    cells = np.frombuffer(payload, dtype=np.uint8).reshape(rows, cols)
    if not np.all(cells <= 1):
        raise MapFormatError("mask payload outside {0,1}")
    return cells.copy(), unit


def map_to_csv(m: ParametricMap, path) -> None:
    """Plain CSV export (one row per grid row, full float precision)."""
    with open(path, "w") as fh:
        for row in m.data:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")
