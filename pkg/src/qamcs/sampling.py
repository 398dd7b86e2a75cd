"""Measurement operators: dense per-block Gaussian matrices and binary masks.

The matrix route measures each vectorized B x B block through a dense M x N
matrix (N = B^2, M = round(ratio * N)).  The mask route keeps a subset of
pixel positions of the full image; supported patterns are an Archimedean
spiral, uniform-random cells and raster decimation.  Mask sampling is
equivalent to measuring the vectorized full image with a {0,1} row-selection
matrix, which is how mask problems are handed to the solvers.

All generators are pure functions of their arguments (dims, seed or target
ratio); repeated calls are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ParametricMap, _as_array, block_partition, vectorize_blocks

MASK_KINDS = ("spiral", "random", "raster")


class SpiralCoverageError(ValueError):
    """Raised when pitch bisection cannot reach the target coverage."""

    def __init__(self, target: float, achieved: float):
        super().__init__(
            f"spiral coverage {achieved:.4f} not within 2 percentage points of target {target:.4f}"
        )
        self.target = target
        self.achieved = achieved


@dataclass
class MeasurementMatrix:
    """Dense per-block measurement matrix A (M x N, M <= N)."""

    entries: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2:
            raise ValueError("matrix must be 2-D")
        m, n = self.entries.shape
        if m < 1 or m > n:
            raise ValueError("not a compression operator")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("matrix entries must be finite")

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    @property
    def n(self) -> int:
        return self.entries.shape[1]


@dataclass
class BinaryMask:
    """Full-image binary sampling pattern."""

    cells: np.ndarray
    pattern_kind: str

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.uint8)
        if self.cells.ndim != 2 or self.cells.size == 0:
            raise ValueError("empty input")
        if not np.all((self.cells == 0) | (self.cells == 1)):
            raise ValueError("mask cells must be 0 or 1")
        if self.cells.sum() == 0:
            raise ValueError("mask must select at least one cell")
        if self.pattern_kind not in MASK_KINDS:
            raise ValueError(f"unknown pattern kind {self.pattern_kind!r}")

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    @property
    def coverage(self) -> float:
        return float(self.cells.sum()) / self.cells.size


@dataclass
class CsProblem:
    """Measurements y plus the operator that produced them.

    For a matrix operator ``y`` has shape (M, n_blocks), one column per
    block, and ``grid`` records the tiling so reconstructions can be
    reassembled.  For a mask operator ``y`` is the 1-D vector of kept pixels
    in row-major order and ``grid`` is None.
    """

    operator: object
    y: np.ndarray
    noise_std: float = 0.0
    grid: object = None


def gaussian_matrix(m: int, n: int, seed: int = 0) -> MeasurementMatrix:
    """I.i.d. zero-mean Gaussian matrix with entry variance 1/m.

    The variance makes E||A e_j||^2 = 1 for every column, so residual
    magnitudes in the solvers stay on the scale of the signal.
    """
    if m < 1 or n < 1:
        raise ValueError("dimensions must be positive")
    if m > n:
        raise ValueError("not a compression operator")
    rng = np.random.default_rng(seed)
    entries = rng.standard_normal((m, n)) / np.sqrt(m)
    return MeasurementMatrix(entries, seed=seed)


def identity_matrix(n: int) -> MeasurementMatrix:
    """Ratio-1.0 pass-through operator (useful as a sanity baseline)."""
    return MeasurementMatrix(np.eye(n), seed=0)


def _spiral_coverage(rows: int, cols: int, pitch: float) -> np.ndarray:
    """Cells within half a stroke width of the Archimedean spiral r = a*theta.

    The spiral is centered on the image center with radial arm spacing
    ``pitch`` (= 2*pi*a); the stroke is one cell wide.  A cell is kept when
    its radial distance to the nearest arm is <= 0.5 cells.
    """
    a = pitch / (2.0 * np.pi)
    ci = (rows - 1) / 2.0
    cj = (cols - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    dy = ii - ci
    dx = jj - cj
    r = np.hypot(dx, dy)
    theta0 = np.mod(np.arctan2(dy, dx), 2.0 * np.pi)
    # nearest arm indices: r ~ a*(theta0 + 2*pi*k)
    k = np.round((r / a - theta0) / (2.0 * np.pi))
    hit = np.zeros((rows, cols), dtype=bool)
    for dk in (-1.0, 0.0, 1.0):
        kk = np.maximum(k + dk, 0.0)
        arm_r = a * (theta0 + 2.0 * np.pi * kk)
        hit |= np.abs(r - arm_r) <= 0.5
    return hit


def spiral_mask(rows: int, cols: int, target_ratio: float) -> BinaryMask:
    """Archimedean spiral mask with coverage within +-2 pp of the target.

    The arm pitch is found by bisection; smaller pitch means denser arms and
    higher coverage.  Raises :class:`SpiralCoverageError` when the bisection
    bound is exhausted without reaching the tolerance.
    """
    if not 0.0 < target_ratio <= 1.0:
        raise ValueError("target ratio must be in (0, 1]")
    if target_ratio == 1.0:
        return BinaryMask(np.ones((rows, cols), dtype=np.uint8), "spiral")

    size = rows * cols
    lo, hi = 1.0, 4.0 * max(rows, cols)  # pitch bounds: dense .. nearly empty
    best = None
    best_err = np.inf
    for _ in range(60):
        pitch = 0.5 * (lo + hi)
        cells = _spiral_coverage(rows, cols, pitch)
        cov = cells.sum() / size
        err = abs(cov - target_ratio)
        if err < best_err:
            best, best_err = cells, err
        if err <= 1e-4:
            break
        if cov > target_ratio:
            lo = pitch
        else:
            hi = pitch
    cov = best.sum() / size
    if abs(cov - target_ratio) > 0.02:
        raise SpiralCoverageError(target_ratio, cov)
    return BinaryMask(best.astype(np.uint8), "spiral")


def random_mask(rows: int, cols: int, target_ratio: float, seed: int = 0) -> BinaryMask:
    """Uniform-random cells, exact count round(ratio * rows * cols)."""
    if not 0.0 < target_ratio <= 1.0:
        raise ValueError("target ratio must be in (0, 1]")
    size = rows * cols
    count = max(1, int(round(target_ratio * size)))
    rng = np.random.default_rng(seed)
    idx = rng.permutation(size)[:count]
    cells = np.zeros(size, dtype=np.uint8)
    cells[idx] = 1
    return BinaryMask(cells.reshape(rows, cols), "random")


def raster_mask(rows: int, cols: int, target_ratio: float) -> BinaryMask:
    """Raster decimation: every k-th cell in row-major scan order, k = round(1/ratio)."""
    if not 0.0 < target_ratio <= 1.0:
        raise ValueError("target ratio must be in (0, 1]")
    step = max(1, int(round(1.0 / target_ratio)))
    cells = np.zeros(rows * cols, dtype=np.uint8)
    cells[::step] = 1
    return BinaryMask(cells.reshape(rows, cols), "raster")


def compression_ratio(operator) -> float:
    """M/N for matrices, coverage ratio for masks."""
    if isinstance(operator, MeasurementMatrix):
        return operator.m / operator.n
    if isinstance(operator, BinaryMask):
        return operator.coverage
    raise TypeError(f"not a sampling operator: {type(operator).__name__}")


def mask_selection_matrix(mask: BinaryMask) -> np.ndarray:
    """The {0,1} row-selection matrix equivalent of mask sampling.

    Rows select the mask-one positions of the row-major vectorized image.
    Mainly useful for oracle tests at small sizes; solvers use the
    scatter/gather form directly.
    """
    flat = mask.cells.reshape(-1)
    idx = np.flatnonzero(flat)
    sel = np.zeros((idx.size, flat.size), dtype=np.float64)
    sel[np.arange(idx.size), idx] = 1.0
    return sel


def apply_sampling(x, operator, noise_std: float = 0.0, seed: int = 0):
    """Measure a signal: y = A x (per block) or pixel gather (mask).

    ``x`` may be a ParametricMap / 2-D array, or a 1-D vector of length N for
    a single-block matrix measurement.  ``noise_std`` > 0 adds white Gaussian
    noise drawn from ``default_rng(seed)``.

    Matrix case returns (y, grid) with y of shape (M, n_blocks) (grid is None
    for 1-D input); mask case returns the 1-D vector of kept pixels in
    row-major order.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")

    if isinstance(operator, MeasurementMatrix):
        a = operator.entries
        xv = np.asarray(x, dtype=np.float64) if not isinstance(x, ParametricMap) else None
        if xv is not None and xv.ndim == 1:
            if xv.size != operator.n:
                raise ValueError(
                    f"dimension mismatch: vector of length {xv.size}, operator expects {operator.n}"
                )
            y = a @ xv
            grid = None
        else:
            img = _as_array(x)
            b = int(round(np.sqrt(operator.n)))
            if b * b != operator.n:
                raise ValueError("block operator dimension N must be a perfect square")
            blocks, grid = block_partition(img, b)
            y = a @ vectorize_blocks(blocks)
        if noise_std > 0:
            y = y + noise_std * np.random.default_rng(seed).standard_normal(y.shape)
        return y, grid

    if isinstance(operator, BinaryMask):
        img = _as_array(x)
        if img.shape != (operator.rows, operator.cols):
            raise ValueError(
                f"dimension mismatch: image {img.shape}, mask {(operator.rows, operator.cols)}"
            )
        y = img.reshape(-1)[np.flatnonzero(operator.cells.reshape(-1))]
        if noise_std > 0:
            y = y + noise_std * np.random.default_rng(seed).standard_normal(y.shape)
        return y

    raise TypeError(f"not a sampling operator: {type(operator).__name__}")


def build_problem(x, operator, noise_std: float = 0.0, seed: int = 0) -> CsProblem:
    """Sample a map and bundle measurements with the operator."""
    out = apply_sampling(x, operator, noise_std=noise_std, seed=seed)
    if isinstance(operator, MeasurementMatrix):
        y, grid = out
        return CsProblem(operator=operator, y=y, noise_std=noise_std, grid=grid)
    return CsProblem(operator=operator, y=out, noise_std=noise_std, grid=None)
