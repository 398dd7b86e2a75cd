import numpy as np
import pytest

from qamcs.core import ParametricMap
from qamcs.sampling import (
    BinaryMask,
    MeasurementMatrix,
    SpiralCoverageError,
    apply_sampling,
    build_problem,
    compression_ratio,
    gaussian_matrix,
    identity_matrix,
    mask_selection_matrix,
    random_mask,
    raster_mask,
    spiral_mask,
)


def test_gaussian_deterministic():
    a = gaussian_matrix(16, 64, seed=0)
    b = gaussian_matrix(16, 64, seed=0)
    assert a.entries.shape == (16, 64)
    assert np.array_equal(a.entries, b.entries)
    c = gaussian_matrix(16, 64, seed=1)
    assert not np.array_equal(a.entries, c.entries)


def test_gaussian_column_energy():
    a = gaussian_matrix(16, 64, seed=0)
    mean_sq = np.mean(np.sum(a.entries**2, axis=0))
    assert 0.7 <= mean_sq <= 1.3  # E||col||^2 = 1 by the 1/m variance convention


def test_gaussian_not_compressive():
    with pytest.raises(ValueError, match="not a compression operator"):
        gaussian_matrix(65, 64)


def test_gaussian_square_allowed():
    a = gaussian_matrix(64, 64, seed=0)
    assert compression_ratio(a) == 1.0


def test_spiral_all_ones_at_ratio_one():
    m = spiral_mask(32, 32, 1.0)
    assert np.all(m.cells == 1)
    assert compression_ratio(m) == 1.0


def test_spiral_quarter_coverage():
    m = spiral_mask(64, 64, 0.25)
    ones = int(m.cells.sum())
    assert 943 <= ones <= 1105  # 23%..27% of 4096
    again = spiral_mask(64, 64, 0.25)
    assert np.array_equal(m.cells, again.cells)


def test_spiral_rejects_bad_ratio():
    with pytest.raises(ValueError):
        spiral_mask(32, 32, 0.0)


def test_spiral_unreachable_reports_achieved():
    # 3x3 coverage is quantized to ninths; no count lands within 2 pp of 5.5%
    with pytest.raises(SpiralCoverageError) as exc:
        spiral_mask(3, 3, 0.055)
    assert 0.0 <= exc.value.achieved <= 1.0
    assert f"{exc.value.achieved:.4f}" in str(exc.value)


def test_random_and_raster_coverage():
    r = random_mask(20, 20, 0.3, seed=4)
    assert int(r.cells.sum()) == 120
    assert np.array_equal(r.cells, random_mask(20, 20, 0.3, seed=4).cells)
    k = raster_mask(10, 10, 0.25)
    assert abs(compression_ratio(k) - 0.25) <= 0.02


def test_apply_matrix_identity_rows():
    n, m = 8, 3
    a = MeasurementMatrix(np.eye(n)[:m])
    x = np.arange(1.0, n + 1)
    y, grid = apply_sampling(x, a)
    assert grid is None
    assert np.array_equal(y, np.arange(1.0, m + 1))


def test_apply_matrix_blocks():
    img = np.arange(16.0).reshape(4, 4)
    a = MeasurementMatrix(np.eye(4)[:2])  # B = 2
    y, grid = apply_sampling(img, a)
    assert y.shape == (2, 4)
    assert grid.n_blocks == 4
    # first block vectorized row-major is [0, 1, 4, 5]; first two rows of I pick [0, 1]
    assert np.array_equal(y[:, 0], [0.0, 1.0])


def test_apply_mask_single_cell():
    cells = np.zeros((3, 3), dtype=np.uint8)
    cells[0, 0] = 1
    mask = BinaryMask(cells, "random")
    img = np.zeros((3, 3))
    img[0, 0] = 7.0
    y = apply_sampling(img, mask)
    assert np.array_equal(y, [7.0])


def test_apply_dimension_mismatch():
    a = MeasurementMatrix(np.eye(4)[:2])
    with pytest.raises(ValueError, match="dimension mismatch"):
        apply_sampling(np.arange(5.0), a)
    mask = BinaryMask(np.ones((2, 2), dtype=np.uint8), "random")
    with pytest.raises(ValueError, match="dimension mismatch"):
        apply_sampling(np.ones((3, 3)), mask)


def test_noise_statistics():
    # 10^4 mask samples in one draw; sample std must sit near the requested std
    mask = BinaryMask(np.ones((100, 100), dtype=np.uint8), "random")
    img = np.zeros((100, 100))
    y = apply_sampling(img, mask, noise_std=0.1, seed=123)
    assert 0.095 <= float(np.std(y)) <= 0.105
    clean = apply_sampling(img, mask, noise_std=0.0)
    assert np.all(clean == 0.0)


def test_compression_ratios():
    assert compression_ratio(gaussian_matrix(16, 64, 0)) == 0.25
    allones = BinaryMask(np.ones((4, 4), dtype=np.uint8), "random")
    assert compression_ratio(allones) == 1.0
    assert 0.23 <= compression_ratio(spiral_mask(64, 64, 0.25)) <= 0.27


def test_linearity_of_sampling():
    rng = np.random.default_rng(7)
    a = gaussian_matrix(6, 16, seed=2)
    x1 = rng.standard_normal(16)
    x2 = rng.standard_normal(16)
    al, be = 1.7, -0.3
    y_combo, _ = apply_sampling(al * x1 + be * x2, a)
    y1, _ = apply_sampling(x1, a)
    y2, _ = apply_sampling(x2, a)
    assert np.max(np.abs(y_combo - (al * y1 + be * y2))) < 1e-12


def test_mask_equals_row_selection_matrix():
    rng = np.random.default_rng(8)
    img = rng.standard_normal((6, 5))
    mask = random_mask(6, 5, 0.4, seed=3)
    y_mask = apply_sampling(img, mask)
    sel = mask_selection_matrix(mask)
    y_mat = sel @ img.reshape(-1)
    assert np.array_equal(y_mask, y_mat)


def test_build_problem_carries_grid():
    img = ParametricMap(np.arange(16.0).reshape(4, 4))
    prob = build_problem(img, MeasurementMatrix(np.eye(4)[:2]))
    assert prob.y.shape == (2, 4)
    assert prob.grid.n_blocks == 4
    mprob = build_problem(img, BinaryMask(np.ones((4, 4), dtype=np.uint8), "random"))
    assert mprob.grid is None
    assert mprob.y.shape == (16,)


def test_identity_matrix_ratio():
    assert compression_ratio(identity_matrix(9)) == 1.0
