import numpy as np
import pytest

from qamcs.amp import (
    AmpDivergenceError,
    DenoiserSpec,
    _amp_core,
    amp_reconstruct,
    trace_to_csv,
)
from qamcs.core import ParametricMap, block_partition, vectorize_blocks
from qamcs.sampling import (
    CsProblem,
    MeasurementMatrix,
    build_problem,
    gaussian_matrix,
    random_mask,
)


def _soft0(lam=None, tau=1.0):
    return DenoiserSpec(kind="soft_wavelet", lam=lam, tau=tau, levels=0)


def test_identity_matrix_lambda_zero_one_step():
    n = 16
    rng = np.random.default_rng(0)
    y = rng.standard_normal(n)
    prob = CsProblem(operator=MeasurementMatrix(np.eye(n)), y=y)
    x, trace = amp_reconstruct(prob, _soft0(lam=0.0), max_iters=5, tol=1e-12)
    assert np.array_equal(x, y)  # x1 = A^T y = y, then z = 0 stops the loop
    assert len(trace) == 1 and trace[0] == 0.0


def test_oracle_denoiser_zero_residual_in_one_step():
    rng = np.random.default_rng(1)
    for trial in range(5):
        a = gaussian_matrix(8, 32, seed=trial)
        xt = rng.standard_normal(32)
        y = a.entries @ xt
        prob = CsProblem(operator=a, y=y)
        den = DenoiserSpec(kind="oracle", reference=xt)
        x, trace = amp_reconstruct(prob, den, max_iters=10, tol=1e-14)
        assert np.max(np.abs(x - xt)) == 0.0
        assert trace[0] < 1e-12  # z1 = y - A x_tilde = 0: fixed point immediately


def test_sparse_spike_recovery_seed_zero():
    # N=64, M=32, 1-sparse; textbook residual correction, lambda_k = sigma_hat
    a = gaussian_matrix(32, 64, seed=0)
    xt = np.zeros(64)
    xt[10] = 1.0
    prob = CsProblem(operator=a, y=a.entries @ xt)
    x, _ = amp_reconstruct(prob, _soft0(tau=1.0), max_iters=100, onsager=True, tol=1e-9)
    assert np.max(np.abs(x - xt)) < 1e-3
    # independent oracle: least squares restricted to the true support
    col = a.entries[:, 10]
    x_ls = float(col @ (a.entries @ xt)) / float(col @ col)
    assert x_ls == pytest.approx(1.0, abs=1e-12)


def test_square_orthonormal_converges_in_one_iteration():
    rng = np.random.default_rng(2)
    q, _ = np.linalg.qr(rng.standard_normal((16, 16)))
    a = MeasurementMatrix(q)
    y = rng.standard_normal(16)
    x, trace = amp_reconstruct(CsProblem(operator=a, y=y), _soft0(lam=0.0), max_iters=50)
    assert np.max(np.abs(x - q.T @ y)) < 1e-12
    assert len(trace) == 1  # residual hits tolerance immediately


def test_monotone_residual_orthonormal():
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.standard_normal((64, 64)))
    xt = rng.standard_normal(64)
    prob = CsProblem(operator=MeasurementMatrix(q), y=q @ xt)
    den = DenoiserSpec(kind="soft_wavelet", levels=1, tau=1.0)  # auto threshold
    _, trace = amp_reconstruct(prob, den, max_iters=30, tol=1e-12)
    diffs = np.diff(np.array(trace))
    assert np.all(diffs <= 1e-12)


def test_divergence_reports_iteration():
    # 5x the identity makes the plain iteration expand by 24x per step
    a = MeasurementMatrix(5.0 * np.eye(8))
    y = np.ones(8) * 1e300
    prob = CsProblem(operator=a, y=y)
    with pytest.raises(AmpDivergenceError) as exc:
        amp_reconstruct(prob, _soft0(lam=0.0), max_iters=500, tol=0.0)
    assert exc.value.iteration >= 1
    assert "divergence" in str(exc.value)


def test_block_problem_reassembles_map():
    rng = np.random.default_rng(4)
    img = rng.standard_normal((8, 8))
    a = MeasurementMatrix(np.eye(16))  # B = 4, exact sampling
    prob = build_problem(img, a)
    recon, _ = amp_reconstruct(prob, _soft0(lam=0.0), max_iters=3)
    assert isinstance(recon, ParametricMap)
    assert np.max(np.abs(recon.data - img)) < 1e-12


def test_workers_bit_identical():
    rng = np.random.default_rng(5)
    img = rng.standard_normal((12, 12)) + 3.0
    a = gaussian_matrix(6, 16, seed=9)
    prob = build_problem(img, a)
    den = DenoiserSpec(kind="soft_wavelet", levels=1, tau=1.5)
    serial, trace1 = amp_reconstruct(prob, den, max_iters=20)
    threaded, trace2 = amp_reconstruct(prob, den, max_iters=20, workers=3)
    assert serial.data.tobytes() == threaded.data.tobytes()
    assert trace1 == trace2


def test_mask_problem_full_image():
    rng = np.random.default_rng(6)
    img = rng.standard_normal((16, 16))
    mask = random_mask(16, 16, 0.5, seed=2)
    prob = build_problem(img, mask)
    recon, _ = amp_reconstruct(
        prob, DenoiserSpec(kind="soft_wavelet", levels=2, tau=0.5), max_iters=40
    )
    assert isinstance(recon, ParametricMap)
    kept = mask.cells.astype(bool)
    # observed pixels must be close; unobserved are inpainted (no guarantee here)
    assert np.mean((recon.data[kept] - img[kept]) ** 2) < np.mean(img[kept] ** 2)


def test_mask_equivalence_with_selection_matrix_solver():
    # same denoiser and schedule: mask path equals the explicit row-selection
    # matrix path on the vectorized image
    rng = np.random.default_rng(7)
    img = rng.standard_normal((8, 8))
    mask = random_mask(8, 8, 0.4, seed=5)
    prob_mask = build_problem(img, mask)
    den = DenoiserSpec(kind="soft_wavelet", levels=0, tau=1.0)
    out_mask, trace_mask = amp_reconstruct(prob_mask, den, max_iters=15)

    from qamcs.sampling import mask_selection_matrix

    sel = mask_selection_matrix(mask)
    idx = np.flatnonzero(mask.cells.reshape(-1))
    y = img.reshape(-1)[idx]

    def fwd(x):
        return sel @ x

    def adj(z):
        return sel.T @ z

    from qamcs.amp import _make_denoise_fn

    denoise = _make_denoise_fn(den, (8, 8))
    state, trace_sel = _amp_core(y, fwd, adj, 64, idx.size, denoise, 15, 1e-6, False)
    assert np.array_equal(out_mask.data.reshape(-1), state.x)
    assert trace_mask == trace_sel


def test_unfolded_matches_amp_with_identity_denoiser():
    # the zero-correction unfolded iteration equals the plain loop with an
    # identity denoiser, shifted by one step (its x0 equals amp's x1)
    from qamcs import unfolded as unf

    rng = np.random.default_rng(8)
    model = unf.init_model(k=4, block_size=4, ratio=0.5, channels=2, seed=0)
    for t in model.theta:
        t.conv1[:] = 0.0
        t.conv2[:] = 0.0
    img = rng.standard_normal((4, 4))
    blocks, grid = block_partition(img, 4)
    xt = vectorize_blocks(blocks)
    y = model.a.entries @ xt

    a = model.a.entries

    def fwd(x):
        return a @ x

    def adj(z):
        return a.T @ z

    from qamcs.amp import _make_denoise_fn

    denoise = _make_denoise_fn(_soft0(lam=0.0), (4, 4))
    _, _, amp_iters = _amp_core(
        y[:, 0], fwd, adj, 16, a.shape[0], denoise, 5, 0.0, False, record_iterates=True
    )
    for k in range(5):
        x_unf = unf._forward_blocks(model, y, grid, n_iters=k)
        assert np.max(np.abs(x_unf[:, 0] - amp_iters[k])) < 1e-12


def test_denoiser_spec_validation():
    with pytest.raises(ValueError):
        DenoiserSpec(kind="nope")
    with pytest.raises(ValueError):
        DenoiserSpec(lam=-1.0)
    with pytest.raises(ValueError):
        DenoiserSpec(gamma=0.0)


def test_trace_csv_roundtrip(tmp_path):
    trace = [1.5, 0.25, 1e-9]
    path = tmp_path / "trace.csv"
    trace_to_csv(trace, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "iteration,residual_norm"
    assert [float(l.split(",")[1]) for l in lines[1:]] == trace
