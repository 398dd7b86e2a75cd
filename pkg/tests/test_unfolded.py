import numpy as np
import pytest

from qamcs.core import block_partition, unvectorize_blocks, vectorize_blocks
from qamcs.sampling import build_problem
from qamcs.unfolded import (
    DeblockParams,
    LearnedDenoiser,
    TrainConfig,
    UnfoldedDivergenceError,
    UnfoldedModel,
    _forward_blocks,
    central_difference,
    copy_model,
    deblock_apply,
    gradient_check,
    init_model,
    learned_denoiser_apply,
    load_model,
    loss_and_grads,
    save_model,
    train_model,
    unfolded_forward,
)


def _naive_corr2(x, k):
    """Quadruple-loop 3x3 'same' correlation oracle."""
    h, w = x.shape
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(3):
                for b in range(3):
                    ii, jj = i + a - 1, j + b - 1
                    if 0 <= ii < h and 0 <= jj < w:
                        acc += k[a, b] * x[ii, jj]
            out[i, j] = acc
    return out


def _naive_denoiser(x, theta):
    c = theta.channels
    hidden = [np.maximum(_naive_corr2(x, theta.conv1[ci]), 0.0) for ci in range(c)]
    out = np.zeros_like(x)
    for ci in range(c):
        out += _naive_corr2(hidden[ci], theta.conv2[ci])
    return out


def test_oracle_denoiser_identity_single_step():
    rng = np.random.default_rng(0)
    for trial in range(10):
        b = int(rng.choice([4, 8]))
        m = int(rng.integers(1, b * b + 1))
        model = init_model(k=1, block_size=b, ratio=m / (b * b), channels=2, seed=trial)
        img = rng.standard_normal((b, b))
        blocks, grid = block_partition(img, b)
        xt = vectorize_blocks(blocks)
        y = model.a.entries @ xt

        def oracle(k, x_in, xt=xt, b=b):
            return unvectorize_blocks(xt - vectorize_blocks(x_in), b)

        x = _forward_blocks(model, y, grid, denoiser_override=oracle)
        assert np.max(np.abs(x - xt)) < 1e-10


def test_zero_kernels_reduce_to_linear_iteration():
    model = init_model(k=3, block_size=4, ratio=0.5, channels=2, seed=1)
    for t in model.theta:
        t.conv1[:] = 0.0
        t.conv2[:] = 0.0
    rng = np.random.default_rng(2)
    img = rng.standard_normal((4, 4))
    blocks, grid = block_partition(img, 4)
    xt = vectorize_blocks(blocks)
    y = model.a.entries @ xt
    x = _forward_blocks(model, y, grid)
    a = model.a.entries
    ref = a.T @ y
    for _ in range(3):
        ref = a.T @ (y - a @ ref) + ref
    assert np.max(np.abs(x - ref)) < 1e-12


def test_zero_iterations_returns_initialization():
    model = init_model(k=2, block_size=4, ratio=0.5, channels=2, seed=3)
    rng = np.random.default_rng(3)
    img = rng.standard_normal((8, 8)) * 10 + 3
    prob = build_problem(img, model.a)
    out = unfolded_forward(prob.y, model, prob.grid, n_iters=0)
    a = model.a.entries
    blocks, _ = block_partition(img, 4)
    expect = a.T @ (a @ vectorize_blocks(blocks))
    got, _ = block_partition(out.data, 4)
    assert np.max(np.abs(vectorize_blocks(got) - expect)) < 1e-12


def test_learned_denoiser_identity_kernels():
    ident = np.zeros((1, 3, 3))
    ident[0, 1, 1] = 1.0
    theta = LearnedDenoiser(conv1=ident.copy(), conv2=ident.copy())
    x = np.abs(np.random.default_rng(4).standard_normal((6, 6)))  # >= 0: relu inactive
    assert np.max(np.abs(learned_denoiser_apply(x, theta) - x)) < 1e-15


def test_learned_denoiser_zero_kernels():
    theta = LearnedDenoiser(conv1=np.zeros((3, 3, 3)), conv2=np.zeros((3, 3, 3)))
    x = np.random.default_rng(5).standard_normal((5, 5))
    assert np.all(learned_denoiser_apply(x, theta) == 0.0)


def test_learned_denoiser_matches_naive_convolution():
    rng = np.random.default_rng(6)
    theta = LearnedDenoiser(
        conv1=rng.standard_normal((4, 3, 3)), conv2=rng.standard_normal((4, 3, 3))
    )
    x = rng.standard_normal((7, 9))
    got = learned_denoiser_apply(x, theta)
    want = _naive_denoiser(x, theta)
    assert np.max(np.abs(got - want)) < 1e-12


def test_deblock_identity_cases():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((8, 8))
    assert np.array_equal(deblock_apply(x, DeblockParams(np.ones((3, 3)), 0.0)), x)
    assert np.array_equal(deblock_apply(x, DeblockParams(np.zeros((3, 3)), 2.0)), x)


def test_deblock_matches_naive_convolution():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((8, 8))
    kern = rng.standard_normal((3, 3))
    got = deblock_apply(x, DeblockParams(kern, 0.7))
    want = x + 0.7 * _naive_corr2(x, kern)
    assert np.max(np.abs(got - want)) < 1e-12


def test_forward_divergence_carries_iteration():
    model = init_model(k=3, block_size=4, ratio=0.5, channels=2, seed=9, normalize_a=False)
    model.a.entries *= 1e80  # guarantees overflow in the first update
    rng = np.random.default_rng(9)
    img = rng.standard_normal((4, 4)) * 1e200
    blocks, grid = block_partition(img, 4)
    y = model.a.entries @ vectorize_blocks(blocks)
    with pytest.raises(UnfoldedDivergenceError) as exc:
        with np.errstate(over="ignore", invalid="ignore"):
            _forward_blocks(model, y, grid)
    assert exc.value.iteration >= 1


def test_gradient_check_small_model():
    model = init_model(
        k=2, block_size=8, ratio=0.25, channels=4, seed=1, trainable_a=True, deblock=True
    )
    for d in model.deblock:
        d.gain = 0.1
    img = np.random.default_rng(0).standard_normal((16, 16))
    assert gradient_check(model, img, eps=1e-5) < 1e-4


def test_gradient_check_excludes_frozen_matrix():
    model = init_model(k=1, block_size=4, ratio=0.5, channels=2, seed=2, trainable_a=False)
    img = np.random.default_rng(1).standard_normal((8, 8))
    _, grads = loss_and_grads(model, img)
    assert grads["a"] is None  # frozen A contributes no gradient entries
    assert gradient_check(model, img, eps=1e-5) < 1e-4


def test_central_difference_exact_on_quadratic():
    rng = np.random.default_rng(2)
    target = rng.standard_normal(6)
    p = rng.standard_normal(6)

    def f(q):
        return float(np.sum((q - target) ** 2))

    fd = central_difference(f, p.copy(), eps=1e-5)
    exact = 2 * (p - target)
    rel = np.abs(fd - exact) / np.maximum(np.abs(exact), 1e-8)
    assert rel.max() < 1e-10


def test_lr_zero_leaves_parameters_bit_identical():
    model = init_model(k=2, block_size=4, ratio=0.5, channels=2, seed=3,
                       trainable_a=True, deblock=True)
    data = [np.random.default_rng(i).standard_normal((8, 8)) for i in range(4)]
    cfg = TrainConfig(batch_size=2, learning_rate=0.0, epochs=1, seed=0)
    trained, curve = train_model(model, data, cfg)
    assert trained.a.entries.tobytes() == model.a.entries.tobytes()
    for t0, t1 in zip(model.theta, trained.theta):
        assert t0.conv1.tobytes() == t1.conv1.tobytes()
        assert t0.conv2.tobytes() == t1.conv2.tobytes()
    for d0, d1 in zip(model.deblock, trained.deblock):
        assert d0.kernel.tobytes() == d1.kernel.tobytes()
        assert d0.gain == d1.gain
    assert len(curve) == 2


def test_training_reduces_loss():
    rng = np.random.default_rng(4)
    model = init_model(k=2, block_size=8, ratio=0.25, channels=4, seed=4,
                       trainable_a=True, deblock=True)
    data = [rng.standard_normal((16, 16)) for _ in range(8)]
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, epochs=30, seed=1)
    _, curve = train_model(model, data, cfg)
    first_epoch = np.mean([l for e, s, l in curve if e == 1])
    last_epoch = np.mean([l for e, s, l in curve if e == cfg.epochs])
    assert last_epoch < first_epoch


def test_training_deterministic_given_seed():
    model = init_model(k=1, block_size=4, ratio=0.5, channels=2, seed=5, trainable_a=True)
    data = [np.random.default_rng(i).standard_normal((8, 8)) for i in range(4)]
    cfg = TrainConfig(batch_size=2, learning_rate=1e-3, epochs=3, seed=7)
    m1, c1 = train_model(model, data, cfg)
    m2, c2 = train_model(model, data, cfg)
    assert c1 == c2
    assert m1.a.entries.tobytes() == m2.a.entries.tobytes()


def test_empty_dataset_rejected():
    model = init_model(k=1, block_size=4, ratio=0.5, channels=2, seed=6)
    with pytest.raises(ValueError, match="empty dataset"):
        train_model(model, [], TrainConfig())


def test_checkpoint_roundtrip(tmp_path):
    model = init_model(k=3, block_size=8, ratio=0.25, channels=4, seed=7,
                       trainable_a=True, deblock=True, center=1500.0, scale=100.0)
    for i, d in enumerate(model.deblock):
        d.gain = 0.1 * (i + 1)
    path = tmp_path / "model.qamu"
    save_model(model, path)
    back = load_model(path)
    assert back.k == model.k and back.block_size == model.block_size
    assert back.trainable_a and back.deblock is not None
    assert back.center == 1500.0 and back.scale == 100.0
    assert back.a.entries.tobytes() == model.a.entries.tobytes()
    for t0, t1 in zip(model.theta, back.theta):
        assert t0.conv1.tobytes() == t1.conv1.tobytes()
        assert t0.conv2.tobytes() == t1.conv2.tobytes()
    for d0, d1 in zip(model.deblock, back.deblock):
        assert d0.kernel.tobytes() == d1.kernel.tobytes()
        assert d0.gain == d1.gain
    save_model(back, tmp_path / "again.qamu")
    assert (tmp_path / "again.qamu").read_bytes() == path.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.qamu"
    path.write_bytes(b"XXXX" + b"\x00" * 60)
    with pytest.raises(ValueError, match="bad magic"):
        load_model(path)


def test_normalization_roundtrip_in_forward():
    # center/scale must cancel exactly for measurements taken on raw maps
    model = init_model(k=1, block_size=4, ratio=1.0, channels=1, seed=8,
                       center=1500.0, scale=100.0, normalize_a=False)
    model.a.entries[:] = np.eye(16)
    for t in model.theta:
        t.conv1[:] = 0.0
        t.conv2[:] = 0.0
    img = 1500.0 + 20 * np.random.default_rng(3).standard_normal((8, 8))
    prob = build_problem(img, model.a)
    out = unfolded_forward(prob.y, model, prob.grid)
    assert np.max(np.abs(out.data - img)) < 1e-9


def test_model_validation():
    a_ok = init_model(k=1, block_size=4, ratio=0.5, channels=1, seed=0).a
    with pytest.raises(ValueError):
        UnfoldedModel(a=a_ok, block_size=4, theta=[])
    with pytest.raises(ValueError):
        UnfoldedModel(a=a_ok, block_size=5, theta=[LearnedDenoiser(np.zeros((1, 3, 3)), np.zeros((1, 3, 3)))])


def test_copy_model_is_deep():
    model = init_model(k=1, block_size=4, ratio=0.5, channels=2, seed=9, deblock=True)
    dup = copy_model(model)
    dup.theta[0].conv1[0, 0, 0] = 99.0
    assert model.theta[0].conv1[0, 0, 0] != 99.0
