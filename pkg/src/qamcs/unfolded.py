"""Desk-scale unfolded reconstruction network with hand-derived gradients.

K fixed iterations of the linear update

    x_k = A^T z_{k-1} + x_{k-1} - (A^T A - I) vec(N_k(X_{k-1})),
    z_{k-1} = y - A x_{k-1},      x_0 = A^T y,

where N_k is a small per-iteration trainable correction (3x3 conv -> relu ->
3x3 conv, C channels, no biases) acting on the block in image form.  After
each iteration the blocks are reassembled and an optional trainable
deblocker (residual 3x3 convolution with a scalar gain) runs on the full
image before re-partitioning.  The measurement matrix A may itself be
trainable, in which case gradients flow through both its sampling and
reconstruction occurrences.

Everything is plain numpy; backpropagation is written out explicitly
(reverse-mode accumulation over the primitive steps above) and validated
against central finite differences by :func:`gradient_check`.

Convolutions use the cross-correlation orientation with zero-padded "same"
borders throughout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import (
    BlockGrid,
    ParametricMap,
    _as_array,
    block_partition,
    block_reassemble,
    unvectorize_blocks,
    vectorize_blocks,
)
from .sampling import MeasurementMatrix, gaussian_matrix

CHECKPOINT_MAGIC = b"QAMU"
CHECKPOINT_VERSION = 1
FLAG_TRAINABLE_A = 1
FLAG_DEBLOCK = 2


class UnfoldedDivergenceError(RuntimeError):
    """Non-finite iterate in the forward pass; carries the iteration index."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite iterate at iteration {iteration}")
        self.iteration = iteration


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass
class LearnedDenoiser:
    """Per-iteration correction: conv2(relu(conv1(X))), kernels (C, 3, 3)."""

    conv1: np.ndarray
    conv2: np.ndarray

    def __post_init__(self):
        self.conv1 = np.asarray(self.conv1, dtype=np.float64)
        self.conv2 = np.asarray(self.conv2, dtype=np.float64)
        if self.conv1.shape != self.conv2.shape or self.conv1.ndim != 3:
            raise ValueError("conv kernels must both have shape (C, 3, 3)")
        if self.conv1.shape[1:] != (3, 3):
            raise ValueError("kernels must be 3x3")
        if not (np.all(np.isfinite(self.conv1)) and np.all(np.isfinite(self.conv2))):
            raise ValueError("kernel entries must be finite")

    @property
    def channels(self) -> int:
        return self.conv1.shape[0]


@dataclass
class DeblockParams:
    """Full-image residual correction: map + gain * (kernel (*) map)."""

    kernel: np.ndarray
    gain: float

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        if self.kernel.shape != (3, 3):
            raise ValueError("deblock kernel must be 3x3")


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    epochs: int = 100
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss != "mse":
            raise ValueError("only mse loss is supported")


@dataclass
class UnfoldedModel:
    """K unfolded iterations with per-iteration denoiser/deblocker parameters.

    ``center``/``scale`` define the affine map normalization applied before
    sampling during training ((map - center) / scale); inference undoes it.
    """

    a: MeasurementMatrix
    block_size: int
    theta: list
    trainable_a: bool = False
    deblock: list | None = None
    center: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if len(self.theta) < 1:
            raise ValueError("need at least one iteration")
        if self.a.n != self.block_size**2:
            raise ValueError("matrix width must equal block_size^2")
        if self.deblock is not None and len(self.deblock) != len(self.theta):
            raise ValueError("deblock parameter count must match iteration count")
        if self.scale == 0:
            raise ValueError("scale must be nonzero")

    @property
    def k(self) -> int:
        return len(self.theta)

    @property
    def channels(self) -> int:
        return self.theta[0].channels


def init_model(
    k: int = 6,
    block_size: int = 16,
    ratio: float = 0.25,
    channels: int = 8,
    seed: int = 0,
    trainable_a: bool = False,
    deblock: bool = False,
    center: float = 0.0,
    scale: float = 1.0,
    matrix_seed: int | None = None,
    kernel_scale: float = 0.05,
    normalize_a: bool = True,
) -> UnfoldedModel:
    """Fresh model: Gaussian A, small random kernels, inert deblocker (gain 0).

    By default the initial matrix is rescaled to unit spectral norm so that
    ||A^T A - I|| <= 1 and the K-step linear recursion cannot amplify;
    with the raw 1/m column variance the iteration blows up by ~||A||^(2K)
    before the correction terms have learned anything.
    """
    n = block_size**2
    m = max(1, int(round(ratio * n)))
    a = gaussian_matrix(m, n, seed if matrix_seed is None else matrix_seed)
    if normalize_a:
        a = MeasurementMatrix(a.entries / np.linalg.norm(a.entries, 2), seed=a.seed)
    rng = np.random.default_rng(seed)
    theta = [
        LearnedDenoiser(
            conv1=kernel_scale * rng.standard_normal((channels, 3, 3)),
            conv2=kernel_scale * rng.standard_normal((channels, 3, 3)),
        )
        for _ in range(k)
    ]
    db = None
    if deblock:
        db = [
            DeblockParams(kernel=kernel_scale * rng.standard_normal((3, 3)), gain=0.0)
            for _ in range(k)
        ]
    return UnfoldedModel(
        a=a,
        block_size=block_size,
        theta=theta,
        trainable_a=trainable_a,
        deblock=db,
        center=center,
        scale=scale,
    )


def copy_model(model: UnfoldedModel) -> UnfoldedModel:
    return UnfoldedModel(
        a=MeasurementMatrix(model.a.entries.copy(), seed=model.a.seed),
        block_size=model.block_size,
        theta=[LearnedDenoiser(t.conv1.copy(), t.conv2.copy()) for t in model.theta],
        trainable_a=model.trainable_a,
        deblock=None
        if model.deblock is None
        else [DeblockParams(d.kernel.copy(), d.gain) for d in model.deblock],
        center=model.center,
        scale=model.scale,
    )


# ---------------------------------------------------------------------------
# 3x3 "same" cross-correlation primitives (zero-padded borders)
# ---------------------------------------------------------------------------


def _shift_stack(x: np.ndarray) -> np.ndarray:
    """The nine zero-padded 3x3 taps of x, stacked on a new leading axis."""
    h, w = x.shape[-2], x.shape[-1]
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x, pad)
    return np.stack(
        [xp[..., a : a + h, b : b + w] for a in range(3) for b in range(3)]
    )


def corr2_same(x: np.ndarray, kern: np.ndarray) -> np.ndarray:
    """out[i,j] = sum_{a,b} kern[a,b] * x[i+a-1, j+b-1]; leading axes batched."""
    h, w = x.shape[-2], x.shape[-1]
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x, pad)
    out = np.zeros_like(x)
    for a in range(3):
        for b in range(3):
            out += kern[a, b] * xp[..., a : a + h, b : b + w]
    return out


def corr2_kernel_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """d(sum(g * corr2_same(x, k)))/dk, summed over all leading axes."""
    h, w = x.shape[-2], x.shape[-1]
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x, pad)
    kg = np.empty((3, 3))
    for a in range(3):
        for b in range(3):
            kg[a, b] = np.sum(g * xp[..., a : a + h, b : b + w])
    return kg


def _flip(kern: np.ndarray) -> np.ndarray:
    return kern[::-1, ::-1]


def learned_denoiser_apply(x: np.ndarray, theta: LearnedDenoiser) -> np.ndarray:
    """conv2(relu(conv1(x))) on a (b, b) block or (n, b, b) batch."""
    out, _ = _denoiser_forward(np.asarray(x, dtype=np.float64), theta)
    return out


def _denoiser_forward(x: np.ndarray, theta: LearnedDenoiser):
    single = x.ndim == 2
    xb = x[None] if single else x
    taps_x = _shift_stack(xb)                              # (9, n, b, b)
    k1 = theta.conv1.reshape(theta.channels, 9)
    pre = np.einsum("snij,cs->ncij", taps_x, k1)           # (n, C, b, b)
    hid = np.maximum(pre, 0.0)
    taps_h = _shift_stack(hid)                             # (9, n, C, b, b)
    k2 = theta.conv2.reshape(theta.channels, 9)
    out = np.einsum("sncij,cs->nij", taps_h, k2)
    cache = (taps_x, pre, taps_h)
    if single:
        return out[0], cache
    return out, cache


def _denoiser_backward(g_out: np.ndarray, theta: LearnedDenoiser, cache):
    """Returns (g_x, g_conv1, g_conv2) for the conv -> relu -> conv stack.

    The adjoint of a 3x3 correlation is correlation with the flipped kernel,
    i.e. an einsum of the upstream gradient's tap stack with the kernel taps
    in reversed order.
    """
    taps_x, pre, taps_h = cache
    c = theta.channels
    k1r = theta.conv1.reshape(c, 9)[:, ::-1]
    k2r = theta.conv2.reshape(c, 9)[:, ::-1]
    g_conv2 = np.einsum("sncij,nij->cs", taps_h, g_out).reshape(c, 3, 3)
    g_hid = np.einsum("snij,cs->ncij", _shift_stack(g_out), k2r)
    g_pre = g_hid * (pre > 0)
    g_conv1 = np.einsum("snij,ncij->cs", taps_x, g_pre).reshape(c, 3, 3)
    g_x = np.einsum("sncij,cs->nij", _shift_stack(g_pre), k1r)
    return g_x, g_conv1, g_conv2


def deblock_apply(m, params: DeblockParams):
    """map + gain * (kernel correlated with map), zero-padded borders."""
    img = _as_array(m)
    out = img + params.gain * corr2_same(img, params.kernel)
    return ParametricMap(out) if isinstance(m, ParametricMap) else out


# ---------------------------------------------------------------------------
# Forward / backward through the unfolded iterations
# ---------------------------------------------------------------------------


def _forward_blocks(model, y, grid, n_iters=None, denoiser_override=None, with_cache=False):
    """Run the unfolded iterations on measurement columns y (M, n_blocks).

    Works in the normalized domain; callers handle (de)normalization.
    Returns the final block matrix X (N, n_blocks) and, when requested, the
    per-iteration caches needed by the backward pass.
    """
    a = model.a.entries
    b = model.block_size
    kk = model.k if n_iters is None else n_iters
    x = a.T @ y
    caches = []
    for k in range(1, kk + 1):
        x_in = unvectorize_blocks(x, b)
        if denoiser_override is not None:
            corr = denoiser_override(k, x_in)
            den_cache = None
        else:
            corr, den_cache = _denoiser_forward(x_in, model.theta[k - 1])
        v = vectorize_blocks(corr)
        z = y - a @ x
        av = a @ v
        x_new = a.T @ z + x - a.T @ av + v
        db_cache = None
        if model.deblock is not None:
            params = model.deblock[k - 1]
            u = block_reassemble(unvectorize_blocks(x_new, b), grid).data
            cu = corr2_same(u, params.kernel)
            u2 = u + params.gain * cu
            blocks2, _ = block_partition(u2, b)
            x_post = vectorize_blocks(blocks2)
            db_cache = (u, cu)
        else:
            x_post = x_new
        if not np.all(np.isfinite(x_post)):
            raise UnfoldedDivergenceError(k)
        if with_cache:
            caches.append((x, x_in, den_cache, v, z, av, db_cache))
        x = x_post
    return (x, caches) if with_cache else x


def unfolded_forward(y, model: UnfoldedModel, grid: BlockGrid, n_iters=None) -> ParametricMap:
    """Reconstruct a map from per-block measurements y (M, n_blocks).

    Measurements are taken in raw map units; the model's affine
    normalization is applied to them (y is linear in the map) and undone on
    the output.  ``n_iters=0`` returns the reassembled initialization A^T y.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != model.a.m or y.shape[1] != grid.n_blocks:
        raise ValueError("measurement shape does not match model/grid")
    ones = np.ones(model.a.n)
    y_n = (y - model.center * (model.a.entries @ ones)[:, None]) / model.scale
    x = _forward_blocks(model, y_n, grid, n_iters=n_iters)
    out = block_reassemble(unvectorize_blocks(x, model.block_size), grid).data
    return ParametricMap(out * model.scale + model.center)


def _loss_forward(model, img, with_cache=False):
    """Sample a ground-truth map on the fly and reconstruct it; MSE loss.

    The loss is computed in the normalized domain so its scale does not
    depend on the physical units of the maps.
    """
    w = (_as_array(img) - model.center) / model.scale
    blocks, grid = block_partition(w, model.block_size)
    xt = vectorize_blocks(blocks)
    y = model.a.entries @ xt
    if with_cache:
        x, caches = _forward_blocks(model, y, grid, with_cache=True)
    else:
        x = _forward_blocks(model, y, grid)
    out = block_reassemble(unvectorize_blocks(x, model.block_size), grid).data
    loss = float(np.mean((out - w) ** 2))
    if not with_cache:
        return loss
    return loss, (w, grid, xt, y, x, out, caches)


def _zero_grads(model):
    g = {
        "a": np.zeros_like(model.a.entries) if model.trainable_a else None,
        "conv1": [np.zeros_like(t.conv1) for t in model.theta],
        "conv2": [np.zeros_like(t.conv2) for t in model.theta],
    }
    if model.deblock is not None:
        g["db_kernel"] = [np.zeros_like(d.kernel) for d in model.deblock]
        g["db_gain"] = [0.0 for _ in model.deblock]
    return g


def _loss_backward(model, cache_bundle):
    """Reverse-mode accumulation through sampling, iterations and deblocking."""
    w, grid, xt, y, x_final, out, caches = cache_bundle
    a = model.a.entries
    b = model.block_size
    grads = _zero_grads(model)

    g_out = 2.0 * (out - w) / out.size
    blocks_g, _ = block_partition(g_out, b)
    g_x = vectorize_blocks(blocks_g)
    g_y = np.zeros_like(y)

    for k in range(len(caches), 0, -1):
        x_prev, x_in, den_cache, v, z, av, db_cache = caches[k - 1]
        if model.deblock is not None:
            params = model.deblock[k - 1]
            u, cu = db_cache
            g_u2 = block_reassemble(unvectorize_blocks(g_x, b), grid).data
            grads["db_gain"][k - 1] += float(np.sum(g_u2 * cu))
            grads["db_kernel"][k - 1] += params.gain * corr2_kernel_grad(u, g_u2)
            g_u = g_u2 + params.gain * corr2_same(g_u2, _flip(params.kernel))
            gb, _ = block_partition(g_u, b)
            g_xn = vectorize_blocks(gb)
        else:
            g_xn = g_x

        # x_new = A^T z + x_prev - A^T (A v) + v
        g_z = a @ g_xn
        g_av = -(a @ g_xn)
        g_v = a.T @ g_av + g_xn
        g_xprev = g_xn.copy()
        if model.trainable_a:
            grads["a"] += z @ g_xn.T          # outer A^T occurrence on z
            grads["a"] += av @ (-g_xn).T      # outer A^T occurrence on Av
            grads["a"] += g_av @ v.T          # inner A occurrence in Av

        # z = y - A x_prev
        g_y += g_z
        g_xprev += -(a.T @ g_z)
        if model.trainable_a:
            grads["a"] += -(g_z @ x_prev.T)

        # v = vec(conv2(relu(conv1(x_in))))
        g_corr = unvectorize_blocks(g_v, b)
        g_xin, g_c1, g_c2 = _denoiser_backward(g_corr, model.theta[k - 1], den_cache)
        grads["conv1"][k - 1] += g_c1
        grads["conv2"][k - 1] += g_c2
        g_xprev += vectorize_blocks(g_xin)

        g_x = g_xprev

    # x_0 = A^T y
    g_y += a @ g_x
    if model.trainable_a:
        grads["a"] += y @ g_x.T
        # sampling occurrence: y = A x_tilde
        grads["a"] += g_y @ xt.T
    return grads


def loss_and_grads(model: UnfoldedModel, img):
    """MSE loss for one ground-truth map plus gradients of every trainable parameter."""
    loss, bundle = _loss_forward(model, img, with_cache=True)
    return loss, _loss_backward(model, bundle)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _trainable_arrays(model):
    """Trainable parameter arrays in a fixed order (deblock gains excluded;
    they are scalars and handled separately)."""
    arrays = []
    if model.trainable_a:
        arrays.append(model.a.entries)
    for t in model.theta:
        arrays.extend([t.conv1, t.conv2])
    if model.deblock is not None:
        arrays.extend(d.kernel for d in model.deblock)
    return arrays


def _grad_list(model, grads):
    """Gradient arrays in the same fixed order as :func:`_param_refs`."""
    out = []
    if model.trainable_a:
        out.append(grads["a"])
    for i in range(model.k):
        out.append(grads["conv1"][i])
        out.append(grads["conv2"][i])
    if model.deblock is not None:
        for i in range(model.k):
            out.append(grads["db_kernel"][i])
    return out


def train_model(model: UnfoldedModel, dataset, config: TrainConfig):
    """Adam-style training on ground-truth maps; measurements synthesized on the fly.

    Returns ``(trained_model, loss_curve)`` where the loss curve is a list of
    ``(epoch, step, loss)`` rows, one per optimizer step (batch-mean loss).
    The input model is left untouched.  Deterministic given ``config.seed``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    imgs = [_as_array(d) for d in dataset]
    shape = imgs[0].shape
    if any(im.shape != shape for im in imgs):
        raise ValueError("all maps in the dataset must share dimensions")

    model = copy_model(model)
    arrays = _trainable_arrays(model)
    mom1 = [np.zeros_like(p) for p in arrays]
    mom2 = [np.zeros_like(p) for p in arrays]
    gains_m1 = gains_m2 = None
    if model.deblock is not None:
        gains_m1 = np.zeros(model.k)
        gains_m2 = np.zeros(model.k)

    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    rng = np.random.default_rng(config.seed)
    curve = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(imgs))
        for start in range(0, len(imgs), config.batch_size):
            batch = order[start : start + config.batch_size]
            total = None
            total_gains = None
            batch_loss = 0.0
            for idx in batch:
                loss, grads = loss_and_grads(model, imgs[idx])
                batch_loss += loss
                glist = _grad_list(model, grads)
                if total is None:
                    total = [g.copy() for g in glist]
                else:
                    for acc, g in zip(total, glist):
                        acc += g
                if model.deblock is not None:
                    g = np.asarray(grads["db_gain"])
                    total_gains = g.copy() if total_gains is None else total_gains + g
            inv = 1.0 / len(batch)
            batch_loss *= inv
            step += 1
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(epoch, step)
            t = step
            corr1 = 1.0 - beta1**t
            corr2c = 1.0 - beta2**t
            for p, m1, m2, g in zip(arrays, mom1, mom2, total):
                g = g * inv
                m1 *= beta1
                m1 += (1 - beta1) * g
                m2 *= beta2
                m2 += (1 - beta2) * g * g
                p -= config.learning_rate * (m1 / corr1) / (np.sqrt(m2 / corr2c) + adam_eps)
            if model.deblock is not None:
                g = total_gains * inv
                gains_m1[:] = beta1 * gains_m1 + (1 - beta1) * g
                gains_m2[:] = beta2 * gains_m2 + (1 - beta2) * g * g
                upd = config.learning_rate * (gains_m1 / corr1) / (
                    np.sqrt(gains_m2 / corr2c) + adam_eps
                )
                for i, d in enumerate(model.deblock):
                    d.gain = float(d.gain - upd[i])
            curve.append((epoch, step, batch_loss))
    return model, curve


def loss_curve_to_csv(curve, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,step,loss\n")
        for epoch, step, loss in curve:
            fh.write(f"{epoch},{step},{loss!r}\n")


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def gradient_check(model: UnfoldedModel, sample, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Every trainable parameter is perturbed individually; frozen parameters
    (A when not trainable) are excluded.  Relative error uses
    |a - f| / max(|a|, |f|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    img = _as_array(sample)
    _, grads = loss_and_grads(model, img)

    arrays = []
    analytic = []
    if model.trainable_a:
        arrays.append(model.a.entries)
        analytic.append(grads["a"])
    for i, t in enumerate(model.theta):
        arrays.extend([t.conv1, t.conv2])
        analytic.extend([grads["conv1"][i], grads["conv2"][i]])
    if model.deblock is not None:
        for i, d in enumerate(model.deblock):
            arrays.append(d.kernel)
            analytic.append(grads["db_kernel"][i])

    worst = 0.0
    for p, g in zip(arrays, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            lp = _loss_forward(model, img)
            flat[j] = orig - eps
            lm = _loss_forward(model, img)
            flat[j] = orig
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(gflat[j] - fd) / max(abs(gflat[j]), abs(fd), 1e-8))
    if model.deblock is not None:
        for i, d in enumerate(model.deblock):
            orig = d.gain
            d.gain = orig + eps
            lp = _loss_forward(model, img)
            d.gain = orig - eps
            lm = _loss_forward(model, img)
            d.gain = orig
            fd = (lp - lm) / (2 * eps)
            g = grads["db_gain"][i]
            worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-8))
    return worst


def central_difference(f, p: np.ndarray, eps: float) -> np.ndarray:
    """Plain central-difference gradient of a scalar function of an array."""
    p = np.asarray(p, dtype=np.float64)
    out = np.empty_like(p)
    flat = p.reshape(-1)
    oflat = out.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        lp = f(p)
        flat[j] = orig - eps
        lm = f(p)
        flat[j] = orig
        oflat[j] = (lp - lm) / (2 * eps)
    return out


# ---------------------------------------------------------------------------
# Checkpoint format "QAMU"
# ---------------------------------------------------------------------------


def save_model(model: UnfoldedModel, path) -> None:
    """Binary checkpoint: header (magic, version, K, B, C, M, flags,
    center, scale) then f64 LE parameters in fixed order: A row-major,
    conv1/conv2 per iteration, then deblock kernel+gain per iteration."""
    flags = (FLAG_TRAINABLE_A if model.trainable_a else 0) | (
        FLAG_DEBLOCK if model.deblock is not None else 0
    )
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<IIIIII",
                CHECKPOINT_VERSION,
                model.k,
                model.block_size,
                model.channels,
                model.a.m,
                flags,
            )
        )
        fh.write(struct.pack("<dd", model.center, model.scale))
        fh.write(model.a.entries.astype("<f8").tobytes())
        for t in model.theta:
            fh.write(t.conv1.astype("<f8").tobytes())
            fh.write(t.conv2.astype("<f8").tobytes())
        if model.deblock is not None:
            for d in model.deblock:
                fh.write(d.kernel.astype("<f8").tobytes())
                fh.write(struct.pack("<d", d.gain))


def load_model(path) -> UnfoldedModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("bad magic")
    if len(raw) < 44:
        raise ValueError("truncated header")
    version, k, b, c, m, flags = struct.unpack("<IIIIII", raw[4:28])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported version {version}")
    center, scale = struct.unpack("<dd", raw[28:44])
    n = b * b
    off = 44

    def take(count):
        nonlocal off
        nbytes = count * 8
        if len(raw) < off + nbytes:
            raise ValueError("truncated payload")
        arr = np.frombuffer(raw[off : off + nbytes], dtype="<f8").copy()
        off += nbytes
        return arr

    a = MeasurementMatrix(take(m * n).reshape(m, n))
    theta = []
    for _ in range(k):
        conv1 = take(c * 9).reshape(c, 3, 3)
        conv2 = take(c * 9).reshape(c, 3, 3)
        theta.append(LearnedDenoiser(conv1, conv2))
    db = None
    if flags & FLAG_DEBLOCK:
        db = []
        for _ in range(k):
            kern = take(9).reshape(3, 3)
            gain = float(take(1)[0])
            db.append(DeblockParams(kern, gain))
    return UnfoldedModel(
        a=a,
        block_size=b,
        theta=theta,
        trainable_a=bool(flags & FLAG_TRAINABLE_A),
        deblock=db,
        center=center,
        scale=scale,
    )
