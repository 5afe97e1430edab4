"""Differentiable ops: convolution stack, losses, and shape plumbing.

Forward passes are plain numpy; each op registers a closure that maps
the output adjoint onto input adjoints with ``+=`` so that shared
tensors (weight sharing, multi-use inputs) accumulate naturally.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DomainError
from .tensor import Tensor, from_op


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """Spatial output size of a valid convolution/pooling stage."""
    if size + 2 * pad < kernel:
        raise ConfigurationError(
            f"window {kernel} exceeds padded input {size + 2 * pad}"
        )
    return (size + 2 * pad - kernel) // stride + 1


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0,
           name: str = "conv2d") -> Tensor:
    """2D cross-correlation of [N,C,H,W] with [K,C,kh,kw] plus bias [K]."""
    if x.data.ndim != 4 or w.data.ndim != 4 or b.data.ndim != 1:
        raise ConfigurationError(
            f"{name}: expected x[N,C,H,W], w[K,C,kh,kw], b[K]; got "
            f"{x.shape}, {w.shape}, {b.shape}"
        )
    N, C, H, W = x.shape
    K, Cw, kh, kw = w.shape
    if Cw != C:
        raise ConfigurationError(
            f"{name}: weight expects {Cw} input channels, input has {C}"
        )
    if b.shape != (K,):
        raise ConfigurationError(f"{name}: bias shape {b.shape} != ({K},)")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"{name}: bad stride/pad ({stride}, {pad})")
    try:
        Ho = conv_output_size(H, kh, stride, pad)
        Wo = conv_output_size(W, kw, stride, pad)
    except ConfigurationError as e:
        raise ConfigurationError(f"{name}: {e}") from None

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [N,C,Ho,Wo,kh,kw] -> rows of flattened receptive fields
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(K, -1)
    out = cols @ wmat.T
    out += b.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, K).transpose(0, 3, 1, 2))

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, K)
        if _needs_grad(b):
            b.grad += g.sum(axis=(0, 2, 3))
        if _needs_grad(w):
            w.grad += (gmat.T @ cols).reshape(w.shape)
        if _needs_grad(x):
            dcols = gmat @ wmat
            d6 = dcols.reshape(N, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride,
                        j:j + stride * Wo:stride] += d6[:, :, :, :, i, j]
            x.grad += dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp

    return from_op("conv2d", (x, w, b), out, backward_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward_fn(g):
        if _needs_grad(x):
            x.grad += g * (x.data > 0)

    return from_op("relu", (x,), out, backward_fn)


def lrn(x: Tensor, depth_n: int = 5, k: float = 2.0, alpha: float = 1e-4,
        beta: float = 0.75) -> Tensor:
    """Cross-channel local response normalization.

    out_c = x_c / (k + (alpha/n) * sum_{c' in win(c)} x_{c'}^2)^beta where
    win(c) is a depth window of n channels centered on c, clipped at the
    channel edges.
    """
    if x.data.ndim != 4:
        raise ConfigurationError(f"lrn expects [N,C,H,W], got {x.shape}")
    if depth_n < 1 or depth_n % 2 == 0:
        raise ConfigurationError(f"lrn depth must be odd and positive, got {depth_n}")
    a = x.data
    C = a.shape[1]
    half = depth_n // 2
    idx = np.arange(C)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, C)

    def window_sum(vals):
        cs = np.concatenate(
            [np.zeros_like(vals[:, :1]), np.cumsum(vals, axis=1)], axis=1)
        return cs[:, hi] - cs[:, lo]

    denom = k + (alpha / depth_n) * window_sum(a * a)
    dpow = denom ** (-beta)
    out = a * dpow

    def backward_fn(g):
        if _needs_grad(x):
            inner = g * a * denom ** (-beta - 1.0)
            x.grad += g * dpow - (2.0 * alpha * beta / depth_n) * a * window_sum(inner)

    return from_op("lrn", (x,), out, backward_fn)


def maxpool(x: Tensor, kernel: int = 3, stride: int = 2) -> Tensor:
    """Max pooling; ties within a window route gradient to the first
    (row-major) maximal element only."""
    if x.data.ndim != 4:
        raise ConfigurationError(f"maxpool expects [N,C,H,W], got {x.shape}")
    N, C, H, W = x.shape
    if kernel > H or kernel > W:
        raise ConfigurationError(
            f"maxpool window {kernel} exceeds input {H}x{W}")
    if stride < 1:
        raise ConfigurationError(f"maxpool stride must be >= 1, got {stride}")
    Ho = (H - kernel) // stride + 1
    Wo = (W - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    flat = win.reshape(N, C, Ho, Wo, kernel * kernel)
    am = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        if _needs_grad(x):
            n_i, c_i, h_i, w_i = np.indices((N, C, Ho, Wo))
            hs = h_i * stride + am // kernel
            ws = w_i * stride + am % kernel
            np.add.at(x.grad, (n_i, c_i, hs, ws), g)

    return from_op("maxpool", (x,), out, backward_fn)


def linear(x: Tensor, w: Tensor, b: Tensor, name: str = "linear") -> Tensor:
    """Affine map of [N,D] by weight [M,D] and bias [M]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ConfigurationError(
            f"{name}: expected x[N,D], w[M,D], b[M]; got "
            f"{x.shape}, {w.shape}, {b.shape}"
        )
    if x.shape[1] != w.shape[1] or b.shape[0] != w.shape[0]:
        raise ConfigurationError(
            f"{name}: incompatible shapes x{x.shape} w{w.shape} b{b.shape}"
        )
    out = x.data @ w.data.T + b.data

    def backward_fn(g):
        if _needs_grad(w):
            w.grad += g.T @ x.data
        if _needs_grad(b):
            b.grad += g.sum(axis=0)
        if _needs_grad(x):
            x.grad += g @ w.data

    return from_op("linear", (x, w, b), out, backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ConfigurationError(
            f"cannot reshape {x.shape} ({x.data.size} elements) to {shape}"
        )
    out = x.data.reshape(shape)

    def backward_fn(g):
        if _needs_grad(x):
            x.grad += g.reshape(x.shape)

    return from_op("reshape", (x,), out, backward_fn)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ConfigurationError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        start = 0
        for t in tensors:
            n = t.shape[axis]
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            if _needs_grad(t):
                t.grad += g[tuple(sl)]
            start += n

    return from_op("concat", tensors, out, backward_fn)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward_fn(g):
        if _needs_grad(x):
            x.grad += g

    return from_op("sum", (x,), out, backward_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    with np.errstate(over="ignore"):
        out = x.data * factor

    def backward_fn(g):
        if _needs_grad(x):
            x.grad += g * factor

    return from_op("scale", (x,), out, backward_fn)


def shift(x: Tensor, offset: float) -> Tensor:
    """Add a constant to every element; gradient passes through."""
    out = x.data + x.dtype.type(offset)

    def backward_fn(g):
        if _needs_grad(x):
            x.grad += g

    return from_op("shift", (x,), out, backward_fn)


def _coerce_target(target, like: Tensor, name: str) -> np.ndarray:
    arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    arr = arr.astype(like.dtype, copy=False)
    if arr.shape != like.shape:
        raise ConfigurationError(
            f"{name}: target shape {arr.shape} != prediction shape {like.shape}"
        )
    return arr


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared elementwise differences (mean over every element)."""
    tgt = _coerce_target(target, pred, "mse_loss")
    diff = pred.data - tgt
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def backward_fn(g):
        if _needs_grad(pred):
            pred.grad += g * (2.0 / diff.size) * diff

    return from_op("mse_loss", (pred,), out, backward_fn)


def cosine_embedding_loss(a: Tensor, b: Tensor, same, margin: float = 0.0) -> Tensor:
    """Cosine similarity loss over row pairs.

    Rows with same=+1 contribute 1 - cos; rows with same=-1 contribute
    max(0, cos - margin). The result is the mean over rows.
    """
    if a.data.ndim != 2 or a.shape != b.shape:
        raise ConfigurationError(
            f"cosine_embedding_loss expects matching [N,D] inputs, got "
            f"{a.shape} and {b.shape}"
        )
    same = np.asarray(same)
    if same.shape != (a.shape[0],):
        raise ConfigurationError(
            f"same flags shape {same.shape} != ({a.shape[0]},)")
    if not np.all(np.isin(same, (-1, 1))):
        raise ConfigurationError("same flags must be +1 or -1")
    A, B = a.data, b.data
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na < 1e-12) or np.any(nb < 1e-12):
        raise DomainError("cosine_embedding_loss: zero-norm feature row")
    cos = (A * B).sum(axis=1) / (na * nb)
    pos = same > 0
    per_row = np.where(pos, 1.0 - cos, np.maximum(0.0, cos - margin))
    out = np.asarray(per_row.mean(), dtype=A.dtype)
    n = A.shape[0]

    def backward_fn(g):
        dcos = np.where(pos, -1.0, (cos > margin).astype(A.dtype)) / n
        coef = (g * dcos)[:, None]
        if _needs_grad(a):
            a.grad += coef * (B / (na * nb)[:, None] - (cos / na ** 2)[:, None] * A)
        if _needs_grad(b):
            b.grad += coef * (A / (na * nb)[:, None] - (cos / nb ** 2)[:, None] * B)

    return from_op("cosine_embedding_loss", (a, b), out, backward_fn)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def per_bin_softmax_loss(logits: Tensor, bin_index, label,
                         reduction: str = "mean") -> Tensor:
    """Two-way cross entropy on the logit pair of one selected bin per row.

    logits is [N, n_bins, 2]; bin_index picks which bin was executed and
    label in {0, 1} is its outcome class. Non-selected bins receive zero
    gradient. reduction 'mean' averages over rows; 'sum' returns the raw
    per-row sum.
    """
    if logits.data.ndim != 3 or logits.shape[2] != 2:
        raise ConfigurationError(
            f"per_bin_softmax_loss expects [N,bins,2] logits, got {logits.shape}"
        )
    if reduction not in ("mean", "sum"):
        raise ConfigurationError(f"unknown reduction {reduction!r}")
    n, n_bins, _ = logits.shape
    bins = np.asarray(bin_index, dtype=np.int64)
    labels = np.asarray(label, dtype=np.int64)
    if bins.shape != (n,) or labels.shape != (n,):
        raise ConfigurationError("bin_index and label must be length-N vectors")
    if np.any(bins < 0) or np.any(bins >= n_bins):
        raise ConfigurationError(
            f"bin index out of range [0, {n_bins}): {bins.min()}..{bins.max()}"
        )
    if np.any((labels != 0) & (labels != 1)):
        raise ConfigurationError("labels must be 0 or 1")
    rows = np.arange(n)
    sel = logits.data[rows, bins]
    logp = _log_softmax(sel)
    per_row = -logp[rows, labels]
    total = per_row.sum() if reduction == "sum" else per_row.mean()
    out = np.asarray(total, dtype=logits.dtype)
    inv = 1.0 if reduction == "sum" else 1.0 / n

    def backward_fn(g):
        if _needs_grad(logits):
            dsel = np.exp(logp)
            dsel[rows, labels] -= 1.0
            dsel *= g * inv
            buf = np.zeros_like(logits.data)
            buf[rows, bins] = dsel
            logits.grad += buf

    return from_op("per_bin_softmax_loss", (logits,), out, backward_fn)


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Multi-class cross entropy over [N,C] logits with integer labels."""
    if logits.data.ndim != 2:
        raise ConfigurationError(
            f"softmax_cross_entropy expects [N,C] logits, got {logits.shape}")
    if reduction not in ("mean", "sum"):
        raise ConfigurationError(f"unknown reduction {reduction!r}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ConfigurationError("labels must be a length-N vector")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ConfigurationError(f"label out of range [0, {c})")
    rows = np.arange(n)
    logp = _log_softmax(logits.data)
    per_row = -logp[rows, labels]
    total = per_row.sum() if reduction == "sum" else per_row.mean()
    out = np.asarray(total, dtype=logits.dtype)
    inv = 1.0 if reduction == "sum" else 1.0 / n

    def backward_fn(g):
        if _needs_grad(logits):
            d = np.exp(logp)
            d[rows, labels] -= 1.0
            logits.grad += d * (g * inv)

    return from_op("softmax_cross_entropy", (logits,), out, backward_fn)
