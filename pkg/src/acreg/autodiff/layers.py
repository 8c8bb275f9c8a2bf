"""Differentiable layer operations in the fixed NHWC layout.

Convolution avoids materializing an im2col matrix: each kernel offset
(i, j) contributes one GEMM over the contiguous padded input, and the
results are accumulated through strided views. The same shifted-GEMM
scheme drives both backward passes, so no column buffers are kept
alive between forward and backward.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, apply_op


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _require_rank4(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 NHWC, got rank {x.ndim}")


# -- convolution --------------------------------------------------------------


def _chan_mix(mat: np.ndarray, w: np.ndarray) -> np.ndarray:
    # (M, cin) @ (cin, cout); BLAS chokes on tiny inner extents, so very
    # narrow inputs use broadcast multiply-accumulate instead
    cin = w.shape[0]
    if cin > 4:
        return mat @ w
    out = mat[:, 0:1] * w[0]
    for c in range(1, cin):
        out += mat[:, c : c + 1] * w[c]
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2D convolution: NHWC input, (kh, kw, cin, cout) kernel, symmetric zero padding.

    Output extents follow floor((H + 2*pad - k) / stride) + 1.

    Stride-1 calls run one channel-mixing GEMM per kernel offset over
    the whole padded plane and accumulate shifted views; strided calls
    gather each offset's window to a compact matrix first (the full
    plane would waste stride^2 of the work).
    """
    _require_rank4(x, "conv2d input")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank-4 (kh, kw, cin, cout), got rank {kernel.ndim}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[3]} channels, kernel expects {cin}"
        )
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {tuple(bias.shape)} does not match {cout} output channels")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, h, w, _ = x.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {ph}x{pw}")

    if ph or pw:
        xp = np.zeros((n, h + 2 * ph, w + 2 * pw, cin), dtype=x.data.dtype)
        xp[:, ph : ph + h, pw : pw + w, :] = x.data
    else:
        xp = x.data
    hp, wp = xp.shape[1], xp.shape[2]
    full_plane = sh == 1 and sw == 1
    xp_mat = xp.reshape(n * hp * wp, cin)

    out = np.empty((n, oh, ow, cout), dtype=x.data.dtype)
    out[:] = bias.data
    for i in range(kh):
        for j in range(kw):
            if full_plane:
                mixed = _chan_mix(xp_mat, kernel.data[i, j]).reshape(n, hp, wp, cout)
                out += mixed[:, i : i + oh, j : j + ow, :]
            else:
                window = np.ascontiguousarray(
                    xp[:, i : i + sh * oh : sh, j : j + sw * ow : sw, :]
                ).reshape(n * oh * ow, cin)
                out += _chan_mix(window, kernel.data[i, j]).reshape(n, oh, ow, cout)

    def bwd(g):
        g2 = g.reshape(n * oh * ow, cout)
        gk = gx = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    piece = (g2 @ kernel.data[i, j].T).reshape(n, oh, ow, cin)
                    gxp[:, i : i + sh * oh : sh, j : j + sw * ow : sw, :] += piece
            gx = gxp[:, ph : ph + h, pw : pw + w, :] if (ph or pw) else gxp
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            if full_plane:
                gfull = np.zeros((n, hp, wp, cout), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gfull[:, i : i + oh, j : j + ow, :] = g
                        gk[i, j] = xp_mat.T @ gfull.reshape(n * hp * wp, cout)
                        gfull[:, i : i + oh, j : j + ow, :] = 0.0
            else:
                for i in range(kh):
                    for j in range(kw):
                        window = np.ascontiguousarray(
                            xp[:, i : i + sh * oh : sh, j : j + sw * ow : sw, :]
                        ).reshape(n * oh * ow, cin)
                        gk[i, j] = window.T @ g2
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gk, gb

    return apply_op(out, (x, kernel, bias), bwd)


# -- pooling and resampling ----------------------------------------------------


def avgpool2d(x: Tensor, window=(2, 2), stride=(2, 2)) -> Tensor:
    """Mean over each window; no padding (even extents halve exactly at 2/2)."""
    _require_rank4(x, "avgpool2d input")
    wh, ww = _pair(window)
    sh, sw = _pair(stride)
    if wh < 1 or ww < 1 or sh < 1 or sw < 1:
        raise ShapeError("window and stride must be positive")
    n, h, w, c = x.shape
    if wh > h or ww > w:
        raise ShapeError(f"window {wh}x{ww} larger than input {h}x{w}")
    oh = (h - wh) // sh + 1
    ow = (w - ww) // sw + 1
    area = wh * ww

    acc = np.zeros((n, oh, ow, c), dtype=x.data.dtype)
    for i in range(wh):
        for j in range(ww):
            acc += x.data[:, i : i + sh * oh : sh, j : j + sw * ow : sw, :]
    out = acc / area

    def bwd(g):
        gx = np.zeros_like(x.data)
        gw = g / area
        for i in range(wh):
            for j in range(ww):
                gx[:, i : i + sh * oh : sh, j : j + sw * ow : sw, :] += gw
        return (gx,)

    return apply_op(out, (x,), bwd)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2x2 block; doubles H and W."""
    _require_rank4(x, "upsample input")
    n, h, w, c = x.shape
    out = np.broadcast_to(
        x.data[:, :, None, :, None, :], (n, h, 2, w, 2, c)
    ).reshape(n, 2 * h, 2 * w, c)

    def bwd(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return apply_op(np.ascontiguousarray(out), (x,), bwd)


# -- normalization and regularization -----------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over the N, H, W axes.

    Train mode normalizes with batch statistics (biased variance),
    updates the running buffers in place, and differentiates through
    the statistics. Eval mode treats the running buffers as constants.
    """
    _require_rank4(x, "batchnorm input")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    c = x.shape[3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv

        def bwd_eval(g):
            gx = ggamma = gbeta = None
            if x.requires_grad:
                gx = g * (gamma.data * inv)
            if gamma.requires_grad:
                ggamma = (g * xhat).sum(axis=(0, 1, 2))
            if beta.requires_grad:
                gbeta = g.sum(axis=(0, 1, 2))
            return gx, ggamma, gbeta

        return apply_op(xhat * gamma.data + beta.data, (x, gamma, beta), bwd_eval)

    m = x.shape[0] * x.shape[1] * x.shape[2]
    x2 = x.data.reshape(m, c)
    mean = x2.mean(axis=0)
    centered = x2 - mean
    var = np.einsum("ij,ij->j", centered, centered) / m
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    running_mean += momentum * (mean - running_mean)
    running_var += momentum * (var - running_var)

    def bwd_train(g):
        gx = ggamma = gbeta = None
        g2 = g.reshape(m, c)
        sg = g2.sum(axis=0)
        sgx = np.einsum("ij,ij->j", g2, xhat)
        if x.requires_grad:
            # standard closed form: backprop through batch mean and variance
            gx = g2 - (sg / m) - xhat * (sgx / m)
            gx *= gamma.data * inv
            gx = gx.reshape(x.shape)
        if gamma.requires_grad:
            ggamma = sgx
        if beta.requires_grad:
            gbeta = sg
        return gx, ggamma, gbeta

    out = (xhat * gamma.data + beta.data).reshape(x.shape)
    return apply_op(out, (x, gamma, beta), bwd_train)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate); eval mode is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / keep

    def bwd(g):
        return (g * mask,)

    return apply_op(x.data * mask, (x,), bwd)


# -- dense and activations -----------------------------------------------------


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map on the flattened per-sample features: (N, *) -> (N, out)."""
    n = x.shape[0]
    feat = x.size // n
    if weight.ndim != 2 or weight.shape[0] != feat:
        raise ShapeError(
            f"weight expects {weight.shape[0]} input features, input flattens to {feat}"
        )
    out_features = weight.shape[1]
    if bias.shape != (out_features,):
        raise ShapeError(f"bias shape {tuple(bias.shape)} does not match {out_features} outputs")
    xf = x.data.reshape(n, feat)
    out = xf @ weight.data + bias.data

    def bwd(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = (g @ weight.data.T).reshape(x.shape)
        if weight.requires_grad:
            gw = xf.T @ g
        if bias.requires_grad:
            gb = g.sum(axis=0)
        return gx, gw, gb

    return apply_op(out, (x, weight, bias), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return apply_op(np.maximum(x.data, 0), (x,), bwd)


def elu(x: Tensor) -> Tensor:
    """x for x > 0, exp(x) - 1 otherwise (alpha = 1)."""
    # deriv = exp(min(x, 0)) equals the ELU derivative on both branches
    deriv = np.minimum(x.data, 0)
    np.exp(deriv, out=deriv)
    out = np.where(x.data > 0, x.data, deriv - 1.0)

    def bwd(g):
        return (g * deriv,)

    return apply_op(out, (x,), bwd)


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over the channel axis; per-pixel channel values sum to 1."""
    _require_rank4(x, "softmax input")
    shifted = x.data - x.data.max(axis=3, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=3, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=3, keepdims=True)
        return (out * (g - dot),)

    return apply_op(out, (x,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two NHWC tensors along the channel axis."""
    _require_rank4(a, "concat input")
    _require_rank4(b, "concat input")
    if a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"spatial extents differ: {a.shape[:3]} vs {b.shape[:3]}")
    from .tensor import concat

    return concat((a, b), axis=3)
