"""Differentiable application of deformation fields to images and masks.

A deformation field is an (N, H, W, 2) tensor of pixel-unit
displacements: channel 0 along width (x), channel 1 along height (y).
Warping is backward: output(p) = bilinear sample of the source at
p + field(p), with sample coordinates clamped to the image border.
A zero field is therefore the exact identity.
"""

from __future__ import annotations

import numpy as np

from .autodiff.tensor import ShapeError, Tensor, apply_op, clip, div, tensor_sum


def _check_field(source: Tensor, field: Tensor) -> None:
    if source.ndim != 4:
        raise ShapeError(f"warp source must be rank-4 NHWC, got rank {source.ndim}")
    if field.ndim != 4 or field.shape[3] != 2:
        raise ShapeError(f"field must be (N, H, W, 2), got {tuple(field.shape)}")
    if source.shape[:3] != field.shape[:3]:
        raise ShapeError(
            f"source extents {source.shape[:3]} do not match field extents {field.shape[:3]}"
        )


def warp(source: Tensor, field: Tensor) -> Tensor:
    """Warp an NHWC source by a displacement field, bilinearly.

    Differentiable with respect to both source values and field values.
    Clamped samples receive zero gradient along the clamped coordinate.
    """
    _check_field(source, field)
    n, h, w, c = source.shape
    src = source.data
    dtype = src.dtype

    gx = np.arange(w, dtype=dtype)
    gy = np.arange(h, dtype=dtype)
    sx = gx[None, None, :] + field.data[:, :, :, 0]
    sy = gy[None, :, None] + field.data[:, :, :, 1]

    # inside markers before clamping (border gradients vanish)
    in_x = (sx >= 0.0) & (sx <= w - 1)
    in_y = (sy >= 0.0) & (sy <= h - 1)
    sx = np.clip(sx, 0.0, w - 1)
    sy = np.clip(sy, 0.0, h - 1)

    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.minimum(x0, w - 2) if w > 1 else x0
    y0 = np.minimum(y0, h - 2) if h > 1 else y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0).astype(dtype)[..., None]
    fy = (sy - y0).astype(dtype)[..., None]

    bidx = np.arange(n, dtype=np.intp)[:, None, None]
    v00 = src[bidx, y0, x0]
    v01 = src[bidx, y0, x1]
    v10 = src[bidx, y1, x0]
    v11 = src[bidx, y1, x1]

    # corner-weight form: exact when fx, fy land on 0 or 1 (identity and
    # integer translations reproduce source values bit for bit)
    w00 = (1.0 - fx) * (1.0 - fy)
    w01 = fx * (1.0 - fy)
    w10 = (1.0 - fx) * fy
    w11 = fx * fy
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11

    def bwd(g):
        gsrc = gfield = None
        if source.requires_grad:
            gsrc = np.zeros_like(src)
            flat = gsrc.reshape(n * h * w, c)
            base = (bidx * h) * w
            i00 = (base + y0 * w + x0).ravel()
            i01 = (base + y0 * w + x1).ravel()
            i10 = (base + y1 * w + x0).ravel()
            i11 = (base + y1 * w + x1).ravel()
            for ch in range(c):
                gc = g[..., ch]
                acc = np.bincount(i00, weights=(gc * w00[..., 0]).ravel(), minlength=n * h * w)
                acc += np.bincount(i01, weights=(gc * w01[..., 0]).ravel(), minlength=n * h * w)
                acc += np.bincount(i10, weights=(gc * w10[..., 0]).ravel(), minlength=n * h * w)
                acc += np.bincount(i11, weights=(gc * w11[..., 0]).ravel(), minlength=n * h * w)
                flat[:, ch] = acc.astype(dtype, copy=False)
        if field.requires_grad:
            dout_dx = ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy) * g
            dout_dy = ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx) * g
            gfield = np.empty_like(field.data)
            gfield[:, :, :, 0] = dout_dx.sum(axis=3) * in_x
            gfield[:, :, :, 1] = dout_dy.sum(axis=3) * in_y
        return gsrc, gfield

    return apply_op(out, (source, field), bwd)


def warp_onehot(mask: Tensor, field: Tensor, eps: float = 1e-7) -> Tensor:
    """Warp a one-hot mask channel by channel, then renormalize per pixel.

    Bilinear mixing keeps channel sums at 1 up to roundoff; the
    renormalization guards the probabilistic reading required by the
    cross-entropy loss. Integer translations of hard masks stay hard.
    """
    warped = warp(mask, field)
    sums = tensor_sum(warped, axis=3, keepdims=True)
    return div(warped, clip(sums, eps, np.inf))


def hard_labels(soft: Tensor | np.ndarray) -> np.ndarray:
    """Per-pixel argmax over channels; ties go to the lowest class index."""
    data = soft.data if isinstance(soft, Tensor) else np.asarray(soft)
    if data.ndim not in (3, 4):
        raise ShapeError(f"expected (H, W, C) or (N, H, W, C), got {data.shape}")
    return np.argmax(data, axis=-1).astype(np.int64)


def onehot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """Integer label grid -> per-channel {0,1} probability encoding."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def field_tensor(values: np.ndarray) -> Tensor:
    """Wrap an (N, H, W, 2) array as a deformation-field tensor."""
    arr = np.asarray(values)
    if arr.ndim != 4 or arr.shape[3] != 2:
        raise ShapeError(f"field must be (N, H, W, 2), got {arr.shape}")
    return Tensor(arr)
