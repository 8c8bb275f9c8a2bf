"""Training losses: intensity alignment, field smoothness, and the two
anatomical terms (pixel-level cross-entropy and code-space distance).

All losses are built from autodiff primitives, so gradients flow to the
deformation field through the warper without per-loss backward code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff.tensor import (
    ShapeError,
    Tensor,
    absolute,
    clip,
    log,
    sqrt,
    tensor_mean,
    tensor_sum,
)

CE_CLAMP = 1e-7
NCC_EPS = 1e-8


@dataclass
class LossWeights:
    """Weights for the composite objective.

    Defaults are the grid-searched operating point: lambda_r 5e-5,
    lambda_ce 1, lambda_ae 0.1. Setting lambda_ce = lambda_ae = 0
    reduces the composite to intensity alignment plus smoothness.
    """

    lambda_r: float = 5e-5
    lambda_ce: float = 1.0
    lambda_ae: float = 0.1

    def __post_init__(self):
        if min(self.lambda_r, self.lambda_ce, self.lambda_ae) < 0:
            raise ValueError("loss weights must be nonnegative")


def ncc_loss(warped: Tensor, target: Tensor) -> Tensor:
    """Negative normalized cross-correlation, computed globally per image.

    Per batch item: -sum((A-uA)(B-uB)) / sqrt(sum((A-uA)^2) *
    sum((B-uB)^2) + eps), then the batch mean. Range [-1, 1]; lower is
    better alignment. Invariant to positive affine intensity changes of
    either argument.
    """
    if warped.shape != target.shape:
        raise ShapeError(f"shape mismatch: {tuple(warped.shape)} vs {tuple(target.shape)}")
    if warped.ndim != 4 or warped.shape[3] != 1:
        raise ShapeError(f"expected single-channel NHWC images, got {tuple(warped.shape)}")
    axes = (1, 2, 3)
    a = warped - tensor_mean(warped, axis=axes, keepdims=True)
    b = target - tensor_mean(target, axis=axes, keepdims=True)
    num = tensor_sum(a * b, axis=axes)
    den = sqrt(tensor_sum(a * a, axis=axes) * tensor_sum(b * b, axis=axes) + NCC_EPS)
    return tensor_mean(-num / den)


def tv_reg(field: Tensor, charbonnier: bool = False, delta: float = 1e-3) -> Tensor:
    """Total variation of the field: mean-per-pixel L1 of forward differences.

    Boundary rows/columns are skipped on their missing side. The
    optional Charbonnier form sqrt(d^2 + delta^2) - delta smooths the
    kink at zero for gradient checking.
    """
    if field.ndim != 4 or field.shape[3] != 2:
        raise ShapeError(f"field must be (N, H, W, 2), got {tuple(field.shape)}")
    n, h, w, _ = field.shape
    dx = field[:, :, 1:, :] - field[:, :, :-1, :]
    dy = field[:, 1:, :, :] - field[:, :-1, :, :]
    if charbonnier:
        px = sqrt(dx * dx + delta * delta) - delta
        py = sqrt(dy * dy + delta * delta) - delta
    else:
        px = absolute(dx)
        py = absolute(dy)
    total = tensor_sum(px, axis=(1, 2, 3)) + tensor_sum(py, axis=(1, 2, 3))
    return tensor_mean(total) * (1.0 / (h * w))


def _check_hard_onehot(target: Tensor) -> None:
    t = target.data
    if not (np.all((t == 0.0) | (t == 1.0)) and np.all(t.sum(axis=-1) == 1.0)):
        raise ValueError("target mask must be a hard one-hot encoding")


def ce_loss(warped_mask: Tensor, target_mask: Tensor) -> Tensor:
    """Pixel-level categorical cross-entropy of a soft warped mask
    against a hard one-hot target, averaged over pixels then batch.

    Probabilities are clamped to [1e-7, 1] before the log.
    """
    if warped_mask.shape != target_mask.shape:
        raise ShapeError(
            f"shape mismatch: {tuple(warped_mask.shape)} vs {tuple(target_mask.shape)}"
        )
    _check_hard_onehot(target_mask)
    n, h, w, _ = warped_mask.shape
    logp = log(clip(warped_mask, CE_CLAMP, 1.0))
    per_item = tensor_sum(target_mask * logp, axis=(1, 2, 3))
    return tensor_mean(per_item) * (-1.0 / (h * w))


def ae_loss(warped_mask: Tensor, target_mask: Tensor, encoder) -> Tensor:
    """Squared Euclidean distance between the codes of the two masks.

    The encoder must be frozen (no trainable parameters) and in eval
    mode; this guards the two-stage training protocol. Gradient flows
    only through the code of the warped mask.
    """
    if any(p.requires_grad for p in encoder.parameters()):
        raise ValueError("encoder must be frozen before it is used as a loss")
    if encoder.mode != "eval":
        raise ValueError("encoder must be in eval mode")
    code_w = encoder.encode(warped_mask)
    code_t = encoder.encode(target_mask)
    diff = code_w - code_t
    return tensor_mean(tensor_sum(diff * diff, axis=1))


def composite_loss(
    warped_image: Tensor,
    target_image: Tensor,
    warped_mask: Tensor | None,
    target_mask: Tensor | None,
    field: Tensor,
    weights: LossWeights,
    encoder=None,
    charbonnier_tv: bool = False,
) -> tuple[Tensor, dict]:
    """Weighted sum ncc + lambda_r*tv + lambda_ce*ce + lambda_ae*ae.

    Terms with zero weight are skipped entirely (their reported value
    is 0). Returns the scalar total and a per-term float dict for
    logging: keys ncc, tv, ce, ae, total.
    """
    ncc = ncc_loss(warped_image, target_image)
    tv = tv_reg(field, charbonnier=charbonnier_tv)
    total = ncc + weights.lambda_r * tv
    parts = {"ncc": ncc.item(), "tv": tv.item(), "ce": 0.0, "ae": 0.0}
    if weights.lambda_ce > 0:
        if warped_mask is None or target_mask is None:
            raise ValueError("lambda_ce > 0 requires segmentation masks")
        ce = ce_loss(warped_mask, target_mask)
        total = total + weights.lambda_ce * ce
        parts["ce"] = ce.item()
    if weights.lambda_ae > 0:
        if encoder is None:
            raise ValueError("lambda_ae > 0 requires a trained encoder")
        if warped_mask is None or target_mask is None:
            raise ValueError("lambda_ae > 0 requires segmentation masks")
        ae = ae_loss(warped_mask, target_mask, encoder)
        total = total + weights.lambda_ae * ae
        parts["ae"] = ae.item()
    parts["total"] = total.item()
    return total, parts
