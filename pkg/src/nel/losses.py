"""Training objectives: Dice loss, mean L2, and the Sobel edge-preservation term.

All three return a LossValue: the graph-attached scalar plus a plain-float
breakdown for logging.  Weighted breakdown terms always sum to the scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError

DICE_EPS = 1e-6

# Sobel kernel pair; gy is the transpose of gx.
_SOBEL_GX = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_GY = _SOBEL_GX.T.copy()


@dataclass
class LossValue:
    """Scalar loss tensor plus per-term floats for logging.

    Invariant: sum(weights[k] * breakdown[k]) equals value.item() to 1e-6
    relative.
    """

    value: ad.Tensor
    breakdown: Dict[str, float] = field(default_factory=dict)
    weights: Dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return self.value.item()


def dice_loss(y: ad.Tensor, y_label: ad.Tensor) -> LossValue:
    """Negated overlap ratio: -sum(y_label * y) / (sum(y_label) + sum(y) + eps).

    y is a soft map in [0,1], y_label is strictly binary.  The value lives in
    (-0.5, 0]; it reaches toward -0.5 as y approaches a nonzero y_label.  The
    epsilon keeps the all-zero case (pure-noise samples with empty labels)
    finite at exactly -0.0.
    """
    if y.shape != y_label.shape:
        raise DimensionError(f"dice_loss: shape mismatch {y.shape} vs {y_label.shape}")
    lbl = y_label.data
    if not np.all((lbl == 0) | (lbl == 1)):
        raise ContractError("dice_loss: y_label must be strictly binary")
    num = ad.reduce_sum(ad.mul(y_label, y))
    den = ad.add_scalar(ad.add(ad.reduce_sum(y_label), ad.reduce_sum(y)), DICE_EPS)
    value = ad.mul_scalar(ad.div(num, den), -1.0)
    v = value.item()
    return LossValue(value, {"dice_term": v}, {"dice_term": 1.0})


def l2_loss(y: ad.Tensor, target: ad.Tensor) -> LossValue:
    """Mean squared difference (mean, not sum, so scale is resolution-free)."""
    if y.shape != target.shape:
        raise DimensionError(f"l2_loss: shape mismatch {y.shape} vs {target.shape}")
    value = ad.reduce_mean(ad.square(ad.sub(y, target)))
    v = value.item()
    return LossValue(value, {"l2_term": v}, {"l2_term": 1.0})


def _sobel_pair(dtype) -> tuple:
    gx = ad.Tensor(_SOBEL_GX.reshape(1, 1, 3, 3).astype(dtype))
    gy = ad.Tensor(_SOBEL_GY.reshape(1, 1, 3, 3).astype(dtype))
    return gx, gy


def edge_preservation_loss(denoised: ad.Tensor, clean: ad.Tensor) -> LossValue:
    """Mean squared difference of Sobel-x plus Sobel-y responses.

    The Sobel kernels are fixed (non-learned) convolutions evaluated on the
    valid region (no padding), so two constant images give exactly zero and
    the responses match the classical filter away from the border.
    Differentiable with respect to `denoised` only through the fixed convs.
    """
    if denoised.shape != clean.shape:
        raise DimensionError(
            f"edge_preservation_loss: shape mismatch {denoised.shape} vs {clean.shape}"
        )
    if denoised.shape[1] != 1:
        raise DimensionError(
            f"edge_preservation_loss: single-channel images required, got {denoised.shape[1]} channels"
        )
    kx, ky = _sobel_pair(denoised.dtype)
    dx = ad.conv2d(denoised, kx, pad=0)
    dy = ad.conv2d(denoised, ky, pad=0)
    cx = ad.conv2d(clean, kx, pad=0)
    cy = ad.conv2d(clean, ky, pad=0)
    value = ad.add(
        ad.reduce_mean(ad.square(ad.sub(dx, cx))),
        ad.reduce_mean(ad.square(ad.sub(dy, cy))),
    )
    v = value.item()
    return LossValue(value, {"edge_term": v}, {"edge_term": 1.0})


def combined_denoise_loss(denoised: ad.Tensor, clean: ad.Tensor, lambda_edge: float = 1.0) -> LossValue:
    """l2_loss + lambda_edge * edge_preservation_loss.

    lambda_edge 0 skips the Sobel term entirely, so that configuration is
    bit-identical to plain l2_loss.
    """
    if lambda_edge < 0:
        raise ContractError(f"lambda_edge must be >= 0, got {lambda_edge}")
    l2 = l2_loss(denoised, clean)
    if lambda_edge == 0:
        return LossValue(
            l2.value,
            {"l2_term": l2.breakdown["l2_term"], "edge_term": 0.0},
            {"l2_term": 1.0, "edge_term": 0.0},
        )
    edge = edge_preservation_loss(denoised, clean)
    value = ad.add(l2.value, ad.mul_scalar(edge.value, lambda_edge))
    return LossValue(
        value,
        {"l2_term": l2.breakdown["l2_term"], "edge_term": edge.breakdown["edge_term"]},
        {"l2_term": 1.0, "edge_term": float(lambda_edge)},
    )
