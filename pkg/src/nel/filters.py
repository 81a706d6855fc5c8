"""Fixed image operators: Sobel gradients, Gaussian smoothing, Canny edges.

These run on plain 2-D float64 arrays (no autodiff): they serve as baselines,
as the label extractor for synthetic data, and as oracles for the loss-side
Sobel convolution.

Mirror symmetry is a hard requirement here: flipping the input horizontally
must flip the Canny mask bitwise.  Two details make that true:

* Sobel sums are accumulated so that every addition either maps onto itself
  under the mirror or onto the mirrored sum with operands in the same order,
  so gx(flip) == -flip(gx) and gy(flip) == flip(gy) exactly.
* Non-maximum suppression compares along the *signed* quantized gradient
  direction u: keep p when mag[p] > mag[p-u] and mag[p] >= mag[p+u].  On the
  two equal-magnitude pixels flanking a clean step this keeps exactly one
  (the pixel the gradient points away from), and because flipping negates u,
  the kept pixel mirrors to the kept pixel.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DimensionError, GeometryError

_TAN_22_5 = math.tan(math.radians(22.5))
_TAN_67_5 = math.tan(math.radians(67.5))


def _check_image(img, name="image", min_side=1):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got rank {arr.ndim}")
    if arr.shape[0] < min_side or arr.shape[1] < min_side:
        raise GeometryError(f"{name} must be at least {min_side}x{min_side}, got {arr.shape}")
    return arr


def sobel(img) -> tuple:
    """Zero-padded 3x3 Sobel pair (gx, gy), same size as the input.

    gx responds to left-to-right intensity increase, gy to top-to-bottom.
    Unit-range input gives responses in [-4, 4].
    """
    arr = _check_image(img, "sobel input", min_side=3)
    p = np.pad(arr, 1)
    top, mid, bot = p[:-2], p[1:-1], p[2:]
    gx = ((top[:, 2:] + bot[:, 2:]) + 2.0 * mid[:, 2:]) - (
        (top[:, :-2] + bot[:, :-2]) + 2.0 * mid[:, :-2]
    )
    gy = ((bot[:, :-2] + bot[:, 2:]) + 2.0 * bot[:, 1:-1]) - (
        (top[:, :-2] + top[:, 2:]) + 2.0 * top[:, 1:-1]
    )
    return gx, gy


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian with radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def _correlate_axis(arr: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    """Valid-mode 1-D correlation along an axis, k symmetric around its center.

    Accumulated as center + sum of (left + right) pairs so that mirroring the
    input mirrors the output bitwise; a plain dot product would round the two
    directions differently.
    """
    win = np.lib.stride_tricks.sliding_window_view(arr, k.size, axis=axis)
    r = k.size // 2
    out = k[r] * win[..., r]
    for d in range(1, r + 1):
        out += k[r - d] * (win[..., r - d] + win[..., r + d])
    return out


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with edge-including reflect padding.

    The padding mirrors the border pixel itself (...cba|abc...), which makes
    the operator mass-preserving: the total pixel sum is unchanged up to
    rounding, because every weight that falls off the edge folds back onto a
    real pixel.
    """
    k = gaussian_kernel(sigma)
    arr = _check_image(img, "blur input")
    r = k.size // 2
    padded = np.pad(arr, r, mode="symmetric")
    out = _correlate_axis(padded, k, axis=1)
    out = _correlate_axis(out, k, axis=0)
    return out


def _quantized_direction(gx: np.ndarray, gy: np.ndarray) -> tuple:
    """Per-pixel signed step (uy, ux) along the nearest of the 4 axes.

    The gradient angle is binned to 0/45/90/135 degrees by comparing |gy|/|gx|
    against tan(22.5) and tan(67.5); the sign of each component comes from the
    actual gradient, so mirroring the image negates ux.
    """
    ax = np.abs(gx)
    ay = np.abs(gy)
    sx = np.sign(gx).astype(np.int64)
    sy = np.sign(gy).astype(np.int64)
    horizontal = ay <= _TAN_22_5 * ax
    vertical = ay > _TAN_67_5 * ax
    diagonal = ~horizontal & ~vertical
    ux = np.where(horizontal | diagonal, sx, 0)
    uy = np.where(vertical | diagonal, sy, 0)
    return uy, ux


def canny(img, low: float = 0.1, high: float = 0.2, sigma: float = 1.0) -> np.ndarray:
    """Classical Canny: blur, Sobel, NMS, 8-connected hysteresis.  Returns bool mask.

    A marked pixel always has gradient magnitude >= low; pixels >= high seed
    the hysteresis and anything >= low that is 8-connected (transitively) to a
    seed survives.
    """
    if not (0 <= low <= high):
        raise ContractError(f"thresholds must satisfy 0 <= low <= high, got low={low} high={high}")
    arr = _check_image(img, "canny input", min_side=3)
    H, W = arr.shape
    smooth = gaussian_blur(arr, sigma)
    gx, gy = sobel(smooth)
    mag = np.sqrt(gx * gx + gy * gy)
    # the outermost ring of Sobel responses reads the zero padding, not the
    # image (a bright constant would grow a fake border frame): suppress it
    mag[0, :] = 0.0
    mag[-1, :] = 0.0
    mag[:, 0] = 0.0
    mag[:, -1] = 0.0

    uy, ux = _quantized_direction(gx, gy)
    padded = np.pad(mag, 1)  # zero border: off-image neighbors never win
    ii, jj = np.indices((H, W))
    ahead = padded[ii + 1 + uy, jj + 1 + ux]
    behind = padded[ii + 1 - uy, jj + 1 - ux]
    ridge = (mag > behind) & (mag >= ahead) & (mag > 0)

    strong = ridge & (mag >= high)
    weak = ridge & (mag >= low)
    mask = strong.copy()
    frontier = strong
    while frontier.any():
        grow = np.zeros_like(mask)
        grow[:-1, :] |= frontier[1:, :]
        grow[1:, :] |= frontier[:-1, :]
        grow[:, :-1] |= frontier[:, 1:]
        grow[:, 1:] |= frontier[:, :-1]
        grow[:-1, :-1] |= frontier[1:, 1:]
        grow[:-1, 1:] |= frontier[1:, :-1]
        grow[1:, :-1] |= frontier[:-1, 1:]
        grow[1:, 1:] |= frontier[:-1, :-1]
        frontier = grow & weak & ~mask
        mask |= frontier
    return mask
