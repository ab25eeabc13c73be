"""PSNR and windowed SSIM on [0, 1] grayscale images, with masked variants.

SSIM uses a 7 x 7 uniform window (small images make the usual 11 x 11
gaussian window meaningless here), constants C1 = 0.01^2 and C2 = 0.03^2
for unit dynamic range, and biased local moments. The masked variants
average only over windows whose center pixel lies in the mask, which
removes background bias from object-centric comparisons. Scores are not
comparable across window choices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetricError, ShapeError
from .numerics.matrix import Matrix

PSNR_CAP_DB = 100.0
_C1 = 0.01**2
_C2 = 0.03**2
_WINDOW = 7


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    masked_psnr: float
    masked_ssim: float
    n_mask_pixels: int


def _check_pair(a: Matrix, b: Matrix, mask: Matrix | None):
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if mask is not None and mask.shape != a.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match image shape {a.shape}")


def psnr(a: Matrix, b: Matrix, mask: Matrix | None = None) -> float:
    """10 log10(1 / MSE) in dB over the mask (or the whole image); capped at 100."""
    _check_pair(a, b, mask)
    diff = (a.astype(np.float64) - b.astype(np.float64)) ** 2
    if mask is not None:
        keep = mask > 0
        if not np.any(keep):
            raise MetricError("mask is empty")
        mse = float(diff[keep].mean())
    else:
        mse = float(diff.mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse)))


def _local_moments(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    win = np.lib.stride_tricks.sliding_window_view(img, (_WINDOW, _WINDOW))
    mu = win.mean(axis=(2, 3))
    var = (win * win).mean(axis=(2, 3)) - mu * mu
    return mu, var


def ssim(a: Matrix, b: Matrix, mask: Matrix | None = None) -> float:
    """Mean local SSIM over full 7 x 7 windows; masked = centers inside the mask."""
    _check_pair(a, b, mask)
    if a.shape[0] < _WINDOW or a.shape[1] < _WINDOW:
        raise MetricError(f"image smaller than the {_WINDOW}x{_WINDOW} SSIM window")
    x = a.astype(np.float64)
    y = b.astype(np.float64)
    mu_x, var_x = _local_moments(x)
    mu_y, var_y = _local_moments(y)
    win_xy = np.lib.stride_tricks.sliding_window_view(x * y, (_WINDOW, _WINDOW))
    cov = win_xy.mean(axis=(2, 3)) - mu_x * mu_y

    ssim_map = ((2.0 * mu_x * mu_y + _C1) * (2.0 * cov + _C2)) / (
        (mu_x * mu_x + mu_y * mu_y + _C1) * (var_x + var_y + _C2)
    )

    if mask is None:
        return float(ssim_map.mean())
    half = _WINDOW // 2
    centers = mask[half : mask.shape[0] - half, half : mask.shape[1] - half] > 0
    if not np.any(centers):
        raise MetricError("mask contains no full-window centers")
    return float(ssim_map[centers].mean())


def view_consistency(samples: list[Matrix], reference: Matrix, mask: Matrix) -> float:
    """Mean masked SSIM of each sample against the reference render."""
    if len(samples) < 1:
        raise MetricError("need at least one sample")
    return float(np.mean([ssim(s, reference, mask) for s in samples]))


def report(a: Matrix, b: Matrix, mask: Matrix) -> MetricReport:
    return MetricReport(
        psnr=psnr(a, b),
        ssim=ssim(a, b),
        masked_psnr=psnr(a, b, mask),
        masked_ssim=ssim(a, b, mask),
        n_mask_pixels=int(np.sum(mask > 0)),
    )
