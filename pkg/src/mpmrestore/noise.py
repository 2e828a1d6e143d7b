"""Heteroscedastic noise estimation from a single 3D image.

The noise is modeled as additive Gaussian with an affine variance law
var(t) = a * t + b in the underlying intensity t. The parameters are
estimated by smoothing the image, segmenting the smoothed image into
intensity level sets with a Lloyd-Max scalar quantizer, measuring mean and
variance of the raw image inside each level set, and regressing variance
on mean.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import Volume3D


@dataclass
class NoiseParams:
    """Affine variance law: std(t) = sqrt(a * t + b) for t >= 0, else 0."""

    a: float
    b: float

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError(f"noise parameters must be nonnegative, got a={self.a}, b={self.b}")

    def sigma(self, t):
        t = np.asarray(t, dtype=np.float64)
        out = np.where(t >= 0.0, np.sqrt(np.maximum(self.a * t + self.b, 0.0)), 0.0)
        return float(out) if out.ndim == 0 else out


def sigma(t, params: NoiseParams):
    """Noise standard deviation at intensity t (zero for negative t)."""
    return params.sigma(t)


def _quantize_mse(values, levels, assignment) -> float:
    return float(np.mean((values - levels[assignment]) ** 2))


def lloyd_max_quantize(values, n_levels: int, max_sweeps: int = 500, tol: float = 1e-9):
    """MSE-optimal scalar quantization (1-D k-means).

    Levels are initialized at empirical quantiles, then nearest-level
    assignment and level recentering alternate until the largest level
    movement falls below ``tol``. The quantization MSE is checked to be
    non-increasing across sweeps. If ``n_levels`` exceeds the number of
    distinct values it is reduced to that count (with a warning).

    Returns (levels sorted ascending, assignment indices into levels).
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("cannot quantize an empty value set")
    if n_levels < 1:
        raise ValueError("need at least one level")
    distinct = np.unique(values)
    if n_levels > distinct.size:
        warnings.warn(
            f"reducing quantizer levels from {n_levels} to {distinct.size} distinct values",
            stacklevel=2,
        )
        n_levels = distinct.size
    if n_levels == distinct.size:
        levels = distinct.astype(np.float64)
    else:
        qs = (np.arange(n_levels) + 0.5) / n_levels
        levels = np.quantile(values, qs)
        # collapse accidental duplicates from heavy ties, then pad from the
        # distinct values to keep the requested level count
        levels = np.unique(levels)
        if levels.size < n_levels:
            extra = np.setdiff1d(distinct, levels)
            take = np.linspace(0, extra.size - 1, n_levels - levels.size).astype(int)
            levels = np.sort(np.concatenate([levels, extra[take]]))

    assignment = None
    mse_prev = np.inf
    for _ in range(max_sweeps):
        edges = 0.5 * (levels[:-1] + levels[1:])
        assignment = np.searchsorted(edges, values)
        sums = np.bincount(assignment, weights=values, minlength=levels.size)
        counts = np.bincount(assignment, minlength=levels.size)
        new_levels = np.where(counts > 0, sums / np.maximum(counts, 1), levels)
        move = float(np.max(np.abs(new_levels - levels)))
        levels = np.sort(new_levels)
        mse = _quantize_mse(values, levels, np.searchsorted(0.5 * (levels[:-1] + levels[1:]), values))
        if mse > mse_prev + 1e-12 * (1.0 + mse_prev):
            raise AssertionError(f"quantizer MSE increased: {mse_prev} -> {mse}")
        mse_prev = mse
        if move < tol:
            break
    edges = 0.5 * (levels[:-1] + levels[1:])
    assignment = np.searchsorted(edges, values)
    return levels, assignment


@dataclass
class SegmentStats:
    """Per-level statistics of the raw image over the smoothed-image level sets."""

    levels: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    counts: np.ndarray
    used_in_fit: np.ndarray = field(default=None)
    r2: float = float("nan")

    def __len__(self):
        return self.levels.size


def estimate_noise(
    y: Volume3D,
    smooth_size: int = 5,
    n_levels: int = 25,
    weighted: bool = True,
    min_segment_voxels: int = 10,
) -> tuple[NoiseParams, SegmentStats]:
    """Estimate the affine variance law from one noisy volume.

    Steps: (1) smooth with a normalized uniform cube of odd side
    ``smooth_size`` (reflective boundary); (2) Lloyd-Max segment the
    smoothed volume into ``n_levels`` level sets; (3) compute mean and
    variance of the *raw* volume inside every segment; (4) least-squares
    regress variance on mean, weighted by segment size when ``weighted``,
    and clamp the coefficients to be nonnegative.

    Segments with fewer than ``min_segment_voxels`` voxels are excluded
    from the regression; at least two segments must survive.
    """
    if smooth_size < 1 or smooth_size % 2 == 0:
        raise ValueError("smooth_size must be an odd integer >= 1")
    if n_levels < 2:
        raise ValueError("need at least two quantization levels")
    raw = y.data.ravel()
    if smooth_size == 1:
        ys = raw
    else:
        ys = ndimage.uniform_filter(y.data, size=smooth_size, mode="reflect").ravel()
    levels, labels = lloyd_max_quantize(ys, n_levels)
    k = levels.size
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    safe = np.maximum(counts, 1)
    means = np.bincount(labels, weights=raw, minlength=k) / safe
    seconds = np.bincount(labels, weights=raw**2, minlength=k) / safe
    variances = np.maximum(seconds - means**2, 0.0)

    keep = counts >= min_segment_voxels
    if int(keep.sum()) < 2:
        raise ValueError(
            f"only {int(keep.sum())} segments have >= {min_segment_voxels} voxels; "
            "cannot regress the variance law"
        )
    w = counts[keep].astype(np.float64) if weighted else np.ones(int(keep.sum()))
    mi = means[keep]
    vi = variances[keep]
    sw = w.sum()
    mx = float(np.dot(w, mi)) / sw
    mv = float(np.dot(w, vi)) / sw
    sxx = float(np.dot(w, (mi - mx) ** 2))
    sxy = float(np.dot(w, (mi - mx) * (vi - mv)))
    a = sxy / sxx if sxx > 0 else 0.0
    b = mv - a * mx
    fit = a * mi + b
    ss_res = float(np.dot(w, (vi - fit) ** 2))
    ss_tot = float(np.dot(w, (vi - mv) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res <= 1e-30 else 0.0)

    params = NoiseParams(max(a, 0.0), max(b, 0.0))
    stats = SegmentStats(levels, means, variances, counts, used_in_fit=keep, r2=r2)
    return params, stats
