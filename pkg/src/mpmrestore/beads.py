"""Isolating single-bead crops from a multi-bead acquisition.

The protocol: Wiener-denoise the acquisition, binarize at a fraction of the
maximum intensity, label 26-connected components, keep components in a
plausible size range, and crop a margin around each bounding box. Per-crop
kernel fits are then averaged at the model-parameter level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from .volume import Grid, Volume3D


@dataclass
class BeadRegion:
    """Axis-aligned crop around one detected bead.

    ``box`` holds inclusive voxel index ranges ((x0, x1), (y0, y1),
    (z0, z1)); ``centroid_um`` is the intensity-weighted component centroid
    in centered grid coordinates of the *source* volume; ``voxel_count``
    counts the supra-threshold voxels of the component.
    """

    box: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]
    centroid_um: tuple[float, float, float]
    voxel_count: int

    def crop(self, vol: Volume3D) -> Volume3D:
        (x0, x1), (y0, y1), (z0, z1) = self.box
        return Volume3D(vol.data[x0 : x1 + 1, y0 : y1 + 1, z0 : z1 + 1], vol.voxel_size_um)


def wiener_denoise(y: Volume3D, nsr: float) -> Volume3D:
    """Frequency-domain Wiener filter with a flat signal prior.

    Each Fourier coefficient is scaled by P_k / (P_k + nsr * mean(P)) with
    P_k the coefficient power. nsr = 0 is the identity; large nsr
    suppresses everything.
    """
    if nsr < 0:
        raise ValueError("noise-to-signal ratio must be nonnegative")
    if nsr == 0.0:
        return y.copy()
    fy = sfft.fftn(y.data)
    power = np.abs(fy) ** 2
    gain = power / (power + nsr * power.mean())
    return y.with_data(sfft.ifftn(fy * gain).real)


def extract_regions(
    y: Volume3D,
    threshold_frac: float = 0.3,
    min_voxels: int = 1,
    max_voxels: int | None = None,
    margin_voxels=0,
) -> list[BeadRegion]:
    """Detect isolated bright components and return cropping regions.

    The volume is binarized at ``threshold_frac * max(y)``; components are
    labeled under 26-connectivity; components outside
    [min_voxels, max_voxels] are discarded. Bounding boxes are dilated by
    ``margin_voxels`` (scalar or per-axis triple) and clipped to the
    volume. Touching beads merge into one component by construction.
    """
    if not 0.0 < threshold_frac < 1.0:
        raise ValueError("threshold_frac must lie strictly between 0 and 1")
    margin = np.broadcast_to(np.asarray(margin_voxels, dtype=int), (3,))
    peak = float(y.data.max())
    if peak <= 0.0:
        return []
    mask = y.data > threshold_frac * peak
    labels, n_components = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    if n_components == 0:
        return []
    grid = Grid.for_volume(y)
    ax, ay, az = grid.axes
    regions: list[BeadRegion] = []
    slices = ndimage.find_objects(labels)
    counts = np.bincount(labels.ravel(), minlength=n_components + 1)
    for idx, slc in enumerate(slices, start=1):
        if slc is None:
            continue
        count = int(counts[idx])
        if count < min_voxels:
            continue
        if max_voxels is not None and count > max_voxels:
            continue
        component = labels[slc] == idx
        weights = np.where(component, y.data[slc], 0.0)
        total = weights.sum()
        cx = float(np.sum(weights.sum(axis=(1, 2)) * ax[slc[0]]) / total)
        cy = float(np.sum(weights.sum(axis=(0, 2)) * ay[slc[1]]) / total)
        cz = float(np.sum(weights.sum(axis=(0, 1)) * az[slc[2]]) / total)
        box = tuple(
            (
                max(slc[i].start - int(margin[i]), 0),
                min(slc[i].stop - 1 + int(margin[i]), y.dims[i] - 1),
            )
            for i in range(3)
        )
        regions.append(BeadRegion(box, (cx, cy, cz), count))
    regions.sort(key=lambda r: (r.box[0][0], r.box[1][0], r.box[2][0]))
    return regions


def local_centroid_um(crop: Volume3D, threshold_frac: float = 0.3) -> tuple[float, float, float]:
    """Intensity-weighted centroid of a crop in its own centered coordinates.

    Background is taken as the crop median; voxels above ``threshold_frac``
    of the background-subtracted peak contribute.
    """
    grid = Grid.for_volume(crop)
    vals = crop.data - float(np.median(crop.data))
    peak = vals.max()
    if peak <= 0:
        return (0.0, 0.0, 0.0)
    w = np.where(vals > threshold_frac * peak, vals, 0.0)
    total = w.sum()
    ax, ay, az = grid.axes
    return (
        float(np.sum(w.sum(axis=(1, 2)) * ax) / total),
        float(np.sum(w.sum(axis=(0, 2)) * ay) / total),
        float(np.sum(w.sum(axis=(0, 1)) * az) / total),
    )


def average_psf_models(estimates) -> tuple[float, float, np.ndarray]:
    """Entrywise mean of (background, amplitude, shape matrix) estimates.

    The PSD cone is convex, so the averaged matrix keeps the feasibility of
    its inputs.
    """
    estimates = list(estimates)
    if not estimates:
        raise ValueError("cannot average an empty list of models")
    backgrounds = np.array([e[0] for e in estimates], dtype=np.float64)
    amplitudes = np.array([e[1] for e in estimates], dtype=np.float64)
    mats = np.stack([np.asarray(e[2], dtype=np.float64) for e in estimates])
    return float(backgrounds.mean()), float(amplitudes.mean()), mats.mean(axis=0)
