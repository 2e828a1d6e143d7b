"""Synthetic scenes: bead observations, piecewise-smooth phantoms, degradation.

All randomness flows through a counter-based generator (Philox) keyed by a
single 64-bit seed, so outputs are reproducible byte for byte and
independent of evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernelfit import BeadOperator
from .noise import NoiseParams
from .psf import (
    BeadSpec,
    GaussianPSFParams,
    GenExpParams,
    gaussian_kernel,
    genexp_kernel,
    spd_from_angles,
    sphere_bead,
)
from .restore import ZeroPadConvolver
from .volume import Grid, Kernel3D, Volume3D


def rng_for_seed(seed: int) -> np.random.Generator:
    """Counter-based generator: per-voxel draws do not depend on iteration order."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def gaussian_noise_for_snr(signal: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """White Gaussian noise rescaled so the realized SNR matches exactly."""
    e = rng.standard_normal(signal.shape)
    target = float(np.linalg.norm(signal)) * 10.0 ** (-snr_db / 20.0)
    norm = float(np.linalg.norm(e))
    if norm == 0.0:
        return e
    return e * (target / norm)


@dataclass
class BeadScene:
    """Ground truth and observation of one synthetic bead acquisition."""

    bead: Volume3D
    kernel: Kernel3D
    observation: Volume3D
    background: float
    amplitude: float
    snr_db: float
    seed: int


def make_bead_scene(
    dims=(40, 40, 80),
    voxel_size_um=(0.05, 0.05, 0.1),
    bead_diameter_um: float = 1.0,
    theta: float = 5.0 * math.pi / 6.0,
    phi: float = math.pi / 6.0,
    eigs=(138.6, 138.6, 3.2),
    eta: float = 2.0,
    background: float = 0.1,
    amplitude: float = 1.0,
    snr_db: float = 10.0,
    seed: int = 0,
) -> BeadScene:
    """Simulate a blurred, noisy bead volume.

    The kernel is a generalized exponential (Gaussian at eta = 2) built
    from principal angles and eigenvalues; the observation is
    background + amplitude * (kernel * bead) + white noise scaled to the
    requested SNR. Convolution is circular, matching the fit model.
    """
    grid = Grid(dims, voxel_size_um)
    bead = sphere_bead(BeadSpec(bead_diameter_um), grid)
    S = spd_from_angles(theta, phi, eigs)
    if eta == 2.0:
        kernel = gaussian_kernel(GaussianPSFParams(S), grid, normalize=True)
    else:
        kernel = genexp_kernel(GenExpParams(S, eta), grid)
    op = BeadOperator(bead)
    clean = background + amplitude * op.conv(kernel.data)
    noise = gaussian_noise_for_snr(clean, snr_db, rng_for_seed(seed))
    obs = Volume3D(clean + noise, voxel_size_um)
    return BeadScene(bead, kernel, obs, background, amplitude, snr_db, seed)


def multi_bead_volume(
    dims,
    voxel_size_um,
    centers_um,
    kernel: Kernel3D,
    bead_diameter_um: float = 1.0,
    background: float = 0.05,
    amplitude: float = 1.0,
    snr_db: float | None = 20.0,
    seed: int = 0,
) -> tuple[Volume3D, Volume3D]:
    """Several identical beads blurred by one kernel in a single volume.

    Returns (observation, clean bead indicator volume).
    """
    grid = Grid(dims, voxel_size_um)
    scene = np.zeros(tuple(dims))
    for c in centers_um:
        scene += sphere_bead(BeadSpec(bead_diameter_um), grid, center_um=c).data
    scene = np.minimum(scene, 1.0)
    beads = Volume3D(scene, voxel_size_um)
    conv = ZeroPadConvolver(kernel, beads.dims)
    clean = background + amplitude * conv.conv(beads.data)
    if snr_db is None:
        noisy = clean
    else:
        noisy = clean + gaussian_noise_for_snr(clean, snr_db, rng_for_seed(seed))
    return Volume3D(noisy, voxel_size_um), beads


def piecewise_smooth_phantom(dims=(64, 64, 32), voxel_size_um=(0.05, 0.05, 0.05)) -> Volume3D:
    """Deterministic piecewise-smooth test object with values in [0, 1].

    Nested ellipsoids of distinct intensities over a gently sloped
    background, plus a dim slab: smooth regions separated by sharp edges.
    """
    grid = Grid(dims, voxel_size_um)
    ax, ay, az = grid.axes
    X = ax[:, None, None]
    Y = ay[None, :, None]
    Z = az[None, None, :]
    ex = ax[-1] if ax[-1] > 0 else 1.0
    ey = ay[-1] if ay[-1] > 0 else 1.0
    ez = az[-1] if az[-1] > 0 else 1.0

    vol = 0.03 + 0.02 * (X / ex + 1.0) / 2.0
    big = (X / (0.62 * ex)) ** 2 + (Y / (0.62 * ey)) ** 2 + (Z / (0.7 * ez)) ** 2 <= 1.0
    vol = np.where(big, 0.45 + 0.10 * np.sin(2.0 * math.pi * X / ex), vol)
    mid = ((X - 0.25 * ex) / (0.3 * ex)) ** 2 + (Y / (0.35 * ey)) ** 2 + (Z / (0.45 * ez)) ** 2 <= 1.0
    vol = np.where(mid, 0.8, vol)
    core = ((X + 0.3 * ex) / (0.18 * ex)) ** 2 + ((Y - 0.2 * ey) / (0.2 * ey)) ** 2 + (Z / (0.3 * ez)) ** 2 <= 1.0
    vol = np.where(core, 1.0, vol)
    slab = (np.abs(Y + 0.55 * ey) <= 0.12 * ey) & (np.abs(X) <= 0.8 * ex)
    vol = np.where(slab & ~big, 0.25, vol)
    return Volume3D(np.clip(vol, 0.0, 1.0), voxel_size_um)


@dataclass
class DegradedScene:
    """Ground truth, kernel, and heteroscedastic observation."""

    truth: Volume3D
    kernel: Kernel3D
    observation: Volume3D
    blurred: Volume3D
    background: float
    noise: NoiseParams
    seed: int


def degrade_heteroscedastic(
    truth: Volume3D,
    kernel: Kernel3D,
    background: float,
    noise: NoiseParams,
    seed: int = 0,
) -> DegradedScene:
    """y = H x + background + w, w ~ N(0, a * (H x) + b) per voxel (zero-padded H)."""
    conv = ZeroPadConvolver(kernel, truth.dims)
    blurred = conv.conv(truth.data)
    rng = rng_for_seed(seed)
    std = noise.sigma(blurred)
    w = rng.standard_normal(truth.dims) * std
    obs = Volume3D(blurred + background + w, truth.voxel_size_um)
    return DegradedScene(
        truth, kernel, obs, Volume3D(blurred, truth.voxel_size_um), background, noise, seed
    )


def restoration_preset_kernel(
    dims,
    voxel_size_um=(0.05, 0.05, 0.05),
    theta: float = 5.0 * math.pi / 6.0,
    phi: float = 0.0,
    eigs=(50.0, 50.0, 20.0),
) -> Kernel3D:
    """Gaussian blur kernel used by the simulated restoration experiments."""
    grid = Grid(dims, voxel_size_um)
    S = spd_from_angles(theta, phi, eigs)
    return gaussian_kernel(GaussianPSFParams(S), grid, normalize=True)


def smooth_ramp_phantom(
    dims=(48, 48, 48),
    voxel_size_um=(0.1, 0.1, 0.1),
    power: float = 2.0,
) -> Volume3D:
    """Smooth monotone ramp along z covering [0, 1], for noise estimation.

    The profile is a power ramp, so its intensity histogram is dense near
    zero: level-set statistics there measure the noise floor rather than
    within-segment signal spread, which anchors the variance regression
    intercept.
    """
    nz = dims[2]
    profile = np.linspace(0.0, 1.0, nz) ** power
    vals = np.broadcast_to(profile[None, None, :], dims).copy()
    return Volume3D(vals, voxel_size_um)


def add_heteroscedastic_noise(vol: Volume3D, noise: NoiseParams, seed: int = 0) -> Volume3D:
    """Corrupt a volume with the affine-variance Gaussian noise model."""
    rng = rng_for_seed(seed)
    std = noise.sigma(vol.data)
    return vol.with_data(vol.data + rng.standard_normal(vol.dims) * std)
