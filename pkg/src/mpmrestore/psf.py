"""Parametric PSF models, bead phantom, and width/orientation analytics.

Gaussian kernels are parameterized by a 3x3 symmetric positive-definite
precision matrix (inverse covariance, units 1/um^2). The generalized
exponential family adds a tail exponent and reduces to the Gaussian at
exponent 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .volume import Grid, Kernel3D, Volume3D

_SYM_TOL = 1e-12


def _check_spd(S: np.ndarray, name: str = "S") -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got {S.shape}")
    if np.abs(S - S.T).max() > _SYM_TOL * max(1.0, np.abs(S).max()):
        raise ValueError(f"{name} is not symmetric")
    eigs = np.linalg.eigvalsh(S)
    if eigs.min() <= 0.0:
        raise ValueError(f"{name} is not positive definite (eigenvalues {eigs})")
    return 0.5 * (S + S.T)


@dataclass
class GaussianPSFParams:
    """Precision matrix of a centered Gaussian kernel."""

    S: np.ndarray

    def __post_init__(self):
        self.S = _check_spd(self.S)


@dataclass
class GenExpParams:
    """Generalized exponential kernel: SPD matrix plus tail exponent eta > 0."""

    S: np.ndarray
    eta: float

    def __post_init__(self):
        self.S = _check_spd(self.S)
        self.eta = float(self.eta)
        if self.eta <= 0.0:
            raise ValueError(f"eta must be positive, got {self.eta}")


@dataclass
class BeadSpec:
    """Calibration bead: a uniform sphere of diameter ``diameter_um``."""

    diameter_um: float

    def __post_init__(self):
        self.diameter_um = float(self.diameter_um)
        if self.diameter_um <= 0.0:
            raise ValueError("bead diameter must be positive")


def gaussian_density(S: np.ndarray, grid: Grid) -> np.ndarray:
    """Centered Gaussian density sqrt(|S|/(2pi)^3) * exp(-w^T S w / 2) on the grid."""
    S = _check_spd(S)
    sign, logdet = np.linalg.slogdet(S)
    if sign <= 0:
        raise ValueError("precision matrix must have positive determinant")
    lognorm = 0.5 * (logdet - 3.0 * math.log(2.0 * math.pi))
    return np.exp(lognorm - 0.5 * grid.quad_form(S))


def gaussian_kernel(params: GaussianPSFParams, grid: Grid, normalize: bool = False) -> Kernel3D:
    """Evaluate the Gaussian density at every voxel center.

    With ``normalize`` the values are rescaled to sum to 1 (simplex
    membership); otherwise the raw density values are returned.
    """
    vals = gaussian_density(params.S, grid)
    if normalize:
        vals = vals / vals.sum()
    return Kernel3D(vals, grid.voxel_size_um)


def genexp_kernel(params: GenExpParams, grid: Grid) -> Kernel3D:
    """Normalized generalized-exponential kernel exp(-(w^T S w)^(eta/2) / 2)."""
    q = grid.quad_form(params.S)
    q = np.maximum(q, 0.0)
    vals = np.exp(-0.5 * q ** (params.eta / 2.0))
    vals /= vals.sum()
    return Kernel3D(vals, grid.voxel_size_um)


def sphere_bead(spec: BeadSpec, grid: Grid, center_um=(0.0, 0.0, 0.0)) -> Volume3D:
    """Binary sphere phantom: 1 where ||w - center|| <= diameter/2, else 0.

    The sphere must fit within the grid extent on every axis.
    """
    radius = spec.diameter_um / 2.0
    center = np.asarray(center_um, dtype=np.float64)
    for axis in range(3):
        half_extent = grid.dims[axis] * grid.voxel_size_um[axis] / 2.0
        if radius + abs(center[axis]) > half_extent:
            raise ValueError(
                f"bead of radius {radius} um at offset {center[axis]} um exceeds the "
                f"grid half-extent {half_extent} um on axis {axis}"
            )
    ax, ay, az = grid.axes
    d2 = (
        (ax[:, None, None] - center[0]) ** 2
        + (ay[None, :, None] - center[1]) ** 2
        + (az[None, None, :] - center[2]) ** 2
    )
    return Volume3D((d2 <= radius**2).astype(np.float64), grid.voxel_size_um)


def fwhm_from_eig(s: float) -> float:
    """Full width at half maximum 2*sqrt(2 ln 2 / s) for precision eigenvalue s."""
    if s <= 0.0:
        raise ValueError(f"precision eigenvalue must be positive, got {s}")
    return 2.0 * math.sqrt(2.0 * math.log(2.0) / s)


def theoretical_fwhm(lambda_em_um: float, na: float, n_r: float) -> tuple[float, float]:
    """Ideal-optics widths: lateral 0.7*lambda/NA, depth 2.3*lambda*n_r/NA^2."""
    fwhm_xy = 0.7 * lambda_em_um / na
    fwhm_z = 2.3 * lambda_em_um * n_r / (na**2)
    return fwhm_xy, fwhm_z


def _rot_x(t: float) -> np.ndarray:
    c, s = math.cos(t), math.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_z(t: float) -> np.ndarray:
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_angles(theta: float, phi: float) -> np.ndarray:
    """Z-X-Z rotation with the first angle fixed to 0: R = Rz(phi) @ Rx(theta).

    Columns are the principal axes (X', Y', Z') expressed in grid
    coordinates; the depth-like axis is Z' = (sin(theta) sin(phi),
    -sin(theta) cos(phi), cos(theta)).
    """
    return _rot_z(phi) @ _rot_x(theta)


@dataclass
class EulerDecomp:
    """Principal-axis decomposition of an SPD matrix.

    ``eigs`` holds (s_X', s_Y', s_Z') where Z' is the most isolated
    eigenvalue (the depth-like axis) and X'/Y' the near-degenerate pair.
    ``axes`` holds the corresponding unit axes as columns, so that
    ``axes @ diag(eigs) @ axes.T`` reproduces the matrix exactly; theta and
    phi are the readout angles of the Z' axis.

    Documented symmetries: (theta, phi) and (pi - theta, phi + pi) describe
    the same axis (Z' and -Z' are equivalent); phi is defined modulo 2 pi
    and is arbitrary when sin(theta) = 0; individual lateral angles are
    meaningless when s_X' = s_Y'.
    """

    theta: float
    phi: float
    eigs: tuple[float, float, float]
    axes: np.ndarray = field(repr=False)

    @classmethod
    def from_angles(cls, theta: float, phi: float, eigs) -> "EulerDecomp":
        eigs = tuple(float(s) for s in eigs)
        if len(eigs) != 3 or any(s <= 0 for s in eigs):
            raise ValueError(f"eigenvalues must be 3 positive reals, got {eigs!r}")
        return cls(float(theta), float(phi), eigs, rotation_from_angles(theta, phi))


def spd_from_angles(theta: float, phi: float, eigs) -> np.ndarray:
    """SPD matrix with principal values ``eigs`` oriented by (theta, phi)."""
    return spd_from_euler(EulerDecomp.from_angles(theta, phi, eigs))


def spd_from_euler(decomp: EulerDecomp) -> np.ndarray:
    """Rebuild the SPD matrix from its principal-axis decomposition."""
    R = np.asarray(decomp.axes, dtype=np.float64)
    S = R @ np.diag(decomp.eigs) @ R.T
    return 0.5 * (S + S.T)


def euler_decompose(S: np.ndarray) -> EulerDecomp:
    """Eigendecompose an SPD matrix into principal widths and orientation.

    The two closest eigenvalues are assigned to the lateral axes (X', Y')
    and the remaining one to the depth axis Z'. Angles follow the Z-X-Z
    convention with the first angle fixed to 0; see
    :class:`EulerDecomp` for the angle symmetries.
    """
    S = _check_spd(S)
    w, V = np.linalg.eigh(S)
    # most isolated eigenvalue becomes the depth axis Z'
    if w[1] - w[0] <= w[2] - w[1]:
        order = (0, 1, 2)
    else:
        order = (1, 2, 0)
    eigs = tuple(float(w[i]) for i in order)
    axes = V[:, list(order)].copy()
    # deterministic eigenvector signs: largest-magnitude component positive
    for col in range(3):
        k = int(np.argmax(np.abs(axes[:, col])))
        if axes[k, col] < 0:
            axes[:, col] = -axes[:, col]
    if np.linalg.det(axes) < 0:
        axes[:, 0] = -axes[:, 0]
    vz = axes[:, 2]
    theta = math.acos(float(np.clip(vz[2], -1.0, 1.0)))
    if math.sin(theta) > 1e-9:
        phi = math.atan2(float(vz[0]), float(-vz[1]))
    else:
        phi = 0.0
    return EulerDecomp(theta, phi, eigs, axes)


def same_axis_angle(theta1, phi1, theta2, phi2) -> float:
    """Angle in radians between the two depth axes defined by (theta, phi) pairs.

    Antipodal axes compare as equal, which absorbs the
    (theta, phi) <-> (pi - theta, phi + pi) symmetry.
    """
    v1 = rotation_from_angles(theta1, phi1)[:, 2]
    v2 = rotation_from_angles(theta2, phi2)[:, 2]
    c = min(1.0, abs(float(np.dot(v1, v2))))
    return math.acos(c)
