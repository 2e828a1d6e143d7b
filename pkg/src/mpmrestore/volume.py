"""3D volume container, centered voxel grid, FFT convolution, metrics, and file I/O.

Conventions used throughout the package:

* ``Volume3D.data`` is indexed ``[ix, iy, iz]``. The serialized traversal
  order is x-fastest (x, then y, then z), i.e. ``data.ravel(order="F")``.
* Grid coordinates are voxel mass centers in micrometers, centered so the
  grid centroid is exactly the origin.
* A kernel's spatial reference ("center") is the voxel at index
  ``(nx // 2, ny // 2, nz // 2)``; FFT code shifts it internally with
  ``ifftshift``, which maps exactly that voxel to index 0.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .errors import ShapeError, VolumeDataError

SNR_CAP_DB = 300.0

# tolerated imaginary residue after an inverse FFT, relative to max|input|
_IMAG_RESIDUE_REL = 1e-9

SIDECAR_ORDER = "x-fastest"


@dataclass
class Volume3D:
    """A 3D scalar field with physical voxel dimensions.

    Attributes:
        data: float64 array of shape (nx, ny, nz).
        voxel_size_um: (r_X, r_Y, r_Z) voxel edge lengths in micrometers.
    """

    data: np.ndarray
    voxel_size_um: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError(f"expected 3D data, got shape {self.data.shape}")
        vs = tuple(float(v) for v in self.voxel_size_um)
        if len(vs) != 3 or any(not np.isfinite(v) or v <= 0.0 for v in vs):
            raise ValueError(f"voxel_size_um must be 3 positive reals, got {self.voxel_size_um!r}")
        self.voxel_size_um = vs

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def nvox(self) -> int:
        return self.data.size

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """New volume on the same grid with different values."""
        return Volume3D(np.asarray(data, dtype=np.float64), self.voxel_size_um)

    def copy(self) -> "Volume3D":
        return Volume3D(self.data.copy(), self.voxel_size_um)

    def flat(self) -> np.ndarray:
        """Values in the serialized x-fastest traversal order."""
        return self.data.ravel(order="F")


class Kernel3D(Volume3D):
    """A volume whose data is a discrete convolution kernel.

    The kernel center is the voxel at index (nx//2, ny//2, nz//2).
    When normalized, the kernel lies on the simplex: nonnegative entries
    summing to 1.
    """

    @classmethod
    def from_volume(cls, vol: Volume3D) -> "Kernel3D":
        return cls(vol.data, vol.voxel_size_um)

    @property
    def center_index(self) -> tuple[int, int, int]:
        nx, ny, nz = self.dims
        return (nx // 2, ny // 2, nz // 2)

    def is_simplex(self, tol: float = 1e-12) -> bool:
        return bool(self.data.min() >= -tol and abs(self.data.sum() - 1.0) <= tol)

    def require_simplex(self, tol: float = 1e-12) -> None:
        if self.data.min() < -tol:
            raise ValueError("kernel flagged normalized has a negative entry")
        if abs(self.data.sum() - 1.0) > tol:
            raise ValueError(f"kernel sum {self.data.sum()!r} deviates from 1 beyond {tol}")


def dirac_kernel(dims, voxel_size_um) -> Kernel3D:
    """Identity kernel: 1 at the center voxel, 0 elsewhere."""
    data = np.zeros(dims)
    data[dims[0] // 2, dims[1] // 2, dims[2] // 2] = 1.0
    return Kernel3D(data, voxel_size_um)


class Grid:
    """Voxel mass-center coordinates of a volume, centered at the origin.

    Along each axis the N coordinates are (i - (N-1)/2) * r, so adjacent
    centers are spaced by the voxel size and the coordinates sum to zero.
    """

    def __init__(self, dims, voxel_size_um):
        self.dims = tuple(int(n) for n in dims)
        if any(n <= 0 for n in self.dims):
            raise ValueError(f"dims must be positive, got {dims!r}")
        self.voxel_size_um = tuple(float(r) for r in voxel_size_um)
        if any(r <= 0 for r in self.voxel_size_um):
            raise ValueError(f"voxel sizes must be positive, got {voxel_size_um!r}")
        self.axes = tuple(
            (np.arange(n) - (n - 1) / 2.0) * r
            for n, r in zip(self.dims, self.voxel_size_um)
        )

    @classmethod
    def for_volume(cls, vol: Volume3D) -> "Grid":
        return cls(vol.dims, vol.voxel_size_um)

    @property
    def nvox(self) -> int:
        return int(np.prod(self.dims))

    def coords(self) -> np.ndarray:
        """All voxel coordinates, shape (N, 3), x-fastest traversal order."""
        gx, gy, gz = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(
            [gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")], axis=1
        )

    def radius2(self) -> np.ndarray:
        """Field of squared distances to the origin, shape dims."""
        ax, ay, az = self.axes
        return (
            ax[:, None, None] ** 2 + ay[None, :, None] ** 2 + az[None, None, :] ** 2
        )

    def quad_form(self, S: np.ndarray) -> np.ndarray:
        """Field of quadratic forms w^T S w for every voxel center w."""
        S = np.asarray(S, dtype=np.float64)
        ax, ay, az = self.axes
        q = (
            S[0, 0] * ax[:, None, None] ** 2
            + S[1, 1] * ay[None, :, None] ** 2
            + S[2, 2] * az[None, None, :] ** 2
            + 2.0 * S[0, 1] * ax[:, None, None] * ay[None, :, None]
            + 2.0 * S[0, 2] * ax[:, None, None] * az[None, None, :]
            + 2.0 * S[1, 2] * ay[None, :, None] * az[None, None, :]
        )
        return q

    def second_moment(self, weights: np.ndarray) -> np.ndarray:
        """Weighted second-moment matrix sum_n w_n * omega_n omega_n^T (3x3)."""
        w = np.asarray(weights, dtype=np.float64).reshape(self.dims)
        ax, ay, az = self.axes
        wx = w.sum(axis=(1, 2))
        wy = w.sum(axis=(0, 2))
        wz = w.sum(axis=(0, 1))
        wxy = w.sum(axis=2)
        wxz = w.sum(axis=1)
        wyz = w.sum(axis=0)
        m = np.empty((3, 3))
        m[0, 0] = np.dot(wx, ax**2)
        m[1, 1] = np.dot(wy, ay**2)
        m[2, 2] = np.dot(wz, az**2)
        m[0, 1] = m[1, 0] = ax @ wxy @ ay
        m[0, 2] = m[2, 0] = ax @ wxz @ az
        m[1, 2] = m[2, 1] = ay @ wyz @ az
        return m


def _require_same_dims(a: Volume3D, b: Volume3D) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"dimension mismatch: {a.dims} vs {b.dims}")


def _real_part_checked(arr: np.ndarray, scale: float) -> np.ndarray:
    residue = np.abs(arr.imag).max() if arr.size else 0.0
    limit = _IMAG_RESIDUE_REL * max(scale, 1e-300)
    if residue > limit:
        raise FloatingPointError(
            f"imaginary residue {residue:.3e} exceeds {limit:.3e} after inverse FFT"
        )
    return np.ascontiguousarray(arr.real)


def convolve_circular(vol: Volume3D, ker: Volume3D) -> Volume3D:
    """Circular (periodic) convolution of a volume with a centered kernel.

    Both operands share the grid; the kernel center (nx//2, ny//2, nz//2)
    acts as the spatial origin. Computed with 3D FFTs.
    """
    _require_same_dims(vol, ker)
    fv = sfft.fftn(vol.data)
    fk = sfft.fftn(sfft.ifftshift(ker.data))
    out = sfft.ifftn(fv * fk)
    scale = np.abs(vol.data).max() if vol.data.size else 0.0
    return vol.with_data(_real_part_checked(out, scale))


def _zeropad_plan(dims):
    return tuple(sfft.next_fast_len(2 * n - 1) for n in dims)


def _embedded_otf(ker_data: np.ndarray, padded, rfft: bool = True) -> np.ndarray:
    """Transform of the kernel embedded in the padded grid, center moved to index 0."""
    dims = ker_data.shape
    big = np.zeros(padded)
    big[: dims[0], : dims[1], : dims[2]] = ker_data
    big = np.roll(big, shift=tuple(-(n // 2) for n in dims), axis=(0, 1, 2))
    return sfft.rfftn(big) if rfft else sfft.fftn(big)


def convolve_zeropad(vol: Volume3D, ker: Volume3D) -> Volume3D:
    """Linear (zero-padded) convolution cropped back to the input dims.

    Computed by FFT on an enlarged grid, so content never wraps across
    opposite faces.
    """
    _require_same_dims(vol, ker)
    dims = vol.dims
    padded = _zeropad_plan(dims)
    otf = _embedded_otf(ker.data, padded)
    big = np.zeros(padded)
    big[: dims[0], : dims[1], : dims[2]] = vol.data
    out = sfft.irfftn(sfft.rfftn(big) * otf, s=padded)
    return vol.with_data(out[: dims[0], : dims[1], : dims[2]])


def dft_max_power(vol: Volume3D) -> float:
    """Largest squared modulus over all DFT coefficients of the volume."""
    return float(np.max(np.abs(sfft.fftn(vol.data)) ** 2))


def snr_db(ref: Volume3D, test: Volume3D, cap_db: float = SNR_CAP_DB) -> float:
    """Signal-to-noise ratio 10*log10(||ref||^2 / ||ref - test||^2) in dB.

    Returns ``cap_db`` when the error power falls below 1e-30 (identical
    volumes up to rounding).
    """
    _require_same_dims(ref, test)
    sig = float(np.sum(ref.data**2))
    err = float(np.sum((ref.data - test.data) ** 2))
    if err < 1e-30:
        return cap_db
    return 10.0 * np.log10(sig / err)


def prd_percent(est, truth, bead: Volume3D) -> float:
    """Percent root-mean-square difference between two fitted bead models.

    ``est`` and ``truth`` are (offset, scale, kernel) triples; the modeled
    signals offset + scale * (kernel * bead) are compared with circular
    convolution:

        100 * ||model_est - model_true|| / ||model_true||
    """
    a_e, b_e, h_e = est
    a_t, b_t, h_t = truth
    sig_e = a_e + b_e * convolve_circular(bead, h_e).data
    sig_t = a_t + b_t * convolve_circular(bead, h_t).data
    denom = float(np.linalg.norm(sig_t))
    if denom < 1e-300:
        raise ZeroDivisionError("reference model is identically zero")
    return 100.0 * float(np.linalg.norm(sig_e - sig_t)) / denom


def _split_path(path: str) -> str:
    base, ext = os.path.splitext(path)
    if ext == ".f32raw":
        return base
    if ext == ".json":
        return base
    return path


def write_volume(vol: Volume3D, path: str) -> None:
    """Write ``<base>.f32raw`` (little-endian float32, x-fastest) plus JSON sidecar.

    ``path`` may be the base name or either of the two file names.
    """
    base = _split_path(path)
    raw = vol.flat().astype("<f4")
    with open(base + ".f32raw", "wb") as fh:
        fh.write(raw.tobytes())
    sidecar = {
        "dims": list(vol.dims),
        "voxel_size_um": list(vol.voxel_size_um),
        "order": SIDECAR_ORDER,
    }
    with open(base + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_volume(path: str, allow_non_finite: bool = False) -> Volume3D:
    """Read a volume written by :func:`write_volume`.

    Raises VolumeDataError on a missing sidecar, a dims/data-length
    mismatch, or (unless ``allow_non_finite``) any non-finite value, naming
    the offending flat index.
    """
    base = _split_path(path)
    sidecar_path = base + ".json"
    raw_path = base + ".f32raw"
    if not os.path.exists(sidecar_path):
        raise VolumeDataError(f"missing sidecar {sidecar_path}")
    if not os.path.exists(raw_path):
        raise VolumeDataError(f"missing raw data file {raw_path}")
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    for key in ("dims", "voxel_size_um", "order"):
        if key not in meta:
            raise VolumeDataError(f"sidecar {sidecar_path} lacks field {key!r}")
    if meta["order"] != SIDECAR_ORDER:
        raise VolumeDataError(f"unsupported traversal order {meta['order']!r}")
    dims = tuple(int(n) for n in meta["dims"])
    if len(dims) != 3 or any(n <= 0 for n in dims):
        raise VolumeDataError(f"bad dims {meta['dims']!r}")
    raw = np.fromfile(raw_path, dtype="<f4")
    expected = dims[0] * dims[1] * dims[2]
    if raw.size != expected:
        raise VolumeDataError(
            f"data length {raw.size} does not match dims {dims} (expected {expected})"
        )
    if not allow_non_finite:
        bad = np.flatnonzero(~np.isfinite(raw))
        if bad.size:
            raise VolumeDataError(
                f"non-finite value at flat index {int(bad[0])} "
                f"({bad.size} non-finite values total)"
            )
    data = raw.astype(np.float64).reshape(dims, order="F")
    return Volume3D(data, tuple(float(r) for r in meta["voxel_size_um"]))
