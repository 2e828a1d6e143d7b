"""Comparison methods: Richardson-Lucy, Levenberg-Marquardt Gaussian PSF
fitting, and penalized (regularized) least-squares restoration."""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .kernelfit import BeadOperator
from .psf import GaussianPSFParams, euler_decompose, gaussian_kernel, spd_from_angles
from .restore import (
    PenalizedMMObjective,
    RestorationProblem,
    ZeroPadConvolver,
    subspace_mm_minimize,
)
from .volume import Grid, Kernel3D, Volume3D, convolve_circular

_RL_EPS = 1e-12


def richardson_lucy(
    y: Volume3D,
    kernel: Kernel3D,
    iters: int = 50,
    mode: str = "zeropad",
) -> Volume3D:
    """Classical multiplicative deconvolution updates.

    x <- x * H^T(y / (H x + eps)) starting from max(y, eps); nonnegativity
    is preserved by construction. Negative observation values are clipped
    to zero with a warning. ``mode`` selects zero-padded (pipeline) or
    circular (conservation-test) convolution.
    """
    ydata = y.data
    if ydata.min() < 0:
        warnings.warn("clipping negative observation values to zero for RL", stacklevel=2)
        ydata = np.maximum(ydata, 0.0)
    if mode == "zeropad":
        conv = ZeroPadConvolver(kernel, y.dims)
        H, Ht = conv.conv, conv.conv_t
    elif mode == "circular":
        op = BeadOperator(kernel)
        H, Ht = op.conv, op.corr
    else:
        raise ConfigError(f"unknown RL convolution mode {mode!r}")
    x = np.maximum(ydata, _RL_EPS)
    for _ in range(iters):
        blurred = H(x)
        ratio = ydata / (blurred + _RL_EPS)
        x = x * Ht(ratio)
        x = np.maximum(x, 0.0)
    return y.with_data(x)


@dataclass
class NLSParams:
    """Seven-parameter Gaussian bead model for the least-squares fit."""

    background: float
    amplitude: float
    theta: float
    phi: float
    eigs: tuple[float, float, float]
    damping: float = 1e-3

    def vector(self) -> np.ndarray:
        return np.array(
            [self.background, self.amplitude, self.theta, self.phi, *self.eigs],
            dtype=np.float64,
        )

    @classmethod
    def from_vector(cls, p: np.ndarray, damping: float = 1e-3) -> "NLSParams":
        return cls(
            float(p[0]), float(p[1]), float(p[2]), float(p[3]),
            (float(p[4]), float(p[5]), float(p[6])), damping,
        )

    def kernel(self, grid: Grid) -> Kernel3D:
        S = spd_from_angles(self.theta, self.phi, self.eigs)
        return gaussian_kernel(GaussianPSFParams(S), grid, normalize=True)


_EIG_FLOOR = 1e-3
_EIG_CEIL = 1e6


def _project_nls(p: np.ndarray, background_bounds, amplitude_bounds) -> np.ndarray:
    q = p.copy()
    q[0] = min(max(q[0], background_bounds[0]), background_bounds[1])
    q[1] = min(max(q[1], amplitude_bounds[0]), amplitude_bounds[1])
    q[2] = min(max(q[2], 0.0), math.pi)
    q[3] = min(max(q[3], -math.pi), math.pi)
    q[4:7] = np.clip(q[4:7], _EIG_FLOOR, _EIG_CEIL)
    return q


def _weighted_mean(grid: Grid, w: np.ndarray) -> np.ndarray:
    ax, ay, az = grid.axes
    return np.array(
        [
            float(np.sum(w.sum(axis=(1, 2)) * ax)),
            float(np.sum(w.sum(axis=(0, 2)) * ay)),
            float(np.sum(w.sum(axis=(0, 1)) * az)),
        ]
    )


def nls_moment_init(
    y: Volume3D,
    bead: Volume3D,
    bead_diameter_um: float,
    background_bounds=(0.0, 1.0),
    amplitude_bounds=(0.0, 3.0),
) -> NLSParams:
    """Data-driven starting point from the blurred spot's second moments.

    The spot covariance is the bead covariance (diameter^2 / 20 per axis
    for a solid sphere) plus the kernel covariance; inverting the excess
    gives initial precision eigenvalues and axes.
    """
    grid = Grid.for_volume(y)
    background = float(np.median(y.data))
    w = np.maximum(y.data - background, 0.0)
    total = float(w.sum())
    if total <= 0:
        w = np.ones_like(y.data)
        total = float(w.sum())
    w = w / total
    mean = _weighted_mean(grid, w)
    cov = grid.second_moment(w) - np.outer(mean, mean)
    cov_bead = (bead_diameter_um**2 / 20.0) * np.eye(3)
    excess = cov - cov_bead
    ew, ev = np.linalg.eigh(0.5 * (excess + excess.T))
    ew = np.maximum(ew, 1e-4)
    prec = (ev * (1.0 / ew)) @ ev.T
    dec = euler_decompose(0.5 * (prec + prec.T))
    ker = gaussian_kernel(
        GaussianPSFParams(spd_from_angles(dec.theta, dec.phi, dec.eigs)), grid, normalize=True
    )
    spot = float(convolve_circular(bead, ker).data.max())
    amplitude = float((y.data.max() - background) / max(spot, 1e-12))
    p = np.array([background, amplitude, dec.theta, dec.phi, *dec.eigs])
    p = _project_nls(p, background_bounds, amplitude_bounds)
    return NLSParams.from_vector(p)


def nls_fit(
    y: Volume3D,
    bead: Volume3D,
    init: NLSParams,
    max_iters: int = 60,
    background_bounds=(0.0, 1.0),
    amplitude_bounds=(0.0, 3.0),
) -> NLSParams:
    """Levenberg-Marquardt fit of the seven-parameter Gaussian bead model.

    The Jacobian is forward-differenced (relative step 1e-6), damping is
    multiplicative (x10 on reject, /10 on accept), parameters are projected
    to their boxes after each accepted step, and the best-so-far iterate is
    returned. Accepted residual norms are non-increasing by construction.
    """
    grid = Grid.for_volume(y)
    op = BeadOperator(bead)

    def residual(p: np.ndarray) -> np.ndarray:
        params = NLSParams.from_vector(p)
        model = params.background + params.amplitude * op.conv(params.kernel(grid).data)
        return (y.data - model).ravel()

    p = _project_nls(init.vector(), background_bounds, amplitude_bounds)
    r = residual(p)
    cost = float(r @ r)
    damping = init.damping
    best_p, best_cost = p.copy(), cost
    for _ in range(max_iters):
        J = np.empty((r.size, p.size))
        for i in range(p.size):
            step = 1e-6 * max(abs(p[i]), 1e-3)
            pp = p.copy()
            pp[i] += step
            J[:, i] = (residual(pp) - r) / step
        JtJ = J.T @ J
        g = J.T @ r
        accepted = False
        for _ in range(12):
            A = JtJ + damping * np.diag(np.maximum(np.diag(JtJ), 1e-12))
            try:
                delta = np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            cand = _project_nls(p + delta, background_bounds, amplitude_bounds)
            rc = residual(cand)
            cc = float(rc @ rc)
            if cc <= cost:
                step_norm = float(np.linalg.norm(cand - p))
                p, r, cost = cand, rc, cc
                damping = max(damping / 10.0, 1e-12)
                accepted = True
                break
            damping *= 10.0
        if cost < best_cost:
            best_p, best_cost = p.copy(), cost
        if not accepted or step_norm < 1e-9:
            break
    return NLSParams.from_vector(best_p, damping)


def penalized_restore(
    y: Volume3D,
    kernel: Kernel3D,
    background: float,
    chi: float,
    delta: float = 0.1,
    outer_iters: int = 20,
    max_inner: int = 400,
) -> Volume3D:
    """Penalized least squares: minimize ||Hx - y + background||^2 + chi * g(x)
    over x >= 0.

    Solved with the same subspace-MM machinery as the constrained method,
    with the nonnegativity constraint alone on a growing penalty schedule.
    chi = 0 reduces to nonnegative least squares.
    """
    if chi < 0:
        raise ConfigError("chi must be nonnegative")
    prob = RestorationProblem(
        y,
        kernel,
        background,
        np.ones_like(y.data),
        bound=float(y.nvox),
        delta=delta,
    )
    x = y.data.copy()
    for j in range(1, outer_iters + 1):
        gamma = (2.0 * j) ** 2
        eps = 1e5 / (2.0 * j) ** 1.5
        objective = PenalizedMMObjective(prob, chi, 1.0, 0.0, gamma)
        x, _ = subspace_mm_minimize(objective, x, eps, max_inner)
    return y.with_data(x)
