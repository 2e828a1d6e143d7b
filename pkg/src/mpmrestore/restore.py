"""Constrained, parameter-free 3D restoration.

The restored volume minimizes a smoothed total-variation regularizer
subject to a weighted data-fit bound and nonnegativity:

    minimize g(x)   s.t.   ||W (H x - y + background)||^2 <= B,  x >= 0,

with H zero-padded convolution by the calibrated kernel and W the diagonal
inverse-noise-std weighting built from the heteroscedastic noise law. The
constraints are handled by exterior penalties (squared distances to the
feasible sets) with a weight driven to infinity; every penalized
subproblem is minimized by a two-direction subspace majorize-minimize
scheme whose steps solve a 2x2 system built from a quadratic-majorant
curvature operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from .errors import ConfigError, DescentError, ShapeError
from .noise import NoiseParams
from .volume import Kernel3D, Volume3D, _embedded_otf, _zeropad_plan

LOG_COLUMNS = (
    "outer", "gamma", "eps", "inner_iterations", "F_gamma", "g", "f", "R1", "R2",
    "grad_norm", "min_x",
)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Volume3D) else np.asarray(x, dtype=np.float64)


def _wrap_like(template, arr: np.ndarray):
    if isinstance(template, Volume3D):
        return template.with_data(arr)
    return arr


# ---------------------------------------------------------------------------
# Finite differences (forward, replicate boundary: last difference is zero)
# ---------------------------------------------------------------------------

def fwd_diff(x: np.ndarray, axis: int) -> np.ndarray:
    out = np.zeros_like(x)
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    out[tuple(lo)] = x[tuple(hi)] - x[tuple(lo)]
    return out


def fwd_diff_adj(u: np.ndarray, axis: int) -> np.ndarray:
    """Exact adjoint of :func:`fwd_diff` for the Euclidean inner product."""
    ut = u.copy()
    last = [slice(None)] * 3
    last[axis] = slice(-1, None)
    ut[tuple(last)] = 0.0
    out = -ut
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    out[tuple(hi)] += ut[tuple(lo)]
    return out


def _tv_point(x: np.ndarray, delta: float, voxel_size):
    grads = [fwd_diff(x, a) for a in range(3)]
    q2 = delta + sum(g * g / r for g, r in zip(grads, voxel_size))
    return grads, np.sqrt(q2)


def reg_g(x, delta: float, voxel_size) -> float:
    """Voxel-size-weighted smooth total variation sum_m sqrt(delta + |grad|^2_r)."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    _, q = _tv_point(_data(x), delta, voxel_size)
    return float(q.sum())


def grad_g(x, delta: float, voxel_size):
    """Exact gradient of :func:`reg_g`."""
    xd = _data(x)
    grads, q = _tv_point(xd, delta, voxel_size)
    out = np.zeros_like(xd)
    for a in range(3):
        out += fwd_diff_adj(grads[a] / (voxel_size[a] * q), a)
    return _wrap_like(x, out)


def tv_curvature_apply(x_grads_q, d: np.ndarray, voxel_size) -> np.ndarray:
    """Apply the TV majorant curvature at a point with cached (grads, q)."""
    _, q = x_grads_q
    out = np.zeros_like(d)
    for a in range(3):
        out += fwd_diff_adj(fwd_diff(d, a) / (voxel_size[a] * q), a)
    return out


# ---------------------------------------------------------------------------
# Zero-padded convolution with a cached transfer function
# ---------------------------------------------------------------------------

class ZeroPadConvolver:
    """H and H^T as zero-padded FFT convolutions with a fixed kernel."""

    def __init__(self, kernel: Volume3D, dims):
        if kernel.dims != tuple(dims):
            raise ShapeError(f"kernel dims {kernel.dims} differ from volume dims {tuple(dims)}")
        self.dims = tuple(dims)
        self._padded = _zeropad_plan(self.dims)
        self._otf = _embedded_otf(kernel.data, self._padded)

    def _run(self, u: np.ndarray, otf) -> np.ndarray:
        big = np.zeros(self._padded)
        big[: self.dims[0], : self.dims[1], : self.dims[2]] = u
        out = sfft.irfftn(sfft.rfftn(big) * otf, s=self._padded)
        return out[: self.dims[0], : self.dims[1], : self.dims[2]]

    def conv(self, u: np.ndarray) -> np.ndarray:
        return self._run(u, self._otf)

    def conv_t(self, u: np.ndarray) -> np.ndarray:
        return self._run(u, self._otf.conj())


# ---------------------------------------------------------------------------
# Problem container
# ---------------------------------------------------------------------------

@dataclass
class RestorationProblem:
    """Observation, kernel, weights, and constraint data of one restoration."""

    y: Volume3D
    kernel: Kernel3D
    background: float
    weights: np.ndarray
    bound: float
    delta: float = 0.1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != self.y.data.shape:
            raise ShapeError("weights must match the observation shape")
        if not np.all(np.isfinite(self.weights)) or self.weights.min() <= 0:
            raise ValueError("weights must be positive and finite")
        if self.bound <= 0:
            raise ValueError("data-fit bound must be positive")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.y.dims != self.kernel.dims:
            raise ShapeError(f"kernel dims {self.kernel.dims} differ from data dims {self.y.dims}")
        self._convolver = None

    @property
    def voxel_size_um(self):
        return self.y.voxel_size_um

    @property
    def convolver(self) -> ZeroPadConvolver:
        if self._convolver is None:
            self._convolver = ZeroPadConvolver(self.kernel, self.y.dims)
        return self._convolver

    @classmethod
    def from_noise_model(
        cls,
        y: Volume3D,
        kernel: Kernel3D,
        background: float,
        noise: NoiseParams,
        bound: float | None = None,
        delta: float = 0.1,
        weight_smooth_size: int = 3,
    ) -> "RestorationProblem":
        """Build the weighting matrix from the noise law.

        W is the reciprocal noise std evaluated at a uniform-smoothed copy
        of the observation (a stand-in for the unknown blurred object),
        floored at sqrt(b) and at 1e-8. The bound defaults to the voxel
        count, the statistical expectation of the weighted misfit.
        """
        ys = ndimage.uniform_filter(y.data, size=weight_smooth_size, mode="reflect")
        sig = noise.sigma(ys)
        sig = np.maximum(sig, max(math.sqrt(noise.b), 1e-8))
        if bound is None:
            bound = float(y.nvox)
        return cls(y, kernel, float(background), 1.0 / sig, float(bound), delta)


def data_fidelity_f(x, prob: RestorationProblem, conv_x: np.ndarray | None = None) -> float:
    """Weighted squared residual ||W (H x - y + background)||^2."""
    xd = _data(x)
    if conv_x is None:
        conv_x = prob.convolver.conv(xd)
    v = prob.weights * (conv_x - prob.y.data + prob.background)
    return float(np.sum(v * v))


def penalty_r1(x, prob: RestorationProblem, conv_x=None) -> float:
    """Squared distance of the weighted residual to the data-fit ball.

    The ball radius is sqrt(bound) so that the penalty vanishes exactly on
    the feasible set of the constraint f(x) <= bound.
    """
    xd = _data(x)
    if conv_x is None:
        conv_x = prob.convolver.conv(xd)
    v = prob.weights * (conv_x - prob.y.data + prob.background)
    nv = float(np.linalg.norm(v))
    excess = nv - math.sqrt(prob.bound)
    return excess * excess if excess > 0 else 0.0


def grad_r1(x, prob: RestorationProblem, conv_x=None):
    xd = _data(x)
    if conv_x is None:
        conv_x = prob.convolver.conv(xd)
    v = prob.weights * (conv_x - prob.y.data + prob.background)
    nv = float(np.linalg.norm(v))
    radius = math.sqrt(prob.bound)
    if nv <= radius:
        return _wrap_like(x, np.zeros_like(xd))
    shrink = 1.0 - radius / nv
    out = 2.0 * prob.convolver.conv_t(prob.weights * (shrink * v))
    return _wrap_like(x, out)


def penalty_r2(x) -> float:
    """Squared distance to the nonnegative orthant."""
    xd = _data(x)
    neg = np.minimum(xd, 0.0)
    return float(np.sum(neg * neg))


def grad_r2(x):
    xd = _data(x)
    return _wrap_like(x, 2.0 * np.minimum(xd, 0.0))


def curvature_apply(x, d, gamma: float, prob: RestorationProblem):
    """Apply the penalized-objective majorant curvature operator to d.

    The operator satisfies F(x + e) <= F(x) + grad F(x)^T e
    + (1/2) e^T A e (and a fortiori with coefficient 1, A being PSD); it is
    assembled from convolutions, finite differences, and diagonal scalings
    only. Components: the TV majorant (1/r_A)-weighted difference
    curvature, 2 gamma H^T W^2 H for the ball penalty, and 2 gamma I for
    the orthant penalty.
    """
    xd = _data(x)
    dd = _data(d)
    point = _tv_point(xd, prob.delta, prob.voxel_size_um)
    out = tv_curvature_apply(point, dd, prob.voxel_size_um)
    w2 = prob.weights**2
    out += gamma * 2.0 * prob.convolver.conv_t(w2 * prob.convolver.conv(dd))
    out += gamma * 2.0 * dd
    return _wrap_like(d, out)


# ---------------------------------------------------------------------------
# Penalized objective with cached per-point data
# ---------------------------------------------------------------------------

class PenalizedMMObjective:
    """F(x) = chi_g * g(x) + w_data * f(x) + gamma_ball * R1(x) + gamma_orthant * R2(x).

    One class covers both the constrained restoration (chi_g = 1,
    w_data = 0, gamma_ball = gamma_orthant = gamma) and the penalized
    least-squares baseline (chi_g = chi, w_data = 1, gamma_ball = 0,
    gamma_orthant = gamma). ``eval`` returns (value, gradient, point cache)
    and ``curv_apply`` consumes the cache so curvature products reuse the
    TV weights of the expansion point.
    """

    def __init__(
        self,
        prob: RestorationProblem,
        chi_g: float,
        w_data: float,
        gamma_ball: float,
        gamma_orthant: float,
    ):
        self.prob = prob
        self.chi_g = float(chi_g)
        self.w_data = float(w_data)
        self.gamma_ball = float(gamma_ball)
        self.gamma_orthant = float(gamma_orthant)
        self._radius = math.sqrt(prob.bound)

    def eval(self, x: np.ndarray):
        prob = self.prob
        conv_x = prob.convolver.conv(x)
        resid = conv_x - prob.y.data + prob.background
        v = prob.weights * resid
        nv = float(np.linalg.norm(v))
        grads, q = _tv_point(x, prob.delta, prob.voxel_size_um)

        value = self.chi_g * float(q.sum())
        grad = np.zeros_like(x)
        for a in range(3):
            grad += fwd_diff_adj(grads[a] / (prob.voxel_size_um[a] * q), a)
        grad *= self.chi_g

        coeff = 0.0
        if self.w_data:
            value += self.w_data * nv * nv
            coeff += self.w_data
        if self.gamma_ball:
            excess = nv - self._radius
            if excess > 0:
                value += self.gamma_ball * excess * excess
                coeff += self.gamma_ball * (1.0 - self._radius / nv)
        if coeff:
            grad += 2.0 * prob.convolver.conv_t(prob.weights * (coeff * v))
        if self.gamma_orthant:
            neg = np.minimum(x, 0.0)
            value += self.gamma_orthant * float(np.sum(neg * neg))
            grad += self.gamma_orthant * 2.0 * neg

        cache = {"q": q, "conv_x": conv_x, "v": v, "nv": nv}
        return value, grad, cache

    def curv_apply(self, cache, d: np.ndarray) -> np.ndarray:
        prob = self.prob
        out = np.zeros_like(d)
        for a in range(3):
            out += fwd_diff_adj(fwd_diff(d, a) / (prob.voxel_size_um[a] * cache["q"]), a)
        out *= self.chi_g
        quad = self.w_data + self.gamma_ball
        if quad:
            w2 = prob.weights**2
            out += 2.0 * quad * prob.convolver.conv_t(w2 * prob.convolver.conv(d))
        if self.gamma_orthant:
            out += 2.0 * self.gamma_orthant * d
        return out


def _pinv_floored(B: np.ndarray, rel_floor: float = 1e-12) -> np.ndarray:
    """Pseudoinverse of a small symmetric PSD matrix with an eigenvalue floor."""
    w, V = np.linalg.eigh(0.5 * (B + B.T))
    floor = rel_floor * max(float(np.trace(B)), 0.0)
    inv = np.where(w > max(floor, 0.0), 1.0 / np.where(w > 0, w, 1.0), 0.0)
    return (V * inv) @ V.T


def subspace_mm_minimize(objective, x0: np.ndarray, eps: float, max_inner: int):
    """Two-direction subspace MM descent until the gradient norm drops below eps.

    Directions are the negative gradient and the previous displacement
    (gradient only on the first step). The step solves the 2x2 (or 1x1)
    system built from the majorant curvature; the objective is asserted to
    be non-increasing at every step.

    Returns (x, info dict).
    """
    if eps <= 0:
        raise ValueError("inner tolerance must be positive")
    x = np.asarray(x0, dtype=np.float64).copy()
    value, grad, cache = objective.eval(x)
    gnorm = float(np.linalg.norm(grad))
    x_prev = None
    trace = []
    k = 0
    while gnorm >= eps and k < max_inner:
        dirs = [-grad]
        if x_prev is not None:
            disp = x - x_prev
            if float(np.linalg.norm(disp)) > 0:
                dirs.append(disp)
        m = len(dirs)
        adirs = [objective.curv_apply(cache, d) for d in dirs]
        B = np.empty((m, m))
        for i in range(m):
            for j in range(i, m):
                B[i, j] = B[j, i] = float(np.sum(dirs[i] * adirs[j]))
        rhs = np.array([float(np.sum(d * grad)) for d in dirs])
        u = -_pinv_floored(B) @ rhs
        step = sum(float(u[i]) * dirs[i] for i in range(m))
        x_new = x + step
        value_new, grad_new, cache_new = objective.eval(x_new)
        if value_new > value + 1e-9 * max(1.0, abs(value)):
            raise DescentError(
                f"inner objective increased at step {k}: {value!r} -> {value_new!r}",
                trace,
            )
        x_prev = x
        x, value, grad, cache = x_new, value_new, grad_new, cache_new
        gnorm = float(np.linalg.norm(grad))
        k += 1
        trace.append({"k": k, "value": value, "grad_norm": gnorm})
    return x, {"iterations": k, "grad_norm": gnorm, "value": value, "trace": trace}


def mm_inner_solve(
    x_init,
    gamma: float,
    eps: float,
    prob: RestorationProblem,
    max_inner: int = 400,
):
    """Minimize the penalized objective at fixed penalty weight gamma."""
    objective = PenalizedMMObjective(prob, 1.0, 0.0, gamma, gamma)
    x, info = subspace_mm_minimize(objective, _data(x_init), eps, max_inner)
    return _wrap_like(x_init, x), info


# ---------------------------------------------------------------------------
# Outer penalty loop
# ---------------------------------------------------------------------------

@dataclass
class PenaltySchedule:
    """Outer penalty weights gamma(j) and inner tolerances eps(j), j = 1, 2, ...

    gamma must be positive and nondecreasing with gamma -> infinity; eps
    positive with eps -> 0 (checked along the run).
    """

    gamma: Callable[[int], float]
    eps: Callable[[int], float]
    max_outer: int = 25
    max_inner: int = 400

    @classmethod
    def simulation_profile(cls, max_outer: int = 25, max_inner: int = 400) -> "PenaltySchedule":
        """gamma_j = (2j)^2, eps_j = 1e5 / gamma_j^0.75."""
        return cls(
            gamma=lambda j: (2.0 * j) ** 2,
            eps=lambda j: 1e5 / (2.0 * j) ** 1.5,
            max_outer=max_outer,
            max_inner=max_inner,
        )

    @classmethod
    def real_data_profile(cls, max_outer: int = 25, max_inner: int = 400) -> "PenaltySchedule":
        """gamma_j = (1.5 j)^1.2, eps_j = 1e5 / gamma_j^0.5."""
        return cls(
            gamma=lambda j: (1.5 * j) ** 1.2,
            eps=lambda j: 1e5 / (1.5 * j) ** 0.6,
            max_outer=max_outer,
            max_inner=max_inner,
        )

    @classmethod
    def named(cls, name: str, max_outer: int = 25, max_inner: int = 400) -> "PenaltySchedule":
        if name == "simulation":
            return cls.simulation_profile(max_outer, max_inner)
        if name == "real-data":
            return cls.real_data_profile(max_outer, max_inner)
        raise ConfigError(f"unknown schedule profile {name!r}")


@dataclass
class RestoreResult:
    volume: Volume3D
    log: list
    data_fit: float
    bound: float
    min_value: float

    @property
    def constraint_satisfied(self) -> bool:
        return self.data_fit <= self.bound


def restore_constrained(
    prob: RestorationProblem,
    schedule: PenaltySchedule,
    x0: Volume3D | None = None,
) -> RestoreResult:
    """Run the outer penalty loop, warm-starting each subproblem.

    The default starting point is the observation itself. Returns the
    final iterate together with the per-outer-iteration log and the final
    constraint residuals.
    """
    x = _data(x0 if x0 is not None else prob.y).copy()
    log = []
    gamma_prev = 0.0
    for j in range(1, schedule.max_outer + 1):
        gamma = float(schedule.gamma(j))
        eps = float(schedule.eps(j))
        if gamma <= 0 or eps <= 0:
            raise ConfigError(f"schedule produced nonpositive gamma/eps at j={j}")
        if gamma < gamma_prev:
            raise ConfigError("penalty weights must be nondecreasing")
        gamma_prev = gamma
        objective = PenalizedMMObjective(prob, 1.0, 0.0, gamma, gamma)
        x, info = subspace_mm_minimize(objective, x, eps, schedule.max_inner)
        conv_x = prob.convolver.conv(x)
        fval = data_fidelity_f(x, prob, conv_x=conv_x)
        log.append(
            {
                "outer": j,
                "gamma": gamma,
                "eps": eps,
                "inner_iterations": info["iterations"],
                "F_gamma": info["value"],
                "g": reg_g(x, prob.delta, prob.voxel_size_um),
                "f": fval,
                "R1": penalty_r1(x, prob, conv_x=conv_x),
                "R2": penalty_r2(x),
                "grad_norm": info["grad_norm"],
                "min_x": float(x.min()),
            }
        )
    out = prob.y.with_data(x)
    return RestoreResult(
        volume=out,
        log=log,
        data_fit=data_fidelity_f(x, prob),
        bound=prob.bound,
        min_value=float(x.min()),
    )
