"""Closed-form conditional probability paths and their vector fields.

A `FlowSpec` fixes a linear contraction toward a target y1 with rates
alpha_i along an orthonormal eigenbasis P, diffusion beta_i co-diagonal
with the contraction, and prior scales sigma0. This module evaluates the
resulting Gaussian path in two parameterizations:

* time t >= 0:
    mu(t)  = y1 + P diag(exp(-alpha_i t)) P^T (y0 - y1)
    var_i(t) = s_i + exp(-2 alpha_i t) (sigma0_i^2 - s_i),
    with stationary variance s_i = beta_i^2 / (2 alpha_i) for alpha_i > 0
    and s_i = sigma0_i^2 on null directions (where beta_i = 0).

* progress variable z in [0, 1], defined through the scalar interpolant
    mu_z(t) = 1 - exp(-kappa alpha_min t),
  whose inversion replaces exp(-alpha_i t) with (1 - z)^(alpha_i / rate),
  rate = kappa * alpha_min. Null directions use exponent zero, i.e. their
  components are frozen at y0 for every z including z = 1.

The conditional probability-flow field in time is
    v_y(y, t) = -A (y - y1) + 1/2 B^2 Sigma(t)^{-1} (y - mu(t)),
and the finite-window field divides by the interpolant speed
    v_z(z) = rate * (1 - z),
which is singular at z = 1; evaluation is therefore capped at Z_MAX.
The straight optimal-transport path is included as the baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .energy import zero_com_project
from .errors import NumericalError, ValidationError
from .spectrum import FlowSpec

Z_MAX = 1.0 - 1e-4


@dataclass(frozen=True)
class GaussianState:
    """Gaussian with covariance diagonal in a fixed orthonormal basis.

    ``var`` holds the per-eigendirection variances; the ambient covariance
    is ``basis @ diag(var) @ basis.T``.
    """

    mean: np.ndarray
    var: np.ndarray
    basis: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class PathPoint:
    """A draw from the conditional path, with its consistent (z, t) pair."""

    y: np.ndarray
    z: float
    t: float


def _stationary_var(fs: FlowSpec) -> np.ndarray:
    alphas = fs.alphas
    sig2 = fs.sigma0 ** 2
    out = sig2.copy()
    nz = alphas > 0.0
    out[nz] = fs.beta[nz] ** 2 / (2.0 * alphas[nz])
    return out


def mean_cov_time(fs: FlowSpec, y0: np.ndarray, t: float) -> GaussianState:
    """Gaussian state of the conditional path at time t >= 0."""
    if t < 0:
        raise ValidationError("time must be nonnegative")
    y0 = np.asarray(y0, dtype=np.float64)
    decay = np.exp(-fs.alphas * t)
    p = fs.basis
    mean = fs.y1 + p @ (decay * (p.T @ (y0 - fs.y1)))
    s = _stationary_var(fs)
    var = s + decay ** 2 * (fs.sigma0 ** 2 - s)
    return GaussianState(mean=mean, var=var, basis=p)


def _z_weights(fs: FlowSpec, z: float) -> np.ndarray:
    """(1 - z)^(alpha_i / rate); exponent zero gives factor one at every z."""
    r = fs.alphas / fs.rate
    return np.where(r == 0.0, 1.0, (1.0 - z) ** r)


def mean_cov_z(fs: FlowSpec, y0: np.ndarray, z: float) -> GaussianState:
    """Gaussian state of the conditional path at progress z in [0, 1]."""
    if not 0.0 <= z <= 1.0:
        raise ValidationError("z must lie in [0, 1]")
    y0 = np.asarray(y0, dtype=np.float64)
    w = _z_weights(fs, z)
    p = fs.basis
    mean = fs.y1 + p @ (w * (p.T @ (y0 - fs.y1)))
    s = _stationary_var(fs)
    var = s + w ** 2 * (fs.sigma0 ** 2 - s)
    return GaussianState(mean=mean, var=var, basis=p)


def stationary_state(fs: FlowSpec, y0: np.ndarray) -> GaussianState:
    """Limit of the path: null components keep y0, the rest contract to y1."""
    y0 = np.asarray(y0, dtype=np.float64)
    pi_null = fs.spectrum.null_projector()
    mean = fs.y1 + pi_null @ (y0 - fs.y1)
    return GaussianState(mean=mean, var=_stationary_var(fs), basis=fs.basis)


def interpolant_mean(fs: FlowSpec, t: float) -> float:
    """Scalar progress mu_z(t) = 1 - exp(-rate * t)."""
    if t < 0:
        raise ValidationError("time must be nonnegative")
    return 1.0 - math.exp(-fs.rate * t)


def interpolant_field(fs: FlowSpec, z: float) -> float:
    """Interpolant speed v_z(z) = rate * (1 - z) >= 0 on [0, 1]."""
    if not 0.0 <= z <= 1.0:
        raise ValidationError("z must lie in [0, 1]")
    return -fs.rate * (z - 1.0)


def interpolant_time(fs: FlowSpec, z: float) -> float:
    """Invert the interpolant mean: t(z) = -ln(1 - z) / rate."""
    if not 0.0 <= z <= 1.0:
        raise ValidationError("z must lie in [0, 1]")
    if z == 1.0:
        return math.inf
    return -math.log1p(-z) / fs.rate


def distance_bound(fs: FlowSpec, y0: np.ndarray, t: float) -> float:
    """Worst-case bound exp(-alpha_min t) ||y0 - y1|| on the mean distance."""
    if t < 0:
        raise ValidationError("time must be nonnegative")
    y0 = np.asarray(y0, dtype=np.float64)
    return math.exp(-fs.alpha_min * t) * float(np.linalg.norm(y0 - fs.y1))


def score(g: GaussianState, y: np.ndarray) -> np.ndarray:
    """Gradient of the Gaussian log-density, -P diag(1/var) P^T (y - mean)."""
    if np.any(g.var <= 0.0):
        raise NumericalError("score undefined: zero variance direction")
    y = np.asarray(y, dtype=np.float64)
    return -g.basis @ ((g.basis.T @ (y - g.mean)) / g.var)


def gaussian_logpdf(g: GaussianState, y: np.ndarray) -> float:
    """Log-density of the Gaussian state at y."""
    if np.any(g.var <= 0.0):
        raise NumericalError("log-density undefined: zero variance direction")
    y = np.asarray(y, dtype=np.float64)
    eta = g.basis.T @ (y - g.mean)
    return float(-0.5 * np.sum(eta ** 2 / g.var)
                 - 0.5 * np.sum(np.log(g.var))
                 - 0.5 * g.dim * math.log(2.0 * math.pi))


def cond_field_time(fs: FlowSpec, y: np.ndarray, t: float,
                    y0: np.ndarray) -> tuple[np.ndarray, float]:
    """Conditional probability-flow field in the time parameterization.

    Returns (v_y, v_z) with
    v_y = -A (y - y1) + 1/2 B^2 Sigma(t)^{-1} (y - mu(t)) and v_z the
    interpolant speed at z = mu_z(t). Singular Sigma raises.
    """
    y = np.asarray(y, dtype=np.float64)
    state = mean_cov_time(fs, y0, t)
    if np.any(state.var <= 0.0):
        raise NumericalError("conditional field undefined: singular covariance")
    p = fs.basis
    eta1 = p.T @ (y - fs.y1)
    eta_mu = p.T @ (y - state.mean)
    coef = 0.5 * fs.beta ** 2 / state.var
    v_y = p @ (-fs.alphas * eta1 + coef * eta_mu)
    v_z = fs.rate * math.exp(-fs.rate * t)
    return v_y, v_z


def cond_field_finite(fs: FlowSpec, y: np.ndarray, z: float, y0: np.ndarray,
                      z_max: float = Z_MAX) -> tuple[np.ndarray, float]:
    """Finite-window conditional field (v_y / v_z, 1) at progress z.

    The division by the interpolant speed diverges at z = 1, so evaluation
    is only allowed up to ``z_max``.
    """
    if not 0.0 <= z <= z_max:
        raise ValidationError(
            f"z={z} outside [0, {z_max}]: finite field diverges at z=1")
    t = interpolant_time(fs, z)
    v_y, v_z = cond_field_time(fs, y, t, y0)
    return v_y / v_z, 1.0


def ot_path(y1: np.ndarray, z: float, sigma_min: float) -> GaussianState:
    """Straight optimal-transport path: mean z y1, std 1 - (1 - sigma_min) z."""
    if not 0.0 <= z <= 1.0:
        raise ValidationError("z must lie in [0, 1]")
    y1 = np.asarray(y1, dtype=np.float64)
    std = 1.0 - (1.0 - sigma_min) * z
    return GaussianState(mean=z * y1, var=np.full(y1.shape, std * std),
                         basis=np.eye(y1.shape[0]))


def ot_field(y: np.ndarray, z: float, y1: np.ndarray,
             sigma_min: float) -> tuple[np.ndarray, float]:
    """Optimal-transport conditional field (y1 - (1-s)y) / (1 - (1-s)z)."""
    if not 0.0 <= z <= 1.0:
        raise ValidationError("z must lie in [0, 1]")
    y = np.asarray(y, dtype=np.float64)
    y1 = np.asarray(y1, dtype=np.float64)
    shrink = 1.0 - sigma_min
    denom = 1.0 - shrink * z
    if denom <= 0.0:
        raise NumericalError("optimal-transport field singular at this z")
    return (y1 - shrink * y) / denom, 1.0


def sample_path_point(fs: FlowSpec, z: float, rng: np.random.Generator,
                      com_spatial_dim: int | None = None) -> PathPoint:
    """Draw y ~ N(mu(z), Sigma(z)) with the prior mean y0 = 0.

    For particle systems (``com_spatial_dim`` set) the mean and noise are
    projected onto the zero center-of-mass subspace, so the draw lies in
    the support of the zero-CoM prior.
    """
    state = mean_cov_z(fs, np.zeros(fs.dim), z)
    eps = rng.standard_normal(fs.dim)
    y = state.mean + fs.basis @ (np.sqrt(state.var) * eps)
    if com_spatial_dim is not None:
        y = zero_com_project(y, com_spatial_dim)
    return PathPoint(y=y, z=z, t=interpolant_time(fs, z))


def isotropic_alpha_data(y1: np.ndarray, eps: float) -> float:
    """Rate alpha = -ln(eps / ||y1||): the mean is eps-close to y1 at t = 1."""
    norm = float(np.linalg.norm(np.asarray(y1, dtype=np.float64)))
    if not 0.0 < eps < norm:
        raise ValidationError(
            f"eps must lie in (0, ||y1||) = (0, {norm}), got {eps}")
    return -math.log(eps / norm)


def isotropic_alpha_interp(eps: float, kappa: float) -> float:
    """Rate alpha = -ln(eps) / kappa: z is eps-close to 1 at t = 1."""
    if not 0.0 < eps < 1.0:
        raise ValidationError(f"eps must lie in (0, 1), got {eps}")
    if kappa <= 0:
        raise ValidationError("kappa must be positive")
    return -math.log(eps) / kappa
