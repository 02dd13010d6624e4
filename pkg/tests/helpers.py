"""Shared construction and oracle utilities for the test suite.

The integrators here are deliberately independent of the package's
adaptive integrator so transport checks have a second opinion.
"""

import numpy as np

from hifm.linalg import EigenPair
from hifm.spectrum import FlowFlags, FlowSpec, Spectrum, diffusion_coeffs


def random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def random_flow_spec(rng, dim=None, n_null=0, gamma=None, kappa=None,
                     isotropize=None, alpha_range=(0.3, 2.5), sigma0=1.0,
                     flags=None):
    """FlowSpec with a random orthonormal basis and bounded rate spread."""
    if dim is None:
        dim = int(rng.integers(2, 7))
    n_null = min(n_null, dim - 1)
    alphas = np.concatenate([
        np.zeros(n_null),
        np.sort(rng.uniform(*alpha_range, size=dim - n_null)),
    ])
    p = random_orthogonal(rng, dim)
    null_mask = alphas == 0.0
    spectrum = Spectrum(
        eig=EigenPair(eigvals=alphas, eigvecs=p),
        null_mask=null_mask,
        alpha_min=float(alphas[~null_mask].min()),
        alpha_max=float(alphas.max()),
    )
    gamma = float(rng.uniform(0.05, 0.5)) if gamma is None else gamma
    kappa = float(rng.uniform(0.5, 1.5)) if kappa is None else kappa
    if isotropize is None:
        isotropize = bool(rng.integers(0, 2))
    beta = diffusion_coeffs(spectrum, gamma, isotropize)
    if flags is None:
        flags = FlowFlags(isotropize=isotropize)
    return FlowSpec(
        y1=rng.normal(size=dim),
        spectrum=spectrum,
        beta=beta,
        sigma0=np.full(dim, float(sigma0)),
        kappa=kappa,
        gamma=gamma,
        flags=flags,
    )


def rk4_step(f, t, x, h):
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = f(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_integrate(f, x0, t0, t1, n_steps):
    """Fixed-step classical Runge-Kutta, independent of the package RK45."""
    h = (t1 - t0) / n_steps
    x = np.array(x0, dtype=float)
    t = t0
    for _ in range(n_steps):
        x = rk4_step(f, t, x, h)
        t += h
    return x


def euler_maruyama_moments(fs, y0, horizon, dt, n_paths, rng):
    """Empirical mean/covariance of dy = -A(y - y1)dt + B dw at the horizon.

    Paths start from N(y0, P diag(sigma0^2) P^T).
    """
    a = fs.basis @ (fs.alphas[:, None] * fs.basis.T)
    b = fs.basis @ (fs.beta[:, None] * fs.basis.T)
    y = y0 + (rng.standard_normal((n_paths, fs.dim)) * fs.sigma0) @ fs.basis.T
    n_steps = int(round(horizon / dt))
    sq = np.sqrt(dt)
    for _ in range(n_steps):
        noise = rng.standard_normal((n_paths, fs.dim)) @ b.T
        y = y - (y - fs.y1) @ a.T * dt + sq * noise
    mean = y.mean(axis=0)
    cov = np.cov(y.T, bias=False)
    return mean, np.atleast_2d(cov)
