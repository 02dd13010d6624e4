"""Built-in verification suite behind the ``check`` CLI command.

Each check prints one PASS/FAIL line and returns a boolean: stochastic
simulation against the closed-form moments, deterministic transport of
the finite field, and finite-difference audits of every analytic
derivative in the package. ``inject_fault`` perturbs the first check's
reference values so the failure path itself is testable.
"""

from __future__ import annotations

import numpy as np

from . import model as model_mod
from .energy import (
    LennardJonesEnergy,
    QuadraticEnergy,
    fd_gradient,
    fd_hessian,
    formation_from_positions,
)
from .flow import Z_MAX, cond_field_finite, mean_cov_z
from .likelihood import Rk45Config, rk45
from .linalg import EigenPair
from .model import ModeTransform, init, jvp, loss_and_grad
from .spectrum import FlowFlags, FlowSpec, Spectrum, diffusion_coeffs


def _random_spec(rng, dim, n_null=0):
    alphas = np.concatenate([np.zeros(n_null),
                             np.sort(rng.uniform(0.4, 2.0, size=dim - n_null))])
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q *= np.sign(np.diag(r))
    null_mask = alphas == 0.0
    spectrum = Spectrum(eig=EigenPair(eigvals=alphas, eigvecs=q),
                        null_mask=null_mask,
                        alpha_min=float(alphas[~null_mask].min()),
                        alpha_max=float(alphas.max()))
    gamma = 0.2
    beta = diffusion_coeffs(spectrum, gamma, isotropize=False)
    return FlowSpec(y1=rng.normal(size=dim), spectrum=spectrum, beta=beta,
                    sigma0=np.ones(dim), kappa=1.0, gamma=gamma,
                    flags=FlowFlags())


def check_ou_moments(rng=None, inject_fault=False, n_specs=3, n_paths=4000,
                     dt=2e-3, horizon=1.5) -> bool:
    """Euler-Maruyama moments against the closed forms, 5 standard errors."""
    rng = rng or np.random.default_rng(2024)
    from .flow import mean_cov_time

    for _ in range(n_specs):
        dim = int(rng.integers(2, 5))
        fs = _random_spec(rng, dim, n_null=int(rng.integers(0, 2)))
        y0 = rng.normal(size=dim)
        a = fs.basis @ (fs.alphas[:, None] * fs.basis.T)
        b = fs.basis @ (fs.beta[:, None] * fs.basis.T)
        y = y0 + (rng.standard_normal((n_paths, dim)) * fs.sigma0) @ fs.basis.T
        sq = np.sqrt(dt)
        for _ in range(int(round(horizon / dt))):
            y = y - (y - fs.y1) @ a.T * dt \
                + sq * rng.standard_normal((n_paths, dim)) @ b.T
        state = mean_cov_time(fs, y0, horizon)
        target_mean = state.mean
        target_cov = fs.basis @ (state.var[:, None] * fs.basis.T)
        if inject_fault:
            target_mean = target_mean + 0.25
        emp_mean = y.mean(axis=0)
        emp_cov = np.cov(y.T, bias=False)
        se_mean = np.sqrt(np.diag(target_cov) / n_paths)
        if np.any(np.abs(emp_mean - target_mean) > 5 * se_mean):
            return False
        dvar = np.diag(target_cov)
        se_cov = np.sqrt((np.outer(dvar, dvar) + target_cov ** 2) / n_paths)
        if np.any(np.abs(emp_cov - target_cov) > 5 * se_cov):
            return False
    return True


def check_transport(rng=None, inject_fault=False, n_specs=3) -> bool:
    """Integrating the finite field from mu(0) must land on mu(z_max)."""
    rng = rng or np.random.default_rng(7)
    cfg = Rk45Config(rtol=1e-8, atol=1e-8)
    for _ in range(n_specs):
        fs = _random_spec(rng, int(rng.integers(2, 5)))
        y0 = rng.normal(size=fs.dim)

        def field(z, y):
            return cond_field_finite(fs, y, min(z, Z_MAX), y0)[0]

        res = rk45(field, mean_cov_z(fs, y0, 0.0).mean, (0.0, Z_MAX), cfg)
        target = mean_cov_z(fs, y0, Z_MAX).mean
        tol = 1e-5 * max(1.0, float(np.linalg.norm(target)))
        if inject_fault:
            tol *= 0.0
        if np.linalg.norm(res.x_end - target) > tol:
            return False
    return True


def check_gradients(rng=None, inject_fault=False, n_configs=20) -> bool:
    """Analytic energy and network derivatives against central differences."""
    rng = rng or np.random.default_rng(13)
    quad_m = rng.normal(size=(3, 3))
    energies = [
        QuadraticEnergy(matrix=quad_m @ quad_m.T, center=rng.normal(size=3)),
        LennardJonesEnergy(m=3, spatial_dim=3),
        formation_from_positions(rng.normal(size=9), 3, 3),
    ]
    for energy in energies:
        for _ in range(n_configs):
            if energy.kind == "lennard_jones":
                y = (rng.normal(size=(3, 3)) * 1.5
                     + np.arange(3)[:, None] * 1.4).reshape(-1)
            else:
                y = rng.normal(size=energy.dim)
            g = energy.gradient(y)
            if inject_fault:
                g = g + 1e-3
            rel = np.linalg.norm(g - fd_gradient(energy, y)) \
                / max(1.0, np.linalg.norm(g))
            if rel > 1e-6:
                return False
            h = energy.hessian(y)
            rel_h = np.linalg.norm(h - fd_hessian(energy, y)) \
                / max(1.0, np.linalg.norm(h))
            if rel_h > 1e-5:
                return False
    # network reverse-mode and forward-mode derivatives
    params = init([4, 12, 12, 4], seed=3)
    ys = rng.normal(size=(4, 3))
    zs = rng.uniform(0, 0.9, size=4)
    t_vy = rng.normal(size=(4, 3))
    t_vz = rng.normal(size=4)
    mode = ModeTransform(finite=True)
    _, grads, _ = loss_and_grad(params, ys, zs, t_vy, t_vz, mode)
    flat = np.concatenate([a.reshape(-1)
                           for a in (*grads.weights, *grads.biases)])
    sizes = np.cumsum([a.size for a in (*params.weights, *params.biases)])
    step = 1e-6
    for index in rng.choice(flat.size, size=20, replace=False):
        pp, pm = params.copy(), params.copy()
        for p_prt, sgn in ((pp, 1.0), (pm, -1.0)):
            arrays = [*p_prt.weights, *p_prt.biases]
            k = int(np.searchsorted(sizes, index, side="right"))
            local = index - (sizes[k - 1] if k else 0)
            arrays[k].reshape(-1)[local] += sgn * step
        fd = (loss_and_grad(pp, ys, zs, t_vy, t_vz, mode)[0]
              - loss_and_grad(pm, ys, zs, t_vy, t_vz, mode)[0]) / (2 * step)
        denom = max(1e-8, abs(fd), abs(flat[index]))
        if abs(fd - flat[index]) / denom > 1e-4:
            return False
    for _ in range(10):
        y = rng.normal(size=3)
        z = float(rng.uniform(0, 0.9))
        tangent = rng.normal(size=4)
        dvy, dvz = jvp(params, y, z, tangent)
        h = 1e-5
        xp = np.concatenate([y, [z]]) + h * tangent
        xm = np.concatenate([y, [z]]) - h * tangent
        fp = model_mod.forward(params, xp[:3], xp[3])
        fm = model_mod.forward(params, xm[:3], xm[3])
        fd_vec = np.concatenate([fp[0] - fm[0], [fp[1] - fm[1]]]) / (2 * h)
        ex = np.concatenate([dvy, [dvz]])
        if np.linalg.norm(fd_vec - ex) / max(1.0, np.linalg.norm(ex)) > 1e-6:
            return False
    return True


CHECKS = [
    ("ou_moments_vs_closed_form", check_ou_moments),
    ("finite_field_transport", check_transport),
    ("finite_difference_gradients", check_gradients),
]


def run_all(inject_fault: bool = False, stream=None) -> bool:
    """Run every check, print one PASS/FAIL line each; True if all pass."""
    import sys

    stream = stream or sys.stdout
    all_ok = True
    for name, fn in CHECKS:
        ok = fn(inject_fault=inject_fault)
        all_ok = all_ok and ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}", file=stream)
    return all_ok
