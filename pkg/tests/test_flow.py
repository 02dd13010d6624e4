import math

import numpy as np
import pytest

from helpers import random_flow_spec, rk4_integrate
from hifm.errors import NumericalError, ValidationError
from hifm.flow import (
    Z_MAX,
    GaussianState,
    cond_field_finite,
    cond_field_time,
    distance_bound,
    gaussian_logpdf,
    interpolant_field,
    interpolant_mean,
    interpolant_time,
    isotropic_alpha_data,
    isotropic_alpha_interp,
    mean_cov_time,
    mean_cov_z,
    ot_field,
    ot_path,
    sample_path_point,
    score,
    stationary_state,
)
from hifm.spectrum import FlowConfig, build_flow_spec


def scalar_spec():
    # alpha = 1, beta = sqrt(2), sigma0 = 1: stationary variance equals the
    # prior variance, so var(t) is identically one
    fs = random_flow_spec(np.random.default_rng(0), dim=1, gamma=1.0,
                          kappa=1.0, isotropize=True, alpha_range=(1.0, 1.0))
    return fs


class TestMeanCovTime:
    def test_initial_condition(self):
        rng = np.random.default_rng(1)
        fs = random_flow_spec(rng)
        y0 = rng.normal(size=fs.dim)
        g = mean_cov_time(fs, y0, 0.0)
        assert np.allclose(g.mean, y0, atol=1e-12)
        assert np.allclose(g.var, fs.sigma0 ** 2, atol=1e-12)

    def test_scalar_constant_variance(self):
        fs = scalar_spec()
        assert np.isclose(fs.beta[0], math.sqrt(2.0))
        y0 = np.zeros(1)
        y1 = fs.y1[0]
        for t in (0.0, 0.3, 1.0, 4.0):
            g = mean_cov_time(fs, y0, t)
            assert np.isclose(g.var[0], 1.0, atol=1e-12)
            assert np.isclose(g.mean[0], y1 * (1.0 - math.exp(-t)), atol=1e-12)

    def test_long_time_limits(self):
        rng = np.random.default_rng(2)
        fs = random_flow_spec(rng, dim=5, n_null=2)
        y0 = rng.normal(size=5)
        g = mean_cov_time(fs, y0, 50.0)
        limit = stationary_state(fs, y0)
        assert np.allclose(g.mean, limit.mean, atol=1e-10)
        assert np.allclose(g.var, limit.var, atol=1e-10)
        # hyperbolic variances land on beta^2 / (2 alpha)
        nz = fs.alphas > 0
        assert np.allclose(g.var[nz], fs.beta[nz] ** 2 / (2 * fs.alphas[nz]),
                           atol=1e-10)

    def test_negative_time_rejected(self):
        fs = scalar_spec()
        with pytest.raises(ValidationError):
            mean_cov_time(fs, np.zeros(1), -0.1)


class TestInterpolant:
    def test_half_life(self):
        fs = random_flow_spec(np.random.default_rng(3), dim=2, kappa=1.0,
                              alpha_range=(1.0, 1.0))
        assert np.isclose(interpolant_mean(fs, math.log(2.0)), 0.5)

    def test_field_zero_at_one(self):
        fs = scalar_spec()
        assert interpolant_field(fs, 1.0) == 0.0

    def test_field_value(self):
        fs = random_flow_spec(np.random.default_rng(4), dim=2, kappa=2.0,
                              alpha_range=(3.0, 3.0))
        assert np.isclose(interpolant_field(fs, 0.0), 6.0)

    def test_monotone_to_one(self):
        fs = scalar_spec()
        zs = [interpolant_mean(fs, t) for t in np.linspace(0, 10, 50)]
        assert zs[0] == 0.0
        assert np.all(np.diff(zs) > 0)
        assert zs[-1] < 1.0 and zs[-1] > 0.99

    def test_time_inverse(self):
        fs = random_flow_spec(np.random.default_rng(5))
        for t in (0.0, 0.2, 1.7):
            assert np.isclose(interpolant_time(fs, interpolant_mean(fs, t)), t,
                              atol=1e-12)
        assert interpolant_time(fs, 1.0) == math.inf


class TestDistanceBound:
    def test_t_zero(self):
        rng = np.random.default_rng(6)
        fs = random_flow_spec(rng)
        y0 = rng.normal(size=fs.dim)
        assert np.isclose(distance_bound(fs, y0, 0.0),
                          np.linalg.norm(y0 - fs.y1))

    def test_isotropic_bound_is_exact(self):
        rng = np.random.default_rng(7)
        fs = random_flow_spec(rng, dim=3, alpha_range=(1.5, 1.5))
        y0 = rng.normal(size=3)
        limit = stationary_state(fs, y0)
        for t in (0.1, 1.0, 3.0):
            exact = np.linalg.norm(mean_cov_time(fs, y0, t).mean - limit.mean)
            assert np.isclose(exact, distance_bound(fs, y0, t), rtol=1e-10)

    def test_bound_dominates(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            fs = random_flow_spec(rng, n_null=int(rng.integers(0, 2)))
            y0 = rng.normal(size=fs.dim)
            limit = stationary_state(fs, y0)
            for t in (0.1, 1.0, 10.0):
                exact = np.linalg.norm(mean_cov_time(fs, y0, t).mean - limit.mean)
                assert exact <= distance_bound(fs, y0, t) + 1e-12


class TestMeanCovZ:
    def test_z_zero(self):
        rng = np.random.default_rng(9)
        fs = random_flow_spec(rng)
        y0 = rng.normal(size=fs.dim)
        g = mean_cov_z(fs, y0, 0.0)
        assert np.allclose(g.mean, y0, atol=1e-12)
        assert np.allclose(g.var, fs.sigma0 ** 2, atol=1e-12)

    def test_equal_rates_give_straight_line(self):
        fs = random_flow_spec(np.random.default_rng(10), dim=3, kappa=1.0,
                              alpha_range=(2.0, 2.0))
        y0 = np.random.default_rng(11).normal(size=3)
        for z in (0.0, 0.25, 0.8):
            g = mean_cov_z(fs, y0, z)
            assert np.allclose(g.mean, fs.y1 + (1 - z) * (y0 - fs.y1),
                               atol=1e-12)

    def test_substitution_identity(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            fs = random_flow_spec(rng, n_null=int(rng.integers(0, 3)))
            y0 = rng.normal(size=fs.dim)
            t = float(rng.uniform(0.0, 3.0))
            z = interpolant_mean(fs, t)
            gz = mean_cov_z(fs, y0, z)
            gt = mean_cov_time(fs, y0, t)
            assert np.allclose(gz.mean, gt.mean, rtol=1e-12, atol=1e-12)
            assert np.allclose(gz.var, gt.var, rtol=1e-12, atol=1e-12)

    def test_null_components_frozen(self):
        rng = np.random.default_rng(13)
        fs = random_flow_spec(rng, dim=4, n_null=2)
        y0 = rng.normal(size=4)
        pi_null = fs.spectrum.null_projector()
        for z in (0.0, 0.5, 1.0):
            g = mean_cov_z(fs, y0, z)
            assert np.allclose(pi_null @ g.mean, pi_null @ y0, atol=1e-12)


class TestScore:
    def test_standard_normal(self):
        g = GaussianState(mean=np.zeros(2), var=np.ones(2), basis=np.eye(2))
        assert np.allclose(score(g, np.array([1.0, -2.0])), [-1.0, 2.0])

    def test_zero_at_mean(self):
        rng = np.random.default_rng(14)
        fs = random_flow_spec(rng)
        g = mean_cov_time(fs, rng.normal(size=fs.dim), 0.5)
        assert np.allclose(score(g, g.mean), 0.0, atol=1e-12)

    def test_diagonal_variances(self):
        g = GaussianState(mean=np.zeros(2), var=np.array([1.0, 4.0]),
                          basis=np.eye(2))
        assert np.allclose(score(g, np.array([1.0, 2.0])), [-1.0, -0.5])

    def test_zero_variance_rejected(self):
        g = GaussianState(mean=np.zeros(2), var=np.array([1.0, 0.0]),
                          basis=np.eye(2))
        with pytest.raises(NumericalError):
            score(g, np.zeros(2))

    def test_matches_fd_gradient_of_logpdf(self):
        rng = np.random.default_rng(15)
        fs = random_flow_spec(rng, dim=4)
        g = mean_cov_time(fs, rng.normal(size=4), 0.7)
        y = rng.normal(size=4)
        s = score(g, y)
        h = 1e-6
        fd = np.zeros(4)
        for k in range(4):
            yp, ym = y.copy(), y.copy()
            yp[k] += h
            ym[k] -= h
            fd[k] = (gaussian_logpdf(g, yp) - gaussian_logpdf(g, ym)) / (2 * h)
        assert np.allclose(s, fd, atol=1e-6)


class TestCondFieldTime:
    def test_on_mean_without_diffusion(self):
        rng = np.random.default_rng(16)
        fs = random_flow_spec(rng, dim=3)
        fs = type(fs)(y1=fs.y1, spectrum=fs.spectrum,
                      beta=np.zeros(3), sigma0=fs.sigma0, kappa=fs.kappa,
                      gamma=fs.gamma, flags=fs.flags)
        y0 = rng.normal(size=3)
        t = 0.8
        mu = mean_cov_time(fs, y0, t).mean
        v_y, _ = cond_field_time(fs, mu, t, y0)
        a = fs.basis @ (fs.alphas[:, None] * fs.basis.T)
        assert np.allclose(v_y, -a @ (mu - fs.y1), atol=1e-12)

    def test_transport_tracks_mean(self):
        rng = np.random.default_rng(17)
        for _ in range(5):
            fs = random_flow_spec(rng, n_null=int(rng.integers(0, 2)))
            y0 = rng.normal(size=fs.dim)

            def f(t, y):
                return cond_field_time(fs, y, t, y0)[0]

            end = rk4_integrate(f, mean_cov_time(fs, y0, 0.0).mean, 0.0, 1.5,
                                600)
            target = mean_cov_time(fs, y0, 1.5).mean
            assert np.linalg.norm(end - target) < 1e-6

    def test_stationary_field_vanishes(self):
        # prior already stationary (y0 = y1, sigma0^2 = beta^2 / 2 alpha):
        # drift and score terms cancel pointwise
        rng = np.random.default_rng(18)
        fs = random_flow_spec(rng, dim=3, gamma=2.0, isotropize=True,
                              alpha_range=(0.5, 0.5), sigma0=np.sqrt(2.0))
        # isotropize makes every stationary variance gamma = 2.0 = sigma0^2
        g = mean_cov_time(fs, fs.y1, 1.0)
        for _ in range(100):
            y = g.mean + fs.basis @ (np.sqrt(g.var)
                                     * rng.standard_normal(fs.dim))
            v_y, _ = cond_field_time(fs, y, 1.0, fs.y1)
            assert np.linalg.norm(v_y) < 1e-12

    def test_moment_odes(self):
        # d mu/dt = -A(mu - y1), d var_i/dt = -2 alpha_i var_i + beta_i^2
        rng = np.random.default_rng(19)
        fs = random_flow_spec(rng, dim=4, n_null=1)
        y0 = rng.normal(size=4)
        t, h = 0.6, 1e-5
        gp = mean_cov_time(fs, y0, t + h)
        gm = mean_cov_time(fs, y0, t - h)
        g = mean_cov_time(fs, y0, t)
        dmu = (gp.mean - gm.mean) / (2 * h)
        dvar = (gp.var - gm.var) / (2 * h)
        a = fs.basis @ (fs.alphas[:, None] * fs.basis.T)
        assert np.allclose(dmu, -a @ (g.mean - fs.y1), atol=1e-6)
        assert np.allclose(dvar, -2 * fs.alphas * g.var + fs.beta ** 2,
                           atol=1e-6)


class TestCondFieldFinite:
    def test_reduces_to_ot_style_field(self):
        fs = random_flow_spec(np.random.default_rng(20), dim=3, kappa=1.0,
                              alpha_range=(1.7, 1.7))
        fs = type(fs)(y1=fs.y1, spectrum=fs.spectrum, beta=np.zeros(3),
                      sigma0=fs.sigma0, kappa=fs.kappa, gamma=fs.gamma,
                      flags=fs.flags)
        y0 = np.random.default_rng(21).normal(size=3)
        for z in (0.1, 0.5, 0.9):
            y = mean_cov_z(fs, y0, z).mean
            v, one = cond_field_finite(fs, y, z, y0)
            assert one == 1.0
            assert np.allclose(v, (fs.y1 - y) / (1.0 - z), atol=1e-10)

    def test_z_zero_division(self):
        rng = np.random.default_rng(22)
        fs = random_flow_spec(rng)
        y0 = rng.normal(size=fs.dim)
        y = rng.normal(size=fs.dim)
        v_fin, _ = cond_field_finite(fs, y, 0.0, y0)
        v_t, _ = cond_field_time(fs, y, 0.0, y0)
        assert np.allclose(v_fin, v_t / fs.rate, atol=1e-12)

    def test_z_beyond_cap_rejected(self):
        fs = scalar_spec()
        with pytest.raises(ValidationError):
            cond_field_finite(fs, np.zeros(1), Z_MAX + 1e-5, np.zeros(1))

    def test_transport_over_z(self):
        rng = np.random.default_rng(23)
        for _ in range(5):
            fs = random_flow_spec(rng, n_null=int(rng.integers(0, 2)))
            y0 = rng.normal(size=fs.dim)

            def f(z, y):
                return cond_field_finite(fs, y, min(z, Z_MAX), y0)[0]

            end = rk4_integrate(f, mean_cov_z(fs, y0, 0.0).mean, 0.0, Z_MAX,
                                4000)
            target = mean_cov_z(fs, y0, Z_MAX).mean
            err = np.linalg.norm(end - target) / max(1.0,
                                                     np.linalg.norm(target))
            assert err < 1e-5


class TestOtBaseline:
    def test_prior_end(self):
        y1 = np.array([2.0, -1.0])
        g = ot_path(y1, 0.0, 1e-5)
        assert np.allclose(g.mean, 0.0)
        assert np.allclose(g.var, 1.0)

    def test_data_end(self):
        y1 = np.array([2.0, -1.0])
        g = ot_path(y1, 1.0, 1e-5)
        assert np.allclose(g.mean, y1)
        assert np.allclose(np.sqrt(g.var), 1e-5)

    def test_straight_line_velocity(self):
        y1 = np.array([1.0, 3.0])
        for z in (0.0, 0.4, 0.9):
            v, one = ot_field(z * y1, z, y1, 0.0)
            assert one == 1.0
            assert np.allclose(v, y1, atol=1e-12)


class TestSamplePathPoint:
    def test_prior_moments(self):
        rng = np.random.default_rng(24)
        fs = random_flow_spec(rng, dim=3)
        draws = np.array([sample_path_point(fs, 0.0, rng).y
                          for _ in range(10000)])
        se_mean = 1.0 / np.sqrt(10000)
        assert np.all(np.abs(draws.mean(axis=0)) < 3 * se_mean)
        cov = np.cov(draws.T)
        se_cov = np.sqrt((np.ones((3, 3)) + np.eye(3)) / 10000)
        assert np.all(np.abs(cov - np.eye(3)) < 5 * se_cov)

    def test_zero_variance_is_deterministic(self):
        rng = np.random.default_rng(25)
        fs = random_flow_spec(rng, dim=2)
        fs = type(fs)(y1=fs.y1, spectrum=fs.spectrum, beta=np.zeros(2),
                      sigma0=fs.sigma0, kappa=fs.kappa, gamma=fs.gamma,
                      flags=fs.flags)
        # with beta = 0 every variance vanishes at z = 1
        p1 = sample_path_point(fs, 1.0, np.random.default_rng(1))
        p2 = sample_path_point(fs, 1.0, np.random.default_rng(2))
        assert np.allclose(p1.y, p2.y, atol=1e-15)
        assert np.allclose(p1.y, fs.y1, atol=1e-12)

    def test_seed_determinism(self):
        rng = np.random.default_rng(26)
        fs = random_flow_spec(rng)
        a = sample_path_point(fs, 0.3, np.random.default_rng(7)).y
        b = sample_path_point(fs, 0.3, np.random.default_rng(7)).y
        assert np.array_equal(a, b)

    def test_zero_com_projection(self):
        rng = np.random.default_rng(27)
        fs = random_flow_spec(rng, dim=12)
        for z in (0.0, 0.4, 0.95):
            pt = sample_path_point(fs, z, rng, com_spatial_dim=3)
            assert np.max(np.abs(pt.y.reshape(4, 3).mean(axis=0))) < 1e-10

    def test_z_t_consistency(self):
        rng = np.random.default_rng(28)
        fs = random_flow_spec(rng)
        pt = sample_path_point(fs, 0.6, rng)
        assert np.isclose(interpolant_mean(fs, pt.t), pt.z, atol=1e-12)


class TestIsotropicAlphas:
    def test_data_variant(self):
        y1 = np.array([1.0, 0.0])
        assert np.isclose(isotropic_alpha_data(y1, math.exp(-5.0)), 5.0)

    def test_interp_variant(self):
        assert np.isclose(isotropic_alpha_interp(math.exp(-1.0), 1.0), 1.0)

    def test_design_identity(self):
        rng = np.random.default_rng(29)
        y1 = rng.normal(size=4)
        eps = 0.05 * np.linalg.norm(y1)
        alpha = isotropic_alpha_data(y1, eps)
        assert np.isclose(math.exp(-alpha) * np.linalg.norm(y1), eps,
                          rtol=1e-12)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            isotropic_alpha_data(np.array([1.0]), 2.0)
        with pytest.raises(ValidationError):
            isotropic_alpha_interp(1.5, 1.0)


class TestIsotropicFlowSpecShape:
    def test_identity_hessian_matches_mnist_setup(self):
        fs = build_flow_spec(np.ones(4), np.eye(4) * 3.0, FlowConfig(c=1.0))
        assert np.allclose(fs.alphas, 3.0)
        assert np.allclose(fs.basis, np.eye(4))
