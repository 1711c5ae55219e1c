import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import ndtr

from twopartsp.covariance import build_blocks
from twopartsp.exceptions import UnsupportedFamilyError
from twopartsp.marginal import (MarginalContext, binary_latent_variance,
                                context_from_blocks, delta_from_alpha,
                                lognormal_marginal_mean,
                                marginal_mean_correlated, marginal_mean_shared,
                                xi_from_beta)
from twopartsp.model import ContinuousDist, ProcessFamily

from conftest import params_for, spec_for

GH_X, GH_W = hermegauss(201)
GH_W = GH_W / np.sqrt(2 * np.pi)


def shared_quadrature(fn, sigma2_b):
    b = np.sqrt(sigma2_b) * GH_X
    return float(np.sum(GH_W * fn(b)))


def correlated_quadrature(fn, sigma2_b, sigma2_c, rho):
    x, w = hermegauss(101)
    w = w / np.sqrt(2 * np.pi)
    z1, z2 = np.meshgrid(x, x, indexing="ij")
    ww = np.outer(w, w)
    b = np.sqrt(sigma2_b) * z1
    c = np.sqrt(sigma2_c) * (rho * z1 + np.sqrt(1 - rho ** 2) * z2)
    return float(np.sum(ww * fn(b, c)))


class TestSharedGaussian:
    def test_no_heterogeneity(self):
        ctx = MarginalContext(sigma2_b=1e-300, theta=0.4)
        assert marginal_mean_shared(2.0, 0.7, ctx) == pytest.approx(
            ndtr(0.7) * 2.0, abs=1e-12)

    def test_theta_zero_half(self):
        ctx = MarginalContext(sigma2_b=1e-300, theta=0.0)
        assert marginal_mean_shared(2.0, 0.0, ctx) == pytest.approx(1.0, abs=1e-12)

    def test_vs_quadrature(self, rng):
        for _ in range(100):
            s2b = rng.uniform(0.05, 4.0)
            th = rng.uniform(-1.0, 1.0)
            delta = rng.uniform(-2.0, 3.0)
            xb = rng.uniform(-2.0, 2.0)
            ctx = MarginalContext(sigma2_b=s2b, theta=th)
            quad = shared_quadrature(lambda b: ndtr(xb + b) * (delta + th * b), s2b)
            closed = marginal_mean_shared(delta, xb, ctx)
            assert closed == pytest.approx(quad, rel=1e-9, abs=1e-9)


class TestCorrelatedGaussian:
    def test_zero_correlation(self):
        ctx = MarginalContext(sigma2_b=0.8, sigma2_c=0.5, rho_bc=0.0)
        expected = ndtr(0.4 / np.sqrt(1.8)) * 2.0
        assert marginal_mean_correlated(2.0, 0.4, ctx) == pytest.approx(expected)

    def test_reduces_to_shared_when_moments_match(self):
        s2b, s2c, rho = 0.8, 0.5, 0.6
        theta = rho * np.sqrt(s2c / s2b)
        ctx_c = MarginalContext(sigma2_b=s2b, sigma2_c=s2c, rho_bc=rho)
        ctx_s = MarginalContext(sigma2_b=s2b, theta=theta)
        assert marginal_mean_correlated(1.4, 0.3, ctx_c) == pytest.approx(
            marginal_mean_shared(1.4, 0.3, ctx_s), abs=1e-12)

    def test_vs_quadrature(self, rng):
        for _ in range(100):
            s2b = rng.uniform(0.05, 3.0)
            s2c = rng.uniform(0.05, 2.0)
            rho = rng.uniform(-0.95, 0.95)
            delta = rng.uniform(-2.0, 3.0)
            xb = rng.uniform(-2.0, 2.0)
            ctx = MarginalContext(sigma2_b=s2b, sigma2_c=s2c, rho_bc=rho)
            quad = correlated_quadrature(
                lambda b, c: ndtr(xb + b) * (delta + c), s2b, s2c, rho)
            assert marginal_mean_correlated(delta, xb, ctx) == pytest.approx(
                quad, rel=1e-8, abs=1e-8)


class TestLogNormal:
    def test_no_heterogeneity(self):
        ctx = MarginalContext(sigma2_b=1e-300, theta=0.4)
        assert lognormal_marginal_mean(1.0, 0.5, ctx) == pytest.approx(
            np.exp(1.0) * ndtr(0.5), rel=1e-12)

    def test_theta_zero_decouples(self):
        ctx = MarginalContext(sigma2_b=0.9, theta=0.0)
        assert lognormal_marginal_mean(1.0, 0.5, ctx) == pytest.approx(
            np.exp(1.0) * ndtr(0.5 / np.sqrt(1.9)), rel=1e-12)

    def test_shared_vs_quadrature(self, rng):
        for _ in range(100):
            s2b = rng.uniform(0.05, 3.0)
            th = rng.uniform(-0.8, 0.8)
            delta = rng.uniform(-1.0, 1.5)
            xb = rng.uniform(-2.0, 2.0)
            ctx = MarginalContext(sigma2_b=s2b, theta=th)
            quad = shared_quadrature(
                lambda b: ndtr(xb + b) * np.exp(delta + th * b), s2b)
            assert lognormal_marginal_mean(delta, xb, ctx) == pytest.approx(
                quad, rel=1e-8)

    def test_correlated_vs_quadrature(self, rng):
        for _ in range(100):
            s2b = rng.uniform(0.05, 3.0)
            s2c = rng.uniform(0.05, 1.5)
            rho = rng.uniform(-0.95, 0.95)
            delta = rng.uniform(-1.0, 1.5)
            xb = rng.uniform(-2.0, 2.0)
            ctx = MarginalContext(sigma2_b=s2b, sigma2_c=s2c, rho_bc=rho)
            quad = correlated_quadrature(
                lambda b, c: ndtr(xb + b) * np.exp(delta + c), s2b, s2c, rho)
            assert lognormal_marginal_mean(delta, xb, ctx) == pytest.approx(
                quad, rel=1e-8)


class TestDeltaRoundTrip:
    def test_gaussian_no_heterogeneity(self):
        ctx = MarginalContext(sigma2_b=1e-300, theta=0.4)
        za, xb = 1.5, 0.6
        assert delta_from_alpha(za, xb, ctx, ContinuousDist.GAUSSIAN) == \
            pytest.approx(za / ndtr(xb), rel=1e-12)

    @pytest.mark.parametrize("dist", [ContinuousDist.GAUSSIAN,
                                      ContinuousDist.LOG_NORMAL])
    def test_round_trip_shared_and_correlated(self, dist, rng):
        for _ in range(100):
            za = rng.uniform(-1.0, 2.0)
            xb = rng.uniform(-2.0, 2.0)
            ctx_s = MarginalContext(sigma2_b=rng.uniform(0.05, 3.0),
                                    theta=rng.uniform(-0.8, 0.8))
            ctx_c = MarginalContext(sigma2_b=rng.uniform(0.05, 3.0),
                                    sigma2_c=rng.uniform(0.05, 1.5),
                                    rho_bc=rng.uniform(-0.95, 0.95))
            for ctx in (ctx_s, ctx_c):
                d = delta_from_alpha(za, xb, ctx, dist)
                if dist is ContinuousDist.GAUSSIAN:
                    mm = (marginal_mean_shared(d, xb, ctx) if ctx.shared
                          else marginal_mean_correlated(d, xb, ctx))
                    assert mm == pytest.approx(za, abs=1e-12)
                else:
                    assert lognormal_marginal_mean(d, xb, ctx) == pytest.approx(
                        np.exp(za), rel=1e-12)

    def test_monte_carlo_consistency(self, rng):
        s2b, th, za, xb = 1.1, 0.45, 1.2, 0.3
        ctx = MarginalContext(sigma2_b=s2b, theta=th)
        d = delta_from_alpha(za, xb, ctx, ContinuousDist.GAUSSIAN)
        b = rng.normal(0.0, np.sqrt(s2b), 1_000_000)
        vals = ndtr(xb + b) * (d + th * b)
        mc = vals.mean()
        se = vals.std() / 1000.0
        assert abs(mc - za) < 4 * se


class TestXi:
    def test_zero_variance_identity(self):
        assert np.allclose(xi_from_beta([1.0, -0.5], 0.0), [1.0, -0.5])

    def test_scaling(self):
        assert xi_from_beta([1.0], 3.0)[0] == pytest.approx(0.5)

    def test_marginal_probability_vs_quadrature(self, rng):
        for _ in range(20):
            s2b = rng.uniform(0.1, 4.0)
            xb = rng.uniform(-2.0, 2.0)
            xi = xi_from_beta([xb], s2b)[0]
            quad = shared_quadrature(lambda b: ndtr(xb + b), s2b)
            assert ndtr(xi) == pytest.approx(quad, abs=1e-10)

    def test_rw_family_rejected(self):
        spec = spec_for(ProcessFamily.SHARED_RW)
        with pytest.raises(UnsupportedFamilyError):
            xi_from_beta([1.0], 1.0, spec)
        with pytest.raises(UnsupportedFamilyError):
            binary_latent_variance(spec, params_for(spec))

    def test_latent_variance_by_family(self):
        spec = spec_for(ProcessFamily.SHARED_EOU)
        params = params_for(spec, sigma2_b=0.8, sigma2_gb=0.7)
        assert binary_latent_variance(spec, params) == pytest.approx(1.5)
        spec = spec_for(ProcessFamily.SHARED_RE)
        assert binary_latent_variance(spec, params_for(spec, sigma2_b=0.8)) == \
            pytest.approx(0.8)


class TestContextFromBlocks:
    def test_rw_context_is_visit_dependent(self):
        spec = spec_for(ProcessFamily.CORRELATED_RW)
        params = params_for(spec)
        blocks = build_blocks(spec, params, [0.0, 1.0, 2.0])
        ctx = context_from_blocks(spec, params, blocks)
        assert ctx.sigma2_b[0] < ctx.sigma2_b[2]
        assert np.all(np.abs(ctx.rho_bc) <= 1.0)
