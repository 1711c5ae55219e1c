import numpy as np
import pytest
from scipy.special import log_ndtr, ndtr

from twopartsp.exceptions import DomainError, UnsupportedFamilyError
from twopartsp.likelihood import (assemble_design, loglik_overall_re,
                                  loglik_patient, loglik_patient_reduced,
                                  loglik_total, prepare_patient)
from twopartsp.model import (ContinuousDist, ModelSpec, Parameterization,
                             PatientRecord, ProcessFamily)
from twopartsp.mvn import mvn_cdf

from conftest import (ALL_FAMILIES, TWO_PROCESS, params_for, random_patient,
                      spec_for)


class TestAssembleDesign:
    def test_shared_family_loadings(self):
        spec = spec_for(ProcessFamily.SHARED_RW)
        params = params_for(spec, theta=0.2)
        d = assemble_design([1, 0], spec, params)
        assert np.allclose(d.A1, np.diag([1.0, -1.0]))
        assert np.allclose(d.A3, np.diag([1.0, 0.0]))
        assert np.allclose(d.A4, np.diag([0.2, 0.0]))
        assert d.d == 2

    def test_two_process_loadings(self):
        spec = spec_for(ProcessFamily.CORRELATED_RW)
        d = assemble_design([1, 1], spec, params_for(spec))
        assert d.d == 4
        assert np.allclose(d.A2, np.hstack([np.eye(2), np.zeros((2, 2))]))
        assert np.allclose(d.A4, np.hstack([np.zeros((2, 2)), np.eye(2)]))

    def test_re_dimensions(self):
        spec = spec_for(ProcessFamily.SHARED_RE)
        assert assemble_design([1, 0, 1], spec, params_for(spec)).d == 1
        spec = spec_for(ProcessFamily.CORRELATED_RE)
        assert assemble_design([1, 0, 1], spec, params_for(spec)).d == 2

    def test_all_zero_outcomes_kill_continuous_loading(self):
        spec = spec_for(ProcessFamily.SHARED_OU)
        d = assemble_design([0, 0], spec, params_for(spec))
        assert np.all(d.A4 == 0)


class TestClosedFormValues:
    def test_single_zero_visit_shared_re(self):
        """All-zero outcome collapses to Phi(-x'b; 0, 1 + sigma2_b)."""
        spec = spec_for(ProcessFamily.SHARED_RE, p=1, q=1)
        params = params_for(spec, beta=[0.0], reg=[0.5], sigma2=1.0,
                            theta=0.3, sigma2_b=3.0)
        pat = PatientRecord(id="a", times=[0.0], y=[0.0], X=[[1.0]], Z=[[1.0]])
        assert loglik_patient(pat, spec, params) == pytest.approx(
            np.log(0.5), abs=1e-12)

    def test_single_zero_visit_nonzero_beta(self):
        spec = spec_for(ProcessFamily.SHARED_RE, p=1, q=1)
        params = params_for(spec, beta=[0.7], reg=[0.5], sigma2=1.0,
                            theta=0.3, sigma2_b=3.0)
        pat = PatientRecord(id="a", times=[0.0], y=[0.0], X=[[1.0]], Z=[[1.0]])
        expected = log_ndtr(-0.7 / 2.0)
        assert loglik_patient(pat, spec, params) == pytest.approx(expected, abs=1e-10)

    def test_theta_zero_factorizes(self, rng):
        """With theta = 0 the two components decouple exactly."""
        spec = spec_for(ProcessFamily.SHARED_OU)
        params = params_for(spec, theta=0.0, sigma2_gb=0.9, rho_g1=0.7, sigma2=0.3)
        pat = random_patient(rng, 4)
        ll = loglik_patient(pat, spec, params, mvn_tol=1e-9, seed=3)
        # independent factorized computation
        lag = np.abs(pat.times[:, None] - pat.times[None, :])
        sig = 0.9 * 0.7 ** lag
        s = 2.0 * pat.u - 1.0
        omega = np.eye(4) + sig * np.outer(s, s)
        upper = s * (pat.X @ params.beta)
        binary = np.log(mvn_cdf(upper, omega, tolerance=1e-10, seed=99).probability)
        mu = pat.Z @ params.gamma_or_alpha
        pos = pat.u > 0
        resid = pat.y[pos] - mu[pos]
        cont = float(np.sum(-0.5 * np.log(2 * np.pi * 0.3)
                            - 0.5 * resid ** 2 / 0.3))
        # both sides carry their own CDF integration error (~1e-6)
        assert ll == pytest.approx(binary + cont, abs=1e-5)

    def test_lognormal_all_positive_reduces_to_gaussian_on_logs(self, rng):
        """With every outcome positive, the log-normal likelihood equals the
        Gaussian likelihood of log y plus the Jacobian, once the mean shift
        is absorbed into the coefficients."""
        spec_ln = spec_for(ProcessFamily.SHARED_RE,
                           dist=ContinuousDist.LOG_NORMAL)
        params_ln = params_for(spec_ln, sigma2=0.4)
        pat = random_patient(rng, 3, pos_prob=1.0)
        assert np.all(pat.u == 1)
        ll_ln = loglik_patient(pat, spec_ln, params_ln, mvn_tol=1e-9, seed=5)

        spec_g = spec_for(ProcessFamily.SHARED_RE)
        # Gaussian model on log y with intercept shifted by -sigma2/2
        shift = np.zeros(2)
        shift[0] = -0.5 * params_ln.sigma2
        params_g = params_ln.replace(
            gamma_or_alpha=params_ln.gamma_or_alpha + shift)
        logpat = PatientRecord(id=pat.id, times=pat.times, y=np.log(pat.y) + 10,
                               X=pat.X, Z=pat.Z)
        # +10 keeps outcomes positive; undo through the Z intercept
        params_g = params_g.replace(
            gamma_or_alpha=params_g.gamma_or_alpha + np.array([10.0, 0.0]))
        ll_g = loglik_patient(logpat, spec_g, params_g, mvn_tol=1e-9, seed=5)
        jacobian = -float(np.sum(np.log(pat.y)))
        assert ll_ln == pytest.approx(ll_g + jacobian, abs=1e-9)

    def test_lognormal_requires_positive_values(self):
        spec = spec_for(ProcessFamily.SHARED_RE, dist=ContinuousDist.LOG_NORMAL)
        pat = PatientRecord(id=1, times=[0.0, 1.0], y=[0.0, 1.0],
                            X=np.ones((2, 2)), Z=np.ones((2, 2)), u=[1, 1])
        with pytest.raises(DomainError):
            prepare_patient(pat, spec)


class TestReducedRoute:
    @pytest.mark.parametrize("family", TWO_PROCESS)
    def test_reduced_equals_full(self, family, rng):
        spec = spec_for(family)
        params = params_for(spec)
        for m in (1, 3, 5):
            pat = random_patient(rng, m)
            full = loglik_patient(pat, spec, params, mvn_tol=1e-7, seed=2)
            red = loglik_patient_reduced(pat, spec, params, mvn_tol=1e-7, seed=2)
            assert red == pytest.approx(full, abs=1e-8)

    def test_all_zero_outcomes_binary_only(self, rng):
        spec = spec_for(ProcessFamily.CORRELATED_RW)
        params = params_for(spec)
        times = np.cumsum(rng.uniform(0.3, 1.0, 3))
        pat = PatientRecord(id="z", times=times, y=np.zeros(3),
                            X=np.column_stack([np.ones(3), rng.standard_normal(3)]),
                            Z=np.column_stack([np.ones(3), rng.standard_normal(3)]))
        ll = loglik_patient_reduced(pat, spec, params, mvn_tol=1e-9, seed=4)
        from twopartsp.covariance import build_blocks
        blocks = build_blocks(spec, params, times)
        s = -np.ones(3)
        omega = np.eye(3) + blocks.sigma_b * np.outer(s, s)
        upper = s * (pat.X @ params.beta)
        expected = np.log(mvn_cdf(upper, omega, tolerance=1e-11, seed=9).probability)
        assert ll == pytest.approx(expected, abs=1e-7)

    def test_shared_family_rejected(self, rng):
        spec = spec_for(ProcessFamily.SHARED_RE)
        with pytest.raises(UnsupportedFamilyError):
            loglik_patient_reduced(random_patient(rng, 2), spec, params_for(spec))


class TestTotals:
    def test_single_patient_matches_patient(self, rng):
        spec = spec_for(ProcessFamily.SHARED_RW)
        params = params_for(spec)
        pat = random_patient(rng, 4)
        total = loglik_total([pat], spec, params, mvn_tol=1e-6, seed=7)
        single = loglik_patient(pat, spec, params, mvn_tol=1e-6, seed=7)
        assert total == pytest.approx(single, abs=1e-8)

    def test_duplication_additivity(self, rng):
        spec = spec_for(ProcessFamily.SHARED_OU)
        params = params_for(spec)
        data = [random_patient(rng, m, pid=f"p{i}") for i, m in
                enumerate([2, 3, 4])]
        base = loglik_total(data, spec, params, mvn_tol=1e-7, seed=1)
        trip = loglik_total(data * 3, spec, params, mvn_tol=1e-7, seed=1)
        assert trip == pytest.approx(3 * base, abs=1e-9)

    def test_order_invariance(self, rng):
        spec = spec_for(ProcessFamily.CORRELATED_RE)
        params = params_for(spec)
        data = [random_patient(rng, m, pid=f"p{i}") for i, m in
                enumerate([1, 2, 3, 4, 5])]
        a = loglik_total(data, spec, params, seed=3)
        b = loglik_total(data[::-1], spec, params, seed=3)
        assert a == pytest.approx(b, abs=1e-10)


class TestReLimitEquivalence:
    def test_shared_eou_decay_one_matches_shared_re(self, rng):
        """Serial decay at 1 with matched variance reproduces the pure
        random-effect model."""
        data = [random_patient(rng, m, pid=i) for i, m in enumerate([2, 3, 4, 2])]
        spec_eou = spec_for(ProcessFamily.SHARED_EOU)
        params_eou = params_for(spec_eou, sigma2_b=1e-12, sigma2_gb=1.1,
                                rho_g1=1.0 - 1e-12, theta=0.35)
        spec_re = spec_for(ProcessFamily.SHARED_RE)
        params_re = params_for(spec_re, sigma2_b=1.1, theta=0.35)
        ll_eou = loglik_total(data, spec_eou, params_eou, mvn_tol=1e-9, seed=2)
        ll_re = loglik_total(data, spec_re, params_re, mvn_tol=1e-9, seed=2)
        assert ll_eou == pytest.approx(ll_re, abs=1e-6)


class TestOverallRe:
    def _patient(self, rng):
        return random_patient(rng, 3)

    def test_degenerate_variance_matches_no_random_effect(self, rng):
        spec = spec_for(ProcessFamily.SHARED_RE,
                        parameterization=Parameterization.OVERALL_RE)
        params = params_for(spec, sigma2_b=1e-12, theta=0.3, sigma2=0.3)
        pat = self._patient(rng)
        ll = loglik_overall_re(pat, spec, params, quad_order=51)
        xb = pat.X @ params.beta
        za = pat.Z @ params.gamma_or_alpha
        direct = 0.0
        for j in range(pat.m):
            pj = ndtr(xb[j])
            direct += np.log(pj) if pat.u[j] else np.log(1 - pj)
            if pat.u[j]:
                mean = za[j] / pj
                direct += (-0.5 * np.log(2 * np.pi * 0.3)
                           - 0.5 * (pat.y[j] - mean) ** 2 / 0.3)
        assert ll == pytest.approx(direct, abs=1e-6)

    def test_self_convergence(self, rng):
        spec = spec_for(ProcessFamily.SHARED_RE,
                        parameterization=Parameterization.OVERALL_RE)
        params = params_for(spec, sigma2_b=0.9, theta=0.3)
        pat = self._patient(rng)
        lo = loglik_overall_re(pat, spec, params, quad_order=51)
        hi = loglik_overall_re(pat, spec, params, quad_order=201)
        assert lo == pytest.approx(hi, abs=1e-8)

    def test_all_zero_patient_matches_binary_likelihood(self, rng):
        spec = spec_for(ProcessFamily.SHARED_RE,
                        parameterization=Parameterization.OVERALL_RE)
        params = params_for(spec, sigma2_b=1.2, theta=0.3)
        times = np.cumsum(rng.uniform(0.4, 1.0, 3))
        pat = PatientRecord(id="zz", times=times, y=np.zeros(3),
                            X=np.column_stack([np.ones(3), rng.standard_normal(3)]),
                            Z=np.column_stack([np.ones(3), rng.standard_normal(3)]))
        ll = loglik_overall_re(pat, spec, params, quad_order=101)
        spec_c = spec_for(ProcessFamily.SHARED_RE)
        params_c = params_for(spec_c, sigma2_b=1.2, theta=0.3)
        ll_c = loglik_patient(pat, spec_c, params_c, mvn_tol=1e-10, seed=1)
        assert ll == pytest.approx(ll_c, abs=1e-7)

    def test_low_order_rejected(self, rng):
        from twopartsp.exceptions import ConfigError
        spec = spec_for(ProcessFamily.SHARED_RE,
                        parameterization=Parameterization.OVERALL_RE)
        with pytest.raises(ConfigError):
            loglik_overall_re(self._patient(rng), spec, params_for(spec),
                              quad_order=3)


class TestMarginalMeanParameterization:
    @pytest.mark.parametrize("family", [ProcessFamily.SHARED_RE,
                                        ProcessFamily.SHARED_OU,
                                        ProcessFamily.CORRELATED_RW])
    @pytest.mark.parametrize("dist", [ContinuousDist.GAUSSIAN,
                                      ContinuousDist.LOG_NORMAL])
    def test_marginal_mean_path_evaluates(self, family, dist, rng):
        spec = spec_for(family, dist=dist,
                        parameterization=Parameterization.MARGINAL_MEAN)
        params = params_for(spec)
        pat = random_patient(rng, 3)
        val = loglik_patient(pat, spec, params, mvn_tol=1e-6, seed=1)
        assert np.isfinite(val)
