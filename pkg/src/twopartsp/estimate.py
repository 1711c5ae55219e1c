"""Maximum-likelihood fitting, observed information and Wald/LR inference.

Optimization runs on the unconstrained scale (log variances, atanh
correlations, logit decay rate) with BFGS and central finite-difference
gradients.  The multivariate-normal CDF inside the likelihood is evaluated
with per-patient fixed randomization, so the objective is a deterministic,
smooth function of the parameters and finite differences are stable.

Standard errors come from the observed information (numerical Hessian of
the negative log-likelihood at the optimum, evaluated with a tighter CDF
tolerance), mapped to the natural scale by the delta method.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.optimize
from scipy.linalg import cho_factor, cho_solve
from scipy.special import log_ndtr, ndtr
from scipy.stats import chi2

from . import marginal as _marginal
from .exceptions import ConfigError, DomainError, IdentifiabilityError
from .likelihood import (NEG_INF, loglik_total_prepared, prepare_data)
from .model import (ContinuousDist, ModelSpec, ParameterVector,
                    Parameterization, free_parameter_names, make_params,
                    n_free_parameters, pack, unpack, unpack_jacobian_diagonal,
                    active_scalar_fields)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 200
    grad_tol: float = 1e-5
    mvn_tolerance: float = 1e-6
    hessian_mvn_tolerance: Optional[float] = None   # default: mvn_tolerance / 100
    fd_step: float = 1e-5
    hessian_step: float = 1e-4
    seed: int = 0
    quad_order: int = 51          # overall-RE integration order
    engine: str = "closed"        # "closed" or "quadrature" (RE families)
    compute_se: bool = True
    compute_xi: bool = True
    threads: int = 1

    @property
    def hessian_tol(self) -> float:
        return (self.hessian_mvn_tolerance if self.hessian_mvn_tolerance is not None
                else self.mvn_tolerance / 100.0)


@dataclass(eq=False)
class Convergence:
    iterations: int
    gradient_norm: float
    status: str
    n_evaluations: int
    boundary_flags: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


@dataclass(eq=False)
class FitResult:
    spec: ModelSpec
    params_hat: ParameterVector
    loglik: float
    aic: float
    names: list
    estimates: np.ndarray                  # natural scale, pack order
    se: Optional[np.ndarray]               # natural scale; None unless info PD
    wald_ci95: Optional[np.ndarray]        # (k, 2)
    info_pd: bool
    info_diagnostics: dict
    convergence: Convergence
    xi_hat: Optional[np.ndarray] = None
    xi_se: Optional[np.ndarray] = None
    n_patients: int = 0
    n_observations: int = 0
    fit_seconds: float = 0.0


# ---------------------------------------------------------------------------
# Starting values
# ---------------------------------------------------------------------------

def _probit_newton(X: np.ndarray, u: np.ndarray, iters: int = 40) -> np.ndarray:
    """Plain probit regression by Newton scoring with step halving."""
    p = X.shape[1]
    beta = np.zeros(p)
    s = 2.0 * u - 1.0

    def nll(b):
        return -float(np.sum(log_ndtr(s * (X @ b))))

    current = nll(beta)
    for _ in range(iters):
        eta = X @ beta
        z = s * eta
        lam = np.exp(-0.5 * z * z - 0.5 * np.log(2 * np.pi) - log_ndtr(z))
        grad = X.T @ (s * lam)
        w = lam * (lam + z)
        hess = (X * w[:, None]).T @ X + 1e-8 * np.eye(p)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        for damp in (1.0, 0.5, 0.25, 0.1):
            cand = beta + damp * step
            val = nll(cand)
            if val <= current:
                beta, current = cand, val
                break
        else:
            break
        if np.max(np.abs(step)) < 1e-10:
            break
    return beta


def default_init(data, spec: ModelSpec) -> ParameterVector:
    """Two-stage warm start ignoring the latent structure.

    Probit regression for beta, least squares on the positive rows for the
    continuous coefficients, residual variance for sigma2; variance
    parameters start at 0.5, theta at 0.1, correlations at 0, the decay
    rate at 0.9.
    """
    X = np.vstack([p.X for p in data])
    Z = np.vstack([p.Z for p in data])
    u = np.concatenate([p.u for p in data]).astype(float)
    y = np.concatenate([p.y for p in data])
    beta = _probit_newton(X, u)

    pos = u > 0
    if spec.continuous_dist is ContinuousDist.LOG_NORMAL:
        target = np.log(np.maximum(y, 1e-12))
    else:
        target = spec.transform.apply(y)
    if np.any(pos):
        coef, *_ = np.linalg.lstsq(Z[pos], target[pos], rcond=None)
        resid = target[pos] - Z[pos] @ coef
        dof = max(int(np.sum(pos)) - Z.shape[1], 1)
        sigma2 = max(float(resid @ resid) / dof, 1e-3)
    else:
        coef = np.zeros(Z.shape[1])
        sigma2 = 1.0

    defaults = {"theta": 0.1, "sigma2_b": 0.5, "sigma2_c": 0.5, "rho": 0.0,
                "sigma2_gb": 0.5, "sigma2_gc": 0.5, "rho_g": 0.0, "rho_g1": 0.9,
                "sigma2_wb": 0.5, "sigma2_wc": 0.5, "rho_w": 0.0}
    scalars = {f: defaults[f] for f, _ in active_scalar_fields(spec) if f != "sigma2"}
    return make_params(spec, beta=beta, gamma_or_alpha=coef, sigma2=sigma2, **scalars)


# ---------------------------------------------------------------------------
# Objective machinery
# ---------------------------------------------------------------------------

class _Objective:
    """Negative total log-likelihood on the unconstrained scale."""

    def __init__(self, prepared, data, spec, opts: FitOptions):
        self.prepared = prepared
        self.data = data
        self.spec = spec
        self.opts = opts
        self.mvn_tol = opts.mvn_tolerance
        self.n_evals = 0

    def value(self, v: np.ndarray) -> float:
        self.n_evals += 1
        try:
            params = unpack(v, self.spec)
        except DomainError:
            return np.inf
        if self.opts.engine == "quadrature":
            from .oracle import re_quadrature_loglik
            ll = re_quadrature_loglik(self.data, self.spec, params,
                                      quad_order=max(self.opts.quad_order, 21))
        else:
            ll = loglik_total_prepared(self.prepared, self.spec, params,
                                       self.mvn_tol, self.opts.quad_order)
        if not np.isfinite(ll):
            return np.inf
        return -ll

    def gradient(self, v: np.ndarray) -> np.ndarray:
        g = np.empty(v.size)
        for i in range(v.size):
            h = self.opts.fd_step * (1.0 + abs(v[i]))
            e = np.zeros(v.size)
            e[i] = h
            g[i] = (self.value(v + e) - self.value(v - e)) / (2.0 * h)
        return g


def _check_identifiable(data, spec: ModelSpec):
    total_pos = sum(int(np.sum(p.u)) for p in data)
    if total_pos == 0:
        raise IdentifiabilityError(
            "all outcomes are zero: the continuous-component parameters "
            "(coefficients, sigma2) cannot be identified")


def _boundary_flags(params: ParameterVector, spec: ModelSpec, tol: float = 1e-4):
    flags = []
    for f, kind in active_scalar_fields(spec):
        x = getattr(params, f)
        if kind == "variance" and x < tol:
            flags.append(f"{f} near zero")
        elif kind == "correlation" and 1.0 - abs(x) < tol:
            flags.append(f"{f} near +/-1")
        elif kind == "unit_interval" and min(x, 1.0 - x) < tol:
            flags.append(f"{f} near boundary")
    return flags


def fit(data, spec: ModelSpec, init: Optional[ParameterVector] = None,
        opts: FitOptions = FitOptions()) -> FitResult:
    """Maximize the log-likelihood and assemble estimates with inference.

    Raises:
        IdentifiabilityError: all outcomes zero with continuous parameters free.
        ConfigError: an infeasible initial parameter vector.
    """
    if len(data) == 0:
        raise ConfigError("empty dataset")
    _check_identifiable(data, spec)
    if opts.engine == "quadrature" and not spec.process_family.is_random_effect_only:
        raise ConfigError("the quadrature engine supports random-effect families only")

    t0 = time.perf_counter()
    prepared = prepare_data(data, spec, opts.seed)
    if init is None:
        init = default_init(data, spec)
    try:
        v0 = pack(init, spec)
    except DomainError as exc:
        raise ConfigError(f"infeasible initial parameters: {exc}") from exc

    obj = _Objective(prepared, data, spec, opts)
    f0 = obj.value(v0)
    if not np.isfinite(f0):
        raise ConfigError("initial parameters give an infeasible likelihood")

    res = scipy.optimize.minimize(
        obj.value, v0, jac=obj.gradient, method="BFGS",
        options={"gtol": opts.grad_tol, "maxiter": opts.max_iter})

    v_hat = res.x
    f_hat = res.fun
    # monotone acceptance: never report something worse than the start
    if f_hat > f0:
        v_hat, f_hat = v0, f0
    params_hat = unpack(v_hat, spec)
    loglik = -float(f_hat)
    k = n_free_parameters(spec)
    gnorm = float(np.max(np.abs(res.jac))) if res.jac is not None else np.nan

    if res.status == 0 or gnorm <= opts.grad_tol:
        status = "converged"
    elif res.status == 1:
        status = "max_iterations"
    else:
        status = "no_progress" if f_hat >= f0 else "precision_loss"
    conv = Convergence(iterations=int(res.nit), gradient_norm=gnorm, status=status,
                       n_evaluations=obj.n_evals,
                       boundary_flags=_boundary_flags(params_hat, spec))

    se = wald = None
    info_pd = False
    diagnostics: dict = {}
    if opts.compute_se:
        info, info_pd, diagnostics = observed_information(
            data, spec, params_hat, step=opts.hessian_step, opts=opts)
        if info_pd:
            factor = cho_factor(info, lower=True)
            cov_unc = cho_solve(factor, np.eye(k))
            jac = unpack_jacobian_diagonal(v_hat, spec)
            cov_nat = cov_unc * np.outer(jac, jac)
            se = np.sqrt(np.maximum(np.diag(cov_nat), 0.0))
            est = _natural_estimates(params_hat, spec)
            wald = np.column_stack([est - 1.96 * se, est + 1.96 * se])
            diagnostics["cov_unconstrained"] = cov_unc

    xi_hat = xi_se = None
    if opts.compute_xi and spec.process_family.kind != "rw":
        xi_hat, xi_se = _xi_with_se(v_hat, spec, diagnostics.get("cov_unconstrained"))

    return FitResult(
        spec=spec, params_hat=params_hat, loglik=loglik,
        aic=-2.0 * loglik + 2.0 * k, names=free_parameter_names(spec),
        estimates=_natural_estimates(params_hat, spec), se=se, wald_ci95=wald,
        info_pd=info_pd, info_diagnostics={kk: vv for kk, vv in diagnostics.items()
                                           if kk != "cov_unconstrained"},
        convergence=conv, xi_hat=xi_hat, xi_se=xi_se,
        n_patients=len(data), n_observations=sum(p.m for p in data),
        fit_seconds=time.perf_counter() - t0)


def _natural_estimates(params: ParameterVector, spec: ModelSpec) -> np.ndarray:
    vals = list(params.beta) + list(params.gamma_or_alpha)
    vals += [getattr(params, f) for f, _ in active_scalar_fields(spec)]
    return np.array(vals, dtype=float)


def observed_information(data, spec: ModelSpec, params_hat: ParameterVector,
                         step: float = 1e-4, opts: FitOptions = FitOptions()):
    """Observed information: central-difference Hessian of -loglik.

    Evaluated on the unconstrained scale with a tighter CDF tolerance than
    the optimization (information estimates are sensitive to integration
    noise).  Returns (matrix, positive_definite, diagnostics).
    """
    prepared = prepare_data(data, spec, opts.seed)
    hess_opts = replace(opts, mvn_tolerance=opts.hessian_tol)
    obj = _Objective(prepared, data, spec, hess_opts)
    v = pack(params_hat, spec)
    k = v.size
    h = step * (1.0 + np.abs(v))
    f0 = obj.value(v)

    hess = np.empty((k, k))
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h[i]
        fp = obj.value(v + ei)
        fm = obj.value(v - ei)
        hess[i, i] = (fp - 2.0 * f0 + fm) / (h[i] * h[i])
        for j in range(i + 1, k):
            ej = np.zeros(k)
            ej[j] = h[j]
            fpp = obj.value(v + ei + ej)
            fpm = obj.value(v + ei - ej)
            fmp = obj.value(v - ei + ej)
            fmm = obj.value(v - ei - ej)
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])

    hess = 0.5 * (hess + hess.T)
    diagnostics = {}
    try:
        np.linalg.cholesky(hess)
        pd = True
    except np.linalg.LinAlgError:
        pd = False
    eigvals = np.linalg.eigvalsh(hess)
    diagnostics["min_eigenvalue"] = float(eigvals[0])
    diagnostics["condition_number"] = (float(eigvals[-1] / eigvals[0])
                                       if eigvals[0] > 0 else np.inf)
    if not pd:
        logger.warning("observed information is not positive definite "
                       "(min eigenvalue %.3g); standard errors unavailable",
                       eigvals[0])
    return hess, pd, diagnostics


def _xi_with_se(v_hat: np.ndarray, spec: ModelSpec, cov_unc: Optional[np.ndarray]):
    """Population-level probit coefficients and delta-method SEs."""
    def xi_of(v):
        params = unpack(v, spec)
        s2 = _marginal.binary_latent_variance(spec, params)
        return _marginal.xi_from_beta(params.beta, s2)

    xi = xi_of(v_hat)
    if cov_unc is None:
        return xi, None
    k = v_hat.size
    grad = np.empty((xi.size, k))
    for i in range(k):
        h = 1e-6 * (1.0 + abs(v_hat[i]))
        e = np.zeros(k)
        e[i] = h
        grad[:, i] = (xi_of(v_hat + e) - xi_of(v_hat - e)) / (2.0 * h)
    xi_cov = grad @ cov_unc @ grad.T
    return xi, np.sqrt(np.maximum(np.diag(xi_cov), 0.0))


@dataclass(frozen=True)
class LrTestResult:
    statistic: float
    p_value: float
    df: int
    warning: Optional[str] = None


def lr_test(fit_full: FitResult, fit_nested: FitResult, df: int,
            boundary: bool = False) -> LrTestResult:
    """Generalized likelihood ratio test of a nested restriction.

    ``boundary=True`` applies the 50:50 chi-square mixture appropriate for
    one parameter restricted to its boundary; the default is the plain
    chi-square, which is conservative in that case.
    """
    stat = 2.0 * (fit_full.loglik - fit_nested.loglik)
    warning = None
    if stat < -1e-6:
        warning = ("nested model has higher likelihood than the full model: "
                   "optimization of the full model likely failed")
    stat_eval = max(stat, 0.0)
    if boundary:
        upper = chi2.sf(stat_eval, df)
        lower = chi2.sf(stat_eval, df - 1) if df > 1 else float(stat_eval <= 0.0)
        p = 0.5 * (upper + lower)
    else:
        p = chi2.sf(stat_eval, df)
    return LrTestResult(statistic=float(stat), p_value=float(p), df=df,
                        warning=warning)
