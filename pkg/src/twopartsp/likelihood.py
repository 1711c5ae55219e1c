"""Closed-form per-patient log-likelihood contributions.

Both model components share one latent vector l with covariance Sigma_l.
Completing the square in l collapses every random-effects integral into a
single m-dimensional normal CDF with limits ``A1*mu_b + A2*h`` and
covariance ``I + A2 H^-1 A2'``, where ``H = A4'A4/sigma2 + Sigma_l^-1``
is the posterior precision of l given the continuous outcomes.

Two evaluation routes are provided:

* :func:`loglik_patient` evaluates the expression literally in the
  dimension of l (2m for two-process families), factorizing Sigma_l.
* :func:`loglik_patient_reduced` uses the Woodbury identity to express
  every posterior quantity through m x m blocks, never forming Sigma_l.
  This is the default hot path; for two-process families it cuts the
  matrix work from 2m- to m-dimensional.

The log-normal continuous part replaces the Gaussian target with
``log(y + 1 - u)`` (zero outcomes contribute log 1 = 0), shifts the
conditional mean by ``-sigma2/2`` on the positive rows and adds the
Jacobian ``-sum(log y)`` over positive rows.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import log_ndtr

from . import marginal as _marginal
from .covariance import CovarianceBlocks, build_blocks, random_effect_covariance
from .exceptions import ConfigError, DomainError, UnsupportedFamilyError
from .model import (ContinuousDist, ModelSpec, ParameterVector,
                    Parameterization, PatientRecord, ProcessFamily)

logger = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)
NEG_INF = float("-inf")


@dataclass(eq=False)
class DesignMatrices:
    """Loading matrices tying the latent vector to the two components.

    ``A1 = diag(2u-1)`` flips probit limits for zero outcomes,
    ``A3 = diag(u)`` selects positive rows, and ``A2``/``A4`` (m x d) load
    the latent vector on the binary and continuous parts.
    """

    A1: np.ndarray
    A2: np.ndarray
    A3: np.ndarray
    A4: np.ndarray
    d: int


def assemble_design(u, spec: ModelSpec, params: ParameterVector) -> DesignMatrices:
    """Family-specific design matrices for the latent vector."""
    u = np.asarray(u, dtype=float)
    m = u.size
    s = 2.0 * u - 1.0
    a1 = np.diag(s)
    a3 = np.diag(u)
    fam = spec.process_family
    if fam.is_two_process:
        zero = np.zeros((m, m))
        a2 = np.hstack([np.diag(s), zero])
        a4 = np.hstack([zero, np.diag(u)])
        d = 2 * m
    elif fam is ProcessFamily.CORRELATED_RE:
        a2 = np.column_stack([s, np.zeros(m)])
        a4 = np.column_stack([np.zeros(m), u])
        d = 2
    elif fam is ProcessFamily.SHARED_RE:
        a2 = s.reshape(m, 1)
        a4 = (params.theta * u).reshape(m, 1)
        d = 1
    else:  # shared process families
        a2 = np.diag(s)
        a4 = np.diag(params.theta * u)
        d = m
    return DesignMatrices(A1=a1, A2=a2, A3=a3, A4=a4, d=d)


# ---------------------------------------------------------------------------
# Prepared per-patient quantities that do not depend on the parameters
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PreparedPatient:
    id: object
    times: np.ndarray
    u: np.ndarray          # float 0/1
    s: np.ndarray          # 2u - 1
    n_pos: int
    target: np.ndarray     # g(y) or log(y + 1 - u), zeros on u == 0 rows
    log_jacobian: float    # 0 for Gaussian; -sum log y over positives otherwise
    X: np.ndarray
    Z: np.ndarray
    seed: int


def _patient_seed(global_seed: int, patient_id) -> int:
    tag = zlib.crc32(str(patient_id).encode("utf-8"))
    return (int(global_seed) * 0x9E3779B1 + tag) & 0x7FFFFFFFFFFFFFFF


def prepare_patient(patient: PatientRecord, spec: ModelSpec,
                    seed: int = 0) -> PreparedPatient:
    u = patient.u.astype(float)
    y = patient.y
    if spec.continuous_dist is ContinuousDist.LOG_NORMAL:
        pos = u > 0
        if np.any(y[pos] <= 0):
            raise DomainError(f"patient {patient.id}: log-normal part needs "
                              "strictly positive outcomes where u = 1")
        target = np.log(y + 1.0 - u)
        log_jac = -float(np.sum(np.log(y[pos]))) if np.any(pos) else 0.0
    else:
        target = np.where(u > 0, spec.transform.apply(y), 0.0)
        log_jac = 0.0
    if not np.all(np.isfinite(target)):
        raise DomainError(f"patient {patient.id}: transformed outcome not finite")
    return PreparedPatient(
        id=patient.id, times=patient.times, u=u, s=2.0 * u - 1.0,
        n_pos=int(np.sum(u)), target=target, log_jacobian=log_jac,
        X=patient.X, Z=patient.Z, seed=_patient_seed(seed, patient.id))


def prepare_data(data: Sequence[PatientRecord], spec: ModelSpec,
                 seed: int = 0) -> list:
    return [prepare_patient(p, spec, seed) for p in data]


def _mean_vectors(spec: ModelSpec, params: ParameterVector, prep: PreparedPatient,
                  blocks: CovarianceBlocks):
    """(mu_b, mu_c) with the marginal-mean reparameterization applied."""
    mu_b = prep.X @ params.beta
    linear_c = prep.Z @ params.gamma_or_alpha
    if spec.parameterization is Parameterization.MARGINAL_MEAN:
        mu_c = _marginal.delta_vector(spec, params, mu_b, linear_c, blocks)
    else:
        mu_c = linear_c
    return mu_b, mu_c


def _residual_target(spec: ModelSpec, params: ParameterVector,
                     prep: PreparedPatient, mu_c: np.ndarray) -> np.ndarray:
    shift = 0.5 * params.sigma2 if spec.continuous_dist is ContinuousDist.LOG_NORMAL else 0.0
    return prep.target - prep.u * (mu_c - shift)


def _scalar_terms(prep: PreparedPatient, sigma2: float, r: np.ndarray,
                  quad: float, logdet: float) -> float:
    return (-0.5 * prep.n_pos * (_LOG_2PI + np.log(sigma2))
            - 0.5 * logdet
            - 0.5 * float(r @ r) / sigma2
            + 0.5 * quad
            + prep.log_jacobian)


# ---------------------------------------------------------------------------
# Reduced (m x m) route
# ---------------------------------------------------------------------------

def _projected_blocks(spec: ModelSpec, params: ParameterVector,
                      prep: PreparedPatient, blocks: CovarianceBlocks):
    """(A2 S A2', A2 S A4', A4 S A4') as m x m blocks, S = Cov(latent)."""
    s, u = prep.s, prep.u
    if spec.process_family.is_shared:
        theta = params.theta
        sig = blocks.sigma_b
        s_bb = sig * np.outer(s, s)
        s_bc = theta * sig * np.outer(s, u)
        s_cc = (theta * theta) * sig * np.outer(u, u)
    else:
        s_bb = blocks.sigma_b * np.outer(s, s)
        s_bc = blocks.sigma_bc * np.outer(s, u)
        s_cc = blocks.sigma_c * np.outer(u, u)
    return s_bb, s_bc, s_cc


def patient_mvn_parts_reduced(spec, params, prep, blocks, mu_b, mu_c):
    """(upper, omega, scalar log terms) via the m x m Woodbury route."""
    sigma2 = params.sigma2
    r = _residual_target(spec, params, prep, mu_c)
    s_bb, s_bc, s_cc = _projected_blocks(spec, params, prep, blocks)
    m = r.size
    big = np.eye(m) + s_cc / sigma2
    factor = cho_factor(big, lower=True)
    sol_r = cho_solve(factor, r)
    limit_shift = s_bc @ sol_r / sigma2
    omega = np.eye(m) + s_bb - s_bc @ cho_solve(factor, s_bc.T) / sigma2
    omega = 0.5 * (omega + omega.T)
    quad = float(r @ (s_cc @ sol_r)) / sigma2 ** 2
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    upper = prep.s * mu_b + limit_shift
    scalar = _scalar_terms(prep, sigma2, r, quad, logdet)
    return upper, omega, scalar


# ---------------------------------------------------------------------------
# Full (dimension of l) route
# ---------------------------------------------------------------------------

def _latent_covariance(spec: ModelSpec, params: ParameterVector,
                       blocks: CovarianceBlocks) -> np.ndarray:
    fam = spec.process_family
    if fam.is_two_process:
        return blocks.assembled
    if fam.is_random_effect_only:
        return random_effect_covariance(spec, params)
    return blocks.sigma_b


def patient_mvn_parts_full(spec, params, prep, blocks, mu_b, mu_c):
    """(upper, omega, scalar log terms) evaluated in the latent dimension."""
    sigma2 = params.sigma2
    r = _residual_target(spec, params, prep, mu_c)
    design = assemble_design(prep.u, spec, params)
    sigma_l = _latent_covariance(spec, params, blocks)
    chol_l = np.linalg.cholesky(sigma_l)
    b4 = design.A4 @ chol_l                      # m x d
    b2 = design.A2 @ chol_l
    d = design.d
    mt = np.eye(d) + b4.T @ b4 / sigma2
    factor = cho_factor(mt, lower=True)
    t = b4.T @ r / sigma2
    w = cho_solve(factor, t)
    limit_shift = b2 @ w
    omega = np.eye(r.size) + b2 @ cho_solve(factor, b2.T)
    omega = 0.5 * (omega + omega.T)
    quad = float((b4 @ w) @ r) / sigma2
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    upper = prep.s * mu_b + limit_shift
    scalar = _scalar_terms(prep, sigma2, r, quad, logdet)
    return upper, omega, scalar


# ---------------------------------------------------------------------------
# Public per-patient and total log-likelihoods
# ---------------------------------------------------------------------------

def _loglik_prepared(prep: PreparedPatient, spec: ModelSpec, params: ParameterVector,
                     mvn_tol: float, reduced: bool = True) -> float:
    from .engine import log_prob_from_parts

    try:
        blocks = build_blocks(spec, params, prep.times)
        mu_b, mu_c = _mean_vectors(spec, params, prep, blocks)
        parts = patient_mvn_parts_reduced if reduced else patient_mvn_parts_full
        upper, omega, scalar = parts(spec, params, prep, blocks, mu_b, mu_c)
    except np.linalg.LinAlgError:
        return NEG_INF
    rank1_sign = prep.s if spec.process_family.is_random_effect_only else None
    return log_prob_from_parts(upper, omega, mvn_tol, prep.seed, rank1_sign) + scalar


def loglik_patient(patient: PatientRecord, spec: ModelSpec, params: ParameterVector,
                   mvn_tol: float = 1e-6, seed: int = 0) -> float:
    """Log-likelihood contribution of one patient (reference route).

    Evaluates the closed form in the dimension of the latent vector.
    Returns ``-inf`` when the parameters make the latent covariance
    infeasible (treated as a rejected optimizer step, not an error).
    """
    prep = prepare_patient(patient, spec, seed)
    return _loglik_prepared(prep, spec, params, mvn_tol, reduced=False)


def loglik_patient_reduced(patient: PatientRecord, spec: ModelSpec,
                           params: ParameterVector, mvn_tol: float = 1e-6,
                           seed: int = 0) -> float:
    """Per-patient log-likelihood through the m x m dimension reduction.

    Only defined for two-process families, where it avoids every
    2m-dimensional factorization; numerically equal to
    :func:`loglik_patient` to ~1e-8.
    """
    if not spec.process_family.is_two_process:
        raise UnsupportedFamilyError(
            "the dimension-reduced route applies to two-process families")
    prep = prepare_patient(patient, spec, seed)
    return _loglik_prepared(prep, spec, params, mvn_tol, reduced=True)


def loglik_total(data: Sequence[PatientRecord], spec: ModelSpec,
                 params: ParameterVector, mvn_tol: float = 1e-6,
                 seed: int = 0, quad_order: int = 51) -> float:
    """Total log-likelihood over patients (deterministic summation order)."""
    if len(data) == 0:
        raise ConfigError("empty dataset")
    prepared = prepare_data(data, spec, seed)
    return loglik_total_prepared(prepared, spec, params, mvn_tol, quad_order)


def loglik_total_prepared(prepared: Sequence[PreparedPatient], spec: ModelSpec,
                          params: ParameterVector, mvn_tol: float = 1e-6,
                          quad_order: int = 51) -> float:
    from .engine import GroupedData, loglik_by_patient

    if spec.parameterization is Parameterization.OVERALL_RE:
        vals = np.array([_overall_re_prepared(p, spec, params, quad_order)
                         for p in prepared])
    else:
        grouped = GroupedData.from_prepared(prepared)
        vals = loglik_by_patient(grouped, spec, params, mvn_tol)
    if not np.all(np.isfinite(vals)):
        bad = [prepared[i].id for i in np.nonzero(~np.isfinite(vals))[0][:10]]
        logger.debug("infeasible likelihood for patients %s", bad)
        return NEG_INF
    return float(np.sum(vals))


# ---------------------------------------------------------------------------
# Overall random-effect parameterization (shared RE family only)
# ---------------------------------------------------------------------------

def loglik_overall_re(patient: PatientRecord, spec: ModelSpec,
                      params: ParameterVector, quad_order: int = 51) -> float:
    """Per-patient log-likelihood for the overall random-effect form.

    The conditional mean of the positives is (Z'alpha + theta*b) divided by
    the occurrence probability, so no closed form exists; a mode-centered
    Gauss-Hermite rule integrates over the single random effect.
    """
    if spec.parameterization is not Parameterization.OVERALL_RE:
        raise ConfigError("patient-level overall-RE likelihood requires an "
                          "overall_re parameterization")
    if quad_order < 5:
        raise ConfigError("quad_order must be at least 5")
    prep = prepare_patient(patient, spec, 0)
    return _overall_re_prepared(prep, spec, params, quad_order)


def _overall_re_prepared(prep: PreparedPatient, spec: ModelSpec,
                         params: ParameterVector, quad_order: int) -> float:
    if quad_order < 5:
        raise ConfigError("quad_order must be at least 5")
    sigma_b = np.sqrt(params.sigma2_b)
    sigma2 = params.sigma2
    theta = params.theta
    xb = prep.X @ params.beta
    za = prep.Z @ params.gamma_or_alpha
    u, gy = prep.u, prep.target
    pos = u > 0

    def logf(b):
        # b: (k,) values of the random effect
        eta = xb[None, :] + b[:, None]
        log_bin = np.where(u[None, :] > 0, log_ndtr(eta), log_ndtr(-eta)).sum(axis=1)
        if np.any(pos):
            prob = np.exp(log_ndtr(eta[:, pos]))
            mean = (za[None, pos] + theta * b[:, None]) / np.maximum(prob, 1e-300)
            resid = gy[None, pos] - mean
            log_cont = (-0.5 * (_LOG_2PI + np.log(sigma2))
                        - 0.5 * resid ** 2 / sigma2).sum(axis=1)
        else:
            log_cont = np.zeros(b.size)
        return log_bin + log_cont - 0.5 * (b / sigma_b) ** 2 \
            - 0.5 * _LOG_2PI - np.log(sigma_b)

    return _adaptive_ghq_1d(logf, scale_hint=sigma_b, order=quad_order)


def _adaptive_ghq_1d(logf, scale_hint: float, order: int) -> float:
    """log of the integral of exp(logf) over the real line, mode-centered."""
    from numpy.polynomial.hermite_e import hermegauss

    # crude mode search on a grid, then a few Newton refinements
    grid = np.linspace(-6 * scale_hint, 6 * scale_hint, 41)
    vals = logf(grid)
    mode = float(grid[int(np.argmax(vals))])
    h = max(1e-4 * scale_hint, 1e-8)
    for _ in range(30):
        trio = logf(np.array([mode - h, mode, mode + h]))
        g1 = (trio[2] - trio[0]) / (2 * h)
        g2 = (trio[2] - 2 * trio[1] + trio[0]) / (h * h)
        if g2 >= -1e-12:
            break
        step = -g1 / g2
        step = float(np.clip(step, -2 * scale_hint, 2 * scale_hint))
        mode += step
        if abs(step) < 1e-10 * scale_hint:
            break
    trio = logf(np.array([mode - h, mode, mode + h]))
    g2 = (trio[2] - 2 * trio[1] + trio[0]) / (h * h)
    scale = 1.0 / np.sqrt(-g2) if g2 < -1e-12 else scale_hint

    nodes, weights = hermegauss(order)
    z = mode + scale * nodes
    logvals = logf(z) + 0.5 * nodes ** 2 + np.log(weights) + np.log(scale)
    top = np.max(logvals)
    return float(top + np.log(np.sum(np.exp(logvals - top))))
