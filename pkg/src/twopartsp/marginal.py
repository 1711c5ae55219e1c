"""Closed-form overall marginal means and their reparameterizations.

The overall marginal mean averages the outcome over both the zero
mechanism and the latent processes.  For a probit binary part with latent
value b and a continuous part with latent value c, the mean of the
transformed outcome at one visit has a closed form in terms of the visit
variances/correlation of (b, c).  Solving that closed form for the
continuous-part intercept term ``delta`` lets covariates act directly on
the overall marginal mean (the coefficient vector alpha), while the
likelihood machinery is unchanged.

All functions broadcast over numpy arrays, so per-visit quantities can be
computed in one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import log_ndtr, ndtr

from .covariance import CovarianceBlocks
from .exceptions import DomainError, UnsupportedFamilyError
from .model import ContinuousDist, ModelSpec, ParameterVector

_SQRT_2PI = np.sqrt(2.0 * np.pi)
_TINY = 1e-300


def _phi(x):
    return np.exp(-0.5 * np.square(x)) / _SQRT_2PI


@dataclass(frozen=True)
class MarginalContext:
    """Latent-scale second moments at one visit (or arrays across visits).

    For shared-process models only ``sigma2_b`` and ``theta`` are set; for
    two-process models ``sigma2_c`` and ``rho_bc`` describe the continuous
    latent value.
    """

    sigma2_b: object
    sigma2_c: Optional[object] = None
    rho_bc: Optional[object] = None
    theta: Optional[object] = None

    @property
    def shared(self) -> bool:
        return self.theta is not None


def context_from_blocks(spec: ModelSpec, params: ParameterVector,
                        blocks: CovarianceBlocks) -> MarginalContext:
    """Per-visit marginal context vectors read off the covariance blocks."""
    var_b = np.diag(blocks.sigma_b).copy()
    if spec.process_family.is_shared:
        return MarginalContext(sigma2_b=var_b, theta=params.theta)
    var_c = np.diag(blocks.sigma_c).copy()
    cross = np.diag(blocks.sigma_bc).copy()
    denom = np.sqrt(np.maximum(var_b * var_c, _TINY))
    rho = np.clip(cross / denom, -1.0, 1.0)
    return MarginalContext(sigma2_b=var_b, sigma2_c=var_c, rho_bc=rho)


def _cross_moment(ctx: MarginalContext):
    """Cov(b, c) at the visit: theta*sigma2_b (shared) or rho*sigma_b*sigma_c."""
    if ctx.shared:
        return np.asarray(ctx.theta, dtype=float) * np.asarray(ctx.sigma2_b, dtype=float)
    return (np.asarray(ctx.rho_bc, dtype=float)
            * np.sqrt(np.asarray(ctx.sigma2_b, dtype=float)
                      * np.asarray(ctx.sigma2_c, dtype=float)))


def marginal_mean_shared(delta, xb, ctx: MarginalContext):
    """Overall marginal mean of g(Y) for a shared-process model."""
    s2b = np.asarray(ctx.sigma2_b, dtype=float)
    root = np.sqrt(1.0 + s2b)
    z = np.asarray(xb, dtype=float) / root
    return ndtr(z) * np.asarray(delta, dtype=float) + ctx.theta * s2b / root * _phi(z)


def marginal_mean_correlated(delta, xb, ctx: MarginalContext):
    """Overall marginal mean of g(Y) for a two-process model."""
    s2b = np.asarray(ctx.sigma2_b, dtype=float)
    root = np.sqrt(1.0 + s2b)
    z = np.asarray(xb, dtype=float) / root
    cross = _cross_moment(ctx)
    return ndtr(z) * np.asarray(delta, dtype=float) + cross / root * _phi(z)


def _continuous_latent_variance(ctx: MarginalContext):
    """Var(c) at the visit: theta^2*sigma2_b (shared) or sigma2_c."""
    if ctx.shared:
        return np.square(ctx.theta) * np.asarray(ctx.sigma2_b, dtype=float)
    return np.asarray(ctx.sigma2_c, dtype=float)


def lognormal_marginal_mean(delta, xb, ctx: MarginalContext):
    """Overall marginal mean of Y for the log-normal continuous part.

    E[Phi(xb + b) exp(delta + c)] over bivariate-normal (b, c) equals, by
    exponential tilting, exp(delta + Var(c)/2) * Phi((xb + Cov(b, c)) /
    sqrt(1 + Var(b))).
    """
    s2b = np.asarray(ctx.sigma2_b, dtype=float)
    root = np.sqrt(1.0 + s2b)
    delta = np.asarray(delta, dtype=float)
    xb = np.asarray(xb, dtype=float)
    expo = delta + 0.5 * _continuous_latent_variance(ctx)
    shift = _cross_moment(ctx)
    return np.exp(expo) * ndtr((xb + shift) / root)


def delta_from_alpha(za, xb, ctx: MarginalContext, dist: ContinuousDist):
    """Intercept term delta that makes the marginal mean equal Z'alpha.

    Under the Gaussian continuous part the overall marginal mean of g(Y)
    becomes exactly ``za``; under the log-normal part the overall marginal
    mean of Y becomes exp(za).
    """
    za = np.asarray(za, dtype=float)
    xb = np.asarray(xb, dtype=float)
    if not np.all(np.isfinite(xb)):
        raise DomainError("non-finite binary linear predictor")
    s2b = np.asarray(ctx.sigma2_b, dtype=float)
    root = np.sqrt(1.0 + s2b)
    cross = _cross_moment(ctx)
    if dist is ContinuousDist.GAUSSIAN:
        z = xb / root
        return (za - cross / root * _phi(z)) / np.maximum(ndtr(z), _TINY)
    curvature = 0.5 * _continuous_latent_variance(ctx)
    return za - curvature - log_ndtr((xb + cross) / root)


def delta_vector(spec: ModelSpec, params: ParameterVector, xb, za,
                 blocks: CovarianceBlocks):
    """Per-visit delta values for the marginal-mean parameterization."""
    ctx = context_from_blocks(spec, params, blocks)
    return delta_from_alpha(za, xb, ctx, spec.continuous_dist)


def xi_from_beta(beta, sigma2_b, spec: Optional[ModelSpec] = None):
    """Population-level probit coefficients xi = beta / sqrt(1 + sigma2_b).

    ``sigma2_b`` is the (visit-invariant) variance of the binary-part
    latent value.  Random-walk families have visit-dependent variance, so
    the map is not defined for them.
    """
    if spec is not None and spec.process_family.kind == "rw":
        raise UnsupportedFamilyError(
            "population-level probit coefficients require a visit-invariant "
            "latent variance; random-walk families are not supported")
    sigma2_b = float(sigma2_b)
    if sigma2_b < 0:
        raise DomainError("sigma2_b must be nonnegative")
    return np.asarray(beta, dtype=float) / np.sqrt(1.0 + sigma2_b)


def binary_latent_variance(spec: ModelSpec, params: ParameterVector) -> float:
    """Stationary variance of the binary-part latent value B(t).

    Raises:
        UnsupportedFamilyError: random-walk families (variance grows in t).
    """
    kind = spec.process_family.kind
    if kind == "rw":
        raise UnsupportedFamilyError("latent variance is visit-dependent for random walks")
    total = params.sigma2_b if params.sigma2_b is not None else 0.0
    if kind in ("eou", "ou"):
        total += params.sigma2_gb
    return float(total)
