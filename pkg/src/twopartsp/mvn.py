"""Multivariate normal probabilities, densities and the conditioning identity.

``cdf`` computes rectangle probabilities P(W <= upper) for W ~ N(0, cov)
with lower limits at -infinity.  Dimensions one and two use closed /
near-closed forms (Owen's T function for the bivariate case); higher
dimensions use the Genz separation-of-variables transform integrated with
a scrambled Sobol net randomized by digital shifts drawn from a
counter-based generator.  Results are therefore bit-reproducible for a
fixed seed, which keeps quasi-Newton line searches stable downstream, and
the spread across shifts provides the error estimate.

Positive semi-definite but singular covariances are handled by a pivoted
Cholesky that drops zero-variance directions; those coordinates contribute
indicator factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import ndtr, ndtri, owens_t
from scipy.stats import qmc

from .exceptions import DomainError, InputError

__all__ = ["MvnProblem", "CdfResult", "cdf", "mvn_cdf", "log_density",
           "identity_residual", "IdentityCheck", "bvn_cdf"]

_ERR_INFLATE = 3.5          # batch-s.e. multiplier for the reported error
_N_BATCHES = 8
_TINY_PROB = 1e-300
_MAX_UNIFORM = 1.0 - 1e-16
_NET_BITS = 53
_NET_SCALE = float(1 << _NET_BITS)
_BASE_NET_SEED = 20240801   # internal scrambling seed; per-call randomization
                            # happens through digital shifts of this net

# Scrambled Sobol nets cached per dimension as 53-bit integers.  Dyadic
# prefixes of a Sobol sequence are themselves balanced nets, so one array
# serves all sizes; digital shifts (XOR) preserve the net structure.
_SOBOL_CACHE: dict = {}


def _base_net(ndim: int, ns: int) -> np.ndarray:
    pts = _SOBOL_CACHE.get(ndim)
    if pts is None or pts.shape[0] < ns:
        sampler = qmc.Sobol(d=ndim, scramble=True, seed=_BASE_NET_SEED)
        size = max(ns, 1 << 13)
        pts = (sampler.random(size) * _NET_SCALE).astype(np.uint64)
        _SOBOL_CACHE[ndim] = pts
    return pts[:ns]


@dataclass(eq=False)
class MvnProblem:
    """One rectangle probability Phi^(m)(upper; 0, cov)."""

    upper: np.ndarray
    cov: np.ndarray
    tolerance: float = 1e-6
    seed: int = 0
    max_lattice_size: int = 1 << 15

    def __post_init__(self):
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        m = self.upper.size
        if self.cov.shape != (m, m) and m > 0:
            raise InputError(f"cov shape {self.cov.shape} does not match {m} limits")
        if self.tolerance <= 0:
            raise InputError("tolerance must be > 0")
        if np.any(np.isnan(self.upper)):
            raise DomainError("NaN upper limit")
        scale = max(np.max(np.abs(self.cov)), 1.0) if m else 1.0
        if m and np.max(np.abs(self.cov - self.cov.T)) > 1e-10 * scale:
            raise InputError("covariance matrix is not symmetric")


@dataclass(frozen=True)
class CdfResult:
    probability: float
    error_estimate: float


def bvn_cdf(h, k, rho):
    """Standard bivariate normal CDF P(X <= h, Y <= k) with correlation rho.

    All three arguments broadcast together.  Owen's T-function formula,
    accurate to ~1e-15; correlations at +/-1 degenerate to the sharp
    closed forms.
    """
    h = np.asarray(h, dtype=float)
    k = np.asarray(k, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if np.any(np.abs(rho) > 1.0 + 1e-8):
        raise DomainError("correlation outside [-1, 1]")
    h, k, rho = np.broadcast_arrays(h, k, np.clip(rho, -1.0, 1.0))

    near_pos = rho >= 1.0 - 1e-15
    near_neg = rho <= -1.0 + 1e-15
    degenerate = near_pos | near_neg
    rho_safe = np.where(degenerate, 0.0, rho)

    s = np.sqrt(1.0 - rho_safe * rho_safe)
    eps = 1e-13
    zero_h = np.abs(h) < eps
    zero_k = np.abs(k) < eps

    hs = np.where(zero_h, 1.0, h)   # placeholders keep the division finite
    ks = np.where(zero_k, 1.0, k)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        a_h = (k - rho_safe * h) / (hs * s)
        a_k = (h - rho_safe * k) / (ks * s)
    hk = h * k
    beta = np.where(hk < 0, 0.5, np.where(hk > 0, 0.0,
                    np.where(h + k >= 0, 0.0, 0.5)))
    out = (0.5 * (ndtr(h) + ndtr(k))
           - owens_t(np.where(zero_h, 0.0, h), np.where(zero_h, 0.0, a_h))
           - owens_t(np.where(zero_k, 0.0, k), np.where(zero_k, 0.0, a_k))
           - beta)
    if np.any(zero_h | zero_k):
        both = zero_h & zero_k
        only_h = zero_h & ~zero_k
        only_k = zero_k & ~zero_h
        if np.any(both):
            out = np.where(both, 0.25 + np.arcsin(rho_safe) / (2.0 * np.pi), out)
        if np.any(only_h):
            out = np.where(only_h, 0.5 * ndtr(k) - owens_t(k, -rho_safe / s), out)
        if np.any(only_k):
            out = np.where(only_k, 0.5 * ndtr(h) - owens_t(h, -rho_safe / s), out)
    if np.any(degenerate):
        out = np.where(near_pos, ndtr(np.minimum(h, k)), out)
        out = np.where(near_neg, np.maximum(ndtr(h) + ndtr(k) - 1.0, 0.0), out)
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _tvn_cdf(b: np.ndarray, sigma: np.ndarray) -> float:
    """Trivariate normal CDF by quadrature over the most restrictive variable.

    Conditioning on the first variable leaves a bivariate CDF; the outer
    integral runs over the original variable on a truncated range that
    carries all the mass, split into two Gauss-Legendre panels so the
    result is accurate to ~1e-12 and fully deterministic.
    """
    sd = np.sqrt(np.diag(sigma))
    h = b / sd
    corr = sigma / np.outer(sd, sd)
    order = np.argsort(h)
    h = h[order]
    corr = corr[np.ix_(order, order)]
    r12, r13, r23 = corr[0, 1], corr[0, 2], corr[1, 2]
    s2 = np.sqrt(max(1.0 - r12 * r12, 1e-30))
    s3 = np.sqrt(max(1.0 - r13 * r13, 1e-30))
    rho_c = (r23 - r12 * r13) / (s2 * s3)
    rho_c = max(-1.0, min(1.0, rho_c))

    hi = min(h[0], 8.5)
    lo = min(-8.5, h[0] - 12.0)
    total = 0.0
    mid = 0.5 * (lo + hi)
    for a, c in ((lo, mid), (mid, hi)):
        half = 0.5 * (c - a)
        z = a + half * (_GL_NODES + 1.0)
        dens = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        vals = bvn_cdf((h[1] - r12 * z) / s2, (h[2] - r13 * z) / s3, rho_c)
        total += half * np.sum(_GL_WEIGHTS * dens * vals)
    return float(min(max(total, 0.0), 1.0))


def _ordered_cholesky(cov: np.ndarray, upper: np.ndarray):
    """Greedy variable-ordered Cholesky with zero-variance detection.

    Variables are pivoted so the most restrictive limits are integrated
    first, which sharpens the lattice rule.  Directions whose conditional
    variance vanishes are deferred; they enter the integrand as indicator
    factors.

    Returns:
        (L, b, rank): lower factor, permuted limits, numerical rank.

    Raises:
        DomainError: covariance is not positive semi-definite.
    """
    m = upper.size
    c = cov.copy()
    b = upper.copy()
    low = np.full(m, -np.inf)
    lower = np.zeros((m, m))
    y = np.zeros(m)
    diag_scale = max(np.max(np.diag(c)), 1.0)
    eps = 1e-12 * diag_scale

    rank = m
    for i in range(m):
        res = np.diag(c)[i:] - np.sum(lower[i:, :i] ** 2, axis=1)
        if np.any(res < -1e-8 * diag_scale):
            raise DomainError("covariance matrix is not positive semi-definite")
        pos = res > eps
        if not np.any(pos):
            rank = i
            break
        shift = lower[i:, :i] @ y[:i] if i else np.zeros(m - i)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (b[i:] - shift) / np.sqrt(np.maximum(res, eps))
        t[~pos] = np.inf
        j = i + int(np.argmin(ndtr(t)))
        if j != i:
            c[[i, j], :] = c[[j, i], :]
            c[:, [i, j]] = c[:, [j, i]]
            lower[[i, j], :] = lower[[j, i], :]
            b[i], b[j] = b[j], b[i]
        v = c[i, i] - lower[i, :i] @ lower[i, :i]
        lii = np.sqrt(max(v, eps * 0.0 + v))
        lower[i, i] = lii
        if i + 1 < m:
            lower[i + 1:, i] = (c[i + 1:, i] - lower[i + 1:, :i] @ lower[i, :i]) / lii
        ti = (b[i] - lower[i, :i] @ y[:i]) / lii
        e = ndtr(ti)
        phi = np.exp(-0.5 * min(ti * ti, 1400.0)) / np.sqrt(2 * np.pi)
        y[i] = -phi / max(e, 1e-300) if np.isfinite(ti) else 0.0
    return lower, b, rank


def _lattice_sums(lower, b, rank, start, stop, shifts):
    """Per-batch integrand sums over net points [start, stop)."""
    m = b.size
    nb = shifts.shape[0]
    ndim = rank if rank < m else max(rank - 1, 0)
    base = _base_net(max(ndim, 1), stop)[start:stop]
    ns = stop - start

    p = np.ones((nb, ns))
    ys = np.zeros((max(rank, 1), nb, ns))
    for i in range(rank):
        if i == 0:
            t = np.full((nb, ns), b[0] / lower[0, 0])
        else:
            acc = np.einsum("j,jbs->bs", lower[i, :i], ys[:i])
            t = (b[i] - acc) / lower[i, i]
        e = ndtr(t)
        p *= e
        if i < ndim:
            w = (base[:, i][None, :] ^ shifts[:, i][:, None]).astype(float) / _NET_SCALE
            z = np.clip(e * w, _TINY_PROB, _MAX_UNIFORM)
            ys[i] = ndtri(z)
    for j in range(rank, m):
        res = b[j] - np.einsum("j,jbs->bs", lower[j, :rank], ys[:rank]) \
            if rank else np.full((nb, ns), b[j])
        p *= res >= -1e-9 * (1.0 + abs(b[j]) if np.isfinite(b[j]) else 1.0)
    return p.sum(axis=1)


def mvn_cdf(upper, cov, tolerance: float = 1e-6, seed: int = 0,
            max_lattice_size: int = 1 << 15) -> CdfResult:
    """Rectangle probability P(W <= upper), W ~ N(0, cov); see :func:`cdf`."""
    b = np.atleast_1d(np.asarray(upper, dtype=float))
    m = b.size
    if m == 0:
        return CdfResult(1.0, 0.0)
    sigma = np.atleast_2d(np.asarray(cov, dtype=float))
    if np.any(np.isnan(b)) or np.any(np.isnan(sigma)):
        raise DomainError("NaN in limits or covariance")
    if np.any(b == -np.inf):
        return CdfResult(0.0, 0.0)
    diag = np.diag(sigma)
    if np.any(diag < -1e-12 * max(np.max(np.abs(diag)), 1.0)):
        raise DomainError("negative variance on the diagonal")

    # marginalize unconstrained coordinates, resolve zero-variance ones
    keep = b != np.inf
    zero_var = diag <= 1e-14 * max(np.max(diag), 1.0)
    if np.any(zero_var & keep):
        if np.any(b[zero_var & keep] < 0):
            return CdfResult(0.0, 0.0)
        keep &= ~zero_var
    if not np.all(keep):
        b = b[keep]
        sigma = sigma[np.ix_(keep, keep)]
        m = b.size
        if m == 0:
            return CdfResult(1.0, 0.0)

    sd = np.sqrt(np.diag(sigma))
    if m == 1:
        return CdfResult(float(ndtr(b[0] / sd[0])), 1e-15)
    if m == 2:
        rho = sigma[0, 1] / (sd[0] * sd[1])
        if abs(rho) > 1.0 + 1e-8:
            raise DomainError("covariance matrix is not positive semi-definite")
        return CdfResult(float(bvn_cdf(b[0] / sd[0], b[1] / sd[1], rho)), 5e-15)

    lower, bp, rank = _ordered_cholesky(sigma, b)
    if rank == 0:
        val = 1.0
        for j in range(m):
            val *= 1.0 if bp[j] >= -1e-9 else 0.0
        return CdfResult(val, 0.0)
    if m == 3 and rank == 3:
        return CdfResult(_tvn_cdf(b, sigma), 5e-13)

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    ndim = rank if rank < m else max(rank - 1, 0)
    shifts = rng.integers(0, 1 << _NET_BITS, size=(_N_BATCHES, max(ndim, 1)),
                          dtype=np.uint64)
    sums = np.zeros(_N_BATCHES)
    done = 0
    ns = 64
    while True:
        sums += _lattice_sums(lower, bp, rank, done, ns, shifts)
        done = ns
        means = sums / done
        est = float(np.mean(means))
        se = float(np.std(means, ddof=1) / np.sqrt(_N_BATCHES))
        err = _ERR_INFLATE * se
        if err <= tolerance or done >= max_lattice_size:
            return CdfResult(min(max(est, 0.0), 1.0), max(err, 1e-16))
        ns = min(ns * 4, max_lattice_size)


def cdf(problem: MvnProblem) -> CdfResult:
    """Evaluate the rectangle probability described by ``problem``.

    Returns:
        CdfResult with the probability and a conservative absolute-error
        estimate.  Dimensions 0-2 are closed form; beyond that the lattice
        rule runs until the error estimate drops below ``tolerance`` or the
        point budget is exhausted (the achieved error is always returned).

    Raises:
        DomainError: covariance not positive semi-definite / NaN inputs.
    """
    return mvn_cdf(problem.upper, problem.cov, problem.tolerance, problem.seed,
                   problem.max_lattice_size)


def log_density(x, mean, cov) -> float:
    """Log of the multivariate normal density at ``x``.

    Raises:
        DomainError: covariance singular or not positive definite.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mu = np.atleast_1d(np.asarray(mean, dtype=float))
    sigma = np.atleast_2d(np.asarray(cov, dtype=float))
    m = x.size
    if mu.size != m or sigma.shape != (m, m):
        raise InputError("dimension mismatch in log_density")
    try:
        factor = cho_factor(sigma, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DomainError("covariance is singular or not positive definite") from exc
    diff = x - mu
    solved = cho_solve(factor, diff)
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    return float(-0.5 * (m * np.log(2.0 * np.pi) + logdet + diff @ solved))


@dataclass(frozen=True)
class IdentityCheck:
    residual: float
    mc_se: float
    lhs: float
    rhs: float


def identity_residual(omega1_limits, eta, sigma11, sigma12, sigma22,
                      n_mc: int = 100_000, seed: int = 0) -> IdentityCheck:
    """Test harness for the conditional-CDF representation of a marginal CDF.

    The marginal probability Phi^(k1)(omega1; 0, sigma22) equals the average
    of the conditional CDF of the first block given the second, taken over
    draws of the second block from N(eta, sigma11).  This function computes
    the left side exactly and the right side by Monte Carlo, returning the
    absolute difference together with the Monte Carlo standard error.

    ``sigma12`` is the (k2 x k1) cross-covariance block.
    """
    w1 = np.atleast_1d(np.asarray(omega1_limits, dtype=float))
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    s11 = np.atleast_2d(np.asarray(sigma11, dtype=float))
    s22 = np.atleast_2d(np.asarray(sigma22, dtype=float))
    s12 = np.asarray(sigma12, dtype=float).reshape(eta.size, w1.size)
    k1, k2 = w1.size, eta.size

    stacked = np.block([[s22, s12.T], [s12, s11]])
    valid, _ = _psd_ok(stacked)
    if not valid:
        raise DomainError("stacked covariance is not positive semi-definite")

    lhs = mvn_cdf(w1, s22, tolerance=1e-9, seed=seed).probability

    factor = cho_factor(s11, lower=True)
    a = cho_solve(factor, s12)               # k2 x k1, equals sigma11^-1 sigma12
    cond_cov = s22 - s12.T @ a
    cond_cov = 0.5 * (cond_cov + cond_cov.T)

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    chol11 = np.linalg.cholesky(s11 + 1e-14 * np.eye(k2) * max(np.max(np.diag(s11)), 1.0))
    draws = eta[None, :] + rng.standard_normal((n_mc, k2)) @ chol11.T
    shifted = w1[None, :] - (draws - eta[None, :]) @ a    # n_mc x k1

    sd = np.sqrt(np.maximum(np.diag(cond_cov), 1e-300))
    if k1 == 1:
        vals = ndtr(shifted[:, 0] / sd[0])
    elif k1 == 2:
        rho = cond_cov[0, 1] / (sd[0] * sd[1])
        vals = bvn_cdf(shifted[:, 0] / sd[0], shifted[:, 1] / sd[1], rho)
    else:
        vals = np.empty(n_mc)
        for i in range(n_mc):
            vals[i] = mvn_cdf(shifted[i], cond_cov, tolerance=1e-4,
                              seed=seed + 1 + i).probability
    rhs = float(np.mean(vals))
    mc_se = float(np.std(vals, ddof=1) / np.sqrt(n_mc))
    return IdentityCheck(residual=abs(lhs - rhs), mc_se=mc_se, lhs=lhs, rhs=rhs)


def _psd_ok(a: np.ndarray):
    eig = np.linalg.eigvalsh(0.5 * (a + a.T))
    mx = max(float(np.max(np.abs(eig))), 1e-300)
    return eig[0] >= -1e-9 * mx, float(eig[0])
