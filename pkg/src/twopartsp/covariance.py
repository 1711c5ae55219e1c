"""Per-patient covariance blocks of the latent processes at the visit times.

Every family's covariance of ``B_i(t)`` (binary part) and, for two-process
families, ``C_i(t)`` (continuous part) decomposes into a constant
random-effect layer plus a serial layer:

* exponential decay (``eou``/``ou``): ``sigma2_g * rate**|t_j - t_k|``
* random walk (``rw``): ``sigma2_w * (min(t_j, t_k) - t_1)``
* random effects only (``re``): constant blocks.

Time units are taken as-is; the decay rate is per unit of time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import DomainError, InputError
from .model import ModelSpec, ParameterVector, ProcessFamily


@dataclass(eq=False)
class CovarianceBlocks:
    """Covariance blocks of the latent values at one patient's visit times.

    ``sigma_c``/``sigma_bc`` are None for single-process (shared) families.
    ``assembled`` stacks [B; C] for two-process families and equals
    ``sigma_b`` otherwise.
    """

    sigma_b: np.ndarray
    sigma_c: Optional[np.ndarray]
    sigma_bc: Optional[np.ndarray]
    assembled: np.ndarray

    @property
    def m(self) -> int:
        return self.sigma_b.shape[0]

    def visit_context(self, j: int):
        """(var_b, var_c, corr_bc) of the latent pair at visit ``j``.

        For shared families ``var_c``/``corr_bc`` are None: the continuous
        loading is described by theta instead.
        """
        vb = float(self.sigma_b[j, j])
        if self.sigma_c is None:
            return vb, None, None
        vc = float(self.sigma_c[j, j])
        cbc = float(self.sigma_bc[j, j])
        denom = np.sqrt(vb * vc)
        corr = cbc / denom if denom > 0 else 0.0
        return vb, vc, corr


def _check_times(times: np.ndarray) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 1:
        raise InputError("times must be a nonempty 1-d array")
    if not np.all(np.isfinite(times)):
        raise InputError("non-finite visit time")
    if np.any(np.diff(times) <= 0):
        raise InputError("times must be strictly increasing")
    return times


def _serial_kernels(spec: ModelSpec, params: ParameterVector, times: np.ndarray):
    """Within-process serial kernels (variance 1-scaled factors absorbed)."""
    kind = spec.process_family.kind
    if kind in ("eou", "ou"):
        lag = np.abs(times[:, None] - times[None, :])
        return params.rho_g1 ** lag
    if kind == "rw":
        elapsed = np.minimum(times[:, None], times[None, :]) - times[0]
        return elapsed
    return None


def build_blocks(spec: ModelSpec, params: ParameterVector, times) -> CovarianceBlocks:
    """Build the covariance blocks for one visit schedule.

    Raises:
        InputError: times not strictly increasing.
        DomainError: non-finite parameter value.
    """
    times = _check_times(times)
    m = times.size
    fam = spec.process_family
    for f in ("sigma2_b", "sigma2_c", "rho", "sigma2_gb", "sigma2_gc",
              "rho_g", "rho_g1", "sigma2_wb", "sigma2_wc", "rho_w", "theta"):
        val = getattr(params, f)
        if val is not None and not np.isfinite(val):
            raise DomainError(f"parameter {f} is not finite")

    ones = np.ones((m, m))
    kind = fam.kind
    serial = _serial_kernels(spec, params, times)

    s2b = params.sigma2_b if params.sigma2_b is not None else 0.0
    sigma_b = s2b * ones
    if kind in ("eou", "ou"):
        sigma_b = sigma_b + params.sigma2_gb * serial
    elif kind == "rw":
        sigma_b = sigma_b + params.sigma2_wb * serial

    if fam.is_shared:
        sigma_b = 0.5 * (sigma_b + sigma_b.T)
        return CovarianceBlocks(sigma_b=sigma_b, sigma_c=None, sigma_bc=None,
                                assembled=sigma_b)

    s2c = params.sigma2_c if params.sigma2_c is not None else 0.0
    re_cross = 0.0
    if params.rho is not None:
        re_cross = np.sqrt(s2b * s2c) * params.rho
    sigma_c = s2c * ones
    sigma_bc = re_cross * ones
    if kind in ("eou", "ou"):
        sigma_c = sigma_c + params.sigma2_gc * serial
        sigma_bc = sigma_bc + (np.sqrt(params.sigma2_gb * params.sigma2_gc)
                               * params.rho_g * serial)
    elif kind == "rw":
        sigma_c = sigma_c + params.sigma2_wc * serial
        sigma_bc = sigma_bc + (np.sqrt(params.sigma2_wb * params.sigma2_wc)
                               * params.rho_w * serial)

    sigma_b = 0.5 * (sigma_b + sigma_b.T)
    sigma_c = 0.5 * (sigma_c + sigma_c.T)
    assembled = np.block([[sigma_b, sigma_bc], [sigma_bc.T, sigma_c]])
    assembled = 0.5 * (assembled + assembled.T)
    return CovarianceBlocks(sigma_b=sigma_b, sigma_c=sigma_c, sigma_bc=sigma_bc,
                            assembled=assembled)


def random_effect_covariance(spec: ModelSpec, params: ParameterVector) -> np.ndarray:
    """Covariance of the low-dimensional random-effect vector for RE families.

    1x1 [[sigma2_b]] for the shared family, 2x2 for the correlated one.
    """
    fam = spec.process_family
    if fam is ProcessFamily.SHARED_RE:
        return np.array([[params.sigma2_b]])
    if fam is ProcessFamily.CORRELATED_RE:
        cross = np.sqrt(params.sigma2_b * params.sigma2_c) * params.rho
        return np.array([[params.sigma2_b, cross], [cross, params.sigma2_c]])
    raise DomainError(f"{fam.value} is not a random-effect-only family")


def check_psd(matrix: np.ndarray, sym_tol: float = 1e-10):
    """Check positive semi-definiteness by symmetric eigen-decomposition.

    Returns:
        (valid, min_eigenvalue): ``valid`` means the smallest eigenvalue is
        no less than ``-1e-10`` times the largest absolute eigenvalue.

    Raises:
        InputError: matrix not square or not symmetric to ``sym_tol``
            (relative to the largest absolute entry).
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError("matrix must be square")
    scale = max(np.max(np.abs(a)), 1.0)
    if np.max(np.abs(a - a.T)) > sym_tol * scale:
        raise InputError("matrix is not symmetric")
    eigvals = np.linalg.eigvalsh(0.5 * (a + a.T))
    min_eig = float(eigvals[0])
    max_abs = float(np.max(np.abs(eigvals))) if eigvals.size else 0.0
    valid = min_eig >= -1e-10 * max(max_abs, 1e-300)
    return valid, min_eig


def eou_process_covariance(times, sigma2_gb, sigma2_gc, rho_g, rho_gb, rho_gc, rho_gbc):
    """Two-process exponential-decay covariance with unconstrained decay rates.

    Used for diagnostics: with distinct within- and cross-process rates this
    matrix need not be positive semi-definite.
    """
    times = _check_times(times)
    lag = np.abs(times[:, None] - times[None, :])
    sb = sigma2_gb * rho_gb ** lag
    sc = sigma2_gc * rho_gc ** lag
    sbc = np.sqrt(sigma2_gb * sigma2_gc) * rho_g * rho_gbc ** lag
    out = np.block([[sb, sbc], [sbc.T, sc]])
    return 0.5 * (out + out.T)
