"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from twopartsp.model import (ContinuousDist, ModelSpec, Parameterization,
                             PatientRecord, ProcessFamily,
                             active_scalar_fields, make_params)

# moderate canonical values used across families
CANONICAL = {"theta": 0.4, "sigma2_b": 0.8, "sigma2_c": 0.5, "rho": 0.4,
             "sigma2_gb": 0.7, "sigma2_gc": 0.6, "rho_g": 0.5, "rho_g1": 0.6,
             "sigma2_wb": 0.4, "sigma2_wc": 0.3, "rho_w": 0.5}


def params_for(spec, beta=(0.3, -0.2), reg=(1.2, 0.3), sigma2=0.3, **over):
    kw = {f: CANONICAL[f] for f, _ in active_scalar_fields(spec) if f != "sigma2"}
    kw.update(over)
    return make_params(spec, beta=list(beta)[:spec.n_binary_covariates],
                       gamma_or_alpha=list(reg)[:spec.n_continuous_covariates],
                       sigma2=sigma2, **kw)


def spec_for(family, dist=ContinuousDist.GAUSSIAN,
             parameterization=Parameterization.CONDITIONAL, p=2, q=2):
    return ModelSpec(process_family=family, continuous_dist=dist,
                     parameterization=parameterization,
                     n_binary_covariates=p, n_continuous_covariates=q)


def random_patient(rng, m, p=2, q=2, pos_prob=0.6, pid=None):
    times = np.cumsum(rng.uniform(0.3, 1.5, m))
    X = np.column_stack([np.ones(m)] + [rng.standard_normal(m) for _ in range(p - 1)])
    Z = np.column_stack([np.ones(m)] + [rng.standard_normal(m) for _ in range(q - 1)])
    u = (rng.random(m) < pos_prob).astype(float)
    if m > 1 and u.sum() == 0:
        u[rng.integers(m)] = 1.0          # keep both parts exercised
    y = np.where(u > 0, np.abs(rng.normal(1.5, 0.5, m)) + 0.05, 0.0)
    return PatientRecord(id=pid if pid is not None else f"p{rng.integers(1 << 30)}",
                         times=times, y=y, X=X, Z=Z)


ALL_FAMILIES = list(ProcessFamily)
TWO_PROCESS = [f for f in ProcessFamily if f.is_two_process]
SHARED = [f for f in ProcessFamily if f.is_shared]


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
