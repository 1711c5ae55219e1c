"""Model catalog, parameter containers and the constrained/unconstrained bijection.

A model is described by a :class:`ModelSpec`: which latent-process family
drives the two parts of the outcome, whether the positive part is Gaussian
or log-normal on the transformed scale, and how the continuous-component
regression is parameterized (conditional mean, overall marginal mean, or
the overall random-effect form available for the shared random-effect
family).

Free parameters live in a :class:`ParameterVector`.  Only the fields used
by the active family are free; everything else is structurally absent.
``pack``/``unpack`` map between the constrained parameter space and an
unconstrained real vector (log for variances, atanh for correlations,
logit for the decay rate of the exponential autocorrelation), which is
the space the optimizer works in.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import ConfigError, DomainError, InputError, ShapeError


class ProcessFamily(str, enum.Enum):
    """Latent-structure families for the two model components."""

    GENERAL_EOU = "general_eou"        # random effects + two exponential-decay processes
    SHARED_EOU = "shared_eou"          # random effect + one exponential-decay process, c = theta*b
    CORRELATED_OU = "correlated_ou"    # two exponential-decay processes, no random effects
    SHARED_OU = "shared_ou"            # one exponential-decay process, no random effects
    CORRELATED_RW = "correlated_rw"    # random effects + two random walks
    SHARED_RW = "shared_rw"            # random effect + one random walk
    CORRELATED_RE = "correlated_re"    # random effects only
    SHARED_RE = "shared_re"            # single shared random effect

    @property
    def is_shared(self) -> bool:
        return self in (ProcessFamily.SHARED_EOU, ProcessFamily.SHARED_OU,
                        ProcessFamily.SHARED_RW, ProcessFamily.SHARED_RE)

    @property
    def is_correlated(self) -> bool:
        return not self.is_shared

    @property
    def is_two_process(self) -> bool:
        """True when the latent vector stacks both processes at every visit."""
        return self in (ProcessFamily.GENERAL_EOU, ProcessFamily.CORRELATED_OU,
                        ProcessFamily.CORRELATED_RW)

    @property
    def is_random_effect_only(self) -> bool:
        return self in (ProcessFamily.CORRELATED_RE, ProcessFamily.SHARED_RE)

    @property
    def kind(self) -> str:
        """Serial-correlation mechanism: 'eou', 'ou', 'rw' or 're'."""
        if self in (ProcessFamily.GENERAL_EOU, ProcessFamily.SHARED_EOU):
            return "eou"
        if self in (ProcessFamily.CORRELATED_OU, ProcessFamily.SHARED_OU):
            return "ou"
        if self in (ProcessFamily.CORRELATED_RW, ProcessFamily.SHARED_RW):
            return "rw"
        return "re"

    @property
    def has_random_effects(self) -> bool:
        return self.kind in ("eou", "rw", "re")

    @property
    def has_process(self) -> bool:
        return self.kind != "re"


class ContinuousDist(str, enum.Enum):
    GAUSSIAN = "gaussian"
    LOG_NORMAL = "log_normal"


class Parameterization(str, enum.Enum):
    CONDITIONAL = "conditional"      # covariates act on the mean of the positives
    MARGINAL_MEAN = "marginal_mean"  # covariates act on the overall marginal mean
    OVERALL_RE = "overall_re"        # overall random-effect form; shared RE family only


class IdentityTransform:
    """Identity transform of the positive outcomes."""

    name = "identity"

    def apply(self, y):
        return np.asarray(y, dtype=float)

    def inverse(self, g):
        return np.asarray(g, dtype=float)

    def __repr__(self):
        return "IdentityTransform()"


class TableTransform:
    """Monotone transform defined by interpolation through (y, g) knots.

    The table must start at (0, 0) and be strictly increasing in both
    coordinates.  Values beyond the last knot extrapolate linearly with the
    final slope so the transform stays monotone on all of [0, inf).
    """

    name = "table"

    def __init__(self, y_knots: Sequence[float], g_knots: Sequence[float]):
        y = np.asarray(y_knots, dtype=float)
        g = np.asarray(g_knots, dtype=float)
        if y.ndim != 1 or y.shape != g.shape or y.size < 2:
            raise ConfigError("transform table needs matching 1-d knot arrays, >= 2 knots")
        if y[0] != 0.0 or g[0] != 0.0:
            raise ConfigError("transform table must start at (0, 0)")
        if np.any(np.diff(y) <= 0) or np.any(np.diff(g) <= 0):
            raise ConfigError("transform table knots must be strictly increasing")
        self.y_knots = y
        self.g_knots = g

    def _interp(self, x, xs, ys):
        x = np.asarray(x, dtype=float)
        out = np.interp(x, xs, ys)
        # linear extrapolation beyond the last knot
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        hi = x > xs[-1]
        if np.any(hi):
            out = np.where(hi, ys[-1] + slope * (x - xs[-1]), out)
        return out

    def apply(self, y):
        return self._interp(y, self.y_knots, self.g_knots)

    def inverse(self, g):
        return self._interp(g, self.g_knots, self.y_knots)

    def __repr__(self):
        return f"TableTransform({self.y_knots.tolist()}, {self.g_knots.tolist()})"


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Which model is being fitted.

    Attributes:
        process_family: latent-structure family.
        continuous_dist: distribution of the transformed positive outcomes.
        parameterization: conditional, marginal-mean or overall-RE regression.
        transform: monotone transform g applied to positive outcomes, g(0)=0.
        n_binary_covariates: number of columns of X (binary component).
        n_continuous_covariates: number of columns of Z (continuous component).
    """

    process_family: ProcessFamily
    n_binary_covariates: int
    n_continuous_covariates: int
    continuous_dist: ContinuousDist = ContinuousDist.GAUSSIAN
    parameterization: Parameterization = Parameterization.CONDITIONAL
    transform: object = field(default_factory=IdentityTransform)

    def __post_init__(self):
        if self.n_binary_covariates < 1 or self.n_continuous_covariates < 1:
            raise ConfigError("each component needs at least one covariate column")
        if (self.parameterization is Parameterization.OVERALL_RE
                and self.process_family is not ProcessFamily.SHARED_RE):
            raise ConfigError(
                "the overall random-effect parameterization is supported only "
                "for the shared random-effect family")
        if (self.parameterization is Parameterization.OVERALL_RE
                and self.continuous_dist is not ContinuousDist.GAUSSIAN):
            raise ConfigError("overall_re supports the Gaussian continuous part only")

    @property
    def regression_label(self) -> str:
        """'gamma' for conditional fits, 'alpha' otherwise."""
        return "gamma" if self.parameterization is Parameterization.CONDITIONAL else "alpha"


@dataclass(eq=False)
class ParameterVector:
    """All model parameters on their natural scale.

    Fields that the active :class:`ModelSpec` does not use are ``None``.
    Regression coefficients are stored in ``beta`` (binary part, probit
    scale) and ``gamma_or_alpha`` (continuous part; holds gamma under the
    conditional parameterization and alpha otherwise).
    """

    beta: np.ndarray
    gamma_or_alpha: np.ndarray
    sigma2: float
    theta: Optional[float] = None
    sigma2_b: Optional[float] = None
    sigma2_c: Optional[float] = None
    rho: Optional[float] = None
    sigma2_gb: Optional[float] = None
    sigma2_gc: Optional[float] = None
    rho_g: Optional[float] = None
    rho_g1: Optional[float] = None
    sigma2_wb: Optional[float] = None
    sigma2_wc: Optional[float] = None
    rho_w: Optional[float] = None

    def replace(self, **kw) -> "ParameterVector":
        d = self.as_dict()
        d.update(kw)
        return ParameterVector(**d)

    def as_dict(self) -> dict:
        return {
            "beta": np.asarray(self.beta, dtype=float).copy(),
            "gamma_or_alpha": np.asarray(self.gamma_or_alpha, dtype=float).copy(),
            "sigma2": self.sigma2,
            "theta": self.theta,
            "sigma2_b": self.sigma2_b,
            "sigma2_c": self.sigma2_c,
            "rho": self.rho,
            "sigma2_gb": self.sigma2_gb,
            "sigma2_gc": self.sigma2_gc,
            "rho_g": self.rho_g,
            "rho_g1": self.rho_g1,
            "sigma2_wb": self.sigma2_wb,
            "sigma2_wc": self.sigma2_wc,
            "rho_w": self.rho_w,
        }


@dataclass(eq=False)
class PatientRecord:
    """One patient's longitudinal record.

    ``u`` marks which outcomes are positive and is stored alongside ``y``
    so the record is self-contained after ingestion.
    """

    id: object
    times: np.ndarray
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    u: np.ndarray = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        m = self.times.size
        if m < 1:
            raise InputError(f"patient {self.id}: needs at least one visit")
        if np.any(np.diff(self.times) <= 0):
            raise InputError(f"patient {self.id}: times must be strictly increasing")
        if self.y.size != m or self.X.shape[0] != m or self.Z.shape[0] != m:
            raise ShapeError(f"patient {self.id}: row counts disagree with times")
        if self.u is None:
            if np.any(self.y < 0):
                raise InputError(f"patient {self.id}: negative outcome")
            self.u = (self.y > 0).astype(int)
        else:
            self.u = np.asarray(self.u, dtype=int)
            if self.u.size != m or not np.all((self.u == 0) | (self.u == 1)):
                raise InputError(f"patient {self.id}: u must be binary of length m")
        if not np.all(np.isfinite(self.y)):
            raise InputError(f"patient {self.id}: non-finite outcome")

    @property
    def m(self) -> int:
        return self.times.size


# ---------------------------------------------------------------------------
# Free-parameter layout
# ---------------------------------------------------------------------------

# (field, transform kind) in pack order; regression blocks come first.
_SCALAR_FIELDS = (
    ("theta", "linear"),
    ("sigma2", "variance"),
    ("sigma2_b", "variance"),
    ("sigma2_c", "variance"),
    ("rho", "correlation"),
    ("sigma2_gb", "variance"),
    ("sigma2_gc", "variance"),
    ("rho_g", "correlation"),
    ("rho_g1", "unit_interval"),
    ("sigma2_wb", "variance"),
    ("sigma2_wc", "variance"),
    ("rho_w", "correlation"),
)

_ACTIVE = {
    ProcessFamily.GENERAL_EOU: {"sigma2", "sigma2_b", "sigma2_c", "rho",
                                "sigma2_gb", "sigma2_gc", "rho_g", "rho_g1"},
    ProcessFamily.SHARED_EOU: {"theta", "sigma2", "sigma2_b", "sigma2_gb", "rho_g1"},
    ProcessFamily.CORRELATED_OU: {"sigma2", "sigma2_gb", "sigma2_gc", "rho_g", "rho_g1"},
    ProcessFamily.SHARED_OU: {"theta", "sigma2", "sigma2_gb", "rho_g1"},
    ProcessFamily.CORRELATED_RW: {"sigma2", "sigma2_b", "sigma2_c", "rho",
                                  "sigma2_wb", "sigma2_wc", "rho_w"},
    ProcessFamily.SHARED_RW: {"theta", "sigma2", "sigma2_b", "sigma2_wb"},
    ProcessFamily.CORRELATED_RE: {"sigma2", "sigma2_b", "sigma2_c", "rho"},
    ProcessFamily.SHARED_RE: {"theta", "sigma2", "sigma2_b"},
}

# Reported name of the exponential-decay rate: the single-process families
# label it rho_gb (one process, one rate); the two-process families carry a
# common rate across both processes and label it rho_g1.
_RHO_G1_NAME = {
    ProcessFamily.GENERAL_EOU: "rho_g1",
    ProcessFamily.CORRELATED_OU: "rho_g1",
    ProcessFamily.SHARED_EOU: "rho_gb",
    ProcessFamily.SHARED_OU: "rho_gb",
}


def active_scalar_fields(spec: ModelSpec):
    """(field, transform kind) pairs free under ``spec``, in pack order."""
    active = _ACTIVE[spec.process_family]
    return [(f, k) for f, k in _SCALAR_FIELDS if f in active]


def free_parameter_names(spec: ModelSpec) -> list:
    """Ordered names of the free parameters (the pack order)."""
    names = [f"beta_{j}" for j in range(spec.n_binary_covariates)]
    label = spec.regression_label
    names += [f"{label}_{j}" for j in range(spec.n_continuous_covariates)]
    for f, _ in active_scalar_fields(spec):
        if f == "rho_g1":
            names.append(_RHO_G1_NAME[spec.process_family])
        else:
            names.append(f)
    return names


def n_free_parameters(spec: ModelSpec) -> int:
    return (spec.n_binary_covariates + spec.n_continuous_covariates
            + len(active_scalar_fields(spec)))


def make_params(spec: ModelSpec, *, beta, gamma_or_alpha, sigma2, **scalars) -> ParameterVector:
    """Build a ParameterVector for ``spec``, rejecting inactive fields.

    Raises:
        ConfigError: a keyword names a field the family does not use,
            or an active field is missing.
    """
    active = {f for f, _ in active_scalar_fields(spec)}
    unknown = set(scalars) - {f for f, _ in _SCALAR_FIELDS}
    if unknown:
        raise ConfigError(f"unknown parameter fields: {sorted(unknown)}")
    inactive = {k for k, v in scalars.items() if k not in active and k != "sigma2"}
    if inactive:
        raise ConfigError(
            f"fields {sorted(inactive)} are not free under family "
            f"{spec.process_family.value}")
    missing = active - {"sigma2"} - set(scalars)
    if missing:
        raise ConfigError(f"missing fields for {spec.process_family.value}: {sorted(missing)}")
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    gamma_or_alpha = np.atleast_1d(np.asarray(gamma_or_alpha, dtype=float))
    if beta.size != spec.n_binary_covariates:
        raise ShapeError(f"beta has length {beta.size}, expected {spec.n_binary_covariates}")
    if gamma_or_alpha.size != spec.n_continuous_covariates:
        raise ShapeError(f"{spec.regression_label} has length {gamma_or_alpha.size}, "
                         f"expected {spec.n_continuous_covariates}")
    return ParameterVector(beta=beta, gamma_or_alpha=gamma_or_alpha, sigma2=float(sigma2),
                           **{k: float(v) for k, v in scalars.items()})


# ---------------------------------------------------------------------------
# Constrained <-> unconstrained bijection
# ---------------------------------------------------------------------------

def _to_unconstrained(x: float, kind: str, name: str) -> float:
    if not np.isfinite(x):
        raise DomainError(f"{name} = {x} is not finite")
    if kind == "linear":
        return float(x)
    if kind == "variance":
        if x <= 0.0:
            raise DomainError(f"{name} = {x} must be > 0")
        return math.log(x)
    if kind == "correlation":
        if not -1.0 < x < 1.0:
            raise DomainError(f"{name} = {x} must lie in (-1, 1)")
        return math.atanh(x)
    if kind == "unit_interval":
        if not 0.0 < x < 1.0:
            raise DomainError(f"{name} = {x} must lie in (0, 1)")
        return math.log(x / (1.0 - x))
    raise ValueError(kind)


def _from_unconstrained(v: float, kind: str) -> float:
    if kind == "linear":
        return float(v)
    if kind == "variance":
        return math.exp(v)
    if kind == "correlation":
        return math.tanh(v)
    if kind == "unit_interval":
        return 1.0 / (1.0 + math.exp(-v))
    raise ValueError(kind)


def transform_jacobian(v: float, kind: str) -> float:
    """d(natural)/d(unconstrained) at unconstrained coordinate ``v``."""
    if kind == "linear":
        return 1.0
    if kind == "variance":
        return math.exp(v)
    if kind == "correlation":
        c = math.cosh(v)
        return 1.0 / (c * c)
    if kind == "unit_interval":
        p = 1.0 / (1.0 + math.exp(-v))
        return p * (1.0 - p)
    raise ValueError(kind)


def pack(params: ParameterVector, spec: ModelSpec) -> np.ndarray:
    """Map a valid ParameterVector to the unconstrained optimizer vector."""
    beta = np.asarray(params.beta, dtype=float)
    reg = np.asarray(params.gamma_or_alpha, dtype=float)
    if beta.size != spec.n_binary_covariates or reg.size != spec.n_continuous_covariates:
        raise ShapeError("regression coefficient lengths disagree with the spec")
    if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(reg))):
        raise DomainError("non-finite regression coefficient")
    out = list(beta) + list(reg)
    for f, kind in active_scalar_fields(spec):
        x = getattr(params, f)
        if x is None:
            raise DomainError(f"{f} is required by family {spec.process_family.value}")
        out.append(_to_unconstrained(float(x), kind, f))
    return np.array(out, dtype=float)


def unpack(v: np.ndarray, spec: ModelSpec) -> ParameterVector:
    """Inverse of :func:`pack`."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size != n_free_parameters(spec):
        raise ShapeError(f"expected a vector of length {n_free_parameters(spec)}, "
                         f"got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DomainError("non-finite entry in unconstrained vector")
    p = spec.n_binary_covariates
    q = spec.n_continuous_covariates
    beta = v[:p].copy()
    reg = v[p:p + q].copy()
    scalars = {}
    for (f, kind), x in zip(active_scalar_fields(spec), v[p + q:]):
        scalars[f] = _from_unconstrained(float(x), kind)
    sigma2 = scalars.pop("sigma2")
    return ParameterVector(beta=beta, gamma_or_alpha=reg, sigma2=sigma2, **scalars)


def unpack_jacobian_diagonal(v: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Diagonal Jacobian of unpack (each natural parameter depends on one coordinate)."""
    v = np.asarray(v, dtype=float)
    p = spec.n_binary_covariates + spec.n_continuous_covariates
    jac = np.ones(v.size)
    for i, (f, kind) in enumerate(active_scalar_fields(spec)):
        jac[p + i] = transform_jacobian(float(v[p + i]), kind)
    return jac
