"""Command-line interface: fit, simulate and validate subcommands.

Data travel as long-format headered CSV (one row per visit); run
configuration is a JSON file with flag overrides.  Results are written as
UTF-8 JSON with a ``schema_version`` field plus a human-readable table on
stdout.  Exit codes: 0 success, 2 validation failure, 3 non-convergence,
4 input/configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .estimate import FitOptions, fit
from .exceptions import ConfigError, InputError, TwoPartError
from .model import (ContinuousDist, IdentityTransform, ModelSpec,
                    ParameterVector, Parameterization, PatientRecord,
                    ProcessFamily, TableTransform, free_parameter_names,
                    make_params, pack, unpack, n_free_parameters)
from .oracle import OracleConfig, OracleMethod, oracle_loglik
from .simulate import CovariateKind, CovariateSpec, SimDesign, simulate

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NO_CONVERGENCE = 3
EXIT_INPUT = 4


@dataclass
class RunConfig:
    """Parsed configuration for one CLI run."""

    model: ModelSpec
    id_col: str = "id"
    time_col: str = "time"
    y_col: str = "y"
    x_cols: list = field(default_factory=list)
    z_cols: list = field(default_factory=list)
    mvn_tolerance: float = 1e-6
    max_iter: int = 200
    grad_tol: float = 1e-5
    engine: str = "closed"
    quad_order: int = 51
    seed: int = 0
    threads: int = 1
    init_raw: Optional[dict] = None
    params_raw: Optional[dict] = None             # simulate / truth values
    sim: Optional[SimDesign] = None

    @property
    def init(self) -> Optional[ParameterVector]:
        return (_params_from_json(self.init_raw, self.model)
                if self.init_raw else None)

    @property
    def params(self) -> Optional[ParameterVector]:
        return (_params_from_json(self.params_raw, self.model)
                if self.params_raw else None)

    def fit_options(self) -> FitOptions:
        return FitOptions(max_iter=self.max_iter, grad_tol=self.grad_tol,
                          mvn_tolerance=self.mvn_tolerance, seed=self.seed,
                          engine=self.engine, quad_order=self.quad_order,
                          threads=self.threads)


def _transform_from_json(obj) -> object:
    if obj is None or obj.get("type", "identity") == "identity":
        return IdentityTransform()
    if obj["type"] == "table":
        return TableTransform(obj["y"], obj["g"])
    raise ConfigError(f"unknown transform type {obj.get('type')!r}")


def _params_from_json(obj, spec: ModelSpec) -> ParameterVector:
    if obj is None:
        raise ConfigError("a 'params' block is required")
    data = dict(obj)
    beta = data.pop("beta")
    reg = data.pop("gamma", None)
    if reg is None:
        reg = data.pop("alpha", None)
    if reg is None:
        reg = data.pop("gamma_or_alpha", None)
    if reg is None:
        raise ConfigError("params needs 'gamma' (or 'alpha') coefficients")
    data.pop("alpha", None)
    data.pop("gamma", None)
    sigma2 = data.pop("sigma2")
    return make_params(spec, beta=beta, gamma_or_alpha=reg, sigma2=sigma2, **data)


def _covariates_from_json(items, n: int) -> tuple:
    if not items:
        return ()
    if len(items) != n:
        raise ConfigError("covariate generator count disagrees with the model")
    return tuple(CovariateSpec(kind=CovariateKind(it["kind"]),
                               value=float(it.get("value", 1.0)))
                 for it in items)


def load_config(path: Optional[str], overrides: argparse.Namespace) -> RunConfig:
    raw = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    model_raw = dict(raw.get("model", {}))
    for name, attr in (("family", "process_family"), ("dist", "continuous_dist"),
                       ("parameterization", "parameterization")):
        val = getattr(overrides, name.replace("-", "_"), None)
        if val is not None:
            model_raw[attr] = val
    cols = dict(raw.get("columns", {}))
    for key in ("id", "time", "y"):
        val = getattr(overrides, f"{key}_col", None)
        if val is not None:
            cols[key] = val
    if getattr(overrides, "x_cols", None):
        cols["x"] = overrides.x_cols.split(",")
    if getattr(overrides, "z_cols", None):
        cols["z"] = overrides.z_cols.split(",")
    x_cols = list(cols.get("x", []))
    z_cols = list(cols.get("z", []))
    if not x_cols or not z_cols:
        raise ConfigError("column mappings need nonempty 'x' and 'z' lists")

    try:
        spec = ModelSpec(
            process_family=ProcessFamily(model_raw.get("process_family", "shared_re")),
            continuous_dist=ContinuousDist(model_raw.get("continuous_dist", "gaussian")),
            parameterization=Parameterization(model_raw.get("parameterization",
                                                            "conditional")),
            transform=_transform_from_json(model_raw.get("transform")),
            n_binary_covariates=len(x_cols),
            n_continuous_covariates=len(z_cols))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    cfg = RunConfig(model=spec, x_cols=x_cols, z_cols=z_cols,
                    id_col=cols.get("id", "id"), time_col=cols.get("time", "time"),
                    y_col=cols.get("y", "y"))
    cfg.mvn_tolerance = float(raw.get("mvn_tolerance", cfg.mvn_tolerance))
    opt = raw.get("optimizer", {})
    cfg.max_iter = int(opt.get("max_iter", cfg.max_iter))
    cfg.grad_tol = float(opt.get("grad_tol", cfg.grad_tol))
    cfg.engine = str(opt.get("engine", cfg.engine))
    cfg.quad_order = int(opt.get("quad_order", cfg.quad_order))
    cfg.seed = int(raw.get("seed", cfg.seed))
    cfg.threads = int(raw.get("threads", cfg.threads))
    for name in ("seed", "threads", "max_iter", "grad_tol", "mvn_tol"):
        val = getattr(overrides, name, None)
        if val is not None:
            if name == "mvn_tol":
                cfg.mvn_tolerance = float(val)
            else:
                setattr(cfg, name, type(getattr(cfg, name))(val))
    cfg.init_raw = raw.get("init")
    cfg.params_raw = raw.get("params")
    sim_raw = raw.get("simulate")
    if sim_raw:
        cfg.sim = SimDesign(
            n_patients=int(sim_raw.get("n_patients", 100)),
            seed=cfg.seed,
            visit_schedule=sim_raw.get("visit_schedule"),
            mean_visits=float(sim_raw.get("mean_visits", 6.0)),
            gap_mean=float(sim_raw.get("gap_mean", 1.4)),
            gap_sd=float(sim_raw.get("gap_sd", 1.0)),
            x_covariates=_covariates_from_json(sim_raw.get("x_covariates"),
                                               spec.n_binary_covariates),
            z_covariates=_covariates_from_json(sim_raw.get("z_covariates"),
                                               spec.n_continuous_covariates))
    return cfg


# ---------------------------------------------------------------------------
# Data ingestion / export
# ---------------------------------------------------------------------------

def ingest(csv_path: str, config: RunConfig, report: bool = True):
    """Read long-format CSV into validated PatientRecords.

    Rows are grouped by id and sorted by time; the positivity indicator is
    derived from the outcome.  Prints a dataset summary (patients, visit
    counts, zero proportion) when ``report`` is true.
    """
    try:
        frame = pd.read_csv(csv_path)
    except FileNotFoundError as exc:
        raise InputError(f"data file not found: {csv_path}") from exc
    needed = [config.id_col, config.time_col, config.y_col] + config.x_cols + config.z_cols
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise InputError(f"missing columns in {csv_path}: {missing}")

    numeric_cols = [config.time_col, config.y_col] + config.x_cols + config.z_cols
    for col in numeric_cols:
        converted = pd.to_numeric(frame[col], errors="coerce")
        bad = frame.index[converted.isna() & frame[col].notna()]
        if len(bad) > 0:
            # +2: header line plus 1-based indexing
            raise InputError(f"non-numeric value in column {col!r}, "
                             f"file row {bad[0] + 2}")
        if converted.isna().any():
            raise InputError(f"missing value in column {col!r}")
        frame[col] = converted.astype(float)

    if np.any(frame[config.y_col].to_numpy() < 0):
        raise InputError("negative outcome value")
    dup = frame.duplicated(subset=[config.id_col, config.time_col])
    if dup.any():
        row = frame.loc[dup, [config.id_col, config.time_col]].iloc[0]
        raise InputError(f"duplicate (id, time) pair: "
                         f"({row[config.id_col]}, {row[config.time_col]})")

    records = []
    for pid, sub in frame.groupby(config.id_col, sort=True):
        sub = sub.sort_values(config.time_col)
        records.append(PatientRecord(
            id=pid,
            times=sub[config.time_col].to_numpy(),
            y=sub[config.y_col].to_numpy(),
            X=sub[config.x_cols].to_numpy(),
            Z=sub[config.z_cols].to_numpy()))
    if not records:
        raise InputError("no rows in data file")
    if report:
        visits = np.array([r.m for r in records])
        zeros = sum(int(np.sum(r.u == 0)) for r in records)
        total = int(visits.sum())
        print(f"patients: {len(records)}")
        print(f"visits per patient: min {visits.min()} / "
              f"mean {visits.mean():.2f} / max {visits.max()}")
        print(f"zero proportion: {zeros / total:.2f} ({zeros}/{total})")
    return records


def export(records, config: RunConfig) -> pd.DataFrame:
    rows = []
    for rec in records:
        for j in range(rec.m):
            row = {config.id_col: rec.id, config.time_col: rec.times[j],
                   config.y_col: rec.y[j]}
            for k, col in enumerate(config.x_cols):
                row[col] = rec.X[j, k]
            for k, col in enumerate(config.z_cols):
                row[col] = rec.Z[j, k]
            rows.append(row)
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _display_names(config: RunConfig) -> list:
    spec = config.model
    label = spec.regression_label
    names = [f"beta[{c}]" for c in config.x_cols]
    names += [f"{label}[{c}]" for c in config.z_cols]
    names += free_parameter_names(spec)[spec.n_binary_covariates
                                        + spec.n_continuous_covariates:]
    return names


def _result_json(result, config: RunConfig, zero_prop: float) -> dict:
    spec = config.model
    params = []
    for i, name in enumerate(result.names):
        entry = {"name": name, "estimate": float(result.estimates[i])}
        if result.se is not None:
            entry["se"] = float(result.se[i])
            entry["ci_low"] = float(result.wald_ci95[i, 0])
            entry["ci_high"] = float(result.wald_ci95[i, 1])
        else:
            entry["se"] = None
            entry["ci_low"] = None
            entry["ci_high"] = None
        params.append(entry)
    xi = None
    if result.xi_hat is not None:
        xi = [{"name": f"xi_{i}", "estimate": float(v),
               "se": (float(result.xi_se[i]) if result.xi_se is not None else None)}
              for i, v in enumerate(result.xi_hat)]
    return {
        "schema_version": SCHEMA_VERSION,
        "model": {
            "process_family": spec.process_family.value,
            "continuous_dist": spec.continuous_dist.value,
            "parameterization": spec.parameterization.value,
        },
        "columns": {"id": config.id_col, "time": config.time_col,
                    "y": config.y_col, "x": config.x_cols, "z": config.z_cols},
        "n_patients": result.n_patients,
        "n_observations": result.n_observations,
        "zero_proportion": zero_prop,
        "seed": config.seed,
        "status": result.convergence.status,
        "loglik": result.loglik,
        "aic": result.aic,
        "info_pd": result.info_pd,
        "info_diagnostics": {k: (v if np.isfinite(v) else None)
                             for k, v in result.info_diagnostics.items()},
        "convergence": {
            "iterations": result.convergence.iterations,
            "gradient_norm": result.convergence.gradient_norm,
            "status": result.convergence.status,
            "n_evaluations": result.convergence.n_evaluations,
            "boundary_flags": result.convergence.boundary_flags,
        },
        "parameters": params,
        "xi": xi,
    }


def _print_table(result, config: RunConfig):
    disp = _display_names(config)
    width = max(len(n) for n in disp) + 2
    print(f"\n{'parameter':<{width}}{'estimate':>12}  95% interval")
    for i, name in enumerate(disp):
        est = result.estimates[i]
        if result.se is not None:
            lo, hi = result.wald_ci95[i]
            print(f"{name:<{width}}{est:>12.4g}  ({lo:.4g}, {hi:.4g})")
        else:
            print(f"{name:<{width}}{est:>12.4g}  (se unavailable)")
    if result.xi_hat is not None:
        for i, v in enumerate(result.xi_hat):
            se = result.xi_se[i] if result.xi_se is not None else None
            tail = (f"  ({v - 1.96 * se:.4g}, {v + 1.96 * se:.4g})"
                    if se is not None else "")
            print(f"{f'xi[{config.x_cols[i]}]':<{width}}{v:>12.4g}{tail}")
    print(f"\nlog-likelihood: {result.loglik:.4f}   AIC: {result.aic:.4f}   "
          f"status: {result.convergence.status}")


def _dump_profile(path: str, data, config: RunConfig, result):
    """CSV of 1-d log-likelihood slices around the optimum (for plotting)."""
    from .likelihood import loglik_total

    spec = config.model
    v_hat = pack(result.params_hat, spec)
    names = free_parameter_names(spec)
    rows = []
    for i, name in enumerate(names):
        half = 0.35 * (1.0 + abs(v_hat[i]))
        for t in np.linspace(-half, half, 21):
            v = v_hat.copy()
            v[i] += t
            params = unpack(v, spec)
            ll = loglik_total(data, spec, params, config.mvn_tolerance, config.seed)
            rows.append({"parameter": name, "offset": t,
                         "unconstrained_value": v[i], "loglik": ll})
    pd.DataFrame(rows).to_csv(path, index=False)
    print(f"profile slices written to {path}")


def run_fit(args) -> int:
    config = load_config(args.config, args)
    data = ingest(args.data, config)
    visits = np.array([r.m for r in data])
    zeros = sum(int(np.sum(r.u == 0)) for r in data)
    zero_prop = zeros / visits.sum()
    result = fit(data, config.model, init=config.init, opts=config.fit_options())
    payload = _result_json(result, config, float(zero_prop))
    out = args.out or "fit_result.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    _print_table(result, config)
    print(f"results written to {out}")
    if args.dump_profile:
        _dump_profile(args.dump_profile, data, config, result)
    return EXIT_OK if result.convergence.converged else EXIT_NO_CONVERGENCE


def run_simulate(args) -> int:
    config = load_config(args.config, args)
    if config.sim is None:
        raise ConfigError("config needs a 'simulate' block")
    if config.params is None:
        raise ConfigError("config needs a 'params' block with true values")
    records = simulate(config.sim, config.model, config.params)
    frame = export(records, config)
    out = args.out or "simulated.csv"
    frame.to_csv(out, index=False)
    visits = np.array([r.m for r in records])
    zeros = sum(int(np.sum(r.u == 0)) for r in records)
    print(f"wrote {len(records)} patients / {visits.sum()} visits to {out} "
          f"(zero proportion {zeros / visits.sum():.2f})")
    return EXIT_OK


def run_validate(args) -> int:
    config = load_config(args.config, args)
    data = ingest(args.data, config)
    small = [r for r in data if r.m <= 3]
    if len(small) < len(data) and not args.subset:
        raise ConfigError(
            f"{len(data) - len(small)} patients have more than 3 visits; "
            "pass --subset to validate on the m <= 3 subset")
    if args.max_patients:
        small = small[:args.max_patients]
    if not small:
        raise ConfigError("no patients with 3 or fewer visits to validate")
    if config.params is None:
        raise ConfigError("config needs a 'params' block with parameter values")

    from .likelihood import loglik_patient

    rows = []
    worst = 0.0
    for rec in small:
        d = rec.m * (2 if config.model.process_family.is_two_process else 1)
        d = min(d, 2) if config.model.process_family.is_random_effect_only else d
        nodes = 41 if d <= 2 else (21 if d <= 4 else 11)
        closed = loglik_patient(rec, config.model, config.params,
                                mvn_tol=min(config.mvn_tolerance, 1e-7),
                                seed=config.seed)
        orc = oracle_loglik(rec, config.model, config.params,
                            OracleConfig(nodes_per_dim=nodes, seed=config.seed))
        diff = abs(closed - orc.value)
        worst = max(worst, diff)
        rows.append({"patient": str(rec.id), "closed_form": closed,
                     "oracle": orc.value, "abs_diff": diff,
                     "error_estimate": orc.error_estimate})
    print(json.dumps(rows, indent=2))
    print(f"max |closed - oracle| = {worst:.3e} over {len(rows)} patients "
          f"(threshold {args.threshold:g})")
    return EXIT_OK if worst <= args.threshold else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twopartsp",
        description="Two-part mixed models with patient-specific stochastic "
                    "processes for longitudinal semicontinuous data. Note: "
                    "serial-decay rates are per unit of the data's time "
                    "column; no internal rescaling is applied.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--mvn-tol", dest="mvn_tol", type=float, default=None)
        p.add_argument("--family", choices=[f.value for f in ProcessFamily])
        p.add_argument("--dist", choices=[d.value for d in ContinuousDist])
        p.add_argument("--parameterization",
                       choices=[p2.value for p2 in Parameterization])
        p.add_argument("--id-col", default=None)
        p.add_argument("--time-col", default=None)
        p.add_argument("--y-col", default=None)
        p.add_argument("--x-cols", default=None, help="comma-separated X columns")
        p.add_argument("--z-cols", default=None, help="comma-separated Z columns")

    p_fit = sub.add_parser("fit", help="fit a model to a CSV dataset")
    common(p_fit)
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--out", default=None, help="result JSON path")
    p_fit.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    p_fit.add_argument("--grad-tol", dest="grad_tol", type=float, default=None)
    p_fit.add_argument("--dump-profile", default=None,
                       help="write CSV log-likelihood slices around the optimum")
    p_fit.set_defaults(func=run_fit)

    p_sim = sub.add_parser("simulate", help="simulate a dataset from a config")
    common(p_sim)
    p_sim.add_argument("--out", default=None, help="output CSV path")
    p_sim.set_defaults(func=run_simulate)

    p_val = sub.add_parser("validate",
                           help="closed form vs brute-force integration")
    common(p_val)
    p_val.add_argument("--data", required=True)
    p_val.add_argument("--subset", action="store_true",
                       help="validate only the patients with <= 3 visits")
    p_val.add_argument("--max-patients", type=int, default=None)
    p_val.add_argument("--threshold", type=float, default=1e-3)
    p_val.set_defaults(func=run_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError,) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError,) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TwoPartError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
