"""Batch command-line interface.

Commands: ``simulate``, ``fit``, ``evaluate``, ``policy`` and
``reproduce-tables``.  Every command serializes its fully resolved
configuration next to its outputs so a rerun with the same flags produces
byte-identical files.  Wall-clock timing goes to a separate ``timing.json``
sidecar that is excluded from the determinism contract.

Exit codes: 0 success, 1 numeric failure / non-convergence, 2 validation
error, 3 I/O error.
"""

from __future__ import annotations

import functools
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import io as pio
from .errors import ConfigurationError, NoOverlapError, NumericError, ParameterError
from .evaluate import (
    PolicyTable,
    gee_fit,
    iptw_response_rate,
    mglm_fit,
    mse_policy_params,
    truth_table,
    value_ratio,
)
from .model import Dataset, Family, ModelSpec, State, Trajectory, inverse_link
from .simulate import SCENARIOS, ScenarioSpec, gen_trial, named_scenario
from .solver import FitResult, TronConfig, fit_at_lambda, select_lambda

EXIT_NUMERIC = 1
EXIT_VALIDATION = 2
EXIT_IO = 3


def _cli_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigurationError, ParameterError) as exc:
            click.echo(f"validation error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
        except (NumericError, NoOverlapError) as exc:
            click.echo(f"numeric error: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
        except OSError as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(EXIT_IO)

    return wrapper


@click.group()
def main():
    """Personalized decision policies from longitudinal data."""


def _write_config(directory: Path, config: dict):
    pio.dump_json(directory / "config.json", config)


def _write_timing(directory: Path, seconds: float):
    Path(directory, "timing.json").write_text(
        json.dumps({"wall_seconds": seconds}) + "\n")


# ---------------------------------------------------------------- simulate

@main.command()
@click.option("--scenario", type=click.Choice(sorted(SCENARIOS)), required=True)
@click.option("--m", type=int, default=30, show_default=True,
              help="Training horizon (steps per user).")
@click.option("--n", type=int, default=50, show_default=True, help="Users.")
@click.option("--trials", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--test-horizon", type=int, default=10, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_cli_errors
def simulate(scenario, m, n, trials, seed, test_horizon, out):
    """Generate seeded synthetic trial datasets."""
    sc = named_scenario(scenario, m=m, n=n, seed=seed, test_horizon=test_horizon,
                        n_trials=trials)
    out.mkdir(parents=True, exist_ok=True)
    config = {
        "command": "simulate", "scenario": scenario, "m": m, "n": n,
        "trials": trials, "seed": seed, "test_horizon": test_horizon,
        "noise_sd": sc.noise_sd, "family": sc.outcome_family.value,
        "beta0": list(sc.beta0), "re_variances": list(sc.re_variances),
    }
    _write_config(out, config)
    for k in range(trials):
        trial = gen_trial(sc, trial_index=k)
        tdir = out / f"trial-{k:03d}"
        pio.write_dataset(tdir, trial.trajectories, sc.model_spec)
        pio.write_truth(tdir / "truth.json", np.asarray(sc.beta0), trial.alpha0,
                        u0=trial.u0)
        _write_config(tdir, {**config, "trial_index": k})
    click.echo(f"wrote {trials} trial(s) to {out}")


# --------------------------------------------------------------------- fit

def _load_training(data_dir: Path, train_horizon: int | None):
    spec = pio.spec_from_dict(pio.load_json(data_dir / "schema.json"))
    trajectories = pio.read_trajectories(data_dir / "trajectories.csv", spec)
    if train_horizon is None:
        cfg_path = data_dir / "config.json"
        if cfg_path.exists():
            train_horizon = pio.load_json(cfg_path).get("m")
    if train_horizon is not None:
        trajectories = tuple(
            Trajectory(t.user_id,
                       tuple(s for s in t.steps if s.state.time_index <= train_horizon))
            for t in trajectories)
    return Dataset(trajectories, spec), train_horizon


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True, path_type=Path),
              required=True, help="Dataset directory from `simulate`.")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--method", type=click.Choice(["ppl", "gee", "mglm"]),
              default="ppl", show_default=True)
@click.option("--lambda", "lam", type=float, default=None,
              help="Fit at this fixed lambda instead of the AIC path.")
@click.option("--train-horizon", type=int, default=None,
              help="Use steps with t <= this bound (default: `m` from the "
                   "dataset config).")
@click.option("--n-lambda", type=int, default=20, show_default=True)
@click.option("--lambda-min-ratio", type=float, default=1e-3, show_default=True)
@click.option("--delta0", type=float, default=1.0, show_default=True)
@click.option("--grad-tol", type=float, default=1e-6, show_default=True)
@click.option("--max-iter", type=int, default=200, show_default=True)
@click.option("--cg-max-iter", type=int, default=250, show_default=True)
@_cli_errors
def fit(data_dir, out, method, lam, train_horizon, n_lambda, lambda_min_ratio,
        delta0, grad_tol, max_iter, cg_max_iter):
    """Fit the personalized model or one of the baselines."""
    t0 = time.perf_counter()
    data, horizon = _load_training(data_dir, train_horizon)
    out.mkdir(parents=True, exist_ok=True)
    config = {
        "command": "fit", "data": str(data_dir), "method": method,
        "lambda": lam, "train_horizon": horizon, "n_lambda": n_lambda,
        "lambda_min_ratio": lambda_min_ratio, "delta0": delta0,
        "grad_tol": grad_tol, "max_iter": max_iter, "cg_max_iter": cg_max_iter,
    }
    _write_config(out, config)
    if method == "gee":
        table = gee_fit(data)
    elif method == "mglm":
        table = mglm_fit(data)
    else:
        cfg = TronConfig(delta0=delta0, grad_tol=grad_tol, max_iter=max_iter,
                         cg_max_iter=cg_max_iter)
        if lam is not None:
            result = fit_at_lambda(data, lam, cfg)
        else:
            result = select_lambda(data, cfg, n_lambda=n_lambda,
                                   lambda_min_ratio=lambda_min_ratio)
        pio.write_fit(out / "fit.json", result)
        table = PolicyTable.from_fit(result)
        click.echo(f"ppl fit: lambda={float(result.pen.lam)!r} "
                   f"active={list(result.active_groups)} "
                   f"converged={result.converged}")
    pio.write_policy(out / "policy.json", table)
    _write_timing(out, time.perf_counter() - t0)
    click.echo(f"wrote {method} policy table to {out}")


# ---------------------------------------------------------------- evaluate

def _vr_states(spec: ModelSpec, test_times):
    """Evaluation states for the simulation-study layout (covariates x, t)."""
    if tuple(spec.covariates) != ("x", "t"):
        return []
    return [State(covariates=(x, float(t)), time_index=t)
            for t in test_times for x in (-1.0, 1.0)]


@main.command()
@click.option("--policy", "policy_path", type=click.Path(exists=True, path_type=Path),
              required=True, help="policy.json from `fit`.")
@click.option("--data", "data_dir", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--truth", "truth_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="truth.json for simulation metrics.")
@click.option("--train-horizon", type=int, default=None)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_cli_errors
def evaluate(policy_path, data_dir, truth_path, train_horizon, out):
    """Compute MSE / value-ratio / IPTW metrics for a fitted policy."""
    t0 = time.perf_counter()
    table = pio.read_policy(policy_path)
    spec = table.spec
    trajectories = pio.read_trajectories(data_dir / "trajectories.csv", spec)
    if train_horizon is None:
        cfg_path = data_dir / "config.json"
        if cfg_path.exists():
            train_horizon = pio.load_json(cfg_path).get("m")
    horizon = train_horizon if train_horizon is not None else 0
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, {
        "command": "evaluate", "policy": str(policy_path), "data": str(data_dir),
        "truth": None if truth_path is None else str(truth_path),
        "train_horizon": horizon,
    })

    rows = []
    by_user = {t.user_id: t for t in trajectories}
    test = []
    for uid in table.user_ids:
        traj = by_user.get(uid)
        if traj is None:
            raise ConfigurationError(f"user {uid!r} missing from the dataset")
        steps = tuple(s for s in traj.steps if s.state.time_index > horizon)
        test.append(Trajectory(uid, steps) if steps else None)

    if any(t is not None for t in test):
        aligned = [t for t in test if t is not None]
        ids = tuple(t.user_id for t in aligned)
        sub = PolicyTable(method=table.method, beta=table.beta,
                          alpha=table.alpha[[table.user_ids.index(u) for u in ids]],
                          spec=spec, user_ids=ids,
                          diverged=table.diverged[[table.user_ids.index(u) for u in ids]])
        rows.append({"method": table.method, "metric": "iptw_rate", "state": "",
                     "time": "", "value": iptw_response_rate(sub, aligned)})

    if truth_path is not None:
        beta0, alpha0 = pio.read_truth(truth_path)
        truth = truth_table(beta0, alpha0, spec, user_ids=table.user_ids)
        rows.append({"method": table.method, "metric": "mse", "state": "",
                     "time": "", "value": mse_policy_params(table, truth)})
        test_times = sorted({s.state.time_index
                             for t in test if t is not None for s in t.steps})
        vr_values = []
        for state in _vr_states(spec, test_times):
            vr = value_ratio(table, truth, state)
            vr_values.append(vr)
            rows.append({"method": table.method, "metric": "value_ratio",
                         "state": repr(float(state.covariates[0])),
                         "time": state.time_index, "value": vr})
        if vr_values:
            rows.append({"method": table.method, "metric": "mean_value_ratio",
                         "state": "", "time": "",
                         "value": float(np.mean(vr_values))})

    pio.write_report(out / "report.json", out / "report.csv", rows)
    _write_timing(out, time.perf_counter() - t0)
    click.echo(f"wrote report ({len(rows)} rows) to {out}")


# ------------------------------------------------------------------ policy

@main.command()
@click.option("--fit", "fit_path", type=click.Path(exists=True, path_type=Path),
              required=True, help="fit.json or policy.json.")
@click.option("--user", "user_id", required=True)
@click.option("--covariates", required=True,
              help="Comma-separated covariate values, e.g. '1,12'.")
@click.option("--t", "time_index", type=int, required=True)
@_cli_errors
def policy(fit_path, user_id, covariates, time_index):
    """Print the recommended action and per-action predicted means."""
    obj = pio.load_json(fit_path)
    table = (pio.policy_from_dict(obj) if "method" in obj
             else PolicyTable.from_fit(pio.fit_from_dict(obj)))
    try:
        values = tuple(float(v) for v in covariates.split(","))
    except ValueError as exc:
        raise ConfigurationError(f"bad covariate list {covariates!r}") from exc
    if user_id not in table.user_ids:
        raise ConfigurationError(f"unknown user {user_id!r}")
    i = table.user_ids.index(user_id)
    state = State(covariates=values, time_index=time_index)
    etas = table.action_values(i, state)
    means = {str(k + 1): inverse_link(table.spec.family, float(e))
             for k, e in enumerate(etas)}
    chosen = table.decide(i, state)
    click.echo(json.dumps({"user_id": user_id, "chosen_label": chosen,
                           "predicted_means": means}, sort_keys=True))


# -------------------------------------------------------- reproduce-tables

def _table_cell_worker(args):
    name, m, trial_index, seed = args
    sc = named_scenario(name, m=m, seed=seed)
    trial = gen_trial(sc, trial_index=trial_index)
    data = trial.training_dataset()
    truth = truth_table(np.asarray(sc.beta0), trial.alpha0, sc.model_spec,
                        user_ids=data.user_ids)
    out = {}
    sel = select_lambda(data)
    out["ppl"] = mse_policy_params(PolicyTable.from_fit(sel), truth)
    out["gee"] = mse_policy_params(gee_fit(data), truth)
    out["mglm"] = mse_policy_params(mglm_fit(data), truth)
    return name, m, trial_index, out


@main.command(name="reproduce-tables")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--trials", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--jobs", type=int, default=4, show_default=True)
@click.option("--m-values", default="10,20,30", show_default=True)
@click.option("--scenarios", default=",".join(sorted(SCENARIOS)), show_default=True)
@_cli_errors
def reproduce_tables(out, trials, seed, jobs, m_values, scenarios):
    """Run the scaled simulation-study grid and write summary tables.

    Table 1 covers the non-sparse random-effect scenarios, table 2 the
    sparse ones; cells are mean (sd) policy-parameter MSE over trials.
    """
    t0 = time.perf_counter()
    try:
        ms = [int(v) for v in m_values.split(",")]
        names = [s.strip() for s in scenarios.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad list option: {exc}") from exc
    unknown = set(names) - set(SCENARIOS)
    if unknown:
        raise ConfigurationError(f"unknown scenarios: {sorted(unknown)}")
    if trials < 1 or jobs < 1 or not ms:
        raise ConfigurationError("trials, jobs and m-values must be positive")
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, {
        "command": "reproduce-tables", "trials": trials, "seed": seed,
        "jobs": jobs, "m_values": ms, "scenarios": names,
    })
    tasks = [(name, m, k, seed) for name in names for m in ms
             for k in range(trials)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_table_cell_worker, tasks))
    else:
        results = [_table_cell_worker(t) for t in tasks]

    import csv as _csv

    cells: dict[tuple[str, int, str], list[float]] = {}
    for name, m, _, vals in results:
        for method, v in vals.items():
            cells.setdefault((name, m, method), []).append(v)
    for table_name, keyword in (("table1.csv", "nonsparse"), ("table2.csv", "sparse")):
        rows = [(n, m, meth) for (n, m, meth) in sorted(cells)
                if (("nonsparse" in n) == (keyword == "nonsparse"))]
        with open(out / table_name, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["scenario", "m", "method", "mean_mse", "sd_mse",
                             "n_trials"])
            for key in rows:
                vals = np.asarray(cells[key])
                writer.writerow([key[0], key[1], key[2],
                                 repr(float(np.mean(vals))),
                                 repr(float(np.std(vals, ddof=1))) if len(vals) > 1
                                 else "", len(vals)])
    _write_timing(out, time.perf_counter() - t0)
    click.echo(f"wrote table1.csv and table2.csv to {out}")
