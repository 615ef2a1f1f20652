"""File formats: trajectory CSV with a JSON sidecar schema, ground truth,
fit results and evaluation reports.

All writers are deterministic (shortest round-trip float repr, sorted JSON
keys) so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .model import Action, Dataset, Family, ModelSpec, State, Step, Trajectory
from .objective import PenaltyConfig
from .solver import FitResult
from .model import Parameters


def _fmt(x: float) -> str:
    return repr(float(x))


def dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "family": spec.family.value,
        "covariates": list(spec.covariates),
        "n_actions": spec.n_actions,
        "centering": list(spec.centering),
        "interactions": list(spec.interactions),
        "h2_terms": None if spec.h2_terms is None else list(spec.h2_terms),
    }


def spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        family=Family(d["family"]),
        covariates=tuple(d["covariates"]),
        n_actions=int(d["n_actions"]),
        centering=tuple(float(c) for c in d["centering"]),
        interactions=tuple(d.get("interactions", ())),
        h2_terms=None if d.get("h2_terms") is None else tuple(d["h2_terms"]),
    )


def write_trajectories(csv_path, trajectories, spec: ModelSpec):
    cov_names = list(spec.covariates)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "time_index", *cov_names, "action_label",
                         "outcome", "propensity"])
        for traj in trajectories:
            for step in traj.steps:
                writer.writerow([
                    traj.user_id,
                    step.state.time_index,
                    *[_fmt(c) for c in step.state.covariates],
                    step.action.label,
                    _fmt(step.outcome),
                    _fmt(step.propensity),
                ])


def read_trajectories(csv_path, spec: ModelSpec):
    cov_names = list(spec.covariates)
    by_user: dict[str, list[Step]] = {}
    order: list[str] = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"user_id", "time_index", "action_label", "outcome",
                   "propensity", *cov_names} - set(reader.fieldnames or ())
        if missing:
            raise ConfigurationError(f"trajectory CSV is missing columns: {missing}")
        for row in reader:
            uid = row["user_id"]
            if uid not in by_user:
                by_user[uid] = []
                order.append(uid)
            state = State(
                covariates=tuple(float(row[c]) for c in cov_names),
                time_index=int(row["time_index"]),
            )
            by_user[uid].append(Step(
                state=state,
                action=Action.coded(int(row["action_label"]), spec.centering),
                outcome=float(row["outcome"]),
                propensity=float(row["propensity"]),
            ))
    return tuple(Trajectory(uid, tuple(by_user[uid])) for uid in order)


def write_dataset(directory, trajectories, spec: ModelSpec):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dump_json(directory / "schema.json", spec_to_dict(spec))
    write_trajectories(directory / "trajectories.csv", trajectories, spec)


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    spec = spec_from_dict(load_json(directory / "schema.json"))
    trajectories = read_trajectories(directory / "trajectories.csv", spec)
    return Dataset(trajectories, spec)


def write_truth(path, beta0, alpha0, u0=None, extras=None):
    obj = {
        "beta0": [float(b) for b in np.asarray(beta0)],
        "alpha0": [[float(v) for v in row] for row in np.asarray(alpha0)],
    }
    if u0 is not None:
        obj["u0"] = [float(v) for v in np.asarray(u0)]
    if extras:
        obj.update(extras)
    dump_json(path, obj)


def read_truth(path):
    d = load_json(path)
    return np.asarray(d["beta0"]), np.asarray(d["alpha0"])


def fit_to_dict(fit: FitResult) -> dict:
    return {
        "beta": [float(b) for b in fit.params.beta],
        "alpha": [[float(v) for v in row] for row in fit.params.alpha],
        "phi": float(fit.params.phi),
        "d_inv": [float(v) for v in fit.pen.d_inv],
        "lambda": float(fit.pen.lam),
        "weights": [float(v) for v in fit.pen.weights],
        "active_groups": list(fit.active_groups),
        "objective_path": [float(v) for v in fit.objective_path],
        "lambda_path": [[float(l), float(a), int(k)] for l, a, k in fit.lambda_path],
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "spec": spec_to_dict(fit.spec),
        "user_ids": list(fit.user_ids),
    }


def fit_from_dict(d: dict) -> FitResult:
    spec = spec_from_dict(d["spec"])
    return FitResult(
        params=Parameters(beta=np.asarray(d["beta"]),
                          alpha=np.asarray(d["alpha"]).reshape(len(d["user_ids"]), spec.q),
                          phi=float(d["phi"])),
        pen=PenaltyConfig(d_inv=np.asarray(d["d_inv"]), lam=float(d["lambda"]),
                          weights=np.asarray(d["weights"])),
        active_groups=tuple(d["active_groups"]),
        objective_path=list(d["objective_path"]),
        lambda_path=[(l, a, int(k)) for l, a, k in d["lambda_path"]],
        converged=bool(d["converged"]),
        iterations=int(d["iterations"]),
        spec=spec,
        user_ids=tuple(d["user_ids"]),
    )


def write_fit(path, fit: FitResult):
    dump_json(path, fit_to_dict(fit))


def read_fit(path) -> FitResult:
    return fit_from_dict(load_json(path))


def policy_to_dict(table) -> dict:
    return {
        "method": table.method,
        "beta": [float(b) for b in table.beta],
        "alpha": [[float(v) for v in row] for row in table.alpha],
        "diverged": [bool(d) for d in table.diverged],
        "spec": spec_to_dict(table.spec),
        "user_ids": list(table.user_ids),
    }


def policy_from_dict(d: dict):
    from .evaluate import PolicyTable

    spec = spec_from_dict(d["spec"])
    n = len(d["user_ids"])
    return PolicyTable(
        method=d["method"],
        beta=np.asarray(d["beta"], dtype=float),
        alpha=np.asarray(d["alpha"], dtype=float).reshape(n, spec.q),
        spec=spec,
        user_ids=tuple(d["user_ids"]),
        diverged=np.asarray(d["diverged"], dtype=bool),
    )


def write_policy(path, table):
    dump_json(path, policy_to_dict(table))


def read_policy(path):
    return policy_from_dict(load_json(path))


def write_report(json_path, csv_path, rows):
    """rows: list of dicts with keys method, metric, state, time, value."""
    dump_json(json_path, {"rows": rows})
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "metric", "state", "time", "value"])
        for r in rows:
            writer.writerow([r["method"], r["metric"], r["state"], r["time"],
                             _fmt(r["value"])])
