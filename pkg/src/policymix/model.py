"""Domain types, link functions, action coding and feature-map construction.

The regression model for one observation of user ``i`` is

    g(E[Y | S, A]) = h1(S, A)' beta + h2(S, A)' alpha_i,

where ``h1`` is a declarative feature map (intercept, covariates, centered
action dummies, covariate-by-dummy interactions) and ``h2`` is a sub-vector
of ``h1`` carrying the per-user random effects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError


class Family(str, Enum):
    GAUSSIAN = "gaussian-identity"
    BERNOULLI = "bernoulli-logit"


@dataclass(frozen=True)
class Action:
    """A discrete action with its centered dummy coding.

    ``dummy`` has length K-1.  For the reference label 1 it equals ``-c``;
    for label k >= 2 it equals ``e_{k-1} - c`` where ``c`` holds the
    centering probabilities of labels 2..K.
    """

    label: int
    dummy: tuple[float, ...]

    @classmethod
    def coded(cls, label: int, centering: tuple[float, ...]) -> "Action":
        k = len(centering)
        if k < 2:
            raise ConfigurationError("need at least 2 actions")
        if not (1 <= label <= k):
            raise ConfigurationError(f"action label {label} outside 1..{k}")
        if any(not 0.0 < c < 1.0 for c in centering):
            raise ConfigurationError("centering probabilities must lie in (0,1)")
        if abs(sum(centering) - 1.0) > 1e-8:
            raise ConfigurationError("centering probabilities must sum to 1")
        dummy = np.zeros(k - 1)
        if label >= 2:
            dummy[label - 2] = 1.0
        dummy -= np.asarray(centering[1:])
        return cls(label=label, dummy=tuple(dummy))


@dataclass(frozen=True)
class State:
    covariates: tuple[float, ...]
    time_index: int


@dataclass(frozen=True)
class Step:
    state: State
    action: Action
    outcome: float
    propensity: float

    def __post_init__(self):
        if not 0.0 < self.propensity <= 1.0:
            raise ConfigurationError(f"propensity {self.propensity} outside (0, 1]")


@dataclass(frozen=True)
class Trajectory:
    user_id: str
    steps: tuple[Step, ...]

    def __post_init__(self):
        if len(self.steps) < 1:
            raise ConfigurationError("trajectory must contain at least one step")
        dims = {len(s.state.covariates) for s in self.steps}
        if len(dims) != 1:
            raise ConfigurationError("covariate dimension varies within trajectory")
        times = [s.state.time_index for s in self.steps]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigurationError("time_index must be strictly increasing")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative specification of family and feature maps.

    ``h1`` terms are ordered (intercept, covariates, action dummies,
    covariate-by-dummy interactions in declared covariate-major order).
    ``h2_terms`` indexes the h1 terms that carry random effects; ``None``
    means h2 == h1.
    """

    family: Family
    covariates: tuple[str, ...]
    n_actions: int
    centering: tuple[float, ...]
    interactions: tuple[str, ...] = ()
    h2_terms: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.n_actions < 2:
            raise ConfigurationError("need at least 2 actions")
        if len(self.centering) != self.n_actions:
            raise ConfigurationError("centering length must equal n_actions")
        Action.coded(1, self.centering)  # validates the probabilities
        unknown = set(self.interactions) - set(self.covariates)
        if unknown:
            raise ConfigurationError(f"interaction covariates not declared: {unknown}")
        if self.h2_terms is not None:
            if any(not 0 <= j < self.p for j in self.h2_terms):
                raise ConfigurationError("h2_terms index outside h1 range")
            if len(set(self.h2_terms)) != len(self.h2_terms):
                raise ConfigurationError("h2_terms contains duplicates")

    @property
    def n_dummies(self) -> int:
        return self.n_actions - 1

    @property
    def p(self) -> int:
        return 1 + len(self.covariates) + self.n_dummies * (1 + len(self.interactions))

    @property
    def h2_index(self) -> tuple[int, ...]:
        if self.h2_terms is None:
            return tuple(range(self.p))
        return self.h2_terms

    @property
    def q(self) -> int:
        return len(self.h2_index)

    @property
    def feature_names(self) -> tuple[str, ...]:
        names = ["1"] + list(self.covariates)
        dummies = [f"a{k}" for k in range(2, self.n_actions + 1)]
        names += dummies
        for cov in self.interactions:
            names += [f"{cov}:{d}" for d in dummies]
        return tuple(names)

    @property
    def policy_indices(self) -> tuple[int, ...]:
        """h1 indices of the action-dependent terms (dummies and interactions)."""
        start = 1 + len(self.covariates)
        return tuple(range(start, self.p))

    def action(self, label: int) -> Action:
        return Action.coded(label, self.centering)

    def action_space(self) -> tuple[Action, ...]:
        return tuple(self.action(k) for k in range(1, self.n_actions + 1))


@dataclass
class Parameters:
    """Fixed effects, per-user random effects and the dispersion.

    Arrays are treated as read-only once the object is constructed.
    """

    beta: np.ndarray
    alpha: np.ndarray
    phi: float = 1.0

    @classmethod
    def zeros(cls, spec: ModelSpec, n_users: int, phi: float = 1.0) -> "Parameters":
        return cls(beta=np.zeros(spec.p), alpha=np.zeros((n_users, spec.q)), phi=phi)

    def copy(self) -> "Parameters":
        return Parameters(self.beta.copy(), self.alpha.copy(), self.phi)


def build_features(state: State, action: Action, spec: ModelSpec):
    """Return (h1, h2) for one (state, action) pair."""
    cov = np.asarray(state.covariates, dtype=float)
    if cov.shape != (len(spec.covariates),):
        raise ConfigurationError(
            f"state has {cov.size} covariates, spec declares {len(spec.covariates)}"
        )
    dummy = np.asarray(action.dummy, dtype=float)
    if dummy.shape != (spec.n_dummies,):
        raise ConfigurationError("action dummy length does not match spec")
    parts = [np.ones(1), cov, dummy]
    for name in spec.interactions:
        parts.append(cov[spec.covariates.index(name)] * dummy)
    h1 = np.concatenate(parts)
    h2 = h1[list(spec.h2_index)]
    return h1, h2


def inverse_link(family: Family, eta):
    """Mean response for a linear predictor; overflow-safe for the logit."""
    if family == Family.GAUSSIAN:
        return np.asarray(eta, dtype=float) if np.ndim(eta) else float(eta)
    out = expit(eta)
    return out if np.ndim(eta) else float(out)


def linear_predictor(params: Parameters, user_index: int, h1, h2) -> float:
    if not 0 <= user_index < params.alpha.shape[0]:
        raise ConfigurationError(f"user_index {user_index} out of range")
    return float(np.dot(h1, params.beta) + np.dot(h2, params.alpha[user_index]))


def centering_from_actions(trajectories, n_actions: int) -> tuple[float, ...]:
    """Observed action proportions, for centering ingested (non-randomized) data."""
    counts = np.zeros(n_actions)
    for traj in trajectories:
        for step in traj.steps:
            counts[step.action.label - 1] += 1
    if counts.min() <= 0:
        raise ConfigurationError("every action label must be observed at least once")
    return tuple(counts / counts.sum())


class Dataset:
    """Trajectories compiled to flat arrays, user-contiguous.

    Attributes
    ----------
    y, propensity : (N,) arrays
    h1 : (N, p), h2 : (N, q) feature matrices
    user : (N,) int user index per observation
    offsets : (n+1,) cumulative step counts, for per-user reductions
    """

    def __init__(self, trajectories, spec: ModelSpec):
        self.spec = spec
        self.trajectories = tuple(trajectories)
        if not self.trajectories:
            raise ConfigurationError("dataset must contain at least one trajectory")
        self.user_ids = tuple(t.user_id for t in self.trajectories)
        if len(set(self.user_ids)) != len(self.user_ids):
            raise ConfigurationError("duplicate user_id in dataset")
        self.n = len(self.trajectories)

        rows_h1, rows_h2, ys, props, users = [], [], [], [], []
        for i, traj in enumerate(self.trajectories):
            for step in traj.steps:
                h1, h2 = build_features(step.state, step.action, spec)
                rows_h1.append(h1)
                rows_h2.append(h2)
                ys.append(step.outcome)
                props.append(step.propensity)
                users.append(i)
        self.h1 = np.asarray(rows_h1)
        self.h2 = np.asarray(rows_h2) if spec.q else np.zeros((len(ys), 0))
        self.y = np.asarray(ys, dtype=float)
        self.propensity = np.asarray(props, dtype=float)
        self.user = np.asarray(users, dtype=int)
        counts = np.bincount(self.user, minlength=self.n)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        if spec.family == Family.BERNOULLI and not np.isin(self.y, (0.0, 1.0)).all():
            raise ConfigurationError("Bernoulli outcomes must be coded 0/1")

    @property
    def n_obs(self) -> int:
        return self.y.size

    def user_index(self, user_id: str) -> int:
        try:
            return self.user_ids.index(user_id)
        except ValueError:
            raise ConfigurationError(f"unknown user_id {user_id!r}") from None

    def user_sum(self, values: np.ndarray) -> np.ndarray:
        """Sum observation-level rows within each user.  values: (N,) or (N, k)."""
        if values.ndim == 1:
            return np.add.reduceat(values, self.offsets[:-1])
        return np.add.reduceat(values, self.offsets[:-1], axis=0)

    def eta(self, params: Parameters) -> np.ndarray:
        out = self.h1 @ params.beta
        if self.spec.q:
            out = out + np.einsum("ij,ij->i", self.h2, params.alpha[self.user])
        return out
