"""Seeded synthetic data: the endogenous three-action study and two
single-user generators with endogenous covariates for targeted tests.

All randomness flows through counter-based Philox streams keyed by
(master seed, trial index), so any trial can be regenerated in isolation
and datasets are bit-reproducible across machines.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError
from .model import (
    Action,
    Dataset,
    Family,
    ModelSpec,
    State,
    Step,
    Trajectory,
    build_features,
)

BETA0 = (-1.0, 0.2, -1.5, 0.8, 0.7, 0.1, 0.2, -1.2, -1.4)
NONSPARSE_VARIANCES = (2.0, 0.1, 0.1, 3.0, 4.0, 4.0, 5.0, 10.0, 12.0)
SPARSE_VARIANCES = (2.0, 0.1, 0.1, 3.0, 0.0, 0.0, 5.0, 10.0, 12.0)


def study_model_spec(family: Family) -> ModelSpec:
    """Feature map (1, x, t, A-dummies, x*A, t*A) with h2 == h1."""
    return ModelSpec(
        family=family,
        covariates=("x", "t"),
        n_actions=3,
        centering=(1 / 3, 1 / 3, 1 / 3),
        interactions=("x", "t"),
    )


@dataclass(frozen=True)
class ScenarioSpec:
    outcome_family: Family
    beta0: tuple[float, ...] = BETA0
    re_variances: tuple[float, ...] = NONSPARSE_VARIANCES
    noise_sd: float = 1.5
    n: int = 50
    m: int = 30
    test_horizon: int = 10
    n_trials: int = 1
    seed: int = 0

    def __post_init__(self):
        if len(self.beta0) != 9 or len(self.re_variances) != 9:
            raise ConfigurationError("beta0 and re_variances must have length 9")
        if any(v < 0 for v in self.re_variances):
            raise ConfigurationError("random-effect variances must be nonnegative")
        if self.m < 1 or self.n < 1:
            raise ConfigurationError("n and m must be positive")

    @property
    def model_spec(self) -> ModelSpec:
        return study_model_spec(self.outcome_family)


SCENARIOS = {
    "continuous-nonsparse": dict(outcome_family=Family.GAUSSIAN,
                                 re_variances=NONSPARSE_VARIANCES),
    "continuous-sparse": dict(outcome_family=Family.GAUSSIAN,
                              re_variances=SPARSE_VARIANCES),
    "binary-nonsparse": dict(outcome_family=Family.BERNOULLI,
                             re_variances=NONSPARSE_VARIANCES),
    "binary-sparse": dict(outcome_family=Family.BERNOULLI,
                          re_variances=SPARSE_VARIANCES),
}


def named_scenario(name: str, **overrides) -> ScenarioSpec:
    if name not in SCENARIOS:
        raise ConfigurationError(
            f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    kwargs = dict(SCENARIOS[name])
    kwargs.update(overrides)
    return ScenarioSpec(**kwargs)


@dataclass
class SimulatedTrial:
    trajectories: tuple[Trajectory, ...]
    alpha0: np.ndarray
    u0: np.ndarray
    scenario: ScenarioSpec

    def training_trajectories(self) -> tuple[Trajectory, ...]:
        m = self.scenario.m
        return tuple(Trajectory(t.user_id, t.steps[:m]) for t in self.trajectories)

    def test_trajectories(self) -> tuple[Trajectory, ...]:
        m = self.scenario.m
        return tuple(Trajectory(t.user_id, t.steps[m:]) for t in self.trajectories)

    def training_dataset(self) -> Dataset:
        return Dataset(self.training_trajectories(), self.scenario.model_spec)


def trial_rng(seed: int, trial_index: int) -> np.random.Generator:
    """Independent substream for one trial of a study."""
    return np.random.Generator(np.random.Philox(key=(seed % 2**64) * 2**64
                                                + trial_index))


def sample_random_effects(spec: ScenarioSpec, rng: np.random.Generator):
    """Draw (alpha0 (n x 9), u0 (n,)); zero-variance columns are exactly 0."""
    sd = np.sqrt(np.asarray(spec.re_variances))
    alpha0 = rng.standard_normal((spec.n, 9)) * sd[None, :]
    u0 = rng.uniform(0.0, 1.0, size=spec.n)
    return alpha0, u0


def transition_probability(y_prev: float, x_prev: float, action_code: float,
                           alpha_row: np.ndarray) -> float:
    """P(X_t = 1) given the previous step; action_code = label - 2."""
    shift = alpha_row[3] - alpha_row[4] + alpha_row[5] - alpha_row[6]
    return float(expit((-3.0 * y_prev + 2.0 * x_prev - action_code) / 10.0 + shift))


def gen_trajectory(spec: ScenarioSpec, alpha0_row: np.ndarray, u0_i: float,
                   rng: np.random.Generator, user_id: str = "u0",
                   horizon: int | None = None) -> Trajectory:
    """One user's endogenous trajectory of length m + test_horizon."""
    horizon = horizon if horizon is not None else spec.m + spec.test_horizon
    if horizon < 1:
        raise ConfigurationError("horizon must be at least 1")
    model = spec.model_spec
    beta0 = np.asarray(spec.beta0)
    steps = []
    x_prev = y_prev = code_prev = 0.0
    for t in range(1, horizon + 1):
        if t == 1:
            p_x = u0_i
        else:
            p_x = transition_probability(y_prev, x_prev, code_prev, alpha0_row)
        x = 1.0 if rng.uniform() < p_x else -1.0
        label = int(rng.integers(1, 4))
        action = model.action(label)
        state = State(covariates=(x, float(t)), time_index=t)
        h1, h2 = build_features(state, action, model)
        eta = float(h1 @ beta0 + h2 @ alpha0_row)
        if spec.outcome_family == Family.GAUSSIAN:
            y = eta + spec.noise_sd * rng.standard_normal()
        else:
            y = float(rng.uniform() < expit(eta))
        steps.append(Step(state=state, action=action, outcome=y, propensity=1 / 3))
        x_prev, y_prev, code_prev = x, y, float(label - 2)
    return Trajectory(user_id=user_id, steps=tuple(steps))


def gen_trial(spec: ScenarioSpec, trial_index: int = 0) -> SimulatedTrial:
    rng = trial_rng(spec.seed, trial_index)
    alpha0, u0 = sample_random_effects(spec, rng)
    trajectories = tuple(
        gen_trajectory(spec, alpha0[i], u0[i], rng, user_id=f"u{i:03d}")
        for i in range(spec.n)
    )
    return SimulatedTrial(trajectories=trajectories, alpha0=alpha0, u0=u0,
                          scenario=spec)


def gen_study(spec: ScenarioSpec):
    """Yield the spec's n_trials independent trials."""
    for k in range(spec.n_trials):
        yield gen_trial(spec, trial_index=k)


@dataclass(frozen=True)
class ExampleParams:
    """Parameters of the two single-user endogenous-covariate generators."""
    beta0: float
    alpha0: float
    tau: float = 1.0      # state SD in the binary example
    sigma: float = 1.0    # outcome SD in the autoregressive example
    mu0: float = 0.0      # initial outcome in the autoregressive example


def example_model_spec(family: Family) -> ModelSpec:
    return ModelSpec(family=family, covariates=("s",), n_actions=2,
                     centering=(0.5, 0.5), interactions=("s",))


def gen_appendix_example(which: int, params: ExampleParams, horizon: int,
                         rng: np.random.Generator) -> Trajectory:
    """Single-user fixtures with a scalar random effect and endogeneity.

    Example 1: binary outcome, the state is drawn around the latent effect.
    Example 2: Gaussian autoregressive outcome with S_t = Y_{t-1}; requires
    |beta0 + alpha0| < 1 for stationarity.
    """
    if which not in (1, 2):
        raise ConfigurationError("which must be 1 or 2")
    theta = params.beta0 + params.alpha0
    if which == 2 and abs(theta) >= 1.0:
        raise ConfigurationError(
            "|beta0 + alpha0| must be < 1 for the autoregressive example")
    steps = []
    y_prev = params.mu0
    for t in range(1, horizon + 1):
        if which == 1:
            s = params.alpha0 + params.tau * rng.standard_normal()
        else:
            s = y_prev
        a = 1.0 if rng.uniform() < 0.5 else -1.0
        label = 2 if a > 0 else 1
        mean_arg = theta * s * a
        if which == 1:
            y = float(rng.uniform() < expit(mean_arg))
        else:
            y = mean_arg + params.sigma * rng.standard_normal()
        steps.append(Step(state=State(covariates=(s,), time_index=t),
                          action=Action.coded(label, (0.5, 0.5)),
                          outcome=y, propensity=0.5))
        y_prev = y
    return Trajectory(user_id="u0", steps=tuple(steps))
