import os

# the sandbox exposes a single core; keep BLAS from spawning useless threads
for _v in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_v, "1")

import numpy as np
import pytest

from policymix.model import (
    Action,
    Dataset,
    Family,
    ModelSpec,
    Parameters,
    State,
    Step,
    Trajectory,
)


def small_spec(family=Family.GAUSSIAN, n_cov=1, n_actions=2, interactions=(),
               h2_terms=None):
    covariates = tuple(f"s{j}" for j in range(n_cov))
    return ModelSpec(family=family, covariates=covariates, n_actions=n_actions,
                     centering=tuple([1.0 / n_actions] * n_actions),
                     interactions=tuple(covariates[j] for j in interactions),
                     h2_terms=h2_terms)


def random_dataset(spec: ModelSpec, n_users=3, m=4, seed=0, outcome_sd=1.0):
    """Small dataset with standard-normal covariates and random actions.

    Gaussian outcomes are N(0, outcome_sd^2); Bernoulli outcomes are fair
    coin flips, so any parameter value is a valid evaluation point.
    """
    rng = np.random.default_rng(seed)
    trajectories = []
    for i in range(n_users):
        steps = []
        for t in range(1, m + 1):
            state = State(covariates=tuple(rng.standard_normal(len(spec.covariates))),
                          time_index=t)
            action = spec.action(int(rng.integers(1, spec.n_actions + 1)))
            if spec.family == Family.GAUSSIAN:
                y = float(outcome_sd * rng.standard_normal())
            else:
                y = float(rng.integers(0, 2))
            steps.append(Step(state=state, action=action, outcome=y,
                              propensity=1.0 / spec.n_actions))
        trajectories.append(Trajectory(f"u{i}", tuple(steps)))
    return Dataset(tuple(trajectories), spec)


def random_params(spec: ModelSpec, n_users, seed=0, scale=0.5, phi=1.0):
    rng = np.random.default_rng(seed)
    return Parameters(beta=scale * rng.standard_normal(spec.p),
                      alpha=scale * rng.standard_normal((n_users, spec.q)),
                      phi=phi)


@pytest.fixture
def gaussian_toy():
    spec = small_spec(Family.GAUSSIAN, n_cov=1, n_actions=2, interactions=(0,))
    return random_dataset(spec, n_users=3, m=4, seed=1)


@pytest.fixture
def bernoulli_toy():
    spec = small_spec(Family.BERNOULLI, n_cov=1, n_actions=2, interactions=(0,))
    return random_dataset(spec, n_users=3, m=4, seed=2)
