"""Policy-quality metrics and the two comparison estimators.

Metrics: mean squared error of the policy-relevant coefficients, value and
value ratio of a candidate policy at given states, and a self-normalized
inverse-probability-weighted response rate on held-out data.

Baselines: a pooled independence-working-correlation fit (one policy for
everyone) and an N-of-1 fit per user with no pooling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, NoOverlapError
from .model import Dataset, Family, ModelSpec, State, build_features, inverse_link
from .solver import FitResult, pooled_glm

MGLM_DIVERGENCE_NORM = 1e5


@dataclass
class PolicyTable:
    """Per-user decision rules realized as (beta, alpha_i) coefficient pairs."""

    method: str
    beta: np.ndarray
    alpha: np.ndarray
    spec: ModelSpec
    user_ids: tuple[str, ...]
    diverged: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.diverged is None:
            self.diverged = np.zeros(len(self.user_ids), dtype=bool)

    @classmethod
    def from_fit(cls, fit: FitResult, method: str = "ppl") -> "PolicyTable":
        return cls(method=method, beta=fit.params.beta.copy(),
                   alpha=fit.params.alpha.copy(), spec=fit.spec,
                   user_ids=fit.user_ids)

    @property
    def n(self) -> int:
        return len(self.user_ids)

    def combined_coefs(self, i: int) -> np.ndarray:
        """h1-length coefficient vector beta + (alpha_i mapped into h1 slots)."""
        c = self.beta.copy()
        if self.alpha.shape[1]:
            c[list(self.spec.h2_index)] += self.alpha[i]
        return c

    def action_values(self, i: int, state: State) -> np.ndarray:
        """Linear predictor for each action label 1..K."""
        c = self.combined_coefs(i)
        etas = []
        for action in self.spec.action_space():
            h1, _ = build_features(state, action, self.spec)
            etas.append(float(h1 @ c))
        return np.asarray(etas)

    def decide(self, i: int, state: State) -> int:
        """Chosen action label; ties go to the smallest label."""
        return int(np.argmax(self.action_values(i, state))) + 1


def truth_table(beta0, alpha0, spec: ModelSpec, user_ids=None) -> PolicyTable:
    beta0 = np.asarray(beta0, dtype=float)
    alpha0 = np.asarray(alpha0, dtype=float)
    ids = user_ids or tuple(f"u{i:03d}" for i in range(alpha0.shape[0]))
    return PolicyTable(method="truth", beta=beta0, alpha=alpha0, spec=spec,
                      user_ids=ids)


def mse_policy_params(table: PolicyTable, truth: PolicyTable) -> float:
    """Average squared error of the action-relevant coefficients.

    Non-finite per-user contributions (diverged N-of-1 fits) propagate into
    the returned value rather than being dropped.
    """
    if table.n != truth.n:
        raise ConfigurationError("policy table and truth have different n")
    idx = list(table.spec.policy_indices)
    total = 0.0
    for i in range(table.n):
        c_hat = table.combined_coefs(i)[idx]
        if table.diverged[i] and not np.isfinite(c_hat).all():
            return float("inf")
        c0 = truth.combined_coefs(i)[idx]
        total += float(np.sum((c_hat - c0) ** 2))
    return total / (table.n * len(idx))


def _true_mean(truth: PolicyTable, i: int, state: State, label: int) -> float:
    c = truth.combined_coefs(i)
    h1, _ = build_features(state, truth.spec.action(label), truth.spec)
    return inverse_link(truth.spec.family, float(h1 @ c))


def value_at_state(table: PolicyTable, truth: PolicyTable, state: State) -> float:
    """Mean (over users) of the true expected outcome at the table's choices."""
    return float(np.mean([
        _true_mean(truth, i, state, table.decide(i, state))
        for i in range(table.n)
    ]))


def value_ratio(table: PolicyTable, truth: PolicyTable, state: State) -> float:
    """Position of the policy's value between the worst and optimal values.

    A degenerate denominator (optimal == worst) maps to 1.
    """
    v_hat = value_at_state(table, truth, state)
    best = worst = 0.0
    for i in range(truth.n):
        etas = truth.action_values(i, state)
        means = [inverse_link(truth.spec.family, e) for e in etas]
        best += max(means)
        worst += min(means)
    best /= truth.n
    worst /= truth.n
    if best - worst <= 0.0:
        return 1.0
    return (v_hat - worst) / (best - worst)


def iptw_response_rate(table: PolicyTable, test_trajectories) -> float:
    """Self-normalized inverse-probability-weighted mean outcome under the
    table's policy, over all test steps."""
    num = den = 0.0
    for i, traj in enumerate(test_trajectories):
        if traj.user_id != table.user_ids[i]:
            raise ConfigurationError("test trajectories must align with the table")
        for step in traj.steps:
            if step.action.label == table.decide(i, step.state):
                w = 1.0 / step.propensity
                num += w * step.outcome
                den += w
    if den == 0.0:
        raise NoOverlapError("no observed action matched the policy")
    return num / den


def gee_fit(data: Dataset) -> PolicyTable:
    """Pooled fit with an independence working structure; alpha is zero."""
    beta, converged = pooled_glm(data)
    if not converged:
        raise ConfigurationError("pooled fit did not converge")
    return PolicyTable(method="gee", beta=beta,
                       alpha=np.zeros((data.n, data.spec.q)), spec=data.spec,
                       user_ids=data.user_ids)


def _single_glm(x: np.ndarray, y: np.ndarray, family: Family, max_iter: int = 25):
    """One user's unregularized fit.  Bernoulli Newton runs without any
    safeguard so separable data produce the divergent coefficients this
    estimator is known for; they are retained, not repaired.
    """
    if family == Family.GAUSSIAN:
        # plain normal equations: near-singular per-user designs yield the
        # huge coefficients this estimator is known for, and they are kept
        try:
            beta = np.linalg.solve(x.T @ x, x.T @ y)
            return beta, bool(np.isfinite(beta).all())
        except np.linalg.LinAlgError:
            beta, *_ = np.linalg.lstsq(x, y, rcond=None)
            return beta, False
    beta = np.zeros(x.shape[1])
    converged = False
    for _ in range(max_iter):
        eta = np.clip(x @ beta, -700, 700)
        mu = expit(eta)
        grad = x.T @ (y - mu)
        if np.linalg.norm(grad) < 1e-8 * max(1.0, np.linalg.norm(beta)):
            converged = True
            break
        w = mu * (1.0 - mu)
        h = x.T @ (x * w[:, None])
        try:
            step = np.linalg.solve(h, grad)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(h, grad, rcond=None)
        if not np.isfinite(step).all():
            beta = np.where(np.isfinite(beta) & (beta != 0), beta * np.inf,
                            np.sign(grad) * np.inf)
            break
        beta = beta + step
        if np.linalg.norm(beta) > 1e150:
            break
    return beta, converged


def mglm_fit(data: Dataset) -> PolicyTable:
    """Independent per-user fits on h1; no information is shared.

    Users whose fits diverge (separation, singular designs) are flagged but
    their coefficients are kept so downstream error metrics reflect the
    blowup.
    """
    n, p, q = data.n, data.spec.p, data.spec.q
    beta = np.zeros(p)
    alpha = np.zeros((n, q))
    if set(data.spec.h2_index) != set(range(p)):
        raise ConfigurationError("per-user fits require h2 terms covering h1")
    diverged = np.zeros(n, dtype=bool)
    # per-user coefficients live in alpha (one full h1 vector each); beta stays 0
    for i in range(n):
        lo, hi = data.offsets[i], data.offsets[i + 1]
        b_i, converged = _single_glm(data.h1[lo:hi], data.y[lo:hi],
                                     data.spec.family)
        norm = np.linalg.norm(b_i)
        diverged[i] = (not converged) or (not np.isfinite(norm)) or norm > MGLM_DIVERGENCE_NORM
        alpha[i] = b_i[list(data.spec.h2_index)]
    return PolicyTable(method="mglm", beta=beta, alpha=alpha, spec=data.spec,
                       user_ids=data.user_ids, diverged=diverged)
