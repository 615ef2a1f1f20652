"""Penalized pseudo-log-likelihood: value, score and Hessian-vector products.

The objective is

    L(beta, alpha) = sum_it l(y_it; eta_it, phi)
                     - 1/2 sum_i alpha_i' Dinv alpha_i
                     - lambda * sum_l w_l ||alpha_.l||,

with ``Dinv`` restricted to a diagonal PSD matrix.  ``beta`` couples all
users while the ``alpha_i`` blocks are independent given ``beta``; the
Hessian-vector product exploits that arrow structure and never forms the
(p + n q)^2 matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ParameterError
from .model import Dataset, Family, Parameters

# Bernoulli curvature floor; keeps CG stable when |eta| is huge.
MIN_BERNOULLI_WEIGHT = 1e-10


@dataclass
class PenaltyConfig:
    """Ridge matrix (diagonal of D^-), group-lasso tuning parameter and weights."""

    d_inv: np.ndarray
    lam: float
    weights: np.ndarray

    def __post_init__(self):
        self.d_inv = np.asarray(self.d_inv, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.lam < 0:
            raise ConfigurationError("lambda must be nonnegative")
        if (self.d_inv < 0).any():
            raise ConfigurationError("diagonal D^- entries must be nonnegative")
        if not np.isfinite(self.weights).all() or (self.weights < 0).any():
            raise ConfigurationError("weights must be finite and nonnegative")

    @classmethod
    def default(cls, q: int, lam: float = 0.0) -> "PenaltyConfig":
        return cls(d_inv=np.ones(q), lam=lam, weights=np.ones(q))


@dataclass
class ObjectiveValue:
    pseudo_loglik: float
    ridge_term: float
    group_lasso_term: float
    total: float


def _check(data: Dataset, params: Parameters):
    if params.beta.shape != (data.spec.p,):
        raise ConfigurationError("beta dimension does not match spec")
    if params.alpha.shape != (data.n, data.spec.q):
        raise ConfigurationError("alpha shape does not match (n, q)")
    if data.spec.family == Family.GAUSSIAN and params.phi <= 0:
        raise ParameterError("Gaussian dispersion phi must be positive")


def pseudo_loglik(data: Dataset, params: Parameters) -> float:
    """Sum of working conditional log-likelihoods over all observations."""
    _check(data, params)
    eta = data.eta(params)
    y = data.y
    if data.spec.family == Family.BERNOULLI:
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    phi = params.phi
    return float(np.sum(-((y - eta) ** 2) / (2.0 * phi)) - 0.5 * data.n_obs * np.log(2.0 * np.pi * phi))


def _mean_and_scale(data: Dataset, params: Parameters):
    """Conditional mean mu and the score scale a(phi)."""
    eta = data.eta(params)
    if data.spec.family == Family.BERNOULLI:
        from scipy.special import expit

        return eta, expit(eta), 1.0
    return eta, eta, params.phi


def score(data: Dataset, params: Parameters):
    """Unpenalized score: (grad_beta (p,), grad_alpha (n, q))."""
    _check(data, params)
    _, mu, a_phi = _mean_and_scale(data, params)
    r = (data.y - mu) / a_phi
    grad_beta = data.h1.T @ r
    if data.spec.q:
        grad_alpha = data.user_sum(data.h2 * r[:, None])
    else:
        grad_alpha = np.zeros((data.n, 0))
    return grad_beta, grad_alpha


def smooth_grad(data: Dataset, params: Parameters, pen: PenaltyConfig):
    """Gradient of (pseudo_loglik - ridge_term)."""
    grad_beta, grad_alpha = score(data, params)
    if data.spec.q:
        grad_alpha = grad_alpha - params.alpha * pen.d_inv[None, :]
    return grad_beta, grad_alpha


def penalized_objective(data: Dataset, params: Parameters, pen: PenaltyConfig) -> ObjectiveValue:
    ll = pseudo_loglik(data, params)
    ridge = 0.5 * float(np.sum(params.alpha**2 * pen.d_inv[None, :])) if data.spec.q else 0.0
    if data.spec.q:
        col_norms = np.linalg.norm(params.alpha, axis=0)
        group = float(pen.lam * np.sum(pen.weights * col_norms))
    else:
        group = 0.0
    return ObjectiveValue(ll, ridge, group, ll - ridge - group)


def curvature_weights(data: Dataset, params: Parameters) -> np.ndarray:
    """Per-observation negative second derivative of l with respect to eta."""
    if data.spec.family == Family.BERNOULLI:
        _, mu, _ = _mean_and_scale(data, params)
        return np.maximum(mu * (1.0 - mu), MIN_BERNOULLI_WEIGHT)
    return np.full(data.n_obs, 1.0 / params.phi)


def hessian_vec(data: Dataset, params: Parameters, pen: PenaltyConfig, v: np.ndarray,
                weights: np.ndarray | None = None) -> np.ndarray:
    """Product (-H) v for the Hessian H of (pseudo_loglik - ridge_term).

    ``v`` is laid out as [beta (p,), alpha row-major (n*q,)].  ``weights``
    may carry precomputed curvature weights to amortize across CG iterations.
    """
    p, q, n = data.spec.p, data.spec.q, data.n
    v = np.asarray(v, dtype=float)
    if v.shape != (p + n * q,):
        raise ConfigurationError(f"v must have length {p + n * q}")
    if weights is None:
        weights = curvature_weights(data, params)
    vb = v[:p]
    va = v[p:].reshape(n, q)
    eta_v = data.h1 @ vb
    if q:
        eta_v = eta_v + np.einsum("ij,ij->i", data.h2, va[data.user])
    t = weights * eta_v
    out_b = data.h1.T @ t
    if q:
        out_a = data.user_sum(data.h2 * t[:, None]) + va * pen.d_inv[None, :]
    else:
        out_a = np.zeros((n, 0))
    return np.concatenate([out_b, out_a.ravel()])
