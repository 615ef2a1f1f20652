"""Joint maximization of the penalized pseudo-log-likelihood.

The outer loop alternates (a) subgradient screening of inactive random-effect
columns, (b) a trust-region truncated-Newton (Steihaug-CG) ascent over beta
and the active alpha columns with the group norms smoothed by a small damping
constant, and (c) refreshes of the hyperparameters (Dinv, phi, weights).  The
tuning parameter lambda is chosen on a log-spaced path by an AIC criterion
with warm starts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError
from .model import Action, Dataset, Family, ModelSpec, Parameters, State, build_features
from .objective import (
    PenaltyConfig,
    curvature_weights,
    hessian_vec,
    penalized_objective,
    pseudo_loglik,
    score,
    smooth_grad,
)

# Damping constant for the smoothed group norm sqrt(||a||^2 + DAMP^2).
GROUP_NORM_DAMP = 1e-8
# Floor on the per-column variance estimate feeding the ridge.  Without it
# 1/m2 overshoots after the penalties crush a column, locking the outer loop
# into a crush/release limit cycle (or a permanently-crushed fixed point).
VARIANCE_FLOOR = 1e-2
SD_RIDGE = 1e-3


@dataclass
class TronConfig:
    delta0: float = 1.0
    accept_eta: float = 0.25
    expand_eta: float = 0.75
    shrink_factor: float = 0.25
    expand_factor: float = 2.5
    cg_tol_factor: float = 0.1
    cg_max_iter: int = 250
    grad_tol: float = 1e-6
    max_iter: int = 200

    def __post_init__(self):
        if not 0.0 < self.accept_eta < self.expand_eta < 1.0:
            raise ConfigurationError("need 0 < accept_eta < expand_eta < 1")
        for name in ("delta0", "shrink_factor", "expand_factor", "cg_tol_factor",
                     "grad_tol"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")


@dataclass
class FitResult:
    params: Parameters
    pen: PenaltyConfig
    active_groups: tuple[int, ...]
    objective_path: list[float]
    lambda_path: list[tuple[float, float, int]]
    converged: bool
    iterations: int
    spec: ModelSpec
    user_ids: tuple[str, ...]
    diagnostics: dict = field(default_factory=dict)


class _SmoothProblem:
    """Smooth part of the objective restricted to beta plus active columns."""

    def __init__(self, data: Dataset, pen: PenaltyConfig, active: np.ndarray,
                 phi: float, damp: float = GROUP_NORM_DAMP):
        self.data = data
        self.pen = pen
        self.active = np.asarray(active, dtype=int)
        self.phi = phi
        self.damp = damp
        self.p = data.spec.p
        self.q = data.spec.q
        self.n = data.n
        self.k = self.active.size

    def pack(self, params: Parameters) -> np.ndarray:
        if self.k:
            return np.concatenate([params.beta, params.alpha[:, self.active].ravel()])
        return params.beta.copy()

    def unpack(self, theta: np.ndarray) -> Parameters:
        alpha = np.zeros((self.n, self.q))
        if self.k:
            alpha[:, self.active] = theta[self.p:].reshape(self.n, self.k)
        return Parameters(beta=theta[:self.p].copy(), alpha=alpha, phi=self.phi)

    def _damped_norms(self, alpha: np.ndarray) -> np.ndarray:
        cols = alpha[:, self.active]
        return np.sqrt(np.sum(cols**2, axis=0) + self.damp**2)

    def value(self, params: Parameters) -> float:
        val = pseudo_loglik(self.data, params)
        if self.q:
            val -= 0.5 * float(np.sum(params.alpha**2 * self.pen.d_inv[None, :]))
        if self.k and self.pen.lam > 0:
            val -= self.pen.lam * float(
                np.sum(self.pen.weights[self.active] * self._damped_norms(params.alpha))
            )
        return float(val)

    def grad(self, params: Parameters) -> np.ndarray:
        gb, ga = smooth_grad(self.data, params, self.pen)
        if self.k and self.pen.lam > 0:
            s = self._damped_norms(params.alpha)
            ga = ga.copy()
            ga[:, self.active] -= (
                self.pen.lam * self.pen.weights[self.active] / s
            )[None, :] * params.alpha[:, self.active]
        if self.k:
            return np.concatenate([gb, ga[:, self.active].ravel()])
        return gb

    def scaling(self, params: Parameters, weights: np.ndarray) -> np.ndarray:
        """sqrt of diag(-H) on the free coordinates, for Jacobi-scaled CG."""
        d_beta = (weights[:, None] * self.data.h1**2).sum(axis=0)
        parts = [d_beta]
        if self.k:
            d_alpha = self.data.user_sum(weights[:, None] * self.data.h2**2)
            d_alpha = d_alpha[:, self.active] + self.pen.d_inv[None, self.active]
            if self.pen.lam > 0:
                s = self._damped_norms(params.alpha)
                lam_w = self.pen.lam * self.pen.weights[self.active]
                cols = params.alpha[:, self.active]
                d_alpha = d_alpha + lam_w[None, :] * (1.0 / s[None, :]
                                                      - cols**2 / (s**3)[None, :])
            parts.append(d_alpha.ravel())
        diag = np.concatenate(parts)
        return np.sqrt(np.maximum(diag, 1e-12 * max(diag.max(), 1.0)))

    def make_hv(self, params: Parameters, weights: np.ndarray | None = None):
        """Return v -> (-H) v on the free coordinates at the current point."""
        if weights is None:
            weights = curvature_weights(self.data, params)
        if self.k and self.pen.lam > 0:
            s = self._damped_norms(params.alpha)
            cols = params.alpha[:, self.active].copy()
            lam_w = self.pen.lam * self.pen.weights[self.active]
        else:
            s = cols = lam_w = None

        def hv(v_free: np.ndarray) -> np.ndarray:
            v_full = np.zeros(self.p + self.n * self.q)
            v_full[:self.p] = v_free[:self.p]
            if self.k:
                va = np.zeros((self.n, self.q))
                va[:, self.active] = v_free[self.p:].reshape(self.n, self.k)
                v_full[self.p:] = va.ravel()
            out_full = hessian_vec(self.data, params, self.pen, v_full, weights=weights)
            out = np.empty_like(v_free)
            out[:self.p] = out_full[:self.p]
            if self.k:
                oa = out_full[self.p:].reshape(self.n, self.q)[:, self.active]
                if lam_w is not None:
                    vcols = v_free[self.p:].reshape(self.n, self.k)
                    proj = np.sum(cols * vcols, axis=0)
                    oa = oa + lam_w[None, :] * (vcols / s[None, :]
                                                - cols * (proj / s**3)[None, :])
                out[self.p:] = oa.ravel()
            return out

        return hv


def _to_boundary(s: np.ndarray, d: np.ndarray, delta: float) -> np.ndarray:
    # largest tau >= 0 with ||s + tau d|| = delta
    dd = d @ d
    sd = s @ d
    ss = s @ s
    tau = (-sd + np.sqrt(sd**2 + dd * (delta**2 - ss))) / dd
    return s + tau * d


def _steihaug(g: np.ndarray, hv, delta: float, tol: float, max_iter: int):
    """Approximately minimize g.s + 0.5 s.B(s) within ||s|| <= delta."""
    s = np.zeros_like(g)
    r = g.copy()
    if np.linalg.norm(r) <= tol:
        return s
    d = -r
    rr = r @ r
    for _ in range(max_iter):
        bd = hv(d)
        dbd = d @ bd
        if dbd <= 0:
            return _to_boundary(s, d, delta)
        a = rr / dbd
        s_new = s + a * d
        if np.linalg.norm(s_new) >= delta:
            return _to_boundary(s, d, delta)
        s = s_new
        r = r + a * bd
        rr_new = r @ r
        if np.sqrt(rr_new) <= tol:
            break
        d = -r + (rr_new / rr) * d
        rr = rr_new
    return s


def tron_maximize(data: Dataset, pen: PenaltyConfig, init: Parameters,
                  cfg: TronConfig | None = None,
                  free_groups=None) -> tuple[Parameters, dict]:
    """Trust-region Newton ascent over beta and the listed alpha columns.

    Columns outside ``free_groups`` stay frozen at zero.  Returns the
    maximizer together with an info dict (accepted objective path,
    iteration count, convergence flag).
    """
    cfg = cfg or TronConfig()
    active = np.arange(data.spec.q) if free_groups is None else np.asarray(
        sorted(free_groups), dtype=int)
    prob = _SmoothProblem(data, pen, active, phi=init.phi)
    theta = prob.pack(init)
    params = prob.unpack(theta)
    f = prob.value(params)
    g = prob.grad(params)
    if not (np.isfinite(f) and np.isfinite(g).all()):
        raise NumericError("non-finite objective or gradient at the start",
                           {"objective": f})
    g0_norm = np.linalg.norm(g)
    tol = cfg.grad_tol * max(1.0, g0_norm)
    delta = cfg.delta0
    path = [f]
    converged = np.linalg.norm(g) <= tol
    it = 0
    while not converged and it < cfg.max_iter:
        it += 1
        weights = curvature_weights(data, params)
        hv = prob.make_hv(params, weights)
        # Jacobi scaling: CG runs in z = S x with S = sqrt(diag(-H)), which
        # collapses the spread the ridge diagonal puts on the spectrum
        sd = prob.scaling(params, weights)
        gz = g / sd
        hvz = lambda vz: hv(vz / sd) / sd
        cg_tol = cfg.cg_tol_factor * np.linalg.norm(gz)
        step_z = _steihaug(-gz, hvz, delta, cg_tol, cfg.cg_max_iter)
        step = step_z / sd
        step_norm = np.linalg.norm(step_z)
        if step_norm == 0.0:
            break
        pred = float(g @ step - 0.5 * step @ hv(step))
        cand = prob.unpack(theta + step)
        f_new = prob.value(cand)
        if not np.isfinite(f_new):
            raise NumericError("non-finite objective during trust-region step",
                               {"iteration": it, "objective": f})
        rho = (f_new - f) / pred if pred > 0 else -np.inf
        if rho >= cfg.accept_eta:
            theta = theta + step
            params = cand
            f = f_new
            g = prob.grad(params)
            if not np.isfinite(g).all():
                raise NumericError("non-finite gradient after accepted step",
                                   {"iteration": it})
            path.append(f)
            if rho >= cfg.expand_eta:
                delta = max(delta, cfg.expand_factor * step_norm)
        else:
            delta = cfg.shrink_factor * min(delta, step_norm)
            if delta < 1e-14:
                break
        converged = np.linalg.norm(g) <= tol
    info = {"objective_path": path, "iterations": it, "converged": bool(converged),
            "grad_norm": float(np.linalg.norm(g))}
    return params, info


def pooled_glm(data: Dataset, max_iter: int = 100, tol: float = 1e-10):
    """Pooled GLM over h1 (alpha = 0).  Newton with step halving for Bernoulli.

    Returns (beta, converged).
    """
    x, y = data.h1, data.y
    if data.spec.family == Family.GAUSSIAN:
        beta, *_ = np.linalg.lstsq(x, y, rcond=None)
        return beta, True
    from scipy.special import expit

    beta = np.zeros(data.spec.p)

    def loglik(b):
        eta = x @ b
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    ll = loglik(beta)
    for _ in range(max_iter):
        eta = x @ beta
        mu = expit(eta)
        w = np.maximum(mu * (1.0 - mu), 1e-10)
        grad = x.T @ (y - mu)
        if np.linalg.norm(grad) < tol * max(1.0, np.linalg.norm(beta)):
            return beta, True
        h = x.T @ (x * w[:, None])
        try:
            step = np.linalg.solve(h, grad)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(h, grad, rcond=None)
        scale = 1.0
        for _ in range(30):
            ll_new = loglik(beta + scale * step)
            if ll_new >= ll:
                break
            scale *= 0.5
        beta = beta + scale * step
        ll = loglik(beta)
    return beta, False


def kkt_screen(data: Dataset, params: Parameters, pen: PenaltyConfig, l: int) -> bool:
    """True iff column l must enter the active set at the current point."""
    if not np.allclose(params.alpha[:, l], 0.0):
        raise ConfigurationError("kkt_screen expects alpha column l zeroed")
    _, ga = smooth_grad(data, params, pen)
    return float(np.linalg.norm(ga[:, l])) > pen.lam * pen.weights[l]


def _screen_all(data: Dataset, params: Parameters, pen: PenaltyConfig,
                active_mask: np.ndarray) -> bool:
    """Run the kkt_screen test on every inactive column with one gradient
    evaluation; flips violated columns in place and reports whether any did."""
    inactive = np.flatnonzero(~active_mask)
    if inactive.size == 0:
        return False
    _, ga = smooth_grad(data, params, pen)
    norms = np.linalg.norm(ga[:, inactive], axis=0)
    hits = inactive[norms > pen.lam * pen.weights[inactive]]
    active_mask[hits] = True
    return hits.size > 0


def update_hyperparams(alpha_hat: np.ndarray, residuals: np.ndarray, family: Family,
                       col_curvature: np.ndarray | None = None,
                       d_inv_old: np.ndarray | None = None):
    """Refresh (Dinv diagonal, group weights, phi) from the current fit.

    The variance of column l is estimated by its second moment.  When the
    per-user column curvatures c_il = sum_t w_it h_il^2 are supplied together
    with the previous Dinv, the EM-style posterior-variance correction
    mean_i 1/(c_il + dinv_l) is added.  The raw second moment of the
    *shrunk* estimates understates the variance, which makes the plain
    1/m2 iteration unstable: a column crushed on one cycle gets a huge
    ridge on the next and can never recover (or enters a crush/release
    limit cycle).  The corrected update is the standard EM step for a
    Gaussian random effect under the Laplace approximation and has no
    such trap.
    """
    n, q = alpha_hat.shape
    if n < 2:
        raise ConfigurationError("hyperparameter updates need at least 2 users")
    m2 = np.mean(alpha_hat**2, axis=0)
    if col_curvature is not None and d_inv_old is not None:
        # solve the self-consistent d = 1/(m2 + mean_i 1/(c_i + d)) per
        # column; the map is monotone and one-step iteration approaches a
        # binding floor only arithmetically, which stalls the outer loop
        c = np.asarray(col_curvature, dtype=float)
        d_inv = np.asarray(d_inv_old, dtype=float).copy()
        for _ in range(1000):
            var = m2 + np.mean(1.0 / (c + d_inv[None, :]), axis=0)
            d_new = 1.0 / np.maximum(var, VARIANCE_FLOOR)
            if np.max(np.abs(d_new - d_inv)) < 1e-10 * max(1.0, np.max(d_new)):
                d_inv = d_new
                break
            d_inv = d_new
    else:
        d_inv = 1.0 / np.maximum(m2, VARIANCE_FLOOR)
    sd = np.std(alpha_hat, axis=0)
    w = 1.0 / (sd + SD_RIDGE)
    if q:
        w = w * (q / w.max())
    phi = float(np.mean(residuals**2)) if family == Family.GAUSSIAN else 1.0
    return d_inv, w, phi


def _initial_state(data: Dataset):
    beta, _ = pooled_glm(data)
    if data.spec.family == Family.GAUSSIAN:
        resid = data.y - data.h1 @ beta
        phi = float(np.mean(resid**2))
        phi = max(phi, 1e-8)
    else:
        phi = 1.0
    params = Parameters(beta=beta, alpha=np.zeros((data.n, data.spec.q)), phi=phi)
    q = data.spec.q
    return params, np.ones(q), np.ones(q)


def fit_at_lambda(data: Dataset, lam: float, cfg: TronConfig | None = None,
                  init: Parameters | None = None,
                  d_inv: np.ndarray | None = None,
                  weights: np.ndarray | None = None,
                  active: np.ndarray | None = None,
                  update_hyper: bool = True,
                  max_cycles: int = 50) -> FitResult:
    """Alternate screening / TRON / hyperparameter refresh at a fixed lambda."""
    cfg = cfg or TronConfig()
    q, n = data.spec.q, data.n
    if init is None or d_inv is None or weights is None:
        params0, d0, w0 = _initial_state(data)
        init = init if init is not None else params0
        d_inv = d_inv if d_inv is not None else d0
        weights = weights if weights is not None else w0
    params = init.copy()
    active_mask = np.zeros(q, dtype=bool) if active is None else np.asarray(
        active, dtype=bool).copy()
    # columns carrying nonzero warm-start values must stay free
    active_mask |= np.any(params.alpha != 0.0, axis=0)

    objective_path: list[float] = []
    prev_obj = None
    converged = False
    cycles = 0
    tron_iters = 0
    h_hist: list[np.ndarray] = []
    r_hist: list[float] = []
    pen = PenaltyConfig(d_inv=d_inv, lam=lam, weights=weights)
    while cycles < max_cycles:
        cycles += 1
        # refresh hyperparameters between TRON solves (not after the last
        # one, so the returned params are stationary for the returned pen)
        if cycles > 1 and update_hyper and q:
            resid = data.y - data.eta(params)
            obs_w = curvature_weights(data, params)
            col_curv = data.user_sum(obs_w[:, None] * data.h2**2)
            d_inv, weights, phi = update_hyperparams(
                params.alpha, resid, data.spec.family,
                col_curvature=col_curv, d_inv_old=d_inv)
            # the outer (Dinv, w, phi) fixed point is a near-linear
            # contraction whose dominant ratio sits around 0.85-0.95, so
            # plain iteration can need >100 cycles; when two consecutive
            # secant ratio estimates agree, extrapolate the remaining
            # geometric tail in one jump (Aitken) and restart the history
            h = np.concatenate([d_inv, weights, [phi]])
            h_hist.append(h)
            if len(h_hist) >= 3:
                d1 = h_hist[-2] - h_hist[-3]
                d2 = h_hist[-1] - h_hist[-2]
                den = float(d1 @ d1)
                r = float(d2 @ d1) / den if den > 0 else 0.0
                r_hist.append(r)
                if (0.3 < r < 0.98 and len(r_hist) >= 2
                        and abs(r_hist[-1] - r_hist[-2]) < 0.05):
                    rc = min(r, 0.95)
                    h_ex = h + (rc / (1.0 - rc)) * d2
                    d_inv = np.clip(h_ex[:q], 1e-8, 1.0 / VARIANCE_FLOOR)
                    weights = np.maximum(h_ex[q:2 * q], 1e-8)
                    phi = float(max(h_ex[-1], 1e-8))
                    h_hist = []
                    r_hist = []
            params = Parameters(params.beta, params.alpha, phi)
            pen = PenaltyConfig(d_inv=d_inv, lam=lam, weights=weights)
        before = active_mask.copy()
        _screen_all(data, params, pen, active_mask)
        params, info = tron_maximize(data, pen, params, cfg,
                                     free_groups=np.flatnonzero(active_mask))
        tron_iters += info["iterations"]
        # re-screen at the new point; a violation forces another cycle
        newly = _screen_all(data, params, pen, active_mask)
        obj = penalized_objective(data, params, pen).total
        objective_path.append(obj)
        stable = (not newly) and np.array_equal(before, active_mask)
        if (stable and prev_obj is not None
                and abs(obj - prev_obj) < 1e-7 * max(1.0, abs(obj))):
            converged = True
            break
        prev_obj = obj

    return FitResult(
        params=params,
        pen=pen,
        active_groups=tuple(int(l) for l in np.flatnonzero(active_mask)),
        objective_path=objective_path,
        lambda_path=[],
        converged=converged,
        iterations=cycles,
        spec=data.spec,
        user_ids=data.user_ids,
        diagnostics={"tron_iterations": tron_iters},
    )


def aic(data: Dataset, fit: FitResult) -> float:
    df = data.spec.p + data.n * len(fit.active_groups)
    return -2.0 * pseudo_loglik(data, fit.params) + 2.0 * df


def select_lambda(data: Dataset, cfg: TronConfig | None = None,
                  n_lambda: int = 20, lambda_min_ratio: float = 1e-3,
                  update_hyper: bool = True) -> FitResult:
    """AIC selection of lambda over a warm-started log-spaced path."""
    cfg = cfg or TronConfig()
    params0, d0, w0 = _initial_state(data)
    _, ga = score(data, params0)
    col_norms = np.linalg.norm(ga, axis=0)
    lam_max = float(np.max(col_norms / w0)) if data.spec.q else 0.0
    if lam_max <= 0:
        lam_max = 1.0
    lambdas = list(np.geomspace(lam_max, lam_max * lambda_min_ratio, n_lambda))
    lambdas.append(0.0)

    best = None
    best_aic = np.inf
    path: list[tuple[float, float, int]] = []
    params, d_inv, weights, active = params0, d0, w0, None
    any_converged = False
    for lam in lambdas:
        fit = fit_at_lambda(data, lam, cfg, init=params, d_inv=d_inv,
                            weights=weights, active=active,
                            update_hyper=update_hyper)
        any_converged = any_converged or fit.converged
        crit = aic(data, fit)
        path.append((float(lam), float(crit), len(fit.active_groups)))
        if crit < best_aic:  # ties keep the earlier (larger, sparser) lambda
            best = fit
            best_aic = crit
        params = fit.params
        d_inv = fit.pen.d_inv
        weights = fit.pen.weights
        active = np.zeros(data.spec.q, dtype=bool)
        active[list(fit.active_groups)] = True
    if not any_converged:
        raise NumericError("no lambda on the path produced a converged fit",
                           {"lambda_path": path})
    best.lambda_path = path
    return best


def predicted_means(fit: FitResult, user_index: int, state: State) -> dict[int, float]:
    """Per-action predicted mean outcomes for one user at one state."""
    from .model import inverse_link, linear_predictor

    out = {}
    for action in fit.spec.action_space():
        h1, h2 = build_features(state, action, fit.spec)
        eta = linear_predictor(fit.params, user_index, h1, h2)
        out[action.label] = inverse_link(fit.spec.family, eta)
    return out


def extract_policy(fit: FitResult, user_index: int, state: State,
                   action_space=None) -> Action:
    """Argmax action of the estimated linear predictor; ties go to the
    smallest label."""
    from .model import linear_predictor

    space = action_space if action_space is not None else fit.spec.action_space()
    best_action = None
    best_eta = -np.inf
    for action in space:
        h1, h2 = build_features(state, action, fit.spec)
        eta = linear_predictor(fit.params, user_index, h1, h2)
        if eta > best_eta:
            best_eta = eta
            best_action = action
    return best_action
