import numpy as np
import pytest

from policymix.errors import ConfigurationError, ParameterError
from policymix.model import Dataset, Family, Parameters, State, Step, Trajectory
from policymix.objective import (
    PenaltyConfig,
    curvature_weights,
    hessian_vec,
    penalized_objective,
    pseudo_loglik,
    score,
    smooth_grad,
)
from policymix.simulate import gen_trial, named_scenario, study_model_spec

from conftest import random_dataset, random_params, small_spec


def one_step_dataset(family, outcome, spec=None):
    spec = spec or small_spec(family, n_cov=0)
    steps = (Step(State((), 1), spec.action(1), outcome, 0.5),)
    return Dataset((Trajectory("u0", steps),), spec)


def dense_negative_hessian(data, params, pen):
    """Explicit (p+nq)^2 matrix of -H for (pseudo_loglik - ridge)."""
    p, q, n = data.spec.p, data.spec.q, data.n
    w = curvature_weights(data, params)
    dim = p + n * q
    out = np.zeros((dim, dim))
    for k in range(data.n_obs):
        i = data.user[k]
        row = np.zeros(dim)
        row[:p] = data.h1[k]
        row[p + i * q: p + (i + 1) * q] = data.h2[k]
        out += w[k] * np.outer(row, row)
    for i in range(n):
        sl = slice(p + i * q, p + (i + 1) * q)
        out[sl, sl] += np.diag(pen.d_inv)
    return out


class TestPseudoLoglik:
    def test_bernoulli_single_step(self):
        data = one_step_dataset(Family.BERNOULLI, 1.0)
        params = Parameters.zeros(data.spec, 1)
        assert pseudo_loglik(data, params) == pytest.approx(-np.log(2), abs=1e-12)

    def test_gaussian_zero_residual(self):
        data = one_step_dataset(Family.GAUSSIAN, 0.0)
        params = Parameters.zeros(data.spec, 1)  # eta = 0 = y, phi = 1
        assert pseudo_loglik(data, params) == pytest.approx(
            -0.5 * np.log(2 * np.pi), abs=1e-12)

    @pytest.mark.parametrize("family", list(Family))
    def test_matches_naive_summation(self, family):
        spec = small_spec(family, n_cov=1, n_actions=2, interactions=(0,))
        data = random_dataset(spec, n_users=5, m=4, seed=7)
        params = random_params(spec, 5, seed=8, phi=1.7 if family == Family.GAUSSIAN else 1.0)
        eta = data.eta(params)
        total = 0.0
        for k in range(data.n_obs):
            y, e = data.y[k], eta[k]
            if family == Family.BERNOULLI:
                total += y * e - np.log1p(np.exp(-abs(e))) - max(e, 0.0)
            else:
                total += (-(y - e) ** 2 / (2 * params.phi)
                          - 0.5 * np.log(2 * np.pi * params.phi))
        assert pseudo_loglik(data, params) == pytest.approx(total, rel=1e-12)

    def test_nonpositive_phi_rejected(self):
        data = one_step_dataset(Family.GAUSSIAN, 0.0)
        params = Parameters.zeros(data.spec, 1, phi=0.0)
        with pytest.raises(ParameterError):
            pseudo_loglik(data, params)


class TestScore:
    def test_zero_at_saturated_gaussian_fit(self):
        spec = small_spec(Family.GAUSSIAN, n_cov=0)
        data = random_dataset(spec, n_users=2, m=3, seed=0)
        data.y[:] = 0.0  # eta = 0 under zero parameters => residuals zero
        gb, ga = score(data, Parameters.zeros(spec, 2))
        assert np.allclose(gb, 0.0) and np.allclose(ga, 0.0)

    def test_bernoulli_half_gradient(self):
        data = one_step_dataset(Family.BERNOULLI, 1.0)
        gb, ga = score(data, Parameters.zeros(data.spec, 1))
        # intercept coordinate of h1 and h2 carries (y - expit(0)) = 0.5
        assert gb[0] == pytest.approx(0.5, abs=1e-12)
        assert ga[0, 0] == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("family", list(Family))
    def test_finite_differences(self, family):
        spec = small_spec(family, n_cov=1, n_actions=3, interactions=(0,))
        data = random_dataset(spec, n_users=3, m=4, seed=9)
        params = random_params(spec, 3, seed=10, phi=1.3 if family == Family.GAUSSIAN else 1.0)
        gb, ga = score(data, params)
        h = 1e-6

        def value(beta, alpha):
            return pseudo_loglik(data, Parameters(beta, alpha, params.phi))

        for j in range(spec.p):
            e = np.zeros(spec.p); e[j] = h
            fd = (value(params.beta + e, params.alpha)
                  - value(params.beta - e, params.alpha)) / (2 * h)
            assert gb[j] == pytest.approx(fd, rel=1e-6, abs=1e-8)
        for i in range(3):
            for l in range(spec.q):
                ea = np.zeros_like(params.alpha); ea[i, l] = h
                fd = (value(params.beta, params.alpha + ea)
                      - value(params.beta, params.alpha - ea)) / (2 * h)
                assert ga[i, l] == pytest.approx(fd, rel=1e-6, abs=1e-8)

    def test_score_condition_monte_carlo(self):
        # mean score at the truth is zero within Monte Carlo error
        sc = named_scenario("continuous-nonsparse", n=4, m=8, seed=11)
        spec = study_model_spec(sc.outcome_family)
        reps = 300
        sums = None
        comps = []
        for k in range(reps):
            trial = gen_trial(sc, trial_index=k)
            data = trial.training_dataset()
            params = Parameters(beta=np.asarray(sc.beta0), alpha=trial.alpha0,
                                phi=sc.noise_sd**2)
            gb, ga = score(data, params)
            vec = np.concatenate([gb, ga.ravel()])
            comps.append(vec)
        comps = np.asarray(comps)
        mean = comps.mean(axis=0)
        se = comps.std(axis=0, ddof=1) / np.sqrt(reps)
        # every coordinate within 4 standard errors of zero
        assert np.all(np.abs(mean) <= 4.0 * se + 1e-12)


class TestPenalizedObjective:
    def test_zero_alpha_collapses_to_loglik(self, gaussian_toy):
        pen = PenaltyConfig.default(gaussian_toy.spec.q, lam=2.0)
        params = Parameters.zeros(gaussian_toy.spec, gaussian_toy.n)
        val = penalized_objective(gaussian_toy, params, pen)
        assert val.ridge_term == 0.0 and val.group_lasso_term == 0.0
        assert val.total == pytest.approx(val.pseudo_loglik)

    def test_single_user_ridge(self):
        spec = study_model_spec(Family.GAUSSIAN)
        data = gen_trial(named_scenario("continuous-nonsparse", n=1, m=3,
                                        seed=0)).training_dataset()
        alpha = np.zeros((1, spec.q)); alpha[0, 0] = 3.0; alpha[0, 1] = 4.0
        params = Parameters(np.zeros(spec.p), alpha, 1.0)
        pen = PenaltyConfig(d_inv=np.ones(spec.q), lam=0.0, weights=np.ones(spec.q))
        assert penalized_objective(data, params, pen).ridge_term == pytest.approx(12.5)

    def test_group_lasso_term(self):
        spec = small_spec(Family.GAUSSIAN, h2_terms=(0, 1))
        data = random_dataset(spec, n_users=2, m=2, seed=3)
        alpha = np.array([[1.0, 0.0], [0.0, 1.0]])
        params = Parameters(np.zeros(spec.p), alpha, 1.0)
        pen = PenaltyConfig(d_inv=np.zeros(2), lam=1.0, weights=np.array([2.0, 3.0]))
        assert penalized_objective(data, params, pen).group_lasso_term == pytest.approx(5.0)

    @pytest.mark.parametrize("family", list(Family))
    def test_smooth_part_concavity_probe(self, family):
        spec = small_spec(family, n_cov=1, n_actions=2, interactions=(0,))
        data = random_dataset(spec, n_users=3, m=5, seed=12)
        pen = PenaltyConfig.default(spec.q)
        rng = np.random.default_rng(13)

        def smooth(params):
            v = penalized_objective(data, params, pen)
            return v.pseudo_loglik - v.ridge_term

        for _ in range(30):
            p1 = random_params(spec, 3, seed=int(rng.integers(1e6)))
            p2 = random_params(spec, 3, seed=int(rng.integers(1e6)))
            s = float(rng.uniform(0.05, 0.95))
            mid = Parameters(s * p1.beta + (1 - s) * p2.beta,
                             s * p1.alpha + (1 - s) * p2.alpha, 1.0)
            assert smooth(mid) >= s * smooth(p1) + (1 - s) * smooth(p2) - 1e-9

    def test_penalty_config_validation(self):
        with pytest.raises(ConfigurationError):
            PenaltyConfig(d_inv=np.ones(2), lam=-1.0, weights=np.ones(2))
        with pytest.raises(ConfigurationError):
            PenaltyConfig(d_inv=-np.ones(2), lam=0.0, weights=np.ones(2))
        with pytest.raises(ConfigurationError):
            PenaltyConfig(d_inv=np.ones(2), lam=0.0, weights=np.array([np.inf, 1.0]))


class TestHessianVec:
    @pytest.mark.parametrize("family", list(Family))
    def test_zero_vector(self, family):
        spec = small_spec(family)
        data = random_dataset(spec, n_users=2, m=3, seed=4)
        params = random_params(spec, 2, seed=5)
        pen = PenaltyConfig.default(spec.q)
        v = np.zeros(spec.p + 2 * spec.q)
        assert np.allclose(hessian_vec(data, params, pen, v), 0.0)

    @pytest.mark.parametrize("family", list(Family))
    def test_matches_dense_oracle(self, family):
        # n=3 users, m=4 steps, p=4, q=2
        spec = small_spec(family, n_cov=1, n_actions=3, h2_terms=(0, 2))
        assert spec.p == 4 and spec.q == 2
        data = random_dataset(spec, n_users=3, m=4, seed=6)
        params = random_params(spec, 3, seed=7, phi=1.4 if family == Family.GAUSSIAN else 1.0)
        pen = PenaltyConfig(d_inv=np.array([0.5, 2.0]), lam=0.0, weights=np.ones(2))
        dense = dense_negative_hessian(data, params, pen)
        rng = np.random.default_rng(8)
        for _ in range(10):
            v = rng.standard_normal(spec.p + 3 * spec.q)
            got = hessian_vec(data, params, pen, v)
            want = dense @ v
            assert np.allclose(got, want, rtol=1e-10, atol=1e-10)

    def test_positive_semidefinite_probes(self, gaussian_toy):
        params = random_params(gaussian_toy.spec, gaussian_toy.n, seed=9)
        pen = PenaltyConfig.default(gaussian_toy.spec.q)
        dim = gaussian_toy.spec.p + gaussian_toy.n * gaussian_toy.spec.q
        rng = np.random.default_rng(10)
        for _ in range(100):
            v = rng.standard_normal(dim)
            assert v @ hessian_vec(gaussian_toy, params, pen, v) >= -1e-10

    def test_linear_and_symmetric(self, bernoulli_toy):
        params = random_params(bernoulli_toy.spec, bernoulli_toy.n, seed=11)
        pen = PenaltyConfig.default(bernoulli_toy.spec.q)
        dim = bernoulli_toy.spec.p + bernoulli_toy.n * bernoulli_toy.spec.q
        rng = np.random.default_rng(12)
        u = rng.standard_normal(dim)
        v = rng.standard_normal(dim)
        hu = hessian_vec(bernoulli_toy, params, pen, u)
        hv = hessian_vec(bernoulli_toy, params, pen, v)
        huv = hessian_vec(bernoulli_toy, params, pen, 2.0 * u - 3.0 * v)
        assert np.allclose(huv, 2.0 * hu - 3.0 * hv, rtol=1e-10, atol=1e-12)
        assert u @ hv == pytest.approx(v @ hu, rel=1e-10, abs=1e-10)

    def test_dimension_check(self, gaussian_toy):
        params = random_params(gaussian_toy.spec, gaussian_toy.n, seed=13)
        pen = PenaltyConfig.default(gaussian_toy.spec.q)
        with pytest.raises(ConfigurationError):
            hessian_vec(gaussian_toy, params, pen, np.zeros(3))


class TestSmoothGrad:
    @pytest.mark.parametrize("family", list(Family))
    def test_matches_finite_differences(self, family):
        spec = small_spec(family, n_cov=1, n_actions=2, interactions=(0,))
        data = random_dataset(spec, n_users=3, m=4, seed=14)
        params = random_params(spec, 3, seed=15)
        pen = PenaltyConfig(d_inv=np.array([0.3] * spec.q), lam=0.0,
                            weights=np.ones(spec.q))
        gb, ga = smooth_grad(data, params, pen)
        h = 1e-6

        def smooth(beta, alpha):
            v = penalized_objective(data, Parameters(beta, alpha, params.phi), pen)
            return v.pseudo_loglik - v.ridge_term

        for j in range(spec.p):
            e = np.zeros(spec.p); e[j] = h
            fd = (smooth(params.beta + e, params.alpha)
                  - smooth(params.beta - e, params.alpha)) / (2 * h)
            assert gb[j] == pytest.approx(fd, rel=1e-6, abs=1e-8)
        for i in range(3):
            for l in range(spec.q):
                ea = np.zeros_like(params.alpha); ea[i, l] = h
                fd = (smooth(params.beta, params.alpha + ea)
                      - smooth(params.beta, params.alpha - ea)) / (2 * h)
                assert ga[i, l] == pytest.approx(fd, rel=1e-6, abs=1e-8)
