import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

mp.mp.dps = 40

from csgpfa import inference as inf
from csgpfa.augment import pg_match_shape_slope, pg_mean, pig_mean
from csgpfa.data import GenerativeSpec, SpikeTensor, generate_synthetic
from csgpfa.errors import NumericalError
from csgpfa.kernels import se_gram, time_points
from csgpfa.state import ModelConfig, build_grams, f_moments, initialize_state


def tiny(counts=(3, 0), likelihood="neg_binomial"):
    """M = N = 1, D = 1, T = len(counts), one trial."""
    data = SpikeTensor(np.array(counts).reshape(1, 1, 1, -1), [[0.0]])
    cfg = ModelConfig(D=1, likelihood=likelihood, init="random", time_lengthscale=1.5, learn_lengthscales=False)
    state = initialize_state(data, cfg)
    rng = np.random.default_rng(0)
    state.x_mean = rng.normal(size=state.x_mean.shape)
    state.w_mean[:] = 0.7
    state.w_cov[:] = 0.2
    state.beta_mean[:] = 0.3
    state.beta_var[:] = 0.4
    inf.update_aug_pg(state, data)
    return data, cfg, state


@pytest.fixture(scope="module")
def small():
    spec = GenerativeSpec(M=4, N=5, T=25, D_true=2, n_trials=8, time_lengthscales=[3.0, 5.0], seed=11)
    data, truth = generate_synthetic(spec)
    return data, truth


class TestScalarUpdates:
    def test_beta(self):
        data, cfg, s = tiny()
        Omega, kappa = inf.pseudo_stats(s, data)
        drive = s.w_mean[0, 0] * s.x_mean[0]
        tb = s.tau_beta_mean
        inf.update_q_beta(s, data)
        prec = tb + Omega.sum()
        assert s.beta_var[0] == pytest.approx(1 / prec)
        assert s.beta_mean[0] == pytest.approx(np.sum(kappa[0, 0] - Omega[0, 0] * drive) / prec)

    def test_weight(self):
        data, cfg, s = tiny()
        grams = build_grams(s, data.condition_coords, cfg)
        Omega, kappa = inf.pseudo_stats(s, data)
        mu, var = s.x_mean[0], s.x_var()[0]
        prec = s.ard_mean[0] / grams.cond.K_eff[0, 0] + np.sum(Omega[0, 0] * (mu**2 + var))
        lin = np.sum(mu * (kappa[0, 0] - Omega[0, 0] * s.beta_mean[0]))
        inf.update_q_W(s, data, grams, cfg)
        assert s.w_cov[0, 0, 0] == pytest.approx(1 / prec, rel=1e-12)
        assert s.w_mean[0, 0] == pytest.approx(lin / prec, rel=1e-12)

    def test_latent(self):
        data, cfg, s = tiny()
        grams = build_grams(s, data.condition_coords, cfg)
        Omega, kappa = inf.pseudo_stats(s, data)
        Ew, Eww = s.w_mean[0, 0], s.w_mean[0, 0] ** 2 + s.w_cov[0, 0, 0]
        K = grams.time[0].K_eff
        P = np.linalg.inv(K) + np.diag(Eww * Omega[0, 0])
        V = np.linalg.inv(P)
        m = V @ (Ew * (kappa[0, 0] - Omega[0, 0] * s.beta_mean[0]))
        inf.update_q_X(s, data, grams, cfg)
        np.testing.assert_allclose(s.x_cov[0], V, rtol=1e-10)
        np.testing.assert_allclose(s.x_mean[0], m, rtol=1e-10)

    def test_pseudo_stats(self):
        data, cfg, s = tiny((3, 1))
        Omega, kappa = inf.pseudo_stats(s, data)
        np.testing.assert_allclose(kappa[0, 0], 0.5 * (np.array([3, 1]) - s.r_mean[0]))
        fm = f_moments(s)
        np.testing.assert_allclose(Omega[0, 0], pg_mean(np.array([3, 1]) + s.r_mean[0], np.sqrt(fm.EF2[0, 0])))

    def test_binomial_pseudo_stats(self):
        data, cfg, s = tiny((3, 1), likelihood="binomial")
        assert s.k[0] == 3.0
        Omega, kappa = inf.pseudo_stats(s, data)
        np.testing.assert_allclose(kappa[0, 0], np.array([3, 1]) - 1.5)
        np.testing.assert_allclose(Omega[0, 0], pg_mean(3.0, np.sqrt(f_moments(s).EF2[0, 0])))

    def test_tau_beta_and_ard(self):
        data, cfg, s = tiny()
        inf.update_q_tau_beta(s, cfg)
        assert s.tau_beta_shape == cfg.bias_shape + 0.5
        assert s.tau_beta_rate == pytest.approx(cfg.bias_rate + 0.5 * (0.3**2 + 0.4))
        grams = build_grams(s, data.condition_coords, cfg)
        inf.update_q_ard(s, grams, cfg)
        assert s.ard_shape[0] == cfg.ard_shape + 0.5
        assert s.ard_rate[0] == pytest.approx(cfg.ard_rate + 0.5 * (0.7**2 + 0.2) / grams.cond.K_eff[0, 0])

    def test_aug_gamma_and_pig(self):
        data, cfg, s = tiny((3, 0))
        s.r_mean[:] = 1.7
        s.r_sq[:] = 4.0
        inf.update_aug_gamma(s, data)
        np.testing.assert_allclose(s.log_tau_mean[0, 0, 0], special.digamma([4.7, 1.7]), rtol=1e-13)
        inf.update_aug_pig(s)
        assert s.xi_mean[0] == pytest.approx(pig_mean(2.0))


class TestBlockInvariants:
    def test_covariances_psd_and_symmetric(self, small):
        data, _ = small
        cfg = ModelConfig(D=3, max_iters=3)
        s, _ = inf.fit(data, cfg)
        for C in list(s.x_cov) + list(s.w_cov):
            np.testing.assert_allclose(C, C.T, atol=1e-12)
            assert np.linalg.eigvalsh(C).min() > -1e-10
        assert np.all(s.beta_var > 0) and np.all(s.ard_mean > 0)

    def test_low_rank_posterior_matches_inverse(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(5, 5))
        P = A @ A.T + np.eye(5)
        L = rng.normal(size=(5, 3))
        rhs = rng.normal(size=5)
        V, m = inf._low_rank_posterior(P, L, rhs)
        ref = np.linalg.inv(np.linalg.inv(P) + L @ L.T)
        np.testing.assert_allclose(V, ref, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(m, ref @ rhs, rtol=1e-10, atol=1e-12)

    def test_sqrt_psd(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(4, 2))
        S = A @ A.T
        L = inf._sqrt_psd(S)
        np.testing.assert_allclose(L @ L.T, S, atol=1e-12)


class TestDispersion:
    @given(r=st.floats(0.05, 50.0), y=st.integers(0, 30), c=st.floats(0.0, 20.0))
    @settings(max_examples=60, deadline=None)
    def test_h_second_derivative(self, r, y, c):
        # central difference in 40-digit arithmetic so rounding does not swamp the step
        s_ = mp.mpf(float(pg_match_shape_slope(c)))
        h_mp = lambda rr: (y + rr) * s_ * mp.digamma(2) - mp.loggamma((y + rr) * s_)
        step = mp.mpf(r) * mp.mpf("1e-8")
        r_ = mp.mpf(r)
        fd = (h_mp(r_ + step) - 2 * h_mp(r_) + h_mp(r_ - step)) / step**2
        exact = inf.dispersion_h_second(r, y, c)
        assert exact < 0
        assert exact == pytest.approx(float(fd), rel=1e-7)
        assert inf.dispersion_h(r, y, c, 2.0) == pytest.approx(float(h_mp(r_)), rel=1e-10, abs=1e-10)

    def test_params_positive(self, small):
        data, _ = small
        s = initialize_state(data, ModelConfig(D=2))
        for p in inf.dispersion_params(s, data):
            assert p.p == data.n_observations and p.a > 0

    def test_solve_is_fixed_point_of_step(self, small):
        data, _ = small
        cfg = ModelConfig(D=2)
        s = initialize_state(data, cfg)
        inf.solve_q_r(s, data, None, cfg)
        before = s.r_mean.copy()
        inf.update_q_r(s, data, None, cfg)
        np.testing.assert_allclose(s.r_mean, before, rtol=1e-6)

    def test_binomial_skips(self):
        data, cfg, s = tiny(likelihood="binomial")
        r = s.r_mean.copy()
        inf.update_q_r(s, data)
        inf.solve_q_r(s, data)
        np.testing.assert_array_equal(s.r_mean, r)


class TestMonitor:
    def test_matches_direct_sum(self, small):
        data, truth = small
        s = initialize_state(data, ModelConfig(D=2))
        EF = f_moments(s).EF
        p = special.expit(EF)[:, None]
        r = s.r_mean[None, None, :, None]
        y = data.counts
        ll = special.gammaln(y + r) - special.gammaln(r) - special.gammaln(y + 1) + y * np.log(p) + r * np.log1p(-p)
        assert inf.monitor(s, data) == pytest.approx(ll.mean(), rel=1e-11)


class TestMStep:
    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_time_block(self, seed):
        rng = np.random.default_rng(seed)
        t = time_points(12)
        L = np.linalg.cholesky(se_gram(t, t, 2.0) + 1e-6 * np.eye(12))
        Z = L @ rng.standard_normal((12, 3))
        A = Z @ Z.T / 3 + 0.1 * np.eye(12)
        x = np.log([rng.uniform(1, 4)])
        _, g, _ = inf.gram_objective(t, x, A, 1.0, 1e-6)
        h = 1e-5
        fd = (inf.gram_objective(t, x + h, A, 1.0, 1e-6)[0] - inf.gram_objective(t, x - h, A, 1.0, 1e-6)[0]) / (2 * h)
        assert g[0] == pytest.approx(fd, rel=1e-5)

    def test_maximum_near_generating_lengthscale(self):
        rng = np.random.default_rng(4)
        t = time_points(60)
        L = np.linalg.cholesky(se_gram(t, t, 6.0) + 1e-8 * np.eye(60))
        X = L @ rng.standard_normal((60, 400))
        A = X @ X.T / 400
        fun = lambda v: inf.gram_objective(t, v, A, 1.0, 1e-8)[:2]
        x = inf._ascend(fun, np.log([3.0]), 200, 0.01, 0.5)
        assert np.exp(x[0]) == pytest.approx(6.0, rel=0.05)

    def test_ascend_monotone(self):
        vals = []

        def fun(x):
            vals.append(-np.sum((x - 2.0) ** 2))
            return vals[-1], -2 * (x - 2.0)

        inf._ascend(fun, np.zeros(2), 50, 0.9, 0.5)
        accepted = np.maximum.accumulate(vals)
        assert accepted[-1] > vals[0]

    def test_ascend_survives_failure(self):
        def fun(x):
            raise NumericalError("boom")

        np.testing.assert_array_equal(inf._ascend(fun, np.ones(1), 5, 0.1, 0.5), np.ones(1))

    def test_delta_kernel_gradient_zero(self):
        _, g, _ = inf.gram_objective(np.array([[0.0], [1.0]]), np.zeros(1), np.eye(2), 2, 1e-8, "delta")
        assert np.all(g == 0)


class TestRetention:
    def test_scores(self, small):
        data, _ = small
        s = initialize_state(data, ModelConfig(D=3))
        s.w_mean[:] = 0.0
        s.w_mean[:, : s.M] = 1.0  # only d = 0 active
        assert inf.retained_dims(s) == [0]
        s.w_mean[:] = 0.0
        assert inf.retained_dims(s) == []

    def test_ratio_drift(self):
        assert inf._ratio_drift(None, np.ones(2)) == np.inf
        assert inf._ratio_drift(np.array([1.0, 1e-9]), np.array([1.0, 1e-7])) == 0.0
        assert inf._ratio_drift(np.array([1.0, 0.5]), np.array([1.0, 0.25])) == pytest.approx(np.log(2))


class TestFit:
    def test_report_and_monitor(self, small, tmp_path):
        data, _ = small
        seen = []
        cfg = ModelConfig(D=3, max_iters=6)
        s, rep = inf.fit(data, cfg, checkpoint=tmp_path / "c.json", checkpoint_every=2,
                         callback=lambda it, st_, v: seen.append(it))
        assert seen == list(range(1, 7)) and rep.iterations_run == 6 and not rep.converged
        assert len(rep.monitor) == 6
        assert rep.monitor[-1] == pytest.approx(inf.monitor(s, data), rel=1e-14)
        assert (tmp_path / "c.json").exists()
        rep.write_monitor_csv(tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text().startswith("iter,monitor,seconds\n0,")
        assert "wall_time" not in rep.to_json() and "wall_time" in rep.to_json(include_timing=True)

    def test_resume_continues_exactly(self, small):
        data, _ = small
        cfg = ModelConfig(D=3, max_iters=8)
        _, full = inf.fit(data, cfg)
        s4, _ = inf.fit(data, cfg, max_iters=4)
        _, rest = inf.fit(data, cfg, state=s4, start_iter=4)
        assert rest.iterations_run == 8
        assert rest.monitor[-1] == pytest.approx(full.monitor[-1], abs=1e-12)

    def test_nonfinite_raises(self, small):
        data, _ = small
        cfg = ModelConfig(D=2, max_iters=2)
        s = initialize_state(data, cfg)
        s.beta_mean[0] = np.nan
        with pytest.raises((NumericalError, ValueError)):
            inf.fit(data, cfg, state=s)

    def test_monitor_improves_from_init(self, small):
        data, _ = small
        cfg = ModelConfig(D=3, max_iters=30)
        s0 = initialize_state(data, cfg)
        _, rep = inf.fit(data, cfg)
        assert rep.monitor[-1] > inf.monitor(s0, data)
