import copy
import json

import numpy as np
import pytest
from scipy import stats

from csgpfa import inference as inf
from csgpfa.data import GenerativeSpec, SpikeTensor, generate_synthetic
from csgpfa.errors import DataFormatError
from csgpfa.evaluation import (fitted_rates, loglik_per_bin, metrics, peak_rate_table, rate_mae, split_trials,
                               true_loglik_per_bin, write_metrics, write_peak_rates)
from csgpfa.state import ModelConfig, f_moments


@pytest.fixture(scope="module")
def run():
    spec = GenerativeSpec(M=3, N=4, T=12, D_true=1, n_trials=8, time_lengthscales=[3.0], seed=4)
    data, truth = generate_synthetic(spec)
    train, test = split_trials(data, 5, seed=1)
    state, _ = inf.fit(train, ModelConfig(D=2, max_iters=15))
    return data, truth, train, test, state


class TestSplit:
    def test_disjoint_and_complete(self, run):
        data, _, train, test, _ = run
        for m in range(data.n_conditions):
            rows = [tuple(x.ravel()) for x in train.counts[m]] + [tuple(x.ravel()) for x in test.counts[m]]
            assert sorted(rows) == sorted(tuple(x.ravel()) for x in data.counts[m])

    def test_seeded(self, run):
        data = run[0]
        a, _ = split_trials(data, 5, seed=3)
        b, _ = split_trials(data, 5, seed=3)
        c, _ = split_trials(data, 5, seed=4)
        assert np.array_equal(a.counts, b.counts)
        assert not np.array_equal(a.counts, c.counts)

    def test_unequal_trials_padded(self):
        counts = np.arange(3 * 4 * 1 * 2).reshape(3, 4, 1, 2)
        mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 1, 1, 0]], bool)
        data = SpikeTensor(counts, [[0.0], [1.0], [2.0]], mask)
        train, test = split_trials(data, 1)
        assert train.trial_mask.all()
        np.testing.assert_array_equal(test.trial_mask.sum(axis=1), [3, 1, 2])
        with pytest.raises(ValueError, match="without test trials"):
            split_trials(data, 2)

    def test_empty_test_warns(self, run):
        data = run[0]
        with pytest.warns(UserWarning, match="empty"):
            train, test = split_trials(data, data.counts.shape[1])
        assert test is None and train.counts.shape == data.counts.shape

    @pytest.mark.parametrize("k", [0, 9])
    def test_bad_k(self, run, k):
        with pytest.raises(ValueError):
            split_trials(run[0], k)


class TestLoglik:
    def test_brute_force(self, run):
        _, _, train, _, state = run
        EF = f_moments(state).EF
        r = state.r_mean
        p = 1.0 / (1.0 + np.exp(-EF))
        ll = stats.nbinom.logpmf(train.counts, r[None, None, :, None], 1.0 - p[:, None])
        assert loglik_per_bin(state, train) == pytest.approx(ll.mean(), rel=1e-12)

    def test_masked_trials_ignored(self, run):
        data, truth, *_ = run
        mask = np.ones(data.counts.shape[:2], bool)
        mask[:, -2:] = False
        part = SpikeTensor(data.counts, data.condition_coords, mask)
        sub = SpikeTensor(data.counts[:, :-2], data.condition_coords)
        assert true_loglik_per_bin(truth, part) == pytest.approx(true_loglik_per_bin(truth, sub), rel=1e-14)

    def test_missing_data_raises(self, run):
        with pytest.raises(DataFormatError):
            loglik_per_bin(run[4], None)

    def test_shape_mismatch_raises(self, run):
        data, _, _, _, state = run
        with pytest.raises(DataFormatError):
            loglik_per_bin(state, data.subset_conditions([0, 1]))


class TestMAE:
    def test_zero_at_truth(self, run):
        _, truth, _, _, state = run
        s = copy.deepcopy(state)
        M, N = s.M, s.N
        s.x_mean[:] = 0.0
        s.x_mean[0] = truth.X[0]
        s.w_mean[:] = 0.0
        s.w_mean[:, :M] = truth.W[:, :, 0].T
        s.beta_mean[:] = truth.beta
        s.r_mean[:] = truth.r
        assert rate_mae(s, truth) < 1e-12

    def test_brute_force(self, run):
        _, truth, _, _, state = run
        rates = fitted_rates(state)
        expect = sum(abs(rates[m, n, t] - truth.rates[m, n, t]) for m in range(3) for n in range(4)
                     for t in range(12)) / rates.size
        assert rate_mae(state, truth) == pytest.approx(expect, rel=1e-12)

    def test_shape_mismatch(self, run):
        _, truth, _, _, state = run
        spec = GenerativeSpec(M=2, N=4, T=12, D_true=1, n_trials=2, time_lengthscales=[3.0], seed=0)
        with pytest.raises(ValueError):
            rate_mae(state, generate_synthetic(spec)[1])


class TestMetrics:
    def test_keys(self, run):
        _, truth, train, test, state = run
        full = metrics(state, train, test, truth, retained=[0], seconds=1.5)
        assert set(full) == {"train_loglik", "test_loglik", "mae", "true_train_loglik", "true_test_loglik",
                             "retained_dims", "seconds"}
        assert set(metrics(state, train)) == {"train_loglik"}

    def test_write(self, run, tmp_path):
        _, truth, train, test, state = run
        values = metrics(state, train, test, truth)
        write_metrics(tmp_path / "m.json", values)
        assert json.loads((tmp_path / "m.json").read_text()) == values

    def test_peak_rates(self, tmp_path):
        rates = np.array([[[1.0, 3.0, 2.0]], [[5.0, 0.5, 0.1]]])
        assert peak_rate_table(rates) == [(0, 0, 1, 3.0), (1, 0, 0, 5.0)]
        write_peak_rates(tmp_path / "p.csv", rates, np.array([[0.0], [0.5]]))
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines == ["condition,neuron,peak_bin,peak_rate,coord_0", "0,0,1,3.0,0.0", "1,0,0,5.0,0.5"]
