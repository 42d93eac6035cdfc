"""Held-out metrics: per-bin log-likelihood, rate MAE and trial splits."""
import csv
import json
import warnings

import numpy as np

from .data import SpikeTensor
from .errors import DataFormatError
from .inference import loglik_sum, per_bin
from .state import f_moments


def split_trials(data, train_per_condition, seed=0):
    """Seeded per-condition split of observed trials into train and test tensors.

    Both outputs keep every condition. Test tensors are padded with masked
    trials when conditions have unequal trial counts.
    """
    k = int(train_per_condition)
    n_obs = data.trial_mask.sum(axis=1)
    if k < 1:
        raise ValueError("train_per_condition must be >= 1")
    if np.any(n_obs < k):
        raise ValueError(f"condition with {int(n_obs.min())} trials cannot supply {k} training trials")
    n_test = int((n_obs - k).max())
    if n_test > 0 and np.any(n_obs == k):
        raise ValueError(f"train_per_condition={k} leaves some conditions without test trials")
    rng = np.random.default_rng(seed)
    M, R, N, T = data.shape
    if n_test == 0:
        warnings.warn("all trials assigned to training; test set is empty", stacklevel=2)
    train_c = np.zeros((M, k, N, T), dtype=np.int64)
    test_c = np.zeros((M, max(n_test, 1), N, T), dtype=np.int64)
    test_mask = np.zeros((M, max(n_test, 1)), dtype=bool)
    for m in range(M):
        idx = np.flatnonzero(data.trial_mask[m])
        perm = rng.permutation(idx)
        tr, te = np.sort(perm[:k]), np.sort(perm[k:])
        train_c[m] = data.counts[m, tr]
        test_c[m, :len(te)] = data.counts[m, te]
        test_mask[m, :len(te)] = True
    train = SpikeTensor(train_c, data.condition_coords, bin_width=data.bin_width)
    if n_test == 0:
        return train, None
    test = SpikeTensor(test_c, data.condition_coords, test_mask, bin_width=data.bin_width)
    return train, test


def _check_nonempty(data):
    if data is None or data.trial_mask.sum() == 0 or data.n_neurons == 0 or data.n_bins == 0:
        raise DataFormatError("no observations to evaluate")


def loglik_per_bin(state, data, threads=1):
    """Mean log-likelihood per observed (trial, neuron, bin) at posterior means."""
    _check_nonempty(data)
    EF = f_moments(state).EF
    if EF.shape != (data.n_conditions, data.n_neurons, data.n_bins):
        raise DataFormatError(f"state predicts {EF.shape}, data has {data.shape}")
    ll = loglik_sum(EF, data, state.r_mean, state.k, state.likelihood, threads)
    return per_bin(ll.sum(), data)


def true_loglik_per_bin(truth, data, threads=1):
    """Same normalisation as :func:`loglik_per_bin` under the generating parameters."""
    _check_nonempty(data)
    ll = loglik_sum(truth.F, data, truth.r, truth.k, truth.likelihood, threads)
    return per_bin(ll.sum(), data)


def fitted_rates(state):
    EF = f_moments(state).EF
    if state.likelihood == "binomial":
        return state.k[None, :, None] / (1.0 + np.exp(-EF))
    return state.r_mean[None, :, None] * np.exp(EF)


def rate_mae(state, truth):
    """Mean absolute error between fitted plug-in rates and generating rates."""
    rates = fitted_rates(state)
    if rates.shape != truth.rates.shape:
        raise ValueError(f"rate shapes differ: {rates.shape} vs {truth.rates.shape}")
    return float(np.mean(np.abs(rates - truth.rates)))


def metrics(state, train, test=None, truth=None, retained=None, seconds=None, threads=1):
    """Metrics dictionary; keys absent from the inputs are omitted."""
    out = {"train_loglik": loglik_per_bin(state, train, threads)}
    if test is not None:
        out["test_loglik"] = loglik_per_bin(state, test, threads)
    if truth is not None:
        out["mae"] = rate_mae(state, truth)
        out["true_train_loglik"] = true_loglik_per_bin(truth, train, threads)
        if test is not None:
            out["true_test_loglik"] = true_loglik_per_bin(truth, test, threads)
    if retained is not None:
        out["retained_dims"] = [int(d) for d in retained]
    if seconds is not None:
        out["seconds"] = float(seconds)
    return out


def write_metrics(path, values):
    with open(path, "w") as fh:
        json.dump(values, fh, indent=2, sort_keys=True)


def peak_rate_table(rates):
    """Rows (condition, neuron, peak_bin, peak_rate) from an (M, N, T) rate array."""
    M, N, T = rates.shape
    peak = rates.argmax(axis=2)
    return [(m, n, int(peak[m, n]), float(rates[m, n, peak[m, n]])) for m in range(M) for n in range(N)]


def write_peak_rates(path, rates, coords=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["condition", "neuron", "peak_bin", "peak_rate"]
        if coords is not None:
            header += [f"coord_{i}" for i in range(coords.shape[1])]
        w.writerow(header)
        for m, n, b, v in peak_rate_table(rates):
            row = [m, n, b, repr(v)]
            if coords is not None:
                row += [repr(float(c)) for c in coords[m]]
            w.writerow(row)
