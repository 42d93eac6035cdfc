"""Weights and firing rates at new experimental conditions.

The loading GP gives, per neuron, a Kronecker-structured Gaussian conditional
of ``vec(W*_n)`` given ``vec(W_n)``. Posterior uncertainty in the training
loadings is propagated through the conditional mean map.
"""
import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError
from .kernels import delta_gram, se_gram
from .state import model_factorize


@dataclass
class PredictionRequest:
    new_condition_coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.new_condition_coords, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if c.ndim != 2 or c.shape[0] == 0:
            raise DataFormatError("new condition coordinates must be a non-empty (M*, C) array")
        if not np.all(np.isfinite(c)):
            raise DataFormatError("new condition coordinates must be finite")
        self.new_condition_coords = c


@dataclass
class WeightPrediction:
    mean: np.ndarray  # (N, D*M*), d-major
    cov: np.ndarray  # (N, D*M*, D*M*)
    n_conditions: int

    def weights(self):
        """Predicted means as (M*, N, D)."""
        N = self.mean.shape[0]
        D = self.mean.shape[1] // self.n_conditions
        return self.mean.reshape(N, D, self.n_conditions).transpose(2, 0, 1)

    def to_json(self, path, include_cov=False):
        payload = {"n_conditions": self.n_conditions, "neurons": []}
        for n in range(self.mean.shape[0]):
            entry = {"neuron": n, "mean": self.mean[n].tolist()}
            if include_cov:
                entry["cov"] = self.cov[n].tolist()
            payload["neurons"].append(entry)
        with open(path, "w") as fh:
            json.dump(payload, fh)


@dataclass
class RatePrediction:
    rate: np.ndarray  # (M*, N, T)
    rate_var_proxy: np.ndarray
    F_mean: np.ndarray
    F_var: np.ndarray

    def to_csv(self, path):
        M, N, T = self.rate.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "neuron", "bin", "rate", "rate_var_proxy"])
            for m in range(M):
                for n in range(N):
                    for t in range(T):
                        w.writerow([m, n, t, repr(float(self.rate[m, n, t])),
                                    repr(float(self.rate_var_proxy[m, n, t]))])


def _cross_grams(state, train, new, kind, jitter):
    """K_{*f}, K_{**} and the training factorisation.

    Exact coincidences with training inputs receive the same nugget as K_ff so
    that a training condition is reproduced exactly.
    """
    if kind == "delta":
        Kff = model_factorize(delta_gram(train, train), jitter)
        Ksf = delta_gram(new, train)
        Kss = delta_gram(new, new)
    else:
        ell = state.condition_lengthscales
        Kff = model_factorize(se_gram(train, train, ell), jitter)
        Ksf = se_gram(new, train, ell)
        Kss = se_gram(new, new, ell)
    nug = Kff.jitter_used
    same_f = np.all(new[:, None, :] == train[None, :, :], axis=-1)
    same_s = np.all(new[:, None, :] == new[None, :, :], axis=-1)
    return Kff, Ksf + nug * same_f, Kss + nug * same_s, same_f


def predict_weights(state, train_coords, request, kind="se", jitter=1e-8):
    """Gaussian over ``vec(W*_n)`` for each neuron (d-major layout).

    mean_n = (I_D kron A) m_n and
    cov_n = diag(1/E[tau]) kron (K** - A K_f*) + (I_D kron A) V_n (I_D kron A)^T,
    with A = K*f K_ff^{-1}.
    """
    train = np.asarray(train_coords, dtype=float)
    if train.ndim == 1:
        train = train[:, None]
    new = request.new_condition_coords
    if new.shape[1] != train.shape[1]:
        raise DataFormatError(
            f"new conditions have {new.shape[1]} coordinates, training used {train.shape[1]}")
    Kff, Ksf, Kss, same = _cross_grams(state, train, new, kind, jitter)
    A = Kff.solve(Ksf.T).T  # (M*, M)
    # rows at training inputs are unit vectors; remove solve round-off
    hit = same.any(axis=1)
    A[hit] = same[hit].astype(float)
    cond = Kss - A @ Ksf.T
    cond = 0.5 * (cond + cond.T)
    cond[hit] = 0.0
    cond[:, hit] = 0.0
    D = state.D
    big_A = np.kron(np.eye(D), A)  # (D*M*, D*M)
    prior = np.kron(np.diag(1.0 / state.ard_mean), cond)
    mean = state.w_mean @ big_A.T
    cov = prior[None] + np.einsum("ij,njk,lk->nil", big_A, state.w_cov, big_A, optimize=True)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return WeightPrediction(mean, cov, new.shape[0])


def _rates_from_F(state, Fm, Fv):
    beta = state.beta_mean[None, :, None]
    F = beta + Fm
    if state.likelihood == "binomial":
        p = 1.0 / (1.0 + np.exp(-F))
        rate = state.k[None, :, None] * p
        grad = rate * (1.0 - p)
    else:
        rate = state.r_mean[None, :, None] * np.exp(F)
        grad = rate
    return rate, grad * grad * Fv, F


def predict_rates(state, train_coords, request, kind="se", jitter=1e-8, weights=None):
    """Plug-in rates at new conditions with a first-order variance proxy.

    ``rate_var_proxy = (d rate / d F)^2 * Var(F*)``, where ``Var(F*)`` comes
    from the predicted weight covariance at the latent means.
    """
    wp = predict_weights(state, train_coords, request, kind, jitter) if weights is None else weights
    Ms = wp.n_conditions
    N, D = state.N, state.D
    Wm = wp.weights()  # (M*, N, D)
    mu = state.x_mean
    Fm = np.einsum("mnd,dt->mnt", Wm, mu)
    cov = wp.cov.reshape(N, D, Ms, D, Ms)
    block = np.einsum("ndmem->nmde", cov)  # (N, M*, D, D)
    Fv = np.einsum("nmde,dt,et->mnt", block, mu, mu, optimize=True)
    rate, var, F = _rates_from_F(state, Fm, np.maximum(Fv, 0.0))
    return RatePrediction(rate, var, F, np.maximum(Fv, 0.0))
