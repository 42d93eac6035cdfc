"""Augmented variational EM: coordinate updates, monitor, M-step and fit loop.

All per-observation sums are reduced over trials first, giving
``Omega[m, n, t] = sum_trial E[omega]`` and ``kappa[m, n, t] = sum_trial
(E[omega] * pseudo_obs)``. The Gaussian blocks consume only these two arrays.
"""
import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, special

from . import _backend
from .augment import (EULER_GAMMA, PTNParams, log_cosh, pg_match_shape_slope, pg_mean,
                      pig_mean, ptn_moments)
from .errors import NumericalError
from .kernels import se_gram_grad_loglengthscale, time_points
from .state import (build_grams, condition_gram, f_moments, initialize_state, model_factorize,
                    save_checkpoint)

RETAIN_THRESHOLD = 0.01
LOG2 = float(np.log(2.0))


def _threads(config):
    return getattr(config, "threads", 1) if config is not None else 1


def _map_neurons(fn, N, threads):
    """Apply ``fn(n)`` to each neuron; results are in neuron order."""
    threads = max(1, min(int(threads or 1), N))
    if threads == 1:
        return [fn(n) for n in range(N)]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, range(N)))


# ---------------------------------------------------------------- sufficient stats

def trials_observed(data):
    """Observed trial count per condition, shape (M,)."""
    return data.trial_mask.sum(axis=1).astype(float)


def pg_shape(state, data):
    """Per-observation PG shape: Y + E[r] (negative binomial) or k (binomial)."""
    M, R, N, T = data.shape
    if state.likelihood == "binomial":
        return np.broadcast_to(state.k[None, None, :, None], data.shape)
    return data.counts + state.r_mean[None, None, :, None]


def pseudo_stats(state, data):
    """Return (Omega, kappa), both (M, N, T), summed over observed trials."""
    obs = data.trial_mask[:, :, None, None]
    Omega = np.where(obs, state.omega_mean, 0.0).sum(axis=1)
    if state.likelihood == "binomial":
        resid = data.counts - 0.5 * state.k[None, None, :, None]
    else:
        resid = 0.5 * (data.counts - state.r_mean[None, None, :, None])
    kappa = np.where(obs, resid, 0.0).sum(axis=1)
    return Omega, kappa


# ---------------------------------------------------------------- augmented moments

def update_aug_gamma(state, data, config=None):
    if state.likelihood == "binomial":
        return state
    state.log_tau_mean = _backend.aug_log_tau(data.counts, data.trial_mask, state.r_mean, _threads(config))
    return state


def update_aug_pig(state):
    if state.likelihood == "binomial":
        return state
    state.xi_mean = pig_mean(np.sqrt(state.r_sq))
    return state


def update_aug_pg(state, data, fm=None):
    fm = f_moments(state) if fm is None else fm
    c = np.sqrt(np.maximum(fm.EF2, 0.0))[:, None, :, :]
    omega = pg_mean(pg_shape(state, data), c)
    state.omega_mean = np.where(data.trial_mask[:, :, None, None], omega, 0.0)
    return state


# ---------------------------------------------------------------- Gaussian blocks

def _low_rank_posterior(P, L, rhs):
    """Covariance (P^{-1} + L L^T)^{-1} and its product with ``rhs``.

    Uses ``P - P L (I + L^T P L)^{-1} L^T P`` so that P is never inverted.
    """
    PL = P @ L
    B = np.eye(L.shape[1]) + L.T @ PL
    cf = linalg.cho_factor(0.5 * (B + B.T), lower=True, check_finite=False)
    V = P - PL @ linalg.cho_solve(cf, PL.T, check_finite=False)
    V = 0.5 * (V + V.T)
    return V, V @ rhs


def _sqrt_psd(A):
    """Symmetric square root factor L with A = L L^T (negative modes clipped)."""
    w, U = np.linalg.eigh(0.5 * (A + A.T))
    return U * np.sqrt(np.clip(w, 0.0, None))


def update_q_W(state, data, grams, config=None):
    Omega, kappa = pseudo_stats(state, data)
    mu = state.x_mean
    s = state.x_var()
    M, N, D = state.M, state.N, state.D
    # S blocks (N, M, D, D) and the linear term (N, D, M)
    Sb = np.einsum("mnt,dt,et->nmde", Omega, mu, mu, optimize=True)
    idx = np.arange(D)
    Sb[:, :, idx, idx] += np.einsum("mnt,dt->nmd", Omega, s)
    resid = kappa - Omega * state.beta_mean[None, :, None]
    lin = np.einsum("dt,mnt->ndm", mu, resid)
    P = np.kron(np.diag(1.0 / state.ard_mean), grams.cond.K_eff)
    rows = (np.arange(D)[:, None] * M + np.arange(M)[None, :])  # (D, M) -> vec index

    def one(n):
        L = np.zeros((D * M, D * M))
        for m in range(M):
            sel = rows[:, m]
            L[np.ix_(sel, sel)] = _sqrt_psd(Sb[n, m])
        return _low_rank_posterior(P, L, lin[n].ravel())

    for n, (V, mean) in enumerate(_map_neurons(one, N, _threads(config))):
        state.w_cov[n] = V
        state.w_mean[n] = mean
    return state


def update_q_X(state, data, grams, config=None):
    Omega, kappa = pseudo_stats(state, data)
    D, T = state.D, state.T
    base = kappa - Omega * state.beta_mean[None, :, None]  # (M, N, T)
    EWW = state.weight_second_moments()  # (N, M, D, D)
    W = state.weights()
    for d in range(D):
        Wd = W[:, :, d]  # (M, N)
        prec = np.einsum("nm,mnt->t", EWW[:, :, d, d], Omega)
        # sum_{d' != d} E[W_d W_d'] mu_d' couples through the joint q(W)
        cross = np.einsum("nme,et->mnt", EWW[:, :, d, :], state.x_mean) - \
            EWW[:, :, d, d].T[:, :, None] * state.x_mean[d][None, None, :]
        rhs = np.einsum("mn,mnt->t", Wd, base) - np.einsum("mnt,mnt->t", Omega, cross)
        K = grams.time[d].K_eff
        sq = np.sqrt(np.maximum(prec, 0.0))
        V, mean = _low_rank_posterior(K, np.diag(sq), rhs)
        state.x_cov[d] = V
        state.x_mean[d] = mean
    return state


def update_q_beta(state, data):
    Omega, kappa = pseudo_stats(state, data)
    drive = np.einsum("mnd,dt->mnt", state.weights(), state.x_mean)
    prec = state.tau_beta_mean + Omega.sum(axis=(0, 2))
    state.beta_var = 1.0 / prec
    state.beta_mean = state.beta_var * (kappa - Omega * drive).sum(axis=(0, 2))
    return state


def update_q_tau_beta(state, config):
    state.tau_beta_shape = config.bias_shape + 0.5 * state.N
    state.tau_beta_rate = config.bias_rate + 0.5 * float(np.sum(state.beta_mean**2 + state.beta_var))
    return state


def _weight_energy(state, Kc):
    """Per-d sum over neurons of E[w_nd^T K^{-1} w_nd], shape (D,)."""
    N, D, M = state.N, state.D, state.M
    mean = state.w_mean.reshape(N, D, M)
    cov = state.w_cov.reshape(N, D, M, D, M)
    out = np.zeros(D)
    for d in range(D):
        Cdd = cov[:, d, :, d, :].sum(axis=0)
        A = Cdd + mean[:, d, :].T @ mean[:, d, :]
        out[d] = np.trace(Kc.solve(A))
    return out


def update_q_ard(state, grams, config):
    energy = _weight_energy(state, grams.cond)
    state.ard_shape = np.full(state.D, config.ard_shape + 0.5 * state.M * state.N)
    state.ard_rate = config.ard_rate + 0.5 * energy
    return state


# ---------------------------------------------------------------- dispersion

def dispersion_h(r, y, c, alpha_ref):
    """Shape-dependent part of the matched-Gamma bound as a function of r.

    ``alpha(r) = (y + r) * s(c)`` is the matched shape; ``alpha_ref`` is held
    fixed at the expansion point.
    """
    alpha = (y + r) * pg_match_shape_slope(c)
    return alpha * special.digamma(alpha_ref) - special.gammaln(alpha)


def dispersion_h_second(r, y, c):
    """Exact second derivative of :func:`dispersion_h` in r."""
    s = pg_match_shape_slope(c)
    return -(s * s) * special.polygamma(1, (y + r) * s)


def dispersion_params(state, data, fm=None, config=None):
    """PTN parameters of q(r_n) for every neuron."""
    fm = f_moments(state) if fm is None else fm
    c = np.sqrt(np.maximum(fm.EF2, 0.0))  # (M, N, T)
    slope = pg_match_shape_slope(c)
    sum_dg, sum_curv = _backend.dispersion_sums(data.counts, data.trial_mask, state.r_mean, slope,
                                                _threads(config))
    Rm = trials_observed(data)
    p = Rm.sum() * data.n_bins * np.ones(state.N)
    tilt = np.einsum("m,mnt->n", Rm, -0.5 * fm.EF - log_cosh(0.5 * c))
    a = p * state.xi_mean + 0.5 * sum_curv
    b = sum_dg + p * (EULER_GAMMA - LOG2) + tilt + sum_curv * state.r_mean
    return [PTNParams(float(p[n]), float(a[n]), float(b[n])) for n in range(state.N)]


def update_q_r(state, data, fm=None, config=None):
    if state.likelihood == "binomial":
        return state
    params = dispersion_params(state, data, fm, config)
    moments = np.array(_map_neurons(lambda n: ptn_moments(params[n]), state.N, _threads(config)))
    state.r_mean, state.r_sq, state.r_log = moments[:, 0].copy(), moments[:, 1].copy(), moments[:, 2].copy()
    return state



def _dispersion_fixed_inputs(state, data, fm):
    c = np.sqrt(np.maximum(fm.EF2, 0.0))
    slope = np.ascontiguousarray(pg_match_shape_slope(c))
    Rm = trials_observed(data)
    p = float(Rm.sum() * data.n_bins)
    tilt = np.einsum("m,mnt->n", Rm, -0.5 * fm.EF - log_cosh(0.5 * c))
    return slope, p, tilt


def solve_q_r(state, data, fm=None, config=None, xtol=1e-10, max_evals=60):
    """Iterate the {tau, xi, r} block to its self-consistent fixed point.

    With q(F) held fixed, repeated application of update_aug_gamma,
    update_aug_pig and update_q_r converges (slowly, like any EM on a
    Gamma-mixture) to a point where E[r] reproduces itself. That point is
    found directly per neuron by bracketing the root of
    ``log G(r) - log r`` in log r, where G is one single-step update.
    """
    if state.likelihood == "binomial":
        return state
    fm = f_moments(state) if fm is None else fm
    slope, p, tilt = _dispersion_fixed_inputs(state, data, fm)
    counts, mask = _backend._prep(data.counts, data.trial_mask)

    def one(n):
        ratio = [state.r_sq[n] / state.r_mean[n] ** 2]
        cache = {}

        def G(u):
            if u in cache:
                return cache[u]
            r = float(np.exp(u))
            rv = np.full(state.N, r)
            out_d, out_c = np.zeros(state.N), np.zeros(state.N)
            _backend.dispersion_sums_range(counts, mask, rv, slope, out_d, out_c, n, n + 1)
            a = p * float(pig_mean(np.sqrt(ratio[0]) * r)) + 0.5 * out_c[n]
            b = out_d[n] + p * (EULER_GAMMA - LOG2) + tilt[n] + out_c[n] * r
            mom = ptn_moments(PTNParams(p, a, b))
            ratio[0] = mom[1] / mom[0] ** 2
            cache[u] = (np.log(mom[0]) - u, mom)
            return cache[u]

        u0 = float(np.log(state.r_mean[n]))
        g0, mom = G(u0)
        if abs(g0) < xtol:
            return mom
        # expand a bracket in the direction of the update
        step = max(abs(g0), 1e-3) * np.sign(g0)
        lo, glo = u0, g0
        hi = None
        for _ in range(40):
            u1 = lo + step
            g1, _ = G(u1)
            if np.sign(g1) != np.sign(g0):
                hi = u1
                break
            lo, glo = u1, g1
            step *= 2.0
        if hi is None:
            return G(lo)[1]
        root = optimize.brentq(lambda u: G(u)[0], lo, hi, xtol=xtol, maxiter=max_evals)
        return G(root)[1]

    moments = np.array(_map_neurons(one, state.N, _threads(config)))
    state.r_mean, state.r_sq, state.r_log = moments[:, 0].copy(), moments[:, 1].copy(), moments[:, 2].copy()
    update_aug_gamma(state, data, config)
    update_aug_pig(state)
    return state

# ---------------------------------------------------------------- monitor

def loglik_sum(state_or_F, data, r=None, k=None, likelihood="neg_binomial", threads=1):
    """Per-neuron summed log-likelihood of ``data`` at a plug-in predictor F (M, N, T)."""
    F = np.ascontiguousarray(state_or_F, dtype=float)
    if likelihood == "binomial":
        return _backend.binom_loglik(data.counts, data.trial_mask, F, k, threads)
    return _backend.nb_loglik(data.counts, data.trial_mask, F, r, threads)


def per_bin(total, data):
    return float(total) / (data.trial_mask.sum() * data.n_neurons * data.n_bins)


def monitor(state, data, fm=None, config=None):
    """Mean per-bin log-likelihood at the posterior means."""
    EF = (f_moments(state) if fm is None else fm).EF
    ll = loglik_sum(EF, data, state.r_mean, state.k, state.likelihood, _threads(config))
    return per_bin(ll.sum(), data)


# ---------------------------------------------------------------- M-step

def gram_objective(points, log_ls, A, count, jitter, kind="se"):
    """Objective and gradient for one Gram block.

    Parameters
    ----------
    points : (P, C) inputs of the kernel.
    log_ls : (C,) log lengthscales.
    A : (P, P) expected second-moment matrix weighted by the prior precision scale.
    count : multiplicity of the log-determinant term.
    """
    ls = np.exp(log_ls)
    K = condition_gram(points, ls, kind)
    kg = model_factorize(K, jitter)
    Ki = kg.inverse()
    KiA = Ki @ A
    obj = -0.5 * (np.trace(KiA) + count * kg.log_det)
    if kind == "delta":
        return obj, np.zeros_like(log_ls), kg
    G = KiA @ Ki  # K^-1 A K^-1
    G = 0.5 * (G + G.T) - count * Ki
    dK = se_gram_grad_loglengthscale(points, ls)
    grad = 0.5 * np.einsum("ij,cji->c", G, dK)
    return obj, grad, kg


def time_block_stats(state, d):
    return state.x_cov[d] + np.outer(state.x_mean[d], state.x_mean[d])


def condition_block_stats(state):
    N, D, M = state.N, state.D, state.M
    mean = state.w_mean.reshape(N, D, M)
    cov = state.w_cov.reshape(N, D, M, D, M)
    tau = state.ard_mean
    A = np.zeros((M, M))
    for d in range(D):
        Cdd = cov[:, d, :, d, :].sum(axis=0)
        A += tau[d] * (Cdd + mean[:, d, :].T @ mean[:, d, :])
    return 0.5 * (A + A.T), N * D


def _ascend(fun, x0, steps, lr, max_step):
    """Gradient ascent with halving backtracking; never accepts a decrease."""
    x = np.array(x0, dtype=float)
    try:
        f, g = fun(x)
    except NumericalError:
        return x
    for _ in range(steps):
        step = lr * g
        norm = np.max(np.abs(step)) if step.size else 0.0
        if norm > max_step:
            step *= max_step / norm
        if np.max(np.abs(step), initial=0.0) < 1e-10:
            break
        accepted = False
        for _ in range(30):
            try:
                f_new, g_new = fun(x + step)
            except (NumericalError, ValueError):
                step *= 0.5
                continue
            if f_new >= f:
                accepted = True
                break
            step *= 0.5
            if np.max(np.abs(step)) < 1e-10:
                break
        if not accepted:
            break
        x, f, g = x + step, f_new, g_new
    return x


def m_step(state, data, config):
    if not config.learn_lengthscales:
        return state
    tgrid = time_points(state.T)
    for d in range(state.D):
        A = time_block_stats(state, d)

        def fun(v, A=A):
            obj, grad, _ = gram_objective(tgrid, v, A, 1.0, config.jitter)
            return obj, grad

        state.time_lengthscales[d] = float(np.exp(_ascend(
            fun, np.log([state.time_lengthscales[d]]), config.mstep_steps, config.mstep_lr,
            config.mstep_max_step))[0])
    if config.condition_kernel == "se" and state.M > 1:
        A, count = condition_block_stats(state)
        coords = data.condition_coords

        def fun(v):
            obj, grad, _ = gram_objective(coords, v, A, count, config.jitter)
            return obj, grad

        state.condition_lengthscales = np.exp(_ascend(
            fun, np.log(state.condition_lengthscales), config.mstep_steps, config.mstep_lr,
            config.mstep_max_step))
    return state


# ---------------------------------------------------------------- diagnostics

def dimension_scores(state):
    W = state.weights()  # (M, N, D)
    norms = np.sqrt((W**2).sum(axis=0)).max(axis=0)
    return norms / np.sqrt(state.ard_mean)


def retained_dims(state, threshold=RETAIN_THRESHOLD):
    score = dimension_scores(state)
    top = score.max()
    if not top > 0:
        return []
    return [int(d) for d in np.flatnonzero(score > threshold * top)]


def _score_ratios(state):
    score = dimension_scores(state)
    top = score.max()
    return score / top if top > 0 else np.zeros_like(score)


def _ratio_drift(old, new):
    """Largest per-iteration log change among dimensions near or above retention."""
    if old is None:
        return np.inf
    active = np.maximum(old, new) >= 0.1 * RETAIN_THRESHOLD
    if not np.any(active):
        return 0.0
    with np.errstate(divide="ignore"):
        return float(np.max(np.abs(np.log(new[active]) - np.log(old[active]))))


@dataclass
class FitReport:
    monitor: list
    iterations_run: int
    converged: bool
    time_lengthscales: list
    condition_lengthscales: list
    ard_mean: list
    retained_dims: list
    dispersion_mean: list
    wall_time: float = 0.0
    seconds: list = field(default_factory=list)

    def to_dict(self, include_timing=False):
        out = {
            "monitor": [float(v) for v in self.monitor],
            "iterations_run": int(self.iterations_run),
            "converged": bool(self.converged),
            "time_lengthscales": [float(v) for v in self.time_lengthscales],
            "condition_lengthscales": [float(v) for v in self.condition_lengthscales],
            "ard_mean": [float(v) for v in self.ard_mean],
            "retained_dims": list(self.retained_dims),
            "dispersion_mean": [float(v) for v in self.dispersion_mean],
        }
        if include_timing:
            out["wall_time"] = float(self.wall_time)
        return out

    def to_json(self, include_timing=False):
        # repr-exact floats, stable key order: identical runs give identical bytes
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def write_monitor_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "monitor", "seconds"])
            for i, (v, s) in enumerate(zip(self.monitor, self.seconds)):
                w.writerow([i, repr(float(v)), f"{s:.6f}"])


def e_step(state, data, grams, config):
    update_aug_gamma(state, data, config)
    update_aug_pig(state)
    update_aug_pg(state, data)
    update_q_W(state, data, grams, config)
    update_q_X(state, data, grams, config)
    update_q_beta(state, data)
    update_q_tau_beta(state, config)
    if config.r_update == "solve":
        solve_q_r(state, data, None, config)
    else:
        update_q_r(state, data, None, config)
    update_q_ard(state, grams, config)
    return state


def fit(data, config, state=None, start_iter=0, checkpoint=None, checkpoint_every=50,
        callback=None, max_iters=None):
    """Run variational EM until the monitor stalls or ``max_iters`` is reached.

    Parameters
    ----------
    state : VariationalState, optional
        Resume from this state instead of initialising.
    checkpoint : path, optional
        Periodically write a resumable checkpoint here.
    callback : callable(iteration, state, monitor_value), optional
    """
    t0 = time.perf_counter()
    if state is None:
        state = initialize_state(data, config)
    limit = config.max_iters if max_iters is None else max_iters
    values, seconds = [], []
    calm = 0
    prev_ratio = None
    converged = False
    it = start_iter
    while it < limit:
        grams = build_grams(state, data.condition_coords, config)
        e_step(state, data, grams, config)
        m_step(state, data, config)
        val = monitor(state, data, config=config)
        if not np.isfinite(val):
            raise NumericalError(f"monitor became non-finite at iteration {it}")
        values.append(val)
        seconds.append(time.perf_counter() - t0)
        it += 1
        if callback is not None:
            callback(it, state, val)
        if checkpoint is not None and checkpoint_every and it % checkpoint_every == 0:
            save_checkpoint(checkpoint, state, config, data.condition_coords, it)
        # a flat monitor can hide ARD shrinkage still in progress, so the
        # normalised loading scores of non-negligible dimensions must settle too
        ratio = _score_ratios(state)
        drift = _ratio_drift(prev_ratio, ratio)
        prev_ratio = ratio
        if len(values) > 1 and abs(values[-1] - values[-2]) < config.tol and drift < config.ard_tol:
            calm += 1
            if calm >= config.patience:
                converged = True
                break
        else:
            calm = 0
    if checkpoint is not None:
        save_checkpoint(checkpoint, state, config, data.condition_coords, it)
    report = FitReport(
        monitor=values,
        iterations_run=it,
        converged=converged,
        time_lengthscales=list(state.time_lengthscales),
        condition_lengthscales=list(state.condition_lengthscales),
        ard_mean=list(state.ard_mean),
        retained_dims=retained_dims(state),
        dispersion_mean=list(state.r_mean),
        wall_time=time.perf_counter() - t0,
        seconds=seconds,
    )
    return state, report
