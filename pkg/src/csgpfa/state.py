"""Model configuration, variational state and moments of the linear predictor.

Layout of the per-neuron weight posterior: ``vec(W[:, n, :])`` is d-major, i.e.
entry ``d * M + m`` holds W[m, n, d], so the prior covariance is
``kron(diag(1 / tau), K_W)``.
"""
import gzip
import json
from dataclasses import dataclass, asdict, fields

import numpy as np
from scipy import ndimage

from .kernels import DEFAULT_JITTER, delta_gram, factorize, se_gram, time_points

LIKELIHOODS = ("neg_binomial", "binomial")
SVD_KEEP = 0.2  # seed components with singular value >= this fraction of the largest


@dataclass
class ModelConfig:
    D: int = 10
    likelihood: str = "neg_binomial"
    ard_shape: float = 1e-5
    ard_rate: float = 1e-5
    bias_shape: float = 1e-5
    bias_rate: float = 1e-5
    time_lengthscale: object = None  # bins; None -> T / 10
    condition_lengthscale: object = None  # None -> 0.3 * coordinate range
    condition_kernel: str = "se"  # "se" or "delta" (K_W = I ablation)
    learn_lengthscales: bool = True
    jitter: float = DEFAULT_JITTER
    max_iters: int = 1000
    tol: float = 1e-6
    patience: int = 5
    ard_tol: float = 1e-3  # max per-iteration log change of normalised ARD scores
    mstep_steps: int = 10
    mstep_lr: float = 0.01
    mstep_max_step: float = 0.5
    w_init_scale: float = 0.01
    r_update: str = "solve"  # "solve" (block fixed point) or "step" (single update)
    r_init: str = "moments"  # "moments" (across-trial NB moments) or "mean" (mean count)
    init: str = "svd"  # "svd" (smoothed log-rate SVD) or "random"
    binomial_k: object = None  # None -> per-neuron max count
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}")
        if self.r_update not in ("solve", "step"):
            raise ValueError("r_update must be 'solve' or 'step'")
        if self.r_init not in ("moments", "mean"):
            raise ValueError("r_init must be 'moments' or 'mean'")
        if self.init not in ("svd", "random"):
            raise ValueError("init must be 'svd' or 'random'")
        if self.condition_kernel not in ("se", "delta"):
            raise ValueError("condition_kernel must be 'se' or 'delta'")
        if min(self.ard_shape, self.ard_rate, self.bias_shape, self.bias_rate) <= 0:
            raise ValueError("prior constants must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class VariationalState:
    x_mean: np.ndarray  # (D, T)
    x_cov: np.ndarray  # (D, T, T)
    w_mean: np.ndarray  # (N, D*M)
    w_cov: np.ndarray  # (N, D*M, D*M)
    beta_mean: np.ndarray
    beta_var: np.ndarray
    r_mean: np.ndarray
    r_sq: np.ndarray
    r_log: np.ndarray
    ard_shape: np.ndarray
    ard_rate: np.ndarray
    tau_beta_shape: float
    tau_beta_rate: float
    omega_mean: np.ndarray  # (M, R, N, T)
    log_tau_mean: np.ndarray  # (M, R, N, T)
    xi_mean: np.ndarray  # (N,)
    time_lengthscales: np.ndarray
    condition_lengthscales: np.ndarray
    k: np.ndarray = None  # binomial trial counts per neuron
    likelihood: str = "neg_binomial"

    @property
    def D(self):
        return self.x_mean.shape[0]

    @property
    def T(self):
        return self.x_mean.shape[1]

    @property
    def N(self):
        return self.w_mean.shape[0]

    @property
    def M(self):
        return self.w_mean.shape[1] // self.D

    @property
    def ard_mean(self):
        return self.ard_shape / self.ard_rate

    @property
    def tau_beta_mean(self):
        return self.tau_beta_shape / self.tau_beta_rate

    def weights(self):
        """Posterior weight means as an (M, N, D) array."""
        return self.w_mean.reshape(self.N, self.D, self.M).transpose(2, 0, 1)

    def weight_second_moments(self):
        """E[W_{m,n,:} W_{m,n,:}^T], shape (N, M, D, D)."""
        N, D, M = self.N, self.D, self.M
        cov = self.w_cov.reshape(N, D, M, D, M)
        block = np.einsum("ndmem->nmde", cov)
        mean = self.w_mean.reshape(N, D, M).transpose(0, 2, 1)
        return block + mean[..., :, None] * mean[..., None, :]

    def x_var(self):
        return np.diagonal(self.x_cov, axis1=1, axis2=2).copy()

    def copy(self):
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v.copy() if isinstance(v, np.ndarray) else v
        return VariationalState(**kw)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                out[f.name] = {"shape": list(v.shape), "data": v.ravel().tolist()}
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if isinstance(v, dict) and "shape" in v:
                v = np.asarray(v["data"], dtype=float).reshape(v["shape"])
            kw[f.name] = v
        return cls(**kw)


@dataclass
class FMoments:
    EF: np.ndarray  # (M, N, T)
    EF2: np.ndarray


@dataclass
class ModelGrams:
    time: list  # KernelGrams per latent
    cond: object  # KernelGrams over training conditions


def resolve_lengthscales(config, data):
    T = data.n_bins
    if config.time_lengthscale is None:
        theta = np.full(config.D, T / 10.0)
    else:
        theta = np.broadcast_to(np.asarray(config.time_lengthscale, dtype=float), (config.D,)).copy()
    C = data.condition_coords.shape[1]
    if config.condition_lengthscale is None:
        span = np.ptp(data.condition_coords, axis=0)
        ell = np.where(span > 0, 0.3 * span, 1.0)
    else:
        ell = np.broadcast_to(np.asarray(config.condition_lengthscale, dtype=float), (C,)).copy()
    return theta, ell


def condition_gram(coords, ell, kind="se"):
    if kind == "delta":
        return delta_gram(coords, coords)
    return se_gram(coords, coords, ell)


def model_factorize(K, jitter):
    """Factorise a prior Gram with the nugget floored at ``jitter``.

    SE Grams on dense grids are numerically singular; a zero-nugget Cholesky
    may succeed yet give a meaningless inverse, so model Grams always carry
    at least the base jitter.
    """
    return factorize(K, jitter, min_jitter=jitter)


def build_grams(state, coords, config):
    tgrid = time_points(state.T)
    time = [model_factorize(se_gram(tgrid, tgrid, th), config.jitter) for th in state.time_lengthscales]
    cond = model_factorize(condition_gram(coords, state.condition_lengthscales, config.condition_kernel),
                           config.jitter)
    return ModelGrams(time, cond)


def f_moments(state):
    """First and second moments of F[m, n, t] under the factorised posterior."""
    Wm = state.weights()  # (M, N, D)
    mu = state.x_mean
    s = state.x_var()
    drive = np.einsum("mnd,dt->mnt", Wm, mu)
    b = state.beta_mean[None, :, None]
    EF = b + drive
    EWW = state.weight_second_moments()  # (N, M, D, D)
    quad = np.einsum("nmde,dt,et->mnt", EWW, mu, mu, optimize=True)
    quad += np.einsum("nmdd,dt->mnt", EWW, s)
    EF2 = (state.beta_mean**2 + state.beta_var)[None, :, None] + 2.0 * b * drive + quad
    return FMoments(EF, EF2)


def binomial_trials(data, config):
    if config.binomial_k is not None:
        k = np.broadcast_to(np.asarray(config.binomial_k, dtype=float), (data.n_neurons,)).copy()
    else:
        k = data.counts.max(axis=(0, 1, 3)).astype(float)
    return np.maximum(k, 1.0)


def dispersion_moments(data, lo=0.1, hi=100.0):
    """Method-of-moments NB dispersion from across-trial mean and variance.

    Within a (condition, bin) cell the rate is shared by all trials, so
    ``var - mean = mean**2 / r``; cells are pooled per neuron. Neurons with
    fewer than two trials per condition, or no excess variance, get ``hi``.
    """
    mask = data.trial_mask[:, :, None, None]
    ntr = data.trial_mask.sum(axis=1)[:, None, None].astype(float)
    y = np.where(mask, data.counts, 0).astype(float)
    mean = y.sum(axis=1) / ntr
    ok = ntr > 1
    var = np.where(mask, (y - mean[:, None]) ** 2, 0.0).sum(axis=1) / np.where(ok, ntr - 1, 1)
    num = np.where(ok, mean**2, 0.0).sum(axis=(0, 2))
    excess = np.where(ok, var - mean, 0.0).sum(axis=(0, 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(excess > 0, num / excess, hi)
    return np.clip(np.nan_to_num(r, nan=hi), lo, hi)


def _svd_init(data, config, beta0, r0, k):
    """Loadings and latents from the SVD of smoothed trial-averaged log rates."""
    M, R, N, T = data.shape
    D = config.D
    counts = np.where(data.trial_mask[:, :, None, None], data.counts, 0)
    ybar = counts.sum(axis=1) / data.trial_mask.sum(axis=1)[:, None, None]
    ybar = ndimage.gaussian_filter1d(ybar, sigma=max(T / 50.0, 0.5), axis=-1, mode="nearest")
    if config.likelihood == "binomial":
        q = (ybar + 0.5) / (k[None, :, None] + 1.0)
        z = np.log(q / (1.0 - q))
    else:
        z = np.log(ybar + 0.1) - np.log(r0)[None, :, None]
    # per-neuron offsets and a low-rank fit by alternating least squares. A
    # plain mean subtraction leaves a rank-one offset direction, and weak
    # components mostly carry the log-transform bias, so only components
    # above SVD_KEEP of the leading singular value are seeded.
    rank = min(D, M * N, T)
    beta = z.mean(axis=(0, 2))
    for _ in range(100):
        U, S, Vt = np.linalg.svd((z - beta[None, :, None]).reshape(M * N, T), full_matrices=False)
        rank = max(1, min(rank, int(np.sum(S >= SVD_KEEP * S[0]))))
        low = ((U[:, :rank] * S[:rank]) @ Vt[:rank]).reshape(M, N, T)
        beta_new = (z - low).mean(axis=(0, 2))
        if np.max(np.abs(beta_new - beta)) < 1e-10:
            break
        beta = beta_new
    rng = np.random.default_rng(config.seed)
    X = np.zeros((D, T))
    W = rng.normal(0.0, config.w_init_scale, (M, N, D))
    X[:rank] = Vt[:rank] * np.sqrt(T)
    W[:, :, :rank] = (U[:, :rank] * S[:rank] / np.sqrt(T)).reshape(M, N, rank)
    return np.clip(beta, -10, 10), X, W


def initialize_state(data, config):
    """Starting point for variational EM.

    ``config.init == "random"`` starts from zero latent means and small seeded
    loadings. ``"svd"`` seeds both from the SVD of smoothed trial-averaged log
    rates. In both cases the augmented moments are filled by one E-step pass
    and q(X) is refreshed so that the first q(W) update sees informative
    latents.
    """
    from . import inference  # circular: updates live in inference

    M, R, N, T = data.shape
    D = config.D
    theta, ell = resolve_lengthscales(config, data)
    mean_count = data.counts.sum(axis=(0, 1, 3)) / max(data.n_observations, 1)

    k = None
    if config.likelihood == "binomial":
        k = binomial_trials(data, config)
        p = np.clip(mean_count / k, 1e-4, 1 - 1e-4)
        beta0 = np.clip(np.log(p / (1 - p)), -10, 10)
        r0 = np.ones(N)
    else:
        floor_rate = np.maximum(mean_count, 0.1)
        beta0 = np.clip(np.log(floor_rate), -10, 10)
        r0 = dispersion_moments(data) if config.r_init == "moments" else floor_rate

    # per-neuron streams so neuron order does not change a neuron's draw
    w_mean = np.stack([
        np.random.default_rng([config.seed, n]).normal(0.0, config.w_init_scale, D * M) for n in range(N)
    ])
    x_mean = np.zeros((D, T))
    if config.init == "svd":
        beta0, x_mean, W = _svd_init(data, config, beta0, r0, k)
        w_mean = W.transpose(1, 2, 0).reshape(N, D * M)
    state = VariationalState(
        x_mean=x_mean,
        x_cov=np.zeros((D, T, T)),
        w_mean=w_mean,
        w_cov=np.zeros((N, D * M, D * M)),
        beta_mean=beta0.astype(float),
        beta_var=np.ones(N),
        r_mean=r0.astype(float),
        r_sq=r0.astype(float) ** 2,
        r_log=np.log(r0),
        ard_shape=np.full(D, config.ard_shape),
        ard_rate=np.full(D, config.ard_rate),
        tau_beta_shape=float(config.bias_shape),
        tau_beta_rate=float(config.bias_rate),
        omega_mean=np.zeros(data.shape),
        log_tau_mean=np.zeros(data.shape),
        xi_mean=np.zeros(N),
        time_lengthscales=theta,
        condition_lengthscales=ell,
        k=k,
        likelihood=config.likelihood,
    )
    grams = build_grams(state, data.condition_coords, config)
    for d in range(D):
        state.x_cov[d] = grams.time[d].K_eff
    if config.init == "random":
        state.w_cov[:] = np.kron(np.eye(D) / state.ard_mean[0], grams.cond.K_eff)
    inference.update_aug_gamma(state, data, config)
    inference.update_aug_pig(state)
    inference.update_aug_pg(state, data)
    inference.update_q_X(state, data, grams)
    return state


def save_checkpoint(path, state, config, coords, iteration=0, extra=None):
    payload = {
        "format": "csgpfa-checkpoint/1",
        "config": config.to_dict(),
        "condition_coords": np.asarray(coords).tolist(),
        "iteration": int(iteration),
        "state": state.to_dict(),
    }
    if extra:
        payload.update(extra)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wt") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt") as fh:
        payload = json.load(fh)
    if payload.get("format") != "csgpfa-checkpoint/1":
        raise ValueError(f"{path} is not a csgpfa checkpoint")
    config = ModelConfig.from_dict(payload["config"])
    state = VariationalState.from_dict(payload["state"])
    coords = np.asarray(payload["condition_coords"], dtype=float)
    return state, config, coords, payload
