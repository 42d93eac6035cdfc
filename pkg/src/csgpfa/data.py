"""Spike-count tensors, their CSV format, and the synthetic generator.

Counts are stored dense as ``(M, R, N, T)`` with a ``(M, R)`` trial mask so that
conditions may carry different numbers of trials.
"""
import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .kernels import DEFAULT_JITTER, factorize, se_gram, time_points

COUNTS_HEADER = ["condition", "trial", "neuron", "bin", "count"]


@dataclass
class SpikeTensor:
    counts: np.ndarray
    condition_coords: np.ndarray
    trial_mask: np.ndarray = None
    bin_width: float = 1.0

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 4:
            raise DataFormatError(f"counts must be 4-D (M, R, N, T), got shape {counts.shape}")
        if counts.size and not np.all(np.isfinite(counts)):
            raise DataFormatError("counts contain non-finite values")
        if np.any(counts < 0) or np.any(counts != np.round(counts)):
            raise DataFormatError("counts must be non-negative integers")
        self.counts = counts.astype(np.int64)
        M, R = self.counts.shape[:2]
        if self.trial_mask is None:
            self.trial_mask = np.ones((M, R), dtype=bool)
        self.trial_mask = np.asarray(self.trial_mask, dtype=bool)
        if self.trial_mask.shape != (M, R):
            raise DataFormatError("trial_mask must have shape (M, R)")
        if M and np.any(self.trial_mask.sum(axis=1) < 1):
            raise DataFormatError("every condition needs at least one trial")
        self.counts[~self.trial_mask] = 0
        coords = np.asarray(self.condition_coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, None]
        if coords.shape[0] != M:
            raise DataFormatError(f"{coords.shape[0]} condition rows for {M} conditions")
        if not np.all(np.isfinite(coords)):
            raise DataFormatError("condition coordinates must be finite")
        self.condition_coords = coords
        if len(np.unique(coords, axis=0)) < M:
            warnings.warn("duplicate condition coordinates", stacklevel=2)

    @property
    def shape(self):
        return self.counts.shape

    @property
    def n_conditions(self):
        return self.counts.shape[0]

    @property
    def n_neurons(self):
        return self.counts.shape[2]

    @property
    def n_bins(self):
        return self.counts.shape[3]

    @property
    def trials_per_condition(self):
        return self.trial_mask.sum(axis=1)

    @property
    def n_observations(self):
        """Observed bins per neuron, summed over conditions and trials."""
        return int(self.trials_per_condition.sum()) * self.n_bins

    def summed_counts(self):
        """Trial-summed counts, shape (M, N, T)."""
        return self.counts.sum(axis=1)

    def subset_conditions(self, idx):
        idx = np.atleast_1d(idx)
        keep = self.trial_mask[idx]
        R = int(keep.sum(axis=1).max())
        counts = np.zeros((len(idx), R) + self.counts.shape[2:], dtype=np.int64)
        mask = np.zeros((len(idx), R), dtype=bool)
        for i, m in enumerate(idx):
            rows = np.flatnonzero(self.trial_mask[m])
            counts[i, : len(rows)] = self.counts[m, rows]
            mask[i, : len(rows)] = True
        return SpikeTensor(counts, self.condition_coords[idx], mask, self.bin_width)

    def __eq__(self, other):
        if not isinstance(other, SpikeTensor):
            return NotImplemented
        return (
            np.array_equal(self.trial_mask, other.trial_mask)
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.condition_coords, other.condition_coords)
        )


@dataclass
class GenerativeSpec:
    M: int = 10
    N: int = 20
    T: int = 100
    D_true: int = 2
    C: int = 1
    n_trials: int = 50
    time_lengthscales: list = field(default_factory=lambda: [10.0, 15.0])
    condition_lengthscales: list = field(default_factory=lambda: [0.3])
    dispersion_range: tuple = (0.0, 5.0)
    seed: int = 0
    likelihood: str = "neg_binomial"
    bias_scale: float = 1.0
    bias_mean: float = 0.0
    weight_scale: float = 1.0
    binomial_k_range: tuple = (4, 12)
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        self.time_lengthscales = [float(v) for v in np.broadcast_to(self.time_lengthscales, (self.D_true,))]
        self.condition_lengthscales = [float(v) for v in np.broadcast_to(self.condition_lengthscales, (self.C,))]
        self.dispersion_range = tuple(float(v) for v in self.dispersion_range)
        self.binomial_k_range = tuple(int(v) for v in self.binomial_k_range)
        if min(self.M, self.N, self.T, self.D_true, self.C, self.n_trials) < 1:
            raise ValueError("M, N, T, D_true, C and n_trials must all be >= 1")
        if min(self.time_lengthscales + self.condition_lengthscales) <= 0:
            raise ValueError("lengthscales must be positive")
        lo, hi = self.dispersion_range
        if not (0.0 <= lo <= hi and hi > 0):
            raise ValueError(f"dispersion range must lie in (0, inf), got {self.dispersion_range}")
        if self.likelihood not in ("neg_binomial", "binomial"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


@dataclass
class GroundTruth:
    X: np.ndarray
    W: np.ndarray
    beta: np.ndarray
    r: np.ndarray
    rates: np.ndarray
    likelihood: str = "neg_binomial"
    k: np.ndarray = None

    @property
    def F(self):
        return self.beta[None, :, None] + np.einsum("mnd,dt->mnt", self.W, self.X)

    def to_json(self, path):
        payload = {
            "likelihood": self.likelihood,
            "X": self.X.tolist(),
            "W": self.W.tolist(),
            "beta": self.beta.tolist(),
            "r": self.r.tolist(),
            "rates": self.rates.tolist(),
        }
        if self.k is not None:
            payload["k"] = self.k.tolist()
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        k = d.get("k")
        return cls(
            X=np.asarray(d["X"], dtype=float),
            W=np.asarray(d["W"], dtype=float),
            beta=np.asarray(d["beta"], dtype=float),
            r=np.asarray(d["r"], dtype=float),
            rates=np.asarray(d["rates"], dtype=float),
            likelihood=d.get("likelihood", "neg_binomial"),
            k=None if k is None else np.asarray(k, dtype=float),
        )


def condition_grid(M, C):
    """Evenly spaced points on [0, 1]^C, endpoints included."""
    if C == 1:
        return np.linspace(0.0, 1.0, M)[:, None]
    per_axis = int(round(M ** (1.0 / C)))
    if per_axis**C != M:
        raise ValueError(f"M={M} is not a perfect {C}-th power; cannot build a grid")
    axes = np.meshgrid(*[np.linspace(0.0, 1.0, per_axis)] * C, indexing="ij")
    return np.stack([a.ravel() for a in axes], axis=1)


def generate_synthetic(spec):
    """Sample a dataset from the generative model described by ``spec``."""
    rng = np.random.default_rng(spec.seed)
    coords = condition_grid(spec.M, spec.C)
    tgrid = time_points(spec.T)

    X = np.empty((spec.D_true, spec.T))
    for d, theta in enumerate(spec.time_lengthscales):
        L = factorize(se_gram(tgrid, tgrid, theta), spec.jitter).chol
        X[d] = L @ rng.standard_normal(spec.T)

    Lw = factorize(se_gram(coords, coords, spec.condition_lengthscales), spec.jitter).chol
    W = np.empty((spec.M, spec.N, spec.D_true))
    for n in range(spec.N):
        W[:, n, :] = Lw @ rng.standard_normal((spec.M, spec.D_true))
    W *= spec.weight_scale

    beta = spec.bias_mean + spec.bias_scale * rng.standard_normal(spec.N)
    lo, hi = spec.dispersion_range
    r = hi - (hi - lo) * rng.random(spec.N)  # (lo, hi]

    F = beta[None, :, None] + np.einsum("mnd,dt->mnt", W, X)
    shape = (spec.M, spec.n_trials, spec.N, spec.T)
    k = None
    if spec.likelihood == "neg_binomial":
        lam = rng.gamma(r[None, None, :, None], np.exp(F)[:, None], size=shape)
        counts = rng.poisson(lam)
        rates = r[None, :, None] * np.exp(F)
    else:
        k_lo, k_hi = spec.binomial_k_range
        k = rng.integers(k_lo, k_hi + 1, size=spec.N).astype(float)
        prob = 1.0 / (1.0 + np.exp(-F))
        counts = rng.binomial(k[None, None, :, None].astype(np.int64), prob[:, None], size=shape)
        rates = k[None, :, None] * prob
    data = SpikeTensor(counts, coords)
    truth = GroundTruth(X, W, beta, r, rates, spec.likelihood, k)
    return data, truth


def _read_csv(path, what):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} file not found: {path}")
    with open(path) as fh:
        header = fh.readline().strip()
        if not header:
            raise DataFormatError(f"{what} file is empty: {path}")
        cols = [c.strip() for c in header.split(",")]
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                body = np.loadtxt(fh, delimiter=",", dtype=float, ndmin=2)
        except ValueError as exc:
            raise DataFormatError(f"malformed row in {path}: {exc}") from None
    if body.size and body.shape[1] != len(cols):
        raise DataFormatError(f"{path}: expected {len(cols)} columns, got {body.shape[1]}")
    return cols, body


def _as_int(col, name):
    if np.any(col != np.round(col)):
        raise DataFormatError(f"non-integer value in column {name!r}")
    return col.astype(np.int64)


def load_dataset(counts_path, conditions_path):
    """Read the long-format counts CSV and the conditions CSV."""
    cols, body = _read_csv(counts_path, "counts")
    if cols != COUNTS_HEADER:
        raise DataFormatError(f"counts header must be {','.join(COUNTS_HEADER)}, got {','.join(cols)}")
    if body.shape[0] == 0:
        raise DataFormatError("no observations")
    ccols, cbody = _read_csv(conditions_path, "conditions")
    if not ccols or ccols[0] != "condition" or len(ccols) < 2:
        raise DataFormatError("conditions header must be condition,coord_0,...")
    if cbody.shape[0] == 0:
        raise DataFormatError("conditions file has no rows")

    cond_ids = _as_int(cbody[:, 0], "condition")
    if len(np.unique(cond_ids)) != len(cond_ids):
        raise DataFormatError("duplicate condition ids in conditions file")
    order = np.argsort(cond_ids)
    cond_ids = cond_ids[order]
    coords = cbody[order, 1:]

    cond, trial, neuron, tbin = (_as_int(body[:, i], COUNTS_HEADER[i]) for i in range(4))
    count = body[:, 4]
    if np.any(count != np.round(count)):
        raise DataFormatError("non-integer count")
    if np.any(count < 0):
        raise DataFormatError("negative count")
    count = count.astype(np.int64)

    missing = np.setdiff1d(np.unique(cond), cond_ids)
    if missing.size:
        raise DataFormatError(f"condition ids {missing.tolist()} absent from conditions file")
    m_idx = np.searchsorted(cond_ids, cond)
    neurons = np.unique(neuron)
    bins = np.unique(tbin)
    n_idx = np.searchsorted(neurons, neuron)
    t_idx = np.searchsorted(bins, tbin)
    N, T, M = len(neurons), len(bins), len(cond_ids)

    # dense per-condition trial index
    r_idx = np.empty_like(trial)
    R = np.zeros(M, dtype=np.int64)
    for m in range(M):
        sel = m_idx == m
        if not np.any(sel):
            raise DataFormatError(f"condition {cond_ids[m]} has no trials")
        ids, inv = np.unique(trial[sel], return_inverse=True)
        r_idx[sel] = inv
        R[m] = len(ids)

    Rmax = int(R.max())
    counts = np.zeros((M, Rmax, N, T), dtype=np.int64)
    seen = np.zeros((M, Rmax, N, T), dtype=np.int64)
    np.add.at(seen, (m_idx, r_idx, n_idx, t_idx), 1)
    if np.any(seen > 1):
        raise DataFormatError("duplicate (condition, trial, neuron, bin) rows")
    mask = np.arange(Rmax)[None, :] < R[:, None]
    per_trial = seen.sum(axis=(2, 3))
    if np.any(per_trial[mask] != N * T):
        raise DataFormatError("inconsistent (N, T) across trials")
    counts[m_idx, r_idx, n_idx, t_idx] = count
    return SpikeTensor(counts, coords, mask)


def write_dataset(data, counts_path, conditions_path):
    """Write ``data`` so that :func:`load_dataset` reproduces it exactly."""
    M, R, N, T = data.shape
    m, r, n, t = np.meshgrid(np.arange(M), np.arange(R), np.arange(N), np.arange(T), indexing="ij")
    keep = np.broadcast_to(data.trial_mask[:, :, None, None], data.shape).ravel()
    table = np.stack([m.ravel(), r.ravel(), n.ravel(), t.ravel(), data.counts.ravel()], axis=1)[keep]
    with open(counts_path, "w") as fh:
        np.savetxt(fh, table, fmt="%d", delimiter=",", header=",".join(COUNTS_HEADER), comments="")
    C = data.condition_coords.shape[1]
    header = ",".join(["condition"] + [f"coord_{i}" for i in range(C)])
    with open(conditions_path, "w") as fh:
        fh.write(header + "\n")
        for i, row in enumerate(data.condition_coords):
            fh.write(",".join([str(i)] + [repr(float(v)) for v in row]) + "\n")


def write_conditions(coords, path):
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    header = ",".join(["condition"] + [f"coord_{i}" for i in range(coords.shape[1])])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for i, row in enumerate(coords):
            fh.write(",".join([str(i)] + [repr(float(v)) for v in row]) + "\n")


def load_conditions(path):
    cols, body = _read_csv(path, "conditions")
    if not cols or cols[0] != "condition":
        raise DataFormatError("conditions header must start with 'condition'")
    if body.shape[0] == 0:
        raise DataFormatError("conditions file has no rows")
    order = np.argsort(body[:, 0], kind="stable")
    coords = body[order, 1:]
    if not np.all(np.isfinite(coords)):
        raise DataFormatError("condition coordinates must be finite")
    return coords


def spec_to_dict(spec):
    return asdict(spec)
