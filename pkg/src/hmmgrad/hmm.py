"""Gaussian-emission HMMs: log-space filtering, Viterbi decoding and Baum-Welch.

States are indexed from 0.  ``trans[j, i]`` is P(z_{t+1}=i | z_t=j), so every
row is a probability vector.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
STOCHASTIC_TOL = 1e-9
LOG_2PI = math.log(2.0 * math.pi)
COV_TYPES = ("diag", "full")


class ModelError(ValueError):
    """Raised when HMM parameters violate a model invariant."""


class TrainingError(RuntimeError):
    pass


def logsumexp(values) -> float:
    """log(sum(exp(values))) computed by shifting by the maximum."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("logsumexp of an empty sequence")
    top = v.max()
    if top == -np.inf:
        return -np.inf
    if np.isnan(top) or top == np.inf:
        raise ValueError("logsumexp needs entries in [-inf, +inf)")
    return float(top + np.log(np.exp(v - top).sum()))


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class HmmModel:
    """Immutable HMM with one multivariate Gaussian per hidden state.

    ``covs`` is (N, D) variances for ``cov_type="diag"`` and (N, D, D) for
    ``cov_type="full"``.
    """

    pi: np.ndarray
    trans: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    cov_type: str = "diag"

    def __post_init__(self):
        set_ = object.__setattr__
        pi = _readonly(self.pi).ravel()
        trans = _readonly(np.atleast_2d(self.trans))
        means = _readonly(np.atleast_2d(self.means))
        covs = _readonly(self.covs)
        set_(self, "pi", pi)
        set_(self, "trans", trans)
        set_(self, "means", means)
        set_(self, "covs", covs)
        if self.cov_type not in COV_TYPES:
            raise ModelError(f"cov_type must be one of {COV_TYPES}, got {self.cov_type!r}")
        n = pi.size
        if n < 1:
            raise ModelError("need at least one state")
        if trans.shape != (n, n):
            raise ModelError(f"trans has shape {trans.shape}, expected {(n, n)}")
        if means.shape[0] != n:
            raise ModelError(f"means has {means.shape[0]} rows for {n} states")
        d = means.shape[1]
        expect = (n, d) if self.cov_type == "diag" else (n, d, d)
        if covs.shape != expect:
            raise ModelError(f"covs has shape {covs.shape}, expected {expect}")
        for name, arr in (("pi", pi), ("trans", trans), ("means", means), ("covs", covs)):
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{name} contains non-finite values")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > STOCHASTIC_TOL:
            raise ModelError(f"pi must be a probability vector (sum={pi.sum():.12g})")
        if np.any(trans < 0):
            raise ModelError("trans has negative entries")
        rows = trans.sum(axis=1)
        bad = np.flatnonzero(np.abs(rows - 1.0) > STOCHASTIC_TOL)
        if bad.size:
            raise ModelError(f"trans row {int(bad[0])} sums to {rows[bad[0]]:.12g}, not 1")

        floor = VARIANCE_FLOOR * (1.0 - 1e-9)
        if self.cov_type == "diag":
            if np.any(covs < floor):
                raise ModelError(f"variances must be >= {VARIANCE_FLOOR}")
            prec = 1.0 / covs
            logdet = np.log(covs).sum(axis=1)
            set_(self, "_cache", {"prec": prec, "logdet": logdet})
        else:
            chols = []
            for i, c in enumerate(covs):
                if not np.allclose(c, c.T, rtol=0, atol=1e-12 * max(1.0, np.abs(c).max())):
                    raise ModelError(f"covariance of state {i} is not symmetric")
                if np.linalg.eigvalsh(c).min() < floor:
                    raise ModelError(f"covariance of state {i} has eigenvalue below {VARIANCE_FLOOR}")
                chols.append(np.linalg.cholesky(c))
            chols = np.array(chols)
            logdet = 2.0 * np.log(np.diagonal(chols, axis1=1, axis2=2)).sum(axis=1)
            set_(self, "_cache", {"chol": chols, "logdet": logdet})
        with np.errstate(divide="ignore"):
            self._cache["log_pi"] = _readonly(np.log(pi))
            self._cache["log_trans"] = _readonly(np.log(trans))

    @property
    def n_states(self) -> int:
        return self.pi.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def log_pi(self) -> np.ndarray:
        return self._cache["log_pi"]

    @property
    def log_trans(self) -> np.ndarray:
        return self._cache["log_trans"]

    def state_cov(self, i: int) -> np.ndarray:
        """Full covariance matrix of state ``i``."""
        return np.diag(self.covs[i]) if self.cov_type == "diag" else np.array(self.covs[i])

    def log_emissions(self, Y) -> np.ndarray:
        """(T, N) matrix of log b_i(y_t)."""
        Y = as_observations(Y, self.dim)
        c = self._cache
        if self.cov_type == "diag":
            diff = Y[:, None, :] - self.means[None, :, :]
            maha = np.einsum("tnd,nd->tn", diff * diff, c["prec"])
        else:
            maha = np.empty((Y.shape[0], self.n_states))
            for i in range(self.n_states):
                z = np.linalg.solve(c["chol"][i], (Y - self.means[i]).T)
                maha[:, i] = (z * z).sum(axis=0)
        return -0.5 * (self.dim * LOG_2PI + c["logdet"][None, :] + maha)

    def __eq__(self, other):
        if not isinstance(other, HmmModel):
            return NotImplemented
        return (
            self.cov_type == other.cov_type
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("pi", "trans", "means", "covs")
            )
        )

    __hash__ = None


def as_observations(Y, dim: int | None = None) -> np.ndarray:
    """Coerce to a finite float (T, D) array; a 1-D input is a D=1 sequence."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None] if dim in (None, 1) else Y[None, :]
    if Y.ndim != 2 or Y.shape[0] < 1:
        raise ValueError(f"observations must be a non-empty (T, D) array, got shape {Y.shape}")
    if dim is not None and Y.shape[1] != dim:
        raise ValueError(f"observation dimension {Y.shape[1]} does not match model dimension {dim}")
    if not np.all(np.isfinite(Y)):
        raise ValueError("observations contain non-finite values")
    return Y


def emission_logprob(model: HmmModel, state: int, y) -> float:
    """log b_state(y) for a single observation."""
    if not 0 <= state < model.n_states:
        raise IndexError(f"state {state} out of range for {model.n_states} states")
    y = np.asarray(y, dtype=float).reshape(1, -1)
    return float(model.log_emissions(y)[0, state])


@dataclass(frozen=True)
class LogBelief:
    """Unnormalised log forward variables after ``t`` observations.

    ``log_alpha[i] = log P(z_t=i, y_{1:t})`` and ``loglik = log P(y_{1:t})``.
    """

    log_alpha: np.ndarray
    loglik: float
    t: int

    @property
    def posterior(self) -> np.ndarray:
        return np.exp(self.log_alpha - self.loglik)


def forward_init(model: HmmModel, y1) -> LogBelief:
    log_b = model.log_emissions(np.asarray(y1, dtype=float).reshape(1, -1))[0]
    log_alpha = model.log_pi + log_b
    loglik = logsumexp(log_alpha)
    if loglik == -np.inf:
        raise ModelError("initial belief has zero mass")
    return LogBelief(log_alpha, loglik, 1)


def forward_step(model: HmmModel, prev: LogBelief, y) -> LogBelief:
    log_b = model.log_emissions(np.asarray(y, dtype=float).reshape(1, -1))[0]
    log_alpha, loglik = kernels.forward_step(prev.log_alpha, model.log_trans, log_b)
    return LogBelief(log_alpha, float(loglik), prev.t + 1)


def forward_filter(model: HmmModel, Y) -> tuple[np.ndarray, np.ndarray]:
    """Batch forward pass: (T, N) log alphas and the (T,) loglik series."""
    log_b = model.log_emissions(Y)
    return kernels.forward(model.log_pi, model.log_trans, log_b)


def loglik_series(model: HmmModel, Y) -> np.ndarray:
    """L_t = log P(y_{1:t}) for t = 1..T."""
    return forward_filter(model, Y)[1]


@dataclass(frozen=True)
class ViterbiResult:
    path: np.ndarray
    log_delta: np.ndarray
    log_prob: float


def viterbi(model: HmmModel, Y) -> ViterbiResult:
    """MAP state path; ties go to the lowest state index."""
    log_b = model.log_emissions(Y)
    log_delta, backptr = kernels.viterbi(model.log_pi, model.log_trans, log_b)
    last = log_delta.shape[0] - 1
    path = kernels.backtrack(log_delta, backptr, last)
    return ViterbiResult(path, log_delta[last].copy(), float(log_delta[last].max()))


def path_logprob(model: HmmModel, Y, path) -> float:
    """log P(z_{1:T}=path, y_{1:T})."""
    log_b = model.log_emissions(Y)
    path = np.asarray(path, dtype=int)
    lp = model.log_pi[path[0]] + log_b[0, path[0]]
    lp += model.log_trans[path[:-1], path[1:]].sum() + log_b[np.arange(1, len(path)), path[1:]].sum()
    return float(lp)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    cov_type: str = "diag"
    max_iter: int = 200
    tol: float = 1e-4
    var_floor: float = VARIANCE_FLOOR
    self_transition: float = 0.9
    # added to every pi/trans entry after convergence, then renormalised
    trans_smoothing: float = 0.0
    seed: int = 0


def _init_transitions(n: int, self_p: float) -> np.ndarray:
    if n == 1:
        return np.ones((1, 1))
    A = np.zeros((n, n))
    rest = 1.0 - self_p
    for i in range(n):
        A[i, i] = self_p
        others = [j for j in range(n) if j != i]
        if i + 1 < n:
            # most of the remaining mass moves forward
            A[i, i + 1] = 0.8 * rest
            spill = [j for j in others if j != i + 1]
            if spill:
                A[i, spill] = 0.2 * rest / len(spill)
            else:
                A[i, i + 1] = rest
        else:
            A[i, others] = rest / len(others)
    return A


def _floor_cov(cov: np.ndarray, cov_type: str, floor: float) -> np.ndarray:
    if cov_type == "diag":
        return np.maximum(cov, floor)
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    out = (V * np.maximum(w, floor)) @ V.T
    return 0.5 * (out + out.T)


def _initial_model(trials, n: int, config: TrainConfig) -> HmmModel:
    chunks = [[] for _ in range(n)]
    for Y in trials:
        for i, part in enumerate(np.array_split(Y, n)):
            if len(part):
                chunks[i].append(part)
    pooled = np.vstack(trials)
    d = pooled.shape[1]
    means = np.empty((n, d))
    covs = np.empty((n, d) if config.cov_type == "diag" else (n, d, d))
    for i in range(n):
        data = np.vstack(chunks[i]) if chunks[i] else pooled
        if len(data) < 2:
            data = pooled
        means[i] = data.mean(axis=0)
        if config.cov_type == "diag":
            covs[i] = _floor_cov(data.var(axis=0), "diag", config.var_floor)
        else:
            c = np.atleast_2d(np.cov(data, rowvar=False, bias=True))
            covs[i] = _floor_cov(c, "full", config.var_floor)
    pi = np.full(n, 0.1 / (n - 1)) if n > 1 else np.ones(1)
    if n > 1:
        pi[0] = 0.9
    return HmmModel(pi, _init_transitions(n, config.self_transition), means, covs, config.cov_type)


def _normalise_rows(m):
    return m / m.sum(axis=-1, keepdims=True)


def smooth_model(model: HmmModel, eps: float) -> HmmModel:
    """Mix ``eps`` into every initial/transition entry and renormalise."""
    if eps <= 0:
        return model
    pi = _normalise_rows(model.pi + eps)
    trans = _normalise_rows(model.trans + eps)
    return HmmModel(pi, trans, model.means, model.covs, model.cov_type)


def baum_welch(trials, n_states: int, config: TrainConfig = TrainConfig()):
    """Fit an HMM by EM.

    Returns ``(model, history)`` where ``history[k]`` is the total training
    log-likelihood of the k-th parameter iterate.  The returned model is the
    last evaluated iterate (smoothed when ``trans_smoothing > 0``), so
    ``history[-1]`` is its log-likelihood before smoothing.
    """
    if n_states < 1:
        raise ValueError("n_states must be positive")
    trials = [as_observations(Y) for Y in trials]
    if not trials:
        raise ValueError("need at least one training sequence")
    dims = {Y.shape[1] for Y in trials}
    if len(dims) != 1:
        raise ValueError(f"training sequences have mixed dimensions {sorted(dims)}")
    short = [k for k, Y in enumerate(trials) if len(Y) < n_states]
    if short:
        warnings.warn(f"{len(short)} training sequence(s) shorter than n_states={n_states}", stacklevel=2)

    floor = config.var_floor
    model = _initial_model(trials, n_states, config)
    pooled = np.vstack(trials)
    history: list[float] = []
    for it in range(config.max_iter):
        pi_acc = np.zeros(n_states)
        trans_acc = np.zeros((n_states, n_states))
        gammas = []
        total = 0.0
        for Y in trials:
            log_b = model.log_emissions(Y)
            log_alpha, ll = kernels.forward(model.log_pi, model.log_trans, log_b)
            log_beta = kernels.backward(model.log_trans, log_b)
            seq_ll = ll[-1]
            if not np.isfinite(seq_ll):
                raise TrainingError(f"non-finite log-likelihood at EM iteration {it}")
            total += seq_ll
            gamma = np.exp(log_alpha + log_beta - seq_ll)
            gammas.append(gamma)
            pi_acc += gamma[0]
            trans_acc += kernels.xi_sum(log_alpha, log_beta, model.log_trans, log_b, seq_ll)
        history.append(float(total))
        if it > 0 and history[-1] - history[-2] < config.tol:
            break
        if it == config.max_iter - 1:
            break

        G = np.vstack(gammas)
        weight = G.sum(axis=0)
        pi = pi_acc / len(trials)
        trans = np.array(model.trans)
        used = trans_acc.sum(axis=1) > 0
        trans[used] = _normalise_rows(trans_acc[used])
        means = np.array(model.means)
        covs = np.array(model.covs)
        for i in range(n_states):
            if weight[i] <= 1e-300:
                continue
            w = G[:, i]
            mu = w @ pooled / weight[i]
            diff = pooled - mu
            if config.cov_type == "diag":
                cov = w @ (diff * diff) / weight[i]
            else:
                cov = (diff * w[:, None]).T @ diff / weight[i]
            means[i] = mu
            covs[i] = _floor_cov(cov, config.cov_type, floor)
        model = HmmModel(_normalise_rows(pi), trans, means, covs, config.cov_type)

    logger.debug("baum_welch n=%d iterations=%d loglik=%.6f", n_states, len(history), history[-1])
    return smooth_model(model, config.trans_smoothing), history


def train_baum_welch(trials, n_states: int, config: TrainConfig = TrainConfig()) -> HmmModel:
    return baum_welch(trials, n_states, config)[0]


def score_num_states(trials, candidates, config: TrainConfig = TrainConfig()) -> dict[int, float]:
    """Mean held-one-out log-likelihood per timestep for each candidate N.

    With a single trial the model is scored on its own training data.
    """
    trials = [as_observations(Y) for Y in trials]
    scores = {}
    for n in candidates:
        per_trial = []
        folds = range(len(trials)) if len(trials) > 1 else [None]
        for k in folds:
            train = [Y for j, Y in enumerate(trials) if j != k] if k is not None else trials
            held = trials[k] if k is not None else trials[0]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                model = train_baum_welch(train, n, config)
            per_trial.append(loglik_series(model, held)[-1] / len(held))
        scores[int(n)] = float(np.mean(per_trial))
    return scores


def select_num_states(trials, candidates, config: TrainConfig = TrainConfig(), scores=None) -> int:
    """Candidate with the best held-out score; near-ties go to the smallest N."""
    candidates = sorted(set(int(c) for c in candidates))
    if not candidates:
        raise ValueError("no state-count candidates given")
    if len(candidates) == 1:
        return candidates[0]
    if scores is None:
        scores = score_num_states(trials, candidates, config)
    best = max(scores[c] for c in candidates)
    tol = 1e-9 * max(1.0, abs(best))
    return next(c for c in candidates if scores[c] >= best - tol)
