"""Checks on the prefix stability of Viterbi paths and on how closely the
forward gradient follows the latest emission term."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from .hmm import HmmModel, as_observations, loglik_series, viterbi

STABLE_MARGIN = 2


@dataclass(frozen=True)
class IncrementalViterbiTrace:
    """``triangle[t, :t+1]`` is the MAP path of ``Y[:t+1]``; the rest is -1."""

    triangle: np.ndarray

    def __post_init__(self):
        tri = np.asarray(self.triangle)
        if tri.ndim != 2 or tri.shape[0] != tri.shape[1] or tri.shape[0] == 0:
            raise ValueError("triangle must be a non-empty square matrix")

    @property
    def T(self) -> int:
        return self.triangle.shape[0]

    def path(self, t: int) -> np.ndarray:
        return self.triangle[t, : t + 1]

    @property
    def paths(self):
        return [self.path(t) for t in range(self.T)]

    @classmethod
    def from_paths(cls, paths):
        T = len(paths)
        tri = np.full((T, T), -1, dtype=np.int64)
        for t, p in enumerate(paths):
            if len(p) != t + 1:
                raise ValueError(f"path {t} has length {len(p)}, expected {t + 1}")
            tri[t, : t + 1] = p
        return cls(tri)


def incremental_viterbi(model: HmmModel, Y) -> IncrementalViterbiTrace:
    """MAP paths of every prefix, sharing one pass of the max-product recursion."""
    Y = as_observations(Y, model.dim)
    log_delta, backptr = kernels.viterbi(model.log_pi, model.log_trans, model.log_emissions(Y))
    return IncrementalViterbiTrace(kernels.incremental_paths(log_delta, backptr))


@dataclass(frozen=True)
class SequenceBreak:
    t: int
    start: int  # first rewritten index
    length: int  # number of rewritten positions


@dataclass(frozen=True)
class SequenceBreakReport:
    breaks: list
    transitions: list
    max_break_len: int

    def near_transitions(self, tol: int = 1) -> bool:
        """Every rewritten index lies within ``tol`` steps of a transition."""
        tr = np.asarray(self.transitions)
        for b in self.breaks:
            for i in range(b.start, b.start + b.length):
                if tr.size == 0 or np.min(np.abs(tr - i)) > tol:
                    return False
        return True


def detect_sequence_breaks(trace: IncrementalViterbiTrace, transitions=None) -> SequenceBreakReport:
    """Steps where a prefix path rewrites its own history.

    ``transitions`` defaults to the switch times of the final path.
    """
    breaks = []
    for t in range(1, trace.T):
        prev, cur = trace.path(t - 1), trace.path(t)[:t]
        diff = np.flatnonzero(prev != cur)
        if diff.size:
            breaks.append(SequenceBreak(t, int(diff[0]), int(diff.size)))
    if transitions is None:
        final = trace.path(trace.T - 1)
        transitions = (np.flatnonzero(final[1:] != final[:-1]) + 1).tolist()
    return SequenceBreakReport(breaks, list(transitions), max((b.length for b in breaks), default=0))


def check_self_transition_dominance(model: HmmModel) -> bool:
    A = model.trans
    return bool(np.all(np.diag(A) >= A.max(axis=1)))


def emission_curves(model: HmmModel, Y) -> np.ndarray:
    """``N x T`` array of log b_i(y_t)."""
    return model.log_emissions(as_observations(Y, model.dim)).T.copy()


def stable_mask(T: int, transitions, margin: int = STABLE_MARGIN) -> np.ndarray:
    """True for steps at least ``margin`` away from every transition."""
    mask = np.ones(T, dtype=bool)
    for s in transitions:
        mask[max(0, s - margin + 1) : s + margin] = False
    return mask


@dataclass(frozen=True)
class ResidualReport:
    residuals: np.ndarray  # entry k is for step k+1 (0-based)
    stable: np.ndarray  # bool mask aligned with residuals
    tol: float

    @property
    def stable_fraction_within(self) -> float:
        r = self.residuals[self.stable]
        return float(np.mean(r <= self.tol)) if r.size else float("nan")

    @property
    def fraction_within(self) -> float:
        return float(np.mean(self.residuals <= self.tol))


def corollary_residuals(model: HmmModel, Y, transitions=None, tol: float = 1e-3) -> ResidualReport:
    """``|grad_t - (log b_z(t)(y_t) + log A_z(t-1)z(t))|`` along the full-sequence MAP path.

    Stable steps are those ``STABLE_MARGIN`` or more away from a transition
    (of ``transitions`` if given, else of the MAP path).
    """
    Y = as_observations(Y, model.dim)
    if len(Y) < 2:
        raise ValueError("residuals need at least two observations")
    grad = np.diff(loglik_series(model, Y))
    z = viterbi(model, Y).path
    log_b = model.log_emissions(Y)
    t = np.arange(1, len(Y))
    approx = log_b[t, z[1:]] + model.log_trans[z[:-1], z[1:]]
    with np.errstate(invalid="ignore"):
        res = np.abs(grad - approx)
    res = np.where(np.isnan(res), np.inf, res)
    if transitions is None:
        transitions = (np.flatnonzero(z[1:] != z[:-1]) + 1).tolist()
    return ResidualReport(res, stable_mask(len(Y), transitions)[1:], tol)


def gradient_emission_correlation(model: HmmModel, Y, transitions=None) -> float:
    """Pearson correlation of the gradient with ``max_i log b_i(y_t)`` over stable steps."""
    Y = as_observations(Y, model.dim)
    grad = np.diff(loglik_series(model, Y))
    best = model.log_emissions(Y).max(axis=1)[1:]
    if transitions is None:
        z = viterbi(model, Y).path
        transitions = (np.flatnonzero(z[1:] != z[:-1]) + 1).tolist()
    mask = stable_mask(len(Y), transitions)[1:]
    return float(np.corrcoef(grad[mask], best[mask])[0, 1])


# ---------------------------------------------------------------- exports


def write_triangle_csv(path, trace: IncrementalViterbiTrace):
    """Rows are prefix ends ``t``; columns ``z0..z{T-1}``; -1 marks no data."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"z{i}" for i in range(trace.T)])
        for t in range(trace.T):
            w.writerow([t] + trace.triangle[t].tolist())


def write_series_csv(path, columns: dict):
    """Equal-length named series as CSV columns with a leading ``t``."""
    names = list(columns)
    data = [np.asarray(columns[n]) for n in names]
    lengths = {len(d) for d in data}
    if len(lengths) > 1:
        raise ValueError(f"series lengths differ: {sorted(lengths)}")
    n = lengths.pop() if lengths else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + names)
        for t in range(n):
            w.writerow([t] + [_fmt(d[t]) for d in data])


def _fmt(v):
    if isinstance(v, (np.integer, int)):
        return int(v)
    return "%.17g" % float(v)
