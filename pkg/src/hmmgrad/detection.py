"""Forward-gradient skill identification and anomaly detection.

The forward gradient of a model is the one-step change of its filtered
log-likelihood, ``L_t - L_{t-1}``.  Skills are identified by the model with
the largest gradient; an anomaly is flagged when the gradient of the active
skill's model falls well below what nominal executions produce.  Two
likelihood-magnitude baselines are provided for comparison.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .hmm import HmmModel, LogBelief, as_observations, forward_init, forward_step, loglik_series

DETECTORS = ("gradient", "magnitude", "dod")


def forward_gradient(L_t: float, L_prev: float) -> float:
    return L_t - L_prev


def gradient_series(model: HmmModel, Y) -> np.ndarray:
    """Forward gradients for t = 2..T (length T-1)."""
    L = loglik_series(model, Y)
    if len(L) < 2:
        raise ValueError("a gradient needs at least two observations")
    return np.diff(L)


def _sorted_ids(models):
    if not models:
        raise ValueError("no models registered")
    return sorted(models)


def identify_skill(models: Mapping, states: Mapping | None, y):
    """Advance every model by one observation and pick the steepest one.

    ``states`` maps skill id to that model's current :class:`LogBelief`
    (``None`` or an empty mapping starts fresh beliefs, for which the
    gradient is taken against ``L_0 = log 1 = 0``).  Returns
    ``(skill, new_states, gradients)``; ties go to the lowest skill id.
    """
    ids = _sorted_ids(models)
    states = states or {}
    ts = {states[s].t for s in ids if s in states}
    if len(ts) > 1:
        raise ValueError(f"beliefs are at different timesteps: {sorted(ts)}")
    new_states, grads = {}, {}
    for s in ids:
        prev = states.get(s)
        if prev is None:
            b = forward_init(models[s], y)
            grads[s] = b.loglik
        else:
            b = forward_step(models[s], prev, y)
            grads[s] = b.loglik - prev.loglik
        new_states[s] = b
    best = max(ids, key=lambda s: (grads[s], -ids.index(s)))
    return best, new_states, grads


def gradient_predictions(models: Mapping, Y) -> np.ndarray:
    """Per-timestep skill labels by forward-gradient argmax."""
    ids = _sorted_ids(models)
    L = np.array([loglik_series(models[s], Y) for s in ids])
    G = np.diff(np.concatenate([np.zeros((len(ids), 1)), L], axis=1), axis=1)
    return np.asarray(ids)[G.argmax(axis=0)]


def cumulative_predictions(models: Mapping, Y) -> np.ndarray:
    """Per-timestep labels by cumulative log-likelihood argmax (the baseline)."""
    ids = _sorted_ids(models)
    L = np.array([loglik_series(models[s], Y) for s in ids])
    return np.asarray(ids)[L.argmax(axis=0)]


def score_skill_cumulative(models: Mapping, Y):
    """Skill whose model gives the whole sequence the highest likelihood."""
    return cumulative_predictions(models, Y)[-1]


# ---------------------------------------------------------------- gradient test


@dataclass(frozen=True)
class GradientCalibration:
    model_id: object
    grad_min: float
    grad_max: float
    grad_range: float

    def __post_init__(self):
        if not (np.isfinite(self.grad_min) and np.isfinite(self.grad_max)):
            raise ValueError("calibration bounds must be finite")
        if self.grad_max < self.grad_min:
            raise ValueError("grad_max < grad_min")
        if self.grad_range != self.grad_max - self.grad_min:
            raise ValueError("grad_range must equal grad_max - grad_min")

    @classmethod
    def from_bounds(cls, model_id, lo, hi):
        return cls(model_id, float(lo), float(hi), float(hi) - float(lo))

    @property
    def threshold(self) -> float:
        return self.grad_min - self.grad_range / 2


def calibrate_gradient(model: HmmModel, nominal_trials, model_id=None) -> GradientCalibration:
    if not len(nominal_trials):
        raise ValueError("no nominal trials to calibrate on")
    grads = np.concatenate([gradient_series(model, Y) for Y in nominal_trials])
    return GradientCalibration.from_bounds(model_id, grads.min(), grads.max())


def gradient_anomaly_test(cal: GradientCalibration, grad: float) -> bool:
    return bool(grad < cal.threshold)


# ---------------------------------------------------------------- baselines


@dataclass(frozen=True)
class MagnitudeThreshold:
    """Per-timestep mean and spread of nominal cumulative log-likelihoods."""

    mu: np.ndarray
    sigma: np.ndarray
    k: float = 3.0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        if mu.shape != sigma.shape or mu.ndim != 1 or mu.size == 0:
            raise ValueError("mu and sigma must be equal-length non-empty vectors")
        if np.any(sigma < 0):
            raise ValueError("sigma must be non-negative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def curve(self) -> np.ndarray:
        return self.mu - self.k * self.sigma

    def at(self, t: int) -> float:
        return float(self.curve[min(t, self.curve.size - 1)])


def resample(curve, length: int) -> np.ndarray:
    """Linearly stretch ``curve`` onto ``length`` evenly spaced points."""
    curve = np.asarray(curve, dtype=float)
    if curve.size == 1:
        return np.full(length, curve[0])
    src = np.linspace(0.0, 1.0, curve.size)
    return np.interp(np.linspace(0.0, 1.0, length), src, curve)


def calibrate_magnitude(model: HmmModel, nominal_trials, k: float = 3.0) -> MagnitudeThreshold:
    if len(nominal_trials) < 2:
        raise ValueError("the magnitude threshold needs at least two nominal trials")
    curves = [loglik_series(model, Y) for Y in nominal_trials]
    length = int(round(np.median([len(c) for c in curves])))
    aligned = np.array([resample(c, length) for c in curves])
    return MagnitudeThreshold(aligned.mean(axis=0), aligned.std(axis=0, ddof=1), float(k))


def magnitude_anomaly_test(thr: MagnitudeThreshold, L_t: float, t: int) -> bool:
    """``t`` is the 0-based step within the skill; beyond the curve the last value holds."""
    return bool(L_t < thr.at(t))


def dod_value(thr: MagnitudeThreshold, L_series, t: int) -> float:
    """One-step change of ``|L - F1|`` at 0-based step ``t``."""
    if t < 1:
        raise ValueError("the derivative of the difference needs t >= 1")
    return abs(L_series[t] - thr.at(t)) - abs(L_series[t - 1] - thr.at(t - 1))


def dod_anomaly_test(thr: MagnitudeThreshold, L_series, t: int, dod_threshold: float) -> bool:
    return bool(abs(dod_value(thr, L_series, t)) > dod_threshold)


def calibrate_dod(thr: MagnitudeThreshold, model: HmmModel, nominal_trials, safety: float = 1.5) -> float:
    """Largest nominal ``|d|H - F1|/dt|`` times ``safety``."""
    worst = 0.0
    for Y in nominal_trials:
        L = loglik_series(model, Y)
        for t in range(1, len(L)):
            worst = max(worst, abs(dod_value(thr, L, t)))
    return worst * safety


# ---------------------------------------------------------------- detector


@dataclass(frozen=True)
class SkillCalibration:
    gradient: GradientCalibration
    magnitude: MagnitudeThreshold | None = None
    dod_bound: float | None = None


def calibrate_skill(model, nominal_trials, model_id=None, k=3.0, dod_safety=1.5) -> SkillCalibration:
    grad = calibrate_gradient(model, nominal_trials, model_id)
    if len(nominal_trials) < 2:
        return SkillCalibration(grad)
    mag = calibrate_magnitude(model, nominal_trials, k)
    return SkillCalibration(grad, mag, calibrate_dod(mag, model, nominal_trials, dod_safety))


@dataclass(frozen=True)
class Event:
    t: int
    kind: str  # "skill-switch" | "anomaly-trigger"
    skill: object
    detector: str
    value: float

    def as_dict(self):
        return {"t": self.t, "kind": self.kind, "skill": self.skill, "detector": self.detector,
                "value": self.value}


@dataclass
class EventTimeline:
    events: list = field(default_factory=list)
    labels: np.ndarray | None = None  # per-step skill hypothesis

    def triggers(self, detector=None):
        return [e for e in self.events if e.kind == "anomaly-trigger" and (detector is None or e.detector == detector)]

    def switches(self):
        return [e for e in self.events if e.kind == "skill-switch"]


@dataclass(frozen=True)
class DetectorConfig:
    detectors: tuple = ("gradient",)
    suppression: int = 3
    # only switch to a skill whose own gradient passes its anomaly test;
    # otherwise no model explains the sample and the current skill is kept
    gate_switches: bool = True

    def __post_init__(self):
        if self.suppression < 0:
            raise ValueError("suppression must be >= 0")


@dataclass
class DetectorState:
    beliefs: dict = field(default_factory=dict)
    loglik: dict = field(default_factory=dict)
    skill: object = None
    t: int = -1
    suppress_until: int = -1
    # cumulative-likelihood origin of the current skill hypothesis
    base: float = 0.0
    skill_start: int = 0


class OnlineDetector:
    """Single-stream detector: feed observations one at a time with :meth:`step`."""

    def __init__(self, models: Mapping, calibrations: Mapping, config: DetectorConfig = DetectorConfig()):
        self.ids = _sorted_ids(models)
        unknown = set(config.detectors) - set(DETECTORS)
        if unknown:
            raise ValueError(f"unknown detector(s) {sorted(unknown)}")
        for s in self.ids:
            cal = calibrations.get(s)
            if cal is None:
                raise ValueError(f"no calibration for skill {s!r}")
            if ("magnitude" in config.detectors or "dod" in config.detectors) and cal.magnitude is None:
                raise ValueError(f"skill {s!r} has no magnitude threshold")
            if "dod" in config.detectors and cal.dod_bound is None:
                raise ValueError(f"skill {s!r} has no derivative-of-difference bound")
        self.models = models
        self.calibrations = calibrations
        self.config = config
        self.state = DetectorState()

    def step(self, y) -> list:
        st = self.state
        t = st.t + 1
        prev_ll = dict(st.loglik)
        skill, beliefs, grads = identify_skill(self.models, st.beliefs, y)
        st.beliefs = beliefs
        st.loglik = {s: b.loglik for s, b in beliefs.items()}
        st.t = t
        events = []
        if t == 0:
            st.skill, st.base, st.skill_start = skill, 0.0, 0
        elif skill != st.skill and self.config.gate_switches and gradient_anomaly_test(
                self.calibrations[skill].gradient, grads[skill]):
            pass
        elif skill != st.skill:
            events.append(Event(t, "skill-switch", skill, "gradient", float(grads[skill])))
            st.skill = skill
            st.base = prev_ll[skill]
            st.skill_start = t
            st.suppress_until = t + self.config.suppression - 1
        if t == 0 or t <= st.suppress_until:
            return events

        s = st.skill
        cal = self.calibrations[s]
        for det in self.config.detectors:
            if det == "gradient":
                v = grads[s]
                hit = gradient_anomaly_test(cal.gradient, v)
            else:
                tau = t - st.skill_start
                H = st.loglik[s] - st.base
                if det == "magnitude":
                    v = H
                    hit = magnitude_anomaly_test(cal.magnitude, H, tau)
                else:
                    if tau < 1:
                        continue
                    H_prev = prev_ll[s] - st.base
                    v = abs(H - cal.magnitude.at(tau)) - abs(H_prev - cal.magnitude.at(tau - 1))
                    hit = abs(v) > cal.dod_bound
            if hit:
                events.append(Event(t, "anomaly-trigger", s, det, float(v)))
        return events


def run_detector(models: Mapping, calibrations: Mapping, Y, config: DetectorConfig = DetectorConfig()) -> EventTimeline:
    Y = as_observations(Y)
    det = OnlineDetector(models, calibrations, config)
    events, labels = [], []
    for y in Y:
        events.extend(det.step(y))
        labels.append(det.state.skill)
    return EventTimeline(events, np.asarray(labels))


def group_triggers(times, gap: int):
    """Collapse sorted trigger times closer than ``gap`` steps; keep group starts."""
    groups = []
    last = None
    for t in sorted(times):
        if last is None or t - last > gap:
            groups.append(t)
        last = t
    return groups
