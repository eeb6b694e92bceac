"""Synthetic pick-and-place trials with labelled skills and injected anomalies.

Observations are 13-dimensional: end-effector position (3) and orientation
quaternion (4), followed by force (3) and torque (3).  Each skill is produced
by its own left-to-right Gaussian HMM.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .hmm import HmmModel, as_observations

POSITION = slice(0, 3)
QUATERNION = slice(3, 7)
POSE = slice(0, 7)
FORCE = slice(7, 10)
TORQUE = slice(10, 13)
WRENCH = slice(7, 13)
DIM = 13

# per-channel noise of a nominal execution
NOMINAL_STD = np.array([0.004] * 3 + [0.003] * 4 + [0.4] * 3 + [0.04] * 3)

SKILL_NAMES = ("hover_pick", "grasp", "lift", "hover_place", "place")
ROLES = ("train", "test-nominal", "test-anomalous", "recovery")


class AnomalyType(str, Enum):
    OBJECT_DISPLACEMENT = "object_displacement"
    MISSING_OBJECT = "missing_object"
    SLIPPERY_PICK = "slippery_pick"
    GRIPPER_COLLISION = "gripper_collision"
    ARM_COLLISION = "arm_collision"


@dataclass(frozen=True)
class Window:
    """Half-open step range ``[t_start, t_end)``."""

    t_start: int
    t_end: int

    def __contains__(self, t):
        return self.t_start <= t < self.t_end


@dataclass(frozen=True)
class AnomalyWindow(Window):
    type: AnomalyType = AnomalyType.GRIPPER_COLLISION


@dataclass
class Trial:
    observations: np.ndarray
    skill_labels: np.ndarray
    anomalies: list = field(default_factory=list)
    recovery_windows: list = field(default_factory=list)
    dt: float = 0.1

    def __post_init__(self):
        self.observations = as_observations(self.observations)
        self.skill_labels = np.asarray(self.skill_labels, dtype=np.int64)
        T = len(self.observations)
        if self.skill_labels.shape != (T,):
            raise ValueError(f"{len(self.skill_labels)} labels for {T} observations")
        for w in list(self.anomalies) + list(self.recovery_windows):
            if not 0 <= w.t_start < w.t_end <= T:
                raise ValueError(f"window [{w.t_start}, {w.t_end}) outside trial of length {T}")

    @property
    def T(self) -> int:
        return len(self.observations)

    def blocks(self):
        """Contiguous runs of equal labels as ``(skill, start, end)``."""
        return label_blocks(self.skill_labels)

    def segment(self, skill):
        return [self.observations[b:e] for s, b, e in self.blocks() if s == skill]


def label_blocks(labels):
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    cuts = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [labels.size]])
    return [(int(labels[b]), int(b), int(e)) for b, e in zip(starts, ends)]


@dataclass(frozen=True)
class SkillSpec:
    id: int
    name: str
    generator: HmmModel
    duration: tuple


@dataclass(frozen=True)
class TaskSpec:
    skills: tuple
    dim: int = DIM
    seed: int = 0
    separation: float = 50.0

    def __post_init__(self):
        if not self.skills:
            raise ValueError("a task needs at least one skill")
        for s in self.skills:
            lo, hi = s.duration
            if not 0 < lo <= hi:
                raise ValueError(f"skill {s.id}: bad duration range {s.duration}")
            if s.generator.dim != self.dim:
                raise ValueError(f"skill {s.id}: generator dimension {s.generator.dim} != {self.dim}")

    @property
    def skill_ids(self):
        return [s.id for s in self.skills]

    def skill(self, skill_id) -> SkillSpec:
        return next(s for s in self.skills if s.id == skill_id)

    def spec_hash(self) -> str:
        doc = {
            "dim": self.dim,
            "seed": self.seed,
            "separation": self.separation,
            "skills": [
                {
                    "id": s.id,
                    "name": s.name,
                    "duration": list(s.duration),
                    "pi": s.generator.pi.tolist(),
                    "trans": s.generator.trans.tolist(),
                    "means": s.generator.means.tolist(),
                    "covs": s.generator.covs.tolist(),
                }
                for s in self.skills
            ],
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def trial_seed(base_seed: int, role: str, index: int) -> int:
    ss = np.random.SeedSequence([int(base_seed), ROLES.index(role) if role in ROLES else 99, int(index)])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------- generators


def gaussian_sym_kl(m1, v1, m2, v2) -> float:
    """Symmetric KL divergence between two diagonal Gaussians."""
    d = (m1 - m2) ** 2
    return float(0.5 * np.sum(v1 / v2 + v2 / v1 - 2.0 + d / v1 + d / v2))


def skill_separation(a: HmmModel, b: HmmModel) -> float:
    """Smallest symmetric KL between any state of ``a`` and any state of ``b``.

    A conservative stand-in for the divergence between the two emission
    mixtures, which has no closed form.
    """
    return min(
        gaussian_sym_kl(a.means[i], a.covs[i], b.means[j], b.covs[j])
        for i in range(a.n_states)
        for j in range(b.n_states)
    )


def _left_right(n, mean_duration):
    if n == 1:
        return np.ones((1, 1))
    stay = float(np.clip(1.0 - n / mean_duration, 0.9, 0.99))
    A = np.eye(n) * stay
    for i in range(n - 1):
        A[i, i + 1] = 1.0 - stay
    A[-1, -1] = 1.0
    return A


def _quat(yaw, tilt):
    # gripper pointing down, rotated by yaw about z and a small tilt about x
    q_down = np.array([0.0, 1.0, 0.0, 0.0])
    qz = np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])
    qx = np.array([np.cos(tilt / 2), np.sin(tilt / 2), 0.0, 0.0])

    def mul(a, b):
        w1, x1, y1, z1 = a
        w2, x2, y2, z2 = b
        return np.array([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ])

    q = mul(mul(qz, qx), q_down)
    return q / np.linalg.norm(q)


def _draw_skills(rng, duration, n_range, jitter):
    home = np.array([0.55, 0.0, 0.35])
    pick = np.array([rng.uniform(0.55, 0.8), rng.uniform(-0.4, -0.15), 0.02])
    place = np.array([rng.uniform(0.55, 0.8), rng.uniform(0.15, 0.4), 0.02])
    lift_h = rng.uniform(0.12, 0.2)
    above_pick, above_place = pick + [0, 0, lift_h], place + [0, 0, lift_h]
    weight = rng.uniform(4.0, 8.0)
    arm = rng.uniform(0.03, 0.06)  # lever arm of the held object
    squeeze = rng.uniform(2.5, 4.0)
    yaw_pick, yaw_place = rng.uniform(-0.6, 0.6, size=2)

    # start/end pose and start/end wrench of every skill
    paths = [
        (home, above_pick, 0.0, yaw_pick, np.zeros(6), np.zeros(6)),
        (above_pick, pick, yaw_pick, yaw_pick,
         np.zeros(6), np.array([squeeze, 0, -0.4 * weight, 0, 0.4 * weight * arm, 0])),
        (pick, above_pick, yaw_pick, yaw_pick,
         np.array([0.3 * squeeze, 0, -weight, 0, weight * arm, 0]), np.array([0, 0, -weight, 0, weight * arm, 0])),
        (above_pick, above_place, yaw_pick, yaw_place,
         np.array([0, 1.5, -weight, -0.5 * weight * arm, weight * arm, 0]),
         np.array([0, -1.5, -weight, 0.5 * weight * arm, weight * arm, 0])),
        (above_place, place, yaw_place, yaw_place,
         np.array([0, 0, -weight, 0, weight * arm, 0]), np.array([0, 0, 3.0, 0, 0.2 * weight * arm, 0])),
    ]
    skills = []
    for k, (p0, p1, y0, y1, w0, w1) in enumerate(paths):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        nominal = rng.uniform(*duration)
        span = (max(int(duration[0]), int(round(nominal * (1 - jitter)))),
                min(int(duration[1]), int(round(nominal * (1 + jitter)))))
        frac = (np.arange(n) + 0.5) / n
        tilt = rng.uniform(-0.3, 0.3)
        means = np.empty((n, DIM))
        for i, f in enumerate(frac):
            means[i, POSITION] = (1 - f) * p0 + f * p1
            means[i, QUATERNION] = _quat((1 - f) * y0 + f * y1, tilt)
            means[i, WRENCH] = (1 - f) * w0 + f * w1
        means[:, WRENCH] += rng.normal(0, 0.5, size=(n, 6)) * NOMINAL_STD[WRENCH]
        std = NOMINAL_STD * rng.uniform(0.8, 1.25, size=(n, DIM))
        pi = np.zeros(n)
        pi[0] = 1.0
        gen = HmmModel(pi, _left_right(n, nominal), means, std ** 2)
        skills.append(SkillSpec(k + 1, SKILL_NAMES[k], gen, span))
    return tuple(skills)


def default_task_spec(seed: int = 0, separation: float = 50.0, duration=(80, 150), n_states=(2, 4),
                      jitter: float = 0.05) -> TaskSpec:
    """Five-skill pick-and-place task; redrawn until skills are ``separation`` apart.

    Each skill gets a nominal length drawn from ``duration``; individual runs
    vary by ``jitter`` (a fraction) around it.
    """
    if not 0 <= jitter < 1:
        raise ValueError("jitter must be in [0, 1)")
    rng = np.random.default_rng(seed)
    for _ in range(200):
        skills = _draw_skills(rng, duration, n_states, jitter)
        worst = min(
            skill_separation(a.generator, b.generator)
            for i, a in enumerate(skills)
            for b in skills[i + 1:]
        )
        if worst >= separation:
            return TaskSpec(skills, DIM, int(seed), float(separation))
    raise RuntimeError(f"could not draw skills with separation >= {separation}")


def sample_hmm(model: HmmModel, T: int, rng):
    """Draw ``T`` observations; returns ``(Y, states)``."""
    z = np.empty(T, dtype=np.int64)
    z[0] = rng.choice(model.n_states, p=model.pi)
    for t in range(1, T):
        z[t] = rng.choice(model.n_states, p=model.trans[z[t - 1]])
    noise = rng.standard_normal((T, model.dim))
    if model.cov_type == "diag":
        Y = model.means[z] + noise * np.sqrt(model.covs[z])
    else:
        chol = np.linalg.cholesky(model.covs)
        Y = model.means[z] + np.einsum("tij,tj->ti", chol[z], noise)
    return Y, z


def _skill_run(spec, skill, rng, T=None):
    if T is None:
        lo, hi = skill.duration
        T = int(rng.integers(lo, hi + 1))
    return sample_hmm(skill.generator, T, rng)[0]


def synthesize_nominal(spec: TaskSpec, seed: int) -> Trial:
    rng = np.random.default_rng(seed)
    parts, labels = [], []
    for skill in spec.skills:
        Y = _skill_run(spec, skill, rng)
        parts.append(Y)
        labels.append(np.full(len(Y), skill.id))
    return Trial(np.vstack(parts), np.concatenate(labels))


# ---------------------------------------------------------------- anomalies

DEFAULT_ANOMALY_PARAMS = {
    AnomalyType.OBJECT_DISPLACEMENT: {"magnitude": 8.0},
    AnomalyType.MISSING_OBJECT: {"tau": 2.0},
    AnomalyType.SLIPPERY_PICK: {"drop": 0.6, "noise": 2.0, "duration": 20},
    AnomalyType.GRIPPER_COLLISION: {"magnitude": 10.0, "duration": None},
    AnomalyType.ARM_COLLISION: {"magnitude": 10.0, "duration": None},
}


def _block_at(trial, t):
    for s, b, e in trial.blocks():
        if b <= t < e:
            return s, b, e
    raise ValueError(f"t={t} outside trial of length {trial.T}")


def inject_anomaly(trial: Trial, type, t: int, params=None, seed: int = 0) -> Trial:
    """Return a copy of ``trial`` perturbed from step ``t`` on.

    Perturbations never reach past the end of the skill block containing
    ``t``; earlier observations are left untouched.
    """
    type = AnomalyType(type)
    if not 0 <= t < trial.T:
        raise ValueError(f"anomaly time {t} outside trial of length {trial.T}")
    p = dict(DEFAULT_ANOMALY_PARAMS[type])
    p.update(params or {})
    rng = np.random.default_rng(seed)
    Y = trial.observations.copy()
    _, b, e = _block_at(trial, t)
    sd = NOMINAL_STD

    if type in (AnomalyType.GRIPPER_COLLISION, AnomalyType.ARM_COLLISION):
        n = p["duration"] or int(rng.integers(3, 9))
        end = min(t + n, e)
        amp = np.zeros(DIM)
        signs = rng.choice([-1.0, 1.0], size=DIM)
        if type is AnomalyType.GRIPPER_COLLISION:
            amp[FORCE] = 1.0
            amp[TORQUE] = 0.3
        else:
            amp[TORQUE] = 1.0
            amp[FORCE] = 0.3
            amp[POSITION] = 0.2
        amp *= p["magnitude"] * sd * signs
        profile = np.exp(-1.5 * np.arange(end - t) / max(end - t, 1))
        Y[t:end] += profile[:, None] * amp[None, :]
    elif type is AnomalyType.OBJECT_DISPLACEMENT:
        end = e
        ang = rng.uniform(0, 2 * np.pi)
        offset = np.zeros(DIM)
        offset[0:2] = p["magnitude"] * sd[0:2] * [np.cos(ang), np.sin(ang)]
        Y[t:end] += offset
    elif type is AnomalyType.MISSING_OBJECT:
        end = e
        held = trial.observations[b:e, WRENCH].mean(axis=0)
        ramp = 1.0 - np.exp(-(np.arange(end - t) + 1) / p["tau"])
        Y[t:end, WRENCH] -= ramp[:, None] * held[None, :]
    elif type is AnomalyType.SLIPPERY_PICK:
        end = min(t + int(p["duration"]), e)
        held = trial.observations[b:e, FORCE].mean(axis=0)
        Y[t:end, FORCE] -= p["drop"] * held
        extra = np.sqrt(max(p["noise"] ** 2 - 1.0, 0.0))
        Y[t:end, WRENCH] += rng.standard_normal((end - t, 6)) * sd[WRENCH] * extra
    else:  # pragma: no cover
        raise ValueError(type)

    anomalies = sorted(list(trial.anomalies) + [AnomalyWindow(t, end, type)], key=lambda w: w.t_start)
    return replace(trial, observations=Y, anomalies=anomalies)


# (trial index, skill id, anomaly type) for the 14-anomaly suite
ANOMALY_SUITE = (
    [(0, s, AnomalyType.GRIPPER_COLLISION) for s in range(1, 6)]
    + [(1, s, AnomalyType.ARM_COLLISION) for s in range(1, 6)]
    + [
        (2, 2, AnomalyType.OBJECT_DISPLACEMENT),
        (2, 4, AnomalyType.SLIPPERY_PICK),
        (3, 3, AnomalyType.MISSING_OBJECT),
        (4, 3, AnomalyType.SLIPPERY_PICK),
    ]
)


def anomaly_suite(spec: TaskSpec, seed: int, layout=ANOMALY_SUITE, params=None):
    """Five anomalous trials carrying the 14 anomalies of ``layout``.

    ``params`` maps anomaly types to overrides of ``DEFAULT_ANOMALY_PARAMS``.
    """
    params = {AnomalyType(k): v for k, v in (params or {}).items()}
    n_trials = max(i for i, _, _ in layout) + 1
    trials = []
    for i in range(n_trials):
        s = trial_seed(seed, "test-anomalous", i)
        trial = synthesize_nominal(spec, s)
        rng = np.random.default_rng(s + 1)
        for j, (ti, skill, kind) in enumerate(layout):
            if ti != i:
                continue
            _, b, e = next(blk for blk in trial.blocks() if blk[0] == skill)
            onset = b + int((e - b) * rng.uniform(0.25, 0.6))
            trial = inject_anomaly(trial, kind, onset, params.get(kind), seed=int(rng.integers(2**31)))
        trials.append(trial)
    return trials


def synthesize_recovery_scenario(spec: TaskSpec, seed: int, skill_id=None, retrace_noise: float = 0.5,
                                 retrace_speed: float = 2.0, collision_params=None) -> Trial:
    """Nominal run interrupted by a collision, a retrace toward the skill's
    start, and a fresh execution of the interrupted skill.

    The retrace replays the pre-collision prefix backwards, ``retrace_speed``
    times faster than it was recorded, with extra noise of
    ``retrace_noise`` nominal standard deviations.
    """
    if retrace_speed <= 0:
        raise ValueError("retrace_speed must be positive")
    rng = np.random.default_rng(seed)
    if skill_id is None:
        skill_id = spec.skill_ids[len(spec.skills) // 2]
    parts, labels, anomalies, recovery = [], [], [], []
    offset = 0
    for skill in spec.skills:
        if skill.id != skill_id:
            Y = _skill_run(spec, skill, rng)
            parts.append(Y)
            labels.append(np.full(len(Y), skill.id))
            offset += len(Y)
            continue
        first = _skill_run(spec, skill, rng)
        onset = int(len(first) * rng.uniform(0.4, 0.6))
        tmp = Trial(first, np.full(len(first), skill.id))
        hit = inject_anomaly(tmp, AnomalyType.GRIPPER_COLLISION, onset, collision_params,
                             seed=int(rng.integers(2**31)))
        window = hit.anomalies[0]
        interrupted = hit.observations[: window.t_end]
        prefix = first[:onset]
        n_back = max(1, int(round(len(prefix) / retrace_speed)))
        idx = np.linspace(len(prefix) - 1, 0, n_back).round().astype(int)
        retrace = prefix[idx] + rng.standard_normal((len(idx), DIM)) * NOMINAL_STD * retrace_noise
        resumed = _skill_run(spec, skill, rng)
        Y = np.vstack([interrupted, retrace, resumed])
        anomalies.append(AnomalyWindow(offset + window.t_start, offset + window.t_end, window.type))
        r0 = offset + len(interrupted)
        recovery.append(Window(r0, r0 + len(retrace)))
        parts.append(Y)
        labels.append(np.full(len(Y), skill.id))
        offset += len(Y)
    return Trial(np.vstack(parts), np.concatenate(labels), anomalies, recovery)


# ---------------------------------------------------------------- benchmarks


def well_separated_model(n_states=3, dim=2, separation=10.0, self_prob=0.95, seed=0) -> HmmModel:
    """Unit-variance states whose means are ``separation`` std apart pairwise."""
    rng = np.random.default_rng(seed)
    means = np.zeros((n_states, dim))
    for i in range(1, n_states):
        while True:
            cand = rng.normal(size=dim)
            cand = means[i - 1] + separation * cand / np.linalg.norm(cand)
            if all(np.linalg.norm(cand - means[j]) >= separation for j in range(i)):
                means[i] = cand
                break
    trans = np.full((n_states, n_states), (1 - self_prob) / max(n_states - 1, 1))
    np.fill_diagonal(trans, self_prob if n_states > 1 else 1.0)
    return HmmModel(np.full(n_states, 1.0 / n_states), trans, means, np.ones((n_states, dim)))


def transition_times(states):
    """Indices t where ``states[t] != states[t-1]``."""
    states = np.asarray(states)
    return (np.flatnonzero(states[1:] != states[:-1]) + 1).tolist()
