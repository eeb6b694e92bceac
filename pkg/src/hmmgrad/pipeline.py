"""End-to-end protocol: synthesize, train per-skill models, calibrate, evaluate."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import detection as det
from . import evaluation as ev
from . import synthesis as syn
from .hmm import TrainConfig, baum_welch, score_num_states, select_num_states

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    n_train: int = 5
    n_test: int = 5
    candidates: tuple = (2, 3, 4)
    cov_type: str = "diag"
    # keeps every transition reachable so a model can re-enter its first
    # state when a skill restarts inside a continuous stream
    trans_smoothing: float = 1e-3
    k: float = 3.0
    dod_safety: float = 1.5
    suppression: int = 3
    grouping_gap: int = ev.DEFAULT_GROUPING_GAP
    lookback: int = ev.DEFAULT_LOOKBACK
    first_k: int = ev.FIRST_K
    detectors: tuple = det.DETECTORS

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("n_train must be >= 1 and n_test >= 0")
        if not self.candidates or min(self.candidates) < 1:
            raise ValueError("state-count candidates must be positive")
        if self.k < 0 or self.dod_safety <= 0:
            raise ValueError("k must be >= 0 and dod_safety > 0")
        if self.suppression < 0 or self.grouping_gap < 0 or self.lookback < 0 or self.first_k < 1:
            raise ValueError("suppression, grouping gap and lookback must be >= 0, first_k >= 1")
        bad = set(self.detectors) - set(det.DETECTORS)
        if bad:
            raise ValueError(f"unknown detector(s) {sorted(bad)}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(cov_type=self.cov_type, trans_smoothing=self.trans_smoothing, seed=self.seed)


SCENARIOS = ("nominal-5x5", "anomaly-suite", "anomaly-suite-14", "recovery", "full")


def build_dataset(spec: syn.TaskSpec, scenario: str, seed: int, n_train: int = 5, n_test: int = 5) -> dict:
    """Trials per role for a named scenario."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    roles = {}
    if scenario in ("nominal-5x5", "full"):
        roles["train"] = [syn.synthesize_nominal(spec, syn.trial_seed(seed, "train", i)) for i in range(n_train)]
        roles["test-nominal"] = [syn.synthesize_nominal(spec, syn.trial_seed(seed, "test-nominal", i))
                                 for i in range(n_test)]
    if scenario in ("anomaly-suite", "anomaly-suite-14", "full"):
        roles["test-anomalous"] = syn.anomaly_suite(spec, seed)
    if scenario in ("recovery", "full"):
        roles["recovery"] = [syn.synthesize_recovery_scenario(spec, syn.trial_seed(seed, "recovery", 0))]
    return roles


def skill_segments(trials, skill):
    return [seg for tr in trials for seg in tr.segment(skill)]


@dataclass
class TrainedSkills:
    models: dict
    n_states: dict
    sweep: dict  # skill -> {N: held-out score}
    final_loglik: dict
    iterations: dict = field(default_factory=dict)


def train_skill_models(train_trials, config: PipelineConfig = PipelineConfig(), skill_ids=None) -> TrainedSkills:
    if not train_trials:
        raise ValueError("no training trials")
    present = sorted({int(s) for tr in train_trials for s in np.unique(tr.skill_labels)})
    ids = present if skill_ids is None else list(skill_ids)
    missing = [s for s in ids if s not in present]
    if missing:
        raise ValueError(f"training data has no segments for skill(s) {missing}")
    tc = config.train_config()
    out = TrainedSkills({}, {}, {}, {})
    for s in ids:
        segs = skill_segments(train_trials, s)
        cands = sorted(set(config.candidates))
        scores = score_num_states(segs, cands, tc) if len(cands) > 1 else {}
        n = select_num_states(segs, cands, tc, scores=scores or None)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model, history = baum_welch(segs, n, tc)
        out.models[s], out.n_states[s], out.sweep[s] = model, n, scores
        out.final_loglik[s], out.iterations[s] = float(history[-1]), len(history)
        logger.info("skill %s: N=%d loglik=%.3f", s, n, history[-1])
    return out


def calibrate_models(models, train_trials, config: PipelineConfig = PipelineConfig()) -> dict:
    return {
        s: det.calibrate_skill(m, skill_segments(train_trials, s), s, config.k, config.dod_safety)
        for s, m in models.items()
    }


def detector_config(config: PipelineConfig, detectors=None) -> det.DetectorConfig:
    return det.DetectorConfig(tuple(detectors or config.detectors), config.suppression)


def identification_pairs(models, trials):
    return [(det.gradient_predictions(models, tr.observations), tr.skill_labels) for tr in trials]


def identification_report(pairs, labels, config: PipelineConfig = PipelineConfig()) -> dict:
    """Confusion matrix and reaction statistics from ``(pred, true)`` label pairs."""
    labels = sorted(labels)
    cm = ev.confusion_matrix(np.concatenate([p for p, _ in pairs]), np.concatenate([t for _, t in pairs]), labels)
    rs = ev.reaction_stats(pairs, config.first_k, config.lookback)
    return {
        "labels": list(labels),
        "confusion": cm.rates.tolist(),
        "confusion_counts": cm.counts.tolist(),
        "overall_accuracy": cm.overall_accuracy,
        "reaction": {
            "first": {str(k): v for k, v in sorted(rs.first.items())},
            "first10": {str(k): v for k, v in sorted(rs.first_k.items())},
            "averages": rs.averages(),
        },
    }


def run_timelines(models, calibrations, trials, config: PipelineConfig = PipelineConfig(), detectors=None):
    dc = detector_config(config, detectors)
    return [det.run_detector(models, calibrations, tr.observations, dc) for tr in trials]


def anomaly_report(timelines, trials, detectors, grouping_gap) -> dict:
    per = {}
    for d in detectors:
        counts = ev.AnomalyCounts()
        for tl, tr in zip(timelines, trials):
            counts = counts + ev.match_anomalies(tl, tr, grouping_gap, detector=d)
        m = ev.micro_metrics(counts)
        per[d] = {"tp": counts.tp, "fp": counts.fp, "fn": counts.fn, "precision": m["precision"],
                  "recall": m["recall"], "f": m["f_score"]}
    return per


def recovery_report(timelines, trials, detectors, grouping_gap) -> dict:
    return {d: int(sum(ev.post_recovery_fp(tl, tr, grouping_gap, detector=d) for tl, tr in zip(timelines, trials)))
            for d in detectors}


def build_report(config: PipelineConfig, labels=None, pairs=(), scored=(), recovery=()) -> dict:
    """Report from precomputed artifacts.

    ``pairs`` are identification ``(pred, true)`` label pairs, ``scored`` and
    ``recovery`` are ``(trial, timeline)`` pairs.
    """
    for tr, tl in list(scored) + list(recovery):
        if tl.labels is not None and len(tl.labels) != tr.T:
            raise ValueError(f"timeline covers {len(tl.labels)} steps but the trial has {tr.T}")
        if tl.events and tl.events[-1].t >= tr.T:
            raise ValueError(f"timeline event at t={tl.events[-1].t} beyond trial length {tr.T}")
    report = {"config": {"detectors": list(config.detectors), "grouping_gap": config.grouping_gap,
                         "suppression": config.suppression, "k": config.k, "lookback": config.lookback,
                         "first_k": config.first_k}}
    if pairs:
        report.update(identification_report(list(pairs), labels, config))
    if scored:
        trials, tls = zip(*scored)
        report["anomaly"] = {"per_detector": anomaly_report(tls, trials, config.detectors, config.grouping_gap)}
    if recovery:
        trials, tls = zip(*recovery)
        report["post_recovery_fp"] = recovery_report(tls, trials, config.detectors, config.grouping_gap)
    return report


def evaluate(models, calibrations, roles: dict, config: PipelineConfig = PipelineConfig()) -> tuple[dict, dict]:
    """Full report plus the timelines it was computed from (keyed by role)."""
    timelines = {}
    for role in ("test-nominal", "test-anomalous", "recovery"):
        if roles.get(role):
            timelines[role] = run_timelines(models, calibrations, roles[role], config)
    nominal = roles.get("test-nominal", [])
    scored = [(tr, tl) for role in ("test-nominal", "test-anomalous")
              for tr, tl in zip(roles.get(role, []), timelines.get(role, []))]
    rec = list(zip(roles.get("recovery", []), timelines.get("recovery", [])))
    report = build_report(config, sorted(models), identification_pairs(models, nominal), scored, rec)
    return report, timelines


def run_protocol(seed: int = 0, config: PipelineConfig | None = None, spec: syn.TaskSpec | None = None):
    """Synthesize the full dataset for ``seed``, train, calibrate and evaluate."""
    config = config or PipelineConfig(seed=seed)
    spec = spec or syn.default_task_spec(seed)
    roles = build_dataset(spec, "full", seed, config.n_train, config.n_test)
    trained = train_skill_models(roles["train"], config, spec.skill_ids)
    cals = calibrate_models(trained.models, roles["train"], config)
    report, timelines = evaluate(trained.models, cals, roles, config)
    return {"spec": spec, "roles": roles, "trained": trained, "calibrations": cals,
            "report": report, "timelines": timelines}
