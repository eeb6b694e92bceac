"""Scoring of skill identification and anomaly detection runs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detection import EventTimeline, group_triggers
from .synthesis import Trial, label_blocks

DEFAULT_GROUPING_GAP = 5
DEFAULT_LOOKBACK = 20
FIRST_K = 10


@dataclass(frozen=True)
class ConfusionMatrix:
    labels: tuple
    counts: np.ndarray  # counts[i, j]: true labels[i] predicted as labels[j]

    @property
    def rates(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = self.counts / rows
        return np.nan_to_num(out)

    @property
    def overall_accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else float("nan")

    def diagonal(self):
        return dict(zip(self.labels, np.diag(self.rates).tolist()))


def confusion_matrix(pred_labels, true_labels, labels=None) -> ConfusionMatrix:
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError(f"prediction length {pred.shape} != ground truth length {true.shape}")
    if labels is None:
        labels = sorted(set(true.tolist()) | set(pred.tolist()))
    index = {s: i for i, s in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(true.tolist(), pred.tolist()):
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(tuple(labels), counts)


@dataclass(frozen=True)
class ReactionStats:
    """Reaction as a percentage of each skill's true duration (sign kept)."""

    first: dict
    first_k: dict
    k: int = FIRST_K

    @staticmethod
    def _avg(d, absolute):
        vals = [abs(v) if absolute else v for v in d.values() if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def averages(self):
        first_abs = self._avg(self.first, True)
        firstk_abs = self._avg(self.first_k, True)
        return {
            "first_signed": self._avg(self.first, False),
            "first_k_signed": self._avg(self.first_k, False),
            "first_abs": first_abs,
            "first_k_abs": firstk_abs,
            "overall_abs": float(np.mean([first_abs, firstk_abs])),
        }


def _predicted_start(pred, skill, lo, hi, run):
    """First index in [lo, hi) that starts ``run`` consecutive predictions of ``skill``."""
    T = len(pred)
    hits = pred == skill
    for i in range(lo, hi):
        if i + run <= T and hits[i : i + run].all():
            return i
    return None


def block_reactions(pred_labels, true_labels, run=1, lookback=DEFAULT_LOOKBACK):
    """``[(skill, reaction%)]`` per true block; reaction is None when never predicted."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError("prediction and ground truth lengths differ")
    out = []
    for skill, b, e in label_blocks(true):
        start = _predicted_start(pred, skill, max(0, b - lookback), e, run)
        out.append((skill, None if start is None else 100.0 * (start - b) / (e - b)))
    return out


def _merge(block_values):
    per = {}
    for skill, v in block_values:
        per.setdefault(skill, []).append(v)
    return {s: (float(np.mean([x for x in v if x is not None])) if any(x is not None for x in v) else None)
            for s, v in per.items()}


def reaction_percentage(pred_labels, true_labels, criterion="first", k=FIRST_K, lookback=DEFAULT_LOOKBACK) -> dict:
    """Per-skill reaction percentage for one criterion (``first`` or ``first_k``).

    Repeated blocks of a skill are averaged; a skill that is never predicted
    maps to ``None``.
    """
    if criterion not in ("first", "first_k"):
        raise ValueError(f"unknown criterion {criterion!r}")
    run = 1 if criterion == "first" else k
    return _merge(block_reactions(pred_labels, true_labels, run, lookback))


def reaction_stats(pairs, k=FIRST_K, lookback=DEFAULT_LOOKBACK) -> ReactionStats:
    """Reaction statistics pooled over ``(pred, true)`` label pairs from several trials."""
    first, firstk = [], []
    for pred, true in pairs:
        first += block_reactions(pred, true, 1, lookback)
        firstk += block_reactions(pred, true, k, lookback)
    return ReactionStats(_merge(first), _merge(firstk), k)


# ---------------------------------------------------------------- anomalies


@dataclass
class AnomalyCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    per_trial: list = field(default_factory=list)

    def __add__(self, other):
        return AnomalyCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                             self.per_trial + other.per_trial)


def match_anomalies(timeline, trial: Trial, grouping_gap=DEFAULT_GROUPING_GAP, detector=None) -> AnomalyCounts:
    """Score grouped triggers against the trial's anomaly windows.

    Within each true skill block, triggers before the first anomaly onset are
    false positives; the first trigger after an onset (and before the next
    onset or the block end) detects that anomaly, later ones are ignored.
    Blocks without anomalies count every trigger group as a false positive.
    """
    times = _trigger_times(timeline, detector)
    groups = group_triggers(times, grouping_gap)
    tp = fp = fn = 0
    for skill, b, e in trial.blocks():
        onsets = sorted(a.t_start for a in trial.anomalies if b <= a.t_start < e)
        inside = [t for t in groups if b <= t < e]
        if not onsets:
            fp += len(inside)
            continue
        fp += sum(1 for t in inside if t < onsets[0])
        for i, on in enumerate(onsets):
            stop = onsets[i + 1] if i + 1 < len(onsets) else e
            if any(on <= t < stop for t in inside):
                tp += 1
            else:
                fn += 1
    # anomalies whose onset is not inside any block cannot exist, so tp + fn
    # equals the number of annotated anomalies
    return AnomalyCounts(tp, fp, fn, [(tp, fp, fn)])


def _trigger_times(timeline, detector):
    if isinstance(timeline, EventTimeline):
        return [e.t for e in timeline.triggers(detector)]
    return [e.t if hasattr(e, "t") else e["t"] for e in timeline
            if (e.kind if hasattr(e, "kind") else e["kind"]) == "anomaly-trigger"
            and (detector is None or (e.detector if hasattr(e, "detector") else e["detector"]) == detector)]


def micro_metrics(counts: AnomalyCounts) -> dict:
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp + fp == 0:
        precision = 1.0 if fn == 0 else 0.0
    else:
        precision = tp / (tp + fp)
    recall = tp / (tp + fn) if tp + fn else 1.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f_score": f}


def post_recovery_fp(timeline, trial: Trial, grouping_gap=DEFAULT_GROUPING_GAP, detector=None) -> int:
    """Grouped triggers between the end of each recovery and the next skill's start."""
    if not trial.recovery_windows:
        raise ValueError("trial has no recovery window")
    times = _trigger_times(timeline, detector)
    labels = trial.skill_labels
    total = 0
    for w in trial.recovery_windows:
        start = w.t_end
        if start >= trial.T:
            continue
        later = np.flatnonzero(labels[start:] != labels[start])
        stop = start + int(later[0]) if later.size else trial.T
        total += len(group_triggers([t for t in times if start <= t < stop], grouping_gap))
    return total
