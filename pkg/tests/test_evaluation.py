import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmmgrad import evaluation as ev
from hmmgrad.detection import Event, group_triggers
from hmmgrad.synthesis import AnomalyType, AnomalyWindow, Trial, Window


def _trial(labels, anomalies=(), recovery=()):
    labels = np.asarray(labels)
    return Trial(np.zeros((len(labels), 1)), labels, list(anomalies), list(recovery))


def _trig(*times, detector="gradient"):
    return [Event(int(t), "anomaly-trigger", 1, detector, -1.0) for t in times]


# ------------------------------------------------------------ confusion


def test_perfect_prediction_is_identity():
    true = np.repeat([1, 2, 3, 4, 5], 30)
    cm = ev.confusion_matrix(true, true)
    assert np.array_equal(cm.rates, np.eye(5))
    assert cm.overall_accuracy == 1.0


def test_confusion_rows_are_per_true_label():
    true = np.array([1] * 10 + [2] * 10)
    pred = np.array([1] * 9 + [2] + [2] * 5 + [1] * 5)
    cm = ev.confusion_matrix(pred, true, labels=[1, 2])
    assert np.allclose(cm.rates, [[0.9, 0.1], [0.5, 0.5]])
    assert cm.diagonal() == pytest.approx({1: 0.9, 2: 0.5})
    assert cm.overall_accuracy == pytest.approx(14 / 20)
    assert np.allclose(cm.rates.sum(axis=1), 1.0)


def test_confusion_diagonals_from_counts():
    # per-class hit rates of a reference table, reproduced from counts
    diag = [0.9895, 0.9888, 0.9982, 0.9811, 0.9918]
    n = 10000
    true, pred = [], []
    for i, d in enumerate(diag):
        hits = int(round(d * n))
        true += [i + 1] * n
        pred += [i + 1] * hits + [(i + 1) % 5 + 1] * (n - hits)
    cm = ev.confusion_matrix(np.array(pred), np.array(true), [1, 2, 3, 4, 5])
    assert np.allclose(list(cm.diagonal().values()), diag, atol=1e-12)
    assert cm.overall_accuracy == pytest.approx(np.mean(diag))


def test_random_predictions_near_chance():
    rng = np.random.default_rng(0)
    true = rng.integers(1, 6, size=10000)
    pred = rng.integers(1, 6, size=10000)
    acc = ev.confusion_matrix(pred, true, [1, 2, 3, 4, 5]).overall_accuracy
    assert abs(acc - 0.2) <= 0.05


def test_confusion_length_mismatch():
    with pytest.raises(ValueError):
        ev.confusion_matrix([1, 2], [1, 2, 3])


# ------------------------------------------------------------ reaction


def test_reaction_exact_and_delayed():
    true = np.repeat([1, 2], 100)
    assert ev.reaction_percentage(true, true) == {1: 0.0, 2: 0.0}
    pred = true.copy()
    pred[100:105] = 1
    assert ev.reaction_percentage(pred, true)[2] == pytest.approx(5.0)


def test_reaction_early_is_negative():
    true = np.repeat([1, 2], 100)
    pred = true.copy()
    pred[96:100] = 2
    assert ev.reaction_percentage(pred, true)[2] == pytest.approx(-4.0)


def test_stray_early_prediction_affects_first_not_first_k():
    true = np.repeat([1, 2], 100)
    pred = true.copy()
    pred[90] = 2  # isolated guess ten steps early
    pred[100:103] = 1
    first = ev.reaction_percentage(pred, true, "first")[2]
    firstk = ev.reaction_percentage(pred, true, "first_k", k=10)[2]
    assert first == pytest.approx(-10.0)
    assert firstk == pytest.approx(3.0)


def test_reaction_lookback_limits_early_search():
    true = np.repeat([1, 2], 100)
    pred = true.copy()
    pred[50] = 2
    assert ev.reaction_percentage(pred, true, lookback=20)[2] == 0.0
    assert ev.reaction_percentage(pred, true, lookback=60)[2] == pytest.approx(-50.0)


def test_reaction_never_predicted_is_none():
    true = np.repeat([1, 2], 50)
    pred = np.ones(100, dtype=int)
    assert ev.reaction_percentage(pred, true)[2] is None
    stats = ev.reaction_stats([(pred, true)])
    assert stats.first[2] is None
    assert stats.averages()["first_abs"] == 0.0


def test_reaction_unknown_criterion():
    with pytest.raises(ValueError):
        ev.reaction_percentage([1], [1], "median")


def test_reaction_stats_pool_blocks():
    true = np.repeat([1, 2], 100)
    a, b = true.copy(), true.copy()
    a[100:102] = 1  # +2%
    b[100:106] = 1  # +6%
    stats = ev.reaction_stats([(a, true), (b, true)], k=1)
    assert stats.first[2] == pytest.approx(4.0)
    avg = stats.averages()
    assert avg["first_signed"] == pytest.approx(2.0)
    assert avg["overall_abs"] == pytest.approx(np.mean([avg["first_abs"], avg["first_k_abs"]]))


# ------------------------------------------------------------ anomaly matching


@pytest.fixture
def two_anomaly_trial():
    labels = np.repeat([1, 2], 50)
    return _trial(labels, [AnomalyWindow(20, 25, AnomalyType.ARM_COLLISION),
                           AnomalyWindow(70, 74, AnomalyType.GRIPPER_COLLISION)])


def test_no_triggers_all_missed(two_anomaly_trial):
    c = ev.match_anomalies([], two_anomaly_trial)
    assert (c.tp, c.fp, c.fn) == (0, 0, 2)


def test_trigger_after_onset_is_detection(two_anomaly_trial):
    c = ev.match_anomalies(_trig(22, 72), two_anomaly_trial)
    assert (c.tp, c.fp, c.fn) == (2, 0, 0)


def test_trigger_before_onset_is_false_positive(two_anomaly_trial):
    c = ev.match_anomalies(_trig(5, 22), two_anomaly_trial)
    assert (c.tp, c.fp, c.fn) == (1, 1, 1)


def test_late_detection_within_block_counts(two_anomaly_trial):
    # the onset is the reference; any trigger until the block end detects it
    c = ev.match_anomalies(_trig(45), two_anomaly_trial)
    assert (c.tp, c.fn) == (1, 1)


def test_anomaly_free_block_counts_every_group():
    tr = _trial(np.repeat([1, 2], 50))
    c = ev.match_anomalies(_trig(3, 4, 5, 30, 60), tr, grouping_gap=5)
    assert (c.tp, c.fp, c.fn) == (0, 3, 0)


def test_detector_filter_and_dict_events(two_anomaly_trial):
    evs = [e.as_dict() for e in _trig(22, detector="dod") + _trig(72)]
    assert ev.match_anomalies(evs, two_anomaly_trial, detector="dod").tp == 1
    assert ev.match_anomalies(evs, two_anomaly_trial, detector="magnitude").fn == 2


def test_micro_metrics_reference_cases():
    m = ev.micro_metrics(ev.AnomalyCounts(14, 0, 0))
    assert (m["precision"], m["recall"], m["f_score"]) == (1.0, 1.0, 1.0)
    m = ev.micro_metrics(ev.AnomalyCounts(14, 6, 0))
    assert m["precision"] == pytest.approx(0.70)
    assert m["f_score"] == pytest.approx(0.8235, abs=5e-5)
    m = ev.micro_metrics(ev.AnomalyCounts(13, 16, 1))
    assert m["precision"] == pytest.approx(0.4483, abs=5e-5)
    assert m["recall"] == pytest.approx(0.9286, abs=5e-5)
    assert m["f_score"] == pytest.approx(0.6047, abs=5e-5)


def test_micro_metrics_degenerate():
    assert ev.micro_metrics(ev.AnomalyCounts(0, 0, 0))["f_score"] == 1.0
    m = ev.micro_metrics(ev.AnomalyCounts(0, 0, 3))
    assert m["precision"] == 0.0 and m["f_score"] == 0.0


def test_micro_pooling_is_not_macro():
    a = ev.AnomalyCounts(1, 0, 0, [(1, 0, 0)])
    b = ev.AnomalyCounts(1, 3, 0, [(1, 3, 0)])
    pooled = ev.micro_metrics(a + b)
    assert pooled["precision"] == pytest.approx(2 / 5)
    macro = np.mean([ev.micro_metrics(a)["precision"], ev.micro_metrics(b)["precision"]])
    assert pooled["precision"] != pytest.approx(macro)
    assert (a + b).per_trial == [(1, 0, 0), (1, 3, 0)]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 300), max_size=40), st.integers(0, 10), st.integers(0, 10))
def test_grouping_monotone_in_gap(times, g1, g2):
    lo, hi = sorted((g1, g2))
    assert len(group_triggers(times, hi)) <= len(group_triggers(times, lo))
    assert len(group_triggers(times, 0)) == len(set(times))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 99), max_size=30), st.integers(0, 8))
def test_match_counts_conserve_anomalies(times, gap):
    tr = _trial(np.repeat([1, 2], 50), [AnomalyWindow(20, 25, AnomalyType.ARM_COLLISION),
                                       AnomalyWindow(70, 74, AnomalyType.SLIPPERY_PICK)])
    c = ev.match_anomalies(_trig(*times), tr, gap)
    assert c.tp + c.fn == 2
    assert c.tp + c.fp <= len(group_triggers(times, gap))


# ------------------------------------------------------------ post-recovery


def test_post_recovery_requires_window():
    with pytest.raises(ValueError):
        ev.post_recovery_fp([], _trial(np.ones(10, dtype=int)))


def test_post_recovery_counts_after_window_only():
    labels = np.repeat([3, 4], [60, 40])
    tr = _trial(labels, [AnomalyWindow(10, 15, AnomalyType.ARM_COLLISION)], [Window(15, 30)])
    assert ev.post_recovery_fp([], tr) == 0
    assert ev.post_recovery_fp(_trig(20, 25), tr) == 0  # during the recovery
    assert ev.post_recovery_fp(_trig(35, 36, 50), tr) == 2
    assert ev.post_recovery_fp(_trig(70), tr) == 0  # next skill
