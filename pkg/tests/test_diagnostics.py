import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmmgrad import diagnostics as dg
from hmmgrad.hmm import HmmModel, viterbi
from hmmgrad.synthesis import sample_hmm, transition_times, well_separated_model
from oracles import brute_viterbi, random_model


def sticky2(p=0.9, means=(0.0, 2.0)):
    return HmmModel([0.5, 0.5], [[p, 1 - p], [1 - p, p]], [[means[0]], [means[1]]], [[1.0], [1.0]])


# ------------------------------------------------------------ incremental viterbi


def test_single_state_triangle_all_zero():
    m = HmmModel([1.0], [[1.0]], [[0.0]], [[1.0]])
    tr = dg.incremental_viterbi(m, np.arange(6.0)[:, None])
    assert tr.T == 6
    for t in range(6):
        assert np.all(tr.path(t) == 0)
        assert np.all(tr.triangle[t, t + 1 :] == -1)
    assert dg.detect_sequence_breaks(tr).breaks == []


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 7))
def test_prefix_paths_match_brute_force(seed, n, T):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n, 1)
    Y = rng.normal(scale=1.5, size=(T, 1))
    tr = dg.incremental_viterbi(m, Y)
    for t in range(T):
        path, _ = brute_viterbi(m, Y[: t + 1])
        assert np.array_equal(tr.path(t), path)


def test_prefix_paths_match_rerun_viterbi():
    rng = np.random.default_rng(4)
    m = random_model(rng, 3, 2)
    Y = rng.normal(size=(30, 2))
    tr = dg.incremental_viterbi(m, Y)
    for t in range(30):
        assert np.array_equal(tr.path(t), viterbi(m, Y[: t + 1]).path)


def test_hand_built_break():
    paths = [[0], [0, 0], [0, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1, 1]]
    rep = dg.detect_sequence_breaks(dg.IncrementalViterbiTrace.from_paths(paths))
    assert [(b.t, b.start, b.length) for b in rep.breaks] == [(3, 0, 3)]
    assert rep.max_break_len == 3
    assert rep.transitions == []


def test_sticky_model_rewrites_history():
    # three ambiguous points, then clear evidence for state 1: relabelling the
    # prefix is cheaper than paying for a transition
    Y = np.array([0.9, 0.9, 0.9, 2.5, 2.5])[:, None]
    tr = dg.incremental_viterbi(sticky2(), Y)
    assert list(tr.path(2)) == [0, 0, 0]
    assert list(tr.path(3)) == [1, 1, 1, 1]
    rep = dg.detect_sequence_breaks(tr)
    assert [(b.t, b.start, b.length) for b in rep.breaks] == [(3, 0, 3)]


def test_from_paths_validates_lengths():
    with pytest.raises(ValueError):
        dg.IncrementalViterbiTrace.from_paths([[0], [0]])
    with pytest.raises(ValueError):
        dg.IncrementalViterbiTrace(np.zeros((2, 3), dtype=int))


def test_well_separated_breaks_stay_near_transitions():
    m = well_separated_model(3, 2, 12.0, 0.95, seed=1)
    Y, z = sample_hmm(m, 120, np.random.default_rng(1))
    rep = dg.detect_sequence_breaks(dg.incremental_viterbi(m, Y), transition_times(z))
    assert rep.near_transitions(tol=1)
    assert rep.max_break_len <= 2


def test_near_transitions_flags_far_break():
    rep = dg.SequenceBreakReport([dg.SequenceBreak(10, 2, 2)], [9], 2)
    assert not rep.near_transitions(1)
    assert dg.SequenceBreakReport([dg.SequenceBreak(10, 8, 2)], [9], 2).near_transitions(1)


# ------------------------------------------------------------ dominance


@pytest.mark.parametrize("A, ok", [
    ([[0.2, 0.8], [0.3, 0.7]], False),
    (np.eye(3), True),
    (np.full((3, 3), 1 / 3), True),
    ([[0.6, 0.4], [0.4, 0.6]], True),
])
def test_self_transition_dominance(A, ok):
    A = np.asarray(A, float)
    n = len(A)
    m = HmmModel(np.full(n, 1 / n), A, np.zeros((n, 1)), np.ones((n, 1)))
    assert dg.check_self_transition_dominance(m) is ok


# ------------------------------------------------------------ emission curves and residuals


def test_symmetric_emission_curves_intersect_at_midpoint():
    m = sticky2(means=(-1.0, 1.0))
    Y = np.linspace(-3, 3, 7)[:, None]
    c = dg.emission_curves(m, Y)
    assert c.shape == (2, 7)
    assert c[0, 3] == pytest.approx(c[1, 3])
    assert np.all(c[0, :3] > c[1, :3]) and np.all(c[0, 4:] < c[1, 4:])
    assert np.allclose(c[0], c[1, ::-1])


def test_single_state_residuals_zero():
    m = HmmModel([1.0], [[1.0]], [[0.3]], [[2.0]])
    Y = np.random.default_rng(0).normal(size=(40, 1))
    rep = dg.corollary_residuals(m, Y)
    assert np.max(rep.residuals) < 1e-9
    assert rep.stable_fraction_within == 1.0


def test_well_separated_residuals_small_on_stable_steps():
    m = well_separated_model(3, 2, 12.0, 0.95, seed=3)
    Y, z = sample_hmm(m, 200, np.random.default_rng(3))
    rep = dg.corollary_residuals(m, Y, transition_times(z))
    assert rep.stable_fraction_within >= 0.95
    assert dg.gradient_emission_correlation(m, Y, transition_times(z)) >= 0.9


def test_overlapping_emissions_give_large_residuals():
    # identical states: the belief never concentrates, so the MAP-path term
    # misses log 2 style mass every step
    m = HmmModel([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]], [[0.0], [0.0]], [[1.0], [1.0]])
    Y = np.random.default_rng(1).normal(size=(30, 1))
    rep = dg.corollary_residuals(m, Y)
    assert np.allclose(rep.residuals, np.log(2), atol=1e-9)
    assert rep.fraction_within == 0.0


def test_residuals_need_two_steps():
    with pytest.raises(ValueError):
        dg.corollary_residuals(sticky2(), [[0.0]])


def test_stable_mask_margin():
    mask = dg.stable_mask(10, [5], margin=2)
    assert mask.tolist() == [True, True, True, True, False, False, False, True, True, True]
    assert dg.stable_mask(4, []).all()


# ------------------------------------------------------------ exports


def test_triangle_csv_columns(tmp_path):
    tr = dg.incremental_viterbi(sticky2(), np.array([0.9, 0.9, 0.9, 2.5, 2.5])[:, None])
    p = tmp_path / "tri.csv"
    dg.write_triangle_csv(p, tr)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["t", "z0", "z1", "z2", "z3", "z4"]
    assert len(rows) == 6 and all(len(r) == 6 for r in rows)
    assert rows[1] == ["0", "0", "-1", "-1", "-1", "-1"]


def test_series_csv_roundtrip(tmp_path):
    x = np.random.default_rng(0).normal(size=5)
    p = tmp_path / "s.csv"
    dg.write_series_csv(p, {"a": x, "b": np.arange(5)})
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["t", "a", "b"]
    assert np.array_equal([float(r[1]) for r in rows[1:]], x)
    assert [r[2] for r in rows[1:]] == ["0", "1", "2", "3", "4"]
    with pytest.raises(ValueError):
        dg.write_series_csv(p, {"a": [1.0], "b": [1.0, 2.0]})
