import json

import numpy as np
import pytest

from hmmgrad import persistence as io
from hmmgrad import synthesis as syn
from hmmgrad.detection import Event, EventTimeline, GradientCalibration, calibrate_skill
from hmmgrad.hmm import HmmModel, ModelError, loglik_series
from oracles import random_model


@pytest.fixture
def anomalous_trial(task_spec):
    tr = syn.synthesize_nominal(task_spec, 5)
    tr = syn.inject_anomaly(tr, "arm_collision", 30, seed=1)
    return syn.inject_anomaly(tr, "slippery_pick", tr.blocks()[2][1] + 10, seed=2)


# ------------------------------------------------------------ trials


def test_trial_roundtrip_bit_exact(tmp_path, anomalous_trial):
    p = tmp_path / "t.csv"
    io.save_trial(p, anomalous_trial, "abc")
    back = io.load_trial(p)
    assert np.array_equal(back.observations, anomalous_trial.observations)
    assert np.array_equal(back.skill_labels, anomalous_trial.skill_labels)
    assert back.anomalies == anomalous_trial.anomalies
    assert io.trial_spec_hash(p) == "abc"


def test_trial_roundtrip_without_sidecar(tmp_path, task_spec):
    tr = syn.synthesize_recovery_scenario(task_spec, 2)
    p = tmp_path / "r.csv"
    io.save_trial(p, tr)
    (tmp_path / "r.csv.json").unlink()
    back = io.load_trial(p)
    assert back.recovery_windows == tr.recovery_windows
    assert [(a.t_start, a.t_end, a.type) for a in back.anomalies] == \
        [(a.t_start, a.t_end, a.type) for a in tr.anomalies]


def test_wrong_dimension_names_line_one(tmp_path):
    tr = syn.Trial(np.zeros((4, 12)), np.ones(4, dtype=int))
    p = tmp_path / "x.csv"
    io.save_trial(p, tr)
    with pytest.raises(io.FormatError, match=r"x\.csv:1: dimension mismatch"):
        io.load_trial(p, dim=13)
    assert io.load_trial(p, dim=None).observations.shape == (4, 12)


def test_ragged_row_names_its_line(tmp_path, anomalous_trial):
    p = tmp_path / "t.csv"
    io.save_trial(p, anomalous_trial)
    lines = p.read_text().splitlines()
    lines[5] = ",".join(lines[5].split(",")[:-2])
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(io.FormatError, match=r"t\.csv:6:"):
        io.load_trial(p)


def test_nonfinite_and_bad_t_rejected(tmp_path):
    tr = syn.Trial(np.zeros((3, 2)), np.ones(3, dtype=int))
    p = tmp_path / "n.csv"
    io.save_trial(p, tr)
    text = p.read_text()
    p.write_text(text.replace("\n1,0,0,", "\n1,nan,0,"))
    with pytest.raises(io.FormatError, match=":3: non-finite"):
        io.load_trial(p, dim=2)
    p.write_text(text.replace("\n2,0,0,", "\n7,0,0,"))
    with pytest.raises(io.FormatError, match=":4: expected t=2"):
        io.load_trial(p, dim=2)


# ------------------------------------------------------------ models


def test_model_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    Y = rng.normal(size=(25, 2))
    for cov in ("diag", "full"):
        m = random_model(rng, 3, 2, cov)
        p = tmp_path / f"{cov}.json"
        io.save_model(p, m)
        back = io.load_model(p)
        for a, b in [(m.pi, back.pi), (m.trans, back.trans), (m.means, back.means), (m.covs, back.covs)]:
            assert np.max(np.abs(a - b)) <= 1e-15
        assert back.cov_type == cov
        assert abs(loglik_series(m, Y)[-1] - loglik_series(back, Y)[-1]) <= 1e-12


def test_non_stochastic_row_rejected(tmp_path):
    m = HmmModel([0.5, 0.5], [[0.9, 0.1], [0.5, 0.5]], [[0.0], [1.0]], [[1.0], [1.0]])
    doc = io.model_to_dict(m)
    doc["trans"][1] = [0.5, 0.6]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ModelError, match="bad.json"):
        io.load_model(p)


def test_unsupported_model_version(tmp_path):
    m = HmmModel([1.0], [[1.0]], [[0.0]], [[1.0]])
    doc = io.model_to_dict(m)
    doc["version"] = "hmm-model/2"
    p = tmp_path / "v2.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(io.FormatError, match="unsupported version 'hmm-model/2'"):
        io.load_model(p)


def test_model_missing_field_and_bad_json(tmp_path):
    doc = io.model_to_dict(HmmModel([1.0], [[1.0]], [[0.0]], [[1.0]]))
    del doc["pi"]
    p = tmp_path / "m.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(io.FormatError, match="missing field"):
        io.load_model(p)
    p.write_text("{not json")
    with pytest.raises(io.FormatError, match="invalid JSON"):
        io.load_model(p)


def test_model_file_is_deterministic(tmp_path):
    m = random_model(np.random.default_rng(2), 2, 3)
    io.save_model(tmp_path / "a.json", m)
    io.save_model(tmp_path / "b.json", io.load_model(tmp_path / "a.json"))
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


# ------------------------------------------------------------ calibrations and timelines


def test_gradient_calibration_roundtrip(tmp_path):
    cal = GradientCalibration.from_bounds(4, -12.5, -3.25)
    io.save_calibration(tmp_path / "g.json", cal)
    back = io.load_calibration(tmp_path / "g.json")
    assert back == cal and back.threshold == cal.threshold


def test_skill_calibration_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    m = HmmModel([1.0], [[1.0]], [[0.0]], [[1.0]])
    cal = calibrate_skill(m, [rng.normal(size=(n, 1)) for n in (20, 24, 30)], 2)
    io.save_skill_calibration(tmp_path / "s.json", cal)
    back = io.load_skill_calibration(tmp_path / "s.json")
    assert back.gradient == cal.gradient
    assert np.array_equal(back.magnitude.mu, cal.magnitude.mu)
    assert np.array_equal(back.magnitude.sigma, cal.magnitude.sigma)
    assert back.magnitude.k == cal.magnitude.k and back.dod_bound == cal.dod_bound


def test_timeline_roundtrip(tmp_path):
    tl = EventTimeline([Event(0, "skill-switch", 1, "gradient", -3.5),
                        Event(7, "anomaly-trigger", 1, "dod", 12.25),
                        Event(7, "anomaly-trigger", 1, "gradient", -40.0)])
    p = tmp_path / "tl.ndjson"
    io.save_timeline(p, tl)
    assert io.load_timeline(p).events == tl.events


def test_timeline_errors(tmp_path):
    p = tmp_path / "tl.ndjson"
    p.write_text('{"t": 3, "kind": "anomaly-trigger", "skill": 1, "detector": "dod", "value": 1}\n{"t": 4}\n')
    with pytest.raises(io.FormatError, match="tl.ndjson:2:"):
        io.load_timeline(p)
    p.write_text('{"t": 3, "kind": "k", "skill": 1, "detector": "d", "value": 1}\n'
                 '{"t": 1, "kind": "k", "skill": 1, "detector": "d", "value": 1}\n')
    with pytest.raises(io.FormatError, match="non-decreasing"):
        io.load_timeline(p)


# ------------------------------------------------------------ manifests


def test_manifest_roundtrip_and_missing_file(tmp_path, anomalous_trial):
    io.save_trial(tmp_path / "a.csv", anomalous_trial)
    m = io.DatasetManifest("demo", (io.ManifestEntry("a.csv", "test-anomalous"),
                                    io.ManifestEntry("gone.csv", "train")), "h")
    io.save_manifest(tmp_path / "manifest.json", m)
    assert io.load_manifest(tmp_path / "manifest.json", check_files=False) == m
    with pytest.raises(FileNotFoundError, match="gone.csv"):
        io.load_manifest(tmp_path / "manifest.json")


def test_manifest_trials_by_role(tmp_path, anomalous_trial):
    io.save_trial(tmp_path / "a.csv", anomalous_trial)
    io.save_manifest(tmp_path / "m.json", io.DatasetManifest("d", (io.ManifestEntry("a.csv", "test-anomalous"),)))
    (path, tr), = io.load_manifest_trials(tmp_path / "m.json", "test-anomalous")
    assert path == "a.csv" and np.array_equal(tr.observations, anomalous_trial.observations)
    assert io.load_manifest_trials(tmp_path / "m.json", "train") == []


def test_manifest_validation():
    with pytest.raises(io.FormatError):
        io.DatasetManifest("d", (io.ManifestEntry("a", "train"), io.ManifestEntry("a", "train")))
    with pytest.raises(io.FormatError, match="unknown manifest role"):
        io.DatasetManifest("d", (io.ManifestEntry("a", "holdout"),))


def test_json_rejects_nan(tmp_path):
    with pytest.raises(ValueError):
        io.write_json(tmp_path / "x.json", {"a": float("nan")})
