"""Versioned text formats for trials, models, calibrations, timelines and manifests.

Everything is UTF-8 with LF line endings.  Floats are written with 17
significant digits (CSV) or Python's shortest round-trip repr (JSON), so a
save/load cycle reproduces every value bit for bit.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detection import Event, EventTimeline, GradientCalibration, MagnitudeThreshold, SkillCalibration
from .hmm import HmmModel, ModelError
from .synthesis import DIM, ROLES, AnomalyType, AnomalyWindow, Trial, Window

MODEL_VERSION = "hmm-model/1"
GRAD_CAL_VERSION = "grad-cal/1"
SKILL_CAL_VERSION = "skill-cal/1"
TRIAL_VERSION = "trial/1"
MANIFEST_VERSION = "manifest/1"


class FormatError(ValueError):
    """A file does not match its documented format."""


def _check_version(doc, expected, path):
    v = doc.get("version") if isinstance(doc, dict) else None
    if v != expected:
        raise FormatError(f"{path}: unsupported version {v!r} (expected {expected!r})")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def dumps_json(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, doc):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_json(doc))


# ---------------------------------------------------------------- models


def model_to_dict(model: HmmModel) -> dict:
    return {
        "version": MODEL_VERSION,
        "n_states": model.n_states,
        "dim": model.dim,
        "pi": model.pi.tolist(),
        "trans": model.trans.tolist(),
        "emissions": [
            {"mean": model.means[i].tolist(), "cov_type": model.cov_type, "cov": model.covs[i].tolist()}
            for i in range(model.n_states)
        ],
    }


def model_from_dict(doc, path="<model>") -> HmmModel:
    _check_version(doc, MODEL_VERSION, path)
    try:
        ems = doc["emissions"]
        cov_types = {e["cov_type"] for e in ems}
        if len(cov_types) != 1:
            raise FormatError(f"{path}: mixed covariance types {sorted(cov_types)}")
        model = HmmModel(
            np.array(doc["pi"], dtype=float),
            np.array(doc["trans"], dtype=float),
            np.array([e["mean"] for e in ems], dtype=float),
            np.array([e["cov"] for e in ems], dtype=float),
            cov_types.pop(),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from None
    except ModelError as exc:
        raise ModelError(f"{path}: {exc}") from None
    if model.n_states != doc.get("n_states") or model.dim != doc.get("dim"):
        raise FormatError(f"{path}: n_states/dim fields disagree with the parameters")
    return model


def save_model(path, model: HmmModel):
    write_json(path, model_to_dict(model))


def load_model(path) -> HmmModel:
    return model_from_dict(_read_json(path), path)


# ---------------------------------------------------------------- calibrations


def gradient_cal_to_dict(cal: GradientCalibration) -> dict:
    return {"version": GRAD_CAL_VERSION, "model_id": cal.model_id, "grad_min": cal.grad_min,
            "grad_max": cal.grad_max, "grad_range": cal.grad_range}


def gradient_cal_from_dict(doc, path="<calibration>") -> GradientCalibration:
    _check_version(doc, GRAD_CAL_VERSION, path)
    try:
        return GradientCalibration(doc["model_id"], float(doc["grad_min"]), float(doc["grad_max"]),
                                   float(doc["grad_range"]))
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from None
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def save_calibration(path, cal: GradientCalibration):
    write_json(path, gradient_cal_to_dict(cal))


def load_calibration(path) -> GradientCalibration:
    return gradient_cal_from_dict(_read_json(path), path)


def skill_cal_to_dict(cal: SkillCalibration) -> dict:
    mag = None
    if cal.magnitude is not None:
        mag = {"mu": cal.magnitude.mu.tolist(), "sigma": cal.magnitude.sigma.tolist(), "k": cal.magnitude.k}
    return {"version": SKILL_CAL_VERSION, "gradient": gradient_cal_to_dict(cal.gradient), "magnitude": mag,
            "dod_bound": cal.dod_bound}


def skill_cal_from_dict(doc, path="<calibration>") -> SkillCalibration:
    _check_version(doc, SKILL_CAL_VERSION, path)
    try:
        grad = gradient_cal_from_dict(doc["gradient"], path)
        mag = doc.get("magnitude")
        if mag is not None:
            mag = MagnitudeThreshold(np.array(mag["mu"], dtype=float), np.array(mag["sigma"], dtype=float),
                                     float(mag["k"]))
        bound = doc.get("dod_bound")
        return SkillCalibration(grad, mag, None if bound is None else float(bound))
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from None


def save_skill_calibration(path, cal: SkillCalibration):
    write_json(path, skill_cal_to_dict(cal))


def load_skill_calibration(path) -> SkillCalibration:
    return skill_cal_from_dict(_read_json(path), path)


# ---------------------------------------------------------------- timelines


def save_timeline(path, timeline: EventTimeline):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in timeline.events:
            fh.write(json.dumps(_plain(e.as_dict()), sort_keys=True, allow_nan=False) + "\n")


def load_timeline(path) -> EventTimeline:
    events = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                events.append(Event(int(d["t"]), d["kind"], d["skill"], d["detector"], float(d["value"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{n}: bad timeline record ({exc})") from None
    if any(b.t < a.t for a, b in zip(events, events[1:])):
        raise FormatError(f"{path}: timestamps are not non-decreasing")
    return EventTimeline(events)


def _plain(d):
    return {k: (v.item() if isinstance(v, np.generic) else v) for k, v in d.items()}


# ---------------------------------------------------------------- trials


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def save_trial(path, trial: Trial, spec_hash: str | None = None):
    """Write ``path`` (CSV) and ``path + '.json'`` (windows, dt, spec hash)."""
    T, D = trial.observations.shape
    anomaly_col = [""] * T
    for w in trial.anomalies:
        for t in range(w.t_start, w.t_end):
            anomaly_col[t] = w.type.value
    recovery_col = [""] * T
    for w in trial.recovery_windows:
        for t in range(w.t_start, w.t_end):
            recovery_col[t] = "1"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"y{i}" for i in range(D)] + ["skill", "anomaly", "recovery"])
        for t in range(T):
            w.writerow([t] + ["%.17g" % v for v in trial.observations[t]]
                       + [int(trial.skill_labels[t]), anomaly_col[t], recovery_col[t]])
    write_json(_sidecar(path), {
        "version": TRIAL_VERSION,
        "dim": D,
        "dt": trial.dt,
        "spec_hash": spec_hash,
        "anomalies": [{"t_start": a.t_start, "t_end": a.t_end, "type": a.type.value} for a in trial.anomalies],
        "recovery_windows": [{"t_start": r.t_start, "t_end": r.t_end} for r in trial.recovery_windows],
    })


def load_trial(path, dim: int | None = DIM) -> Trial:
    """Read a trial; ``dim=None`` accepts whatever width the header declares."""
    side = _sidecar(path)
    meta = _read_json(side) if side.exists() else None
    if meta is not None:
        _check_version(meta, TRIAL_VERSION, side)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise FormatError(f"{path}:1: empty file") from None
        n_obs = len(header) - 4
        expected = ["t"] + [f"y{i}" for i in range(max(n_obs, 0))] + ["skill", "anomaly", "recovery"]
        if n_obs < 1 or header != expected:
            raise FormatError(f"{path}:1: malformed header {header!r}")
        if dim is not None and n_obs != dim:
            raise FormatError(f"{path}:1: dimension mismatch, {n_obs} observation columns but expected {dim}")
        obs, labels, anomaly_col, recovery_col = [], [], [], []
        for line_no, row in enumerate(rows, 2):
            if len(row) != len(header):
                raise FormatError(f"{path}:{line_no}: dimension mismatch, {len(row)} fields but header has "
                                  f"{len(header)}")
            try:
                t = int(row[0])
                y = [float(v) for v in row[1 : 1 + n_obs]]
                skill = int(row[1 + n_obs])
            except ValueError as exc:
                raise FormatError(f"{path}:{line_no}: {exc}") from None
            if t != line_no - 2:
                raise FormatError(f"{path}:{line_no}: expected t={line_no - 2}, found {t}")
            if not all(math.isfinite(v) for v in y):
                raise FormatError(f"{path}:{line_no}: non-finite observation")
            obs.append(y)
            labels.append(skill)
            anomaly_col.append(row[2 + n_obs])
            recovery_col.append(row[3 + n_obs])
    if not obs:
        raise FormatError(f"{path}: no observations")
    if meta is not None:
        if meta.get("dim") != n_obs:
            raise FormatError(f"{side}: dim {meta.get('dim')} disagrees with {n_obs} CSV columns")
        anomalies = [AnomalyWindow(int(a["t_start"]), int(a["t_end"]), AnomalyType(a["type"]))
                     for a in meta["anomalies"]]
        recovery = [Window(int(r["t_start"]), int(r["t_end"])) for r in meta["recovery_windows"]]
        dt = float(meta["dt"])
    else:
        anomalies = [AnomalyWindow(b, e, AnomalyType(v)) for v, b, e in _runs(anomaly_col) if v]
        recovery = [Window(b, e) for v, b, e in _runs(recovery_col) if v]
        dt = 0.1
    for w in anomalies:
        if any(anomaly_col[t] != w.type.value for t in range(w.t_start, min(w.t_end, len(obs)))):
            raise FormatError(f"{path}: anomaly column disagrees with window {w}")
    return Trial(np.array(obs, dtype=float), np.array(labels, dtype=np.int64), anomalies, recovery, dt)


def _runs(col):
    out, start = [], 0
    for i in range(1, len(col) + 1):
        if i == len(col) or col[i] != col[start]:
            out.append((col[start], start, i))
            start = i
    return out


def trial_spec_hash(path):
    side = _sidecar(path)
    return _read_json(side).get("spec_hash") if side.exists() else None


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to the manifest's directory
    role: str


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    entries: tuple
    spec_hash: str | None = None
    version: str = MANIFEST_VERSION

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise FormatError("manifest paths must be unique")
        bad = sorted({e.role for e in self.entries} - set(ROLES))
        if bad:
            raise FormatError(f"unknown manifest role(s) {bad}; allowed: {', '.join(ROLES)}")

    def paths(self, role=None):
        return [e.path for e in self.entries if role is None or e.role == role]


def save_manifest(path, manifest: DatasetManifest):
    write_json(path, {
        "version": manifest.version,
        "name": manifest.name,
        "spec_hash": manifest.spec_hash,
        "trials": [{"path": e.path, "role": e.role} for e in manifest.entries],
    })


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    doc = _read_json(path)
    _check_version(doc, MANIFEST_VERSION, path)
    try:
        m = DatasetManifest(doc["name"], tuple(ManifestEntry(t["path"], t["role"]) for t in doc["trials"]),
                            doc.get("spec_hash"))
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from None
    if check_files:
        root = Path(path).parent
        missing = [str(root / p) for p in m.paths() if not (root / p).is_file()]
        if missing:
            raise FileNotFoundError(f"{path}: manifest references missing file(s): {', '.join(missing)}")
    return m


def load_manifest_trials(path, role=None, dim: int | None = DIM):
    """``[(relative path, Trial)]`` for every entry (optionally of one role)."""
    m = load_manifest(path)
    root = Path(path).parent
    return [(p, load_trial(root / p, dim)) for p in m.paths(role)]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def relpath(path, start) -> str:
    return os.path.relpath(path, start).replace(os.sep, "/")
