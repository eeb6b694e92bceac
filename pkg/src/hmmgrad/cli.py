"""Command-line entry point: ``hmmgrad <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 acceptance
threshold failure (``--assert``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import detection as det
from . import diagnostics as dg
from . import persistence as io
from . import pipeline as pl
from . import synthesis as syn
from .hmm import ModelError, TrainingError, loglik_series

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_ASSERT = 0, 2, 3, 4

log = logging.getLogger("hmmgrad")


class UsageError(Exception):
    pass


class AssertionFailed(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _prepare_out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} exists and is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_manifest(args) -> Path:
    if not args.manifest:
        raise UsageError("--manifest is required")
    return Path(args.manifest)


def _config(args, **extra) -> pl.PipelineConfig:
    kw = dict(seed=args.seed)
    for name in ("candidates", "cov_type", "trans_smoothing", "k", "dod_safety", "suppression", "grouping_gap",
                 "lookback"):
        if hasattr(args, name) and getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    kw.update(extra)
    return pl.PipelineConfig(**kw)


def _trial_name(rel):
    return Path(rel).name.rsplit(".", 1)[0]


def _write_metadata(out: Path, args, extra=None):
    """Config echo plus a hash of every artifact under ``out``."""
    artifacts = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "run-metadata.json":
            artifacts[io.relpath(p, out)] = io.file_sha256(p)
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {"version": "run-metadata/1", "package_version": __version__, "command": args.command,
           "config": config, "artifacts": artifacts}
    if extra:
        doc.update(extra)
    io.write_json(out / "run-metadata.json", doc)


def _load_models(model_dir) -> dict:
    model_dir = Path(model_dir)
    files = sorted(model_dir.glob("skill-*.json"))
    if not files:
        raise FileNotFoundError(f"no model files (skill-*.json) in {model_dir}; run 'hmmgrad train' first")
    return {int(f.stem.split("-", 1)[1]): io.load_model(f) for f in files}


def _load_calibrations(cal_dir, models) -> dict:
    cal_dir = Path(cal_dir) if cal_dir else None
    cals = {}
    for s in models:
        f = cal_dir / f"skill-{s}.json" if cal_dir else None
        if f is None or not f.is_file():
            raise FileNotFoundError(f"missing calibration for skill {s}"
                                    f"{'' if f is None else f' ({f})'}; run 'hmmgrad calibrate' first")
        cals[s] = io.load_skill_calibration(f)
    return cals


def _trials(manifest, role=None):
    return io.load_manifest_trials(manifest, role, dim=None)


def _check(failures, ok, message):
    print(("PASS " if ok else "FAIL ") + message)
    if not ok:
        failures.append(message)


def _assert_report(report) -> list:
    """Acceptance gates that can be checked from a report alone."""
    failures = []
    if "overall_accuracy" in report:
        diag = np.diag(np.asarray(report["confusion"]))
        _check(failures, report["overall_accuracy"] >= 0.95 and diag.min() >= 0.90,
               f"identification accuracy {report['overall_accuracy']:.4f} (>=0.95), min diagonal {diag.min():.3f}"
               " (>=0.90)")
        avg = report["reaction"]["averages"]
        _check(failures, avg["first_abs"] <= 5.0 and avg["first_k_abs"] <= 5.0,
               f"reaction |first| {avg['first_abs']:.2f}% and |first10| {avg['first_k_abs']:.2f}% (<=5%)")
    per = report.get("anomaly", {}).get("per_detector", {})
    if "gradient" in per:
        g = per["gradient"]
        _check(failures, g["f"] >= 0.95 and g["recall"] == 1.0,
               f"gradient F {g['f']:.4f} (>=0.95), recall {g['recall']:.4f} (=1)")
        if "dod" in per and "magnitude" in per:
            d, m = per["dod"], per["magnitude"]
            _check(failures, g["f"] > d["f"] > m["f"] and m["precision"] < g["precision"],
                   f"F ordering gradient {g['f']:.4f} > dod {d['f']:.4f} > magnitude {m['f']:.4f}, "
                   f"magnitude precision {m['precision']:.4f} < gradient {g['precision']:.4f}")
    rec = report.get("post_recovery_fp")
    if rec and "gradient" in rec:
        ok = rec["gradient"] == 0 and ("magnitude" not in rec or rec["magnitude"] >= 1)
        _check(failures, ok, f"post-recovery false positives {rec}")
    return failures


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    out = _prepare_out(args)
    spec = syn.default_task_spec(args.seed)
    roles = pl.build_dataset(spec, args.scenario, args.seed, args.n_train, args.n_test)
    (out / "trials").mkdir(exist_ok=True)
    entries = []
    for role in syn.ROLES:
        for i, trial in enumerate(roles.get(role, [])):
            rel = f"trials/{role}-{i:02d}.csv"
            io.save_trial(out / rel, trial, spec.spec_hash())
            entries.append(io.ManifestEntry(rel, role))
    io.save_manifest(out / "manifest.json", io.DatasetManifest(args.scenario, tuple(entries), spec.spec_hash()))
    n_anom = sum(len(t.anomalies) for ts in roles.values() for t in ts)
    print(f"wrote {len(entries)} trials ({n_anom} annotated anomalies) to {out}")
    _write_metadata(out, args, {"spec_hash": spec.spec_hash()})


def cmd_train(args):
    manifest = _require_manifest(args)
    trials = [t for _, t in _trials(manifest, "train")]
    if not trials:
        raise ValueError(f"{manifest}: no trials with role 'train'")
    out = _prepare_out(args)
    cfg = _config(args)
    skills = args.skills
    trained = pl.train_skill_models(trials, cfg, skills)
    (out / "models").mkdir(exist_ok=True)
    for s, m in trained.models.items():
        io.save_model(out / "models" / f"skill-{s}.json", m)
        sweep = ", ".join(f"N={n}: {v:.4f}" for n, v in trained.sweep[s].items())
        print(f"skill {s}: N={trained.n_states[s]} final loglik {trained.final_loglik[s]:.6f}"
              + (f" (held-out per-step {sweep})" if sweep else ""))
    io.write_json(out / "state-sweep.json", {
        "version": "state-sweep/1",
        "skills": {str(s): {"chosen": trained.n_states[s], "final_loglik": trained.final_loglik[s],
                            "iterations": trained.iterations[s],
                            "held_out": {str(n): v for n, v in trained.sweep[s].items()}}
                   for s in trained.models},
    })
    _write_metadata(out, args)


def cmd_calibrate(args):
    manifest = _require_manifest(args)
    models = _load_models(args.models)
    trials = [t for _, t in _trials(manifest, "train")]
    if not trials:
        raise ValueError(f"{manifest}: no trials with role 'train'")
    out = _prepare_out(args)
    cals = pl.calibrate_models(models, trials, _config(args))
    (out / "calibrations").mkdir(exist_ok=True)
    for s, c in cals.items():
        io.save_skill_calibration(out / "calibrations" / f"skill-{s}.json", c)
        io.save_calibration(out / "calibrations" / f"grad-{s}.json", c.gradient)
        print(f"skill {s}: grad_min {c.gradient.grad_min:.6f} grad_max {c.gradient.grad_max:.6f} "
              f"threshold {c.gradient.threshold:.6f}")
    _write_metadata(out, args)


def _identify(models, named, out: Path):
    (out / "predictions").mkdir(exist_ok=True)
    pairs = []
    for rel, tr in named:
        pred = det.gradient_predictions(models, tr.observations)
        dg.write_series_csv(out / "predictions" / f"{_trial_name(rel)}.csv", {"pred": pred, "true": tr.skill_labels})
        pairs.append((pred, tr.skill_labels))
    return pairs


def cmd_identify(args):
    manifest = _require_manifest(args)
    models = _load_models(args.models)
    named = _trials(manifest, "test-nominal")
    if not named:
        raise ValueError(f"{manifest}: no trials with role 'test-nominal'")
    out = _prepare_out(args)
    cfg = _config(args)
    pairs = _identify(models, named, out)
    report = pl.build_report(cfg, sorted(models), pairs)
    io.write_json(out / "report.json", report)
    print(f"overall accuracy {report['overall_accuracy']:.4f}")
    _write_metadata(out, args)
    return _assert_report(report) if args.assert_ else []


def _detectors(choice):
    return det.DETECTORS if choice == "all" else (choice,)


def cmd_detect(args):
    manifest = _require_manifest(args)
    models = _load_models(args.models)
    cals = _load_calibrations(args.calibrations, models)
    named = {role: _trials(manifest, role) for role in ("test-nominal", "test-anomalous", "recovery")}
    if not any(named.values()):
        raise ValueError(f"{manifest}: no test-nominal, test-anomalous or recovery trials")
    out = _prepare_out(args)
    cfg = _config(args, detectors=_detectors(args.detector))
    for d in ("timelines", "series"):
        (out / d).mkdir(exist_ok=True)
    results = {}
    for role, items in named.items():
        tls = pl.run_timelines(models, cals, [t for _, t in items], cfg)
        for (rel, tr), tl in zip(items, tls):
            name = _trial_name(rel)
            io.save_timeline(out / "timelines" / f"{name}.ndjson", tl)
            cols = {}
            for s, m in sorted(models.items()):
                L = loglik_series(m, tr.observations)
                cols[f"loglik_{s}"] = L
                cols[f"grad_{s}"] = np.concatenate([[L[0]], np.diff(L)])
            cols["hypothesis"] = tl.labels
            dg.write_series_csv(out / "series" / f"{name}.csv", cols)
        results[role] = list(zip([t for _, t in items], tls))
    pairs = _identify(models, named["test-nominal"], out) if named["test-nominal"] else []
    report = pl.build_report(cfg, sorted(models), pairs, results["test-nominal"] + results["test-anomalous"],
                             results["recovery"])
    io.write_json(out / "report.json", report)
    _print_anomaly_table(report)
    _write_metadata(out, args)
    return _assert_report(report) if args.assert_ else []


def _print_anomaly_table(report):
    per = report.get("anomaly", {}).get("per_detector", {})
    if per:
        print(f"{'detector':<10} {'tp':>4} {'fp':>4} {'fn':>4} {'precision':>10} {'recall':>8} {'F':>8}")
        for d, r in per.items():
            print(f"{d:<10} {r['tp']:>4} {r['fp']:>4} {r['fn']:>4} {r['precision']:>10.4f} {r['recall']:>8.4f} "
                  f"{r['f']:>8.4f}")
    if "post_recovery_fp" in report:
        print("post-recovery false positives:", report["post_recovery_fp"])


def cmd_eval(args):
    manifest = _require_manifest(args)
    run = Path(args.run)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory {run} does not exist")
    out = _prepare_out(args)
    cfg = _config(args, detectors=_detectors(args.detector))
    pairs, scored, recovery, labels = [], [], [], set()
    for role in ("test-nominal", "test-anomalous", "recovery"):
        for rel, tr in _trials(manifest, role):
            name = _trial_name(rel)
            tl_path = run / "timelines" / f"{name}.ndjson"
            if not tl_path.is_file():
                raise FileNotFoundError(f"missing timeline {tl_path}; run 'hmmgrad detect' first")
            tl = io.load_timeline(tl_path)
            if role == "recovery":
                recovery.append((tr, tl))
            else:
                scored.append((tr, tl))
            if role == "test-nominal":
                pred = _read_predictions(run / "predictions" / f"{name}.csv", tr)
                pairs.append((pred, tr.skill_labels))
                labels |= set(tr.skill_labels.tolist())
    report = pl.build_report(cfg, sorted(labels), pairs, scored, recovery)
    io.write_json(out / "report.json", report)
    _print_anomaly_table(report)
    _write_metadata(out, args)
    return _assert_report(report) if args.assert_ else []


def _read_predictions(path, trial):
    if not path.is_file():
        raise FileNotFoundError(f"missing predictions {path}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    if data.shape[0] != trial.T:
        raise ValueError(f"{path}: {data.shape[0]} predictions for a trial of length {trial.T}")
    return data[:, 1]


def cmd_diag(args):
    if args.well_separated:
        model = syn.well_separated_model(seed=args.seed)
        Y, z = syn.sample_hmm(model, args.length, np.random.default_rng(args.seed))
        transitions = syn.transition_times(z)
        name = "well-separated"
    else:
        if not args.model:
            raise UsageError("diag needs --model (with --manifest) or --well-separated")
        model = io.load_model(args.model)
        manifest = _require_manifest(args)
        named = _trials(manifest)
        if not named:
            raise ValueError(f"{manifest}: no trials")
        rel, tr = named[min(args.trial, len(named) - 1)]
        Y, transitions, name = tr.observations, None, _trial_name(rel)
        if args.skill is not None:
            segs = tr.segment(args.skill)
            if not segs:
                raise ValueError(f"trial {rel} has no segment of skill {args.skill}")
            Y = segs[0]
    out = _prepare_out(args)
    trace = dg.incremental_viterbi(model, Y)
    dg.write_triangle_csv(out / "triangle.csv", trace)
    curves = dg.emission_curves(model, Y)
    dg.write_series_csv(out / "emissions.csv", {f"log_b{i}": curves[i] for i in range(model.n_states)})
    L = loglik_series(model, Y)
    dg.write_series_csv(out / "gradient.csv", {"loglik": L, "grad": np.concatenate([[L[0]], np.diff(L)])})
    breaks = dg.detect_sequence_breaks(trace, transitions)
    summary = {
        "version": "diagnostics/1",
        "source": name,
        "self_transition_dominance": dg.check_self_transition_dominance(model),
        "breaks": [{"t": b.t, "start": b.start, "length": b.length} for b in breaks.breaks],
        "transitions": list(breaks.transitions),
        "max_break_len": breaks.max_break_len,
        "breaks_near_transitions": breaks.near_transitions(1),
    }
    if len(Y) >= 2:
        res = dg.corollary_residuals(model, Y, transitions)
        summary["residuals"] = {"tol": res.tol, "stable_fraction_within": res.stable_fraction_within,
                                "fraction_within": res.fraction_within,
                                "max_stable": float(res.residuals[res.stable].max()) if res.stable.any() else None}
        summary["gradient_emission_correlation"] = dg.gradient_emission_correlation(model, Y, transitions)
    io.write_json(out / "diagnostics.json", summary)
    print(json.dumps({k: v for k, v in summary.items() if k not in ("breaks", "transitions")}, sort_keys=True))
    _write_metadata(out, args)
    failures = []
    if args.assert_:
        _check(failures, breaks.max_break_len <= 1 and summary["breaks_near_transitions"],
               f"sequence breaks: max length {breaks.max_break_len} (<=1), near transitions "
               f"{summary['breaks_near_transitions']}")
        if "residuals" in summary:
            _check(failures, summary["residuals"]["stable_fraction_within"] >= 0.95,
                   f"stable residual fraction {summary['residuals']['stable_fraction_within']:.4f} (>=0.95)")
    return failures


# ---------------------------------------------------------------- parser


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return tuple(vals)


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="base random seed (default 0)")
    common.add_argument("--out", help="output run directory")
    common.add_argument("--manifest", help="dataset manifest JSON")
    common.add_argument("--force", action="store_true", help="write into an existing non-empty output directory")
    common.add_argument("--assert", dest="assert_", action="store_true",
                        help="check acceptance thresholds; exit 4 when one fails")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hmmgrad", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--scenario", required=True, choices=pl.SCENARIOS)
    s.add_argument("--n-train", type=int, default=5)
    s.add_argument("--n-test", type=int, default=5)
    s.set_defaults(func=cmd_synth)

    def training_flags(sp):
        sp.add_argument("--candidates", type=_int_list, default=(2, 3, 4), help="state counts to try, e.g. 2,3,4")
        sp.add_argument("--cov-type", choices=("diag", "full"), default="diag")
        sp.add_argument("--trans-smoothing", type=float, default=1e-3)

    def detection_flags(sp):
        sp.add_argument("--k", type=float, default=3.0, help="sigma multiplier of the magnitude threshold")
        sp.add_argument("--dod-safety", type=float, default=1.5)
        sp.add_argument("--suppression", type=_nonneg_int, default=3)
        sp.add_argument("--grouping-gap", type=_nonneg_int, default=5)
        sp.add_argument("--lookback", type=_nonneg_int, default=20)

    s = sub.add_parser("train", parents=[common], help="train one model per skill")
    training_flags(s)
    s.add_argument("--skills", type=_int_list, help="skill ids that must be present")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("calibrate", parents=[common], help="calibrate detectors on training trials")
    s.add_argument("--models", required=True, help="directory holding skill-*.json models")
    detection_flags(s)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("identify", parents=[common], help="skill identification on nominal test trials")
    s.add_argument("--models", required=True)
    detection_flags(s)
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("detect", parents=[common], help="run anomaly detectors over test trials")
    s.add_argument("--models", required=True)
    s.add_argument("--calibrations", help="directory holding skill-*.json calibrations")
    s.add_argument("--detector", choices=det.DETECTORS + ("all",), default="all")
    detection_flags(s)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", parents=[common], help="recompute metrics from stored timelines")
    s.add_argument("--run", required=True, help="output directory of a previous detect run")
    s.add_argument("--detector", choices=det.DETECTORS + ("all",), default="all")
    detection_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("diag", parents=[common], help="Viterbi and gradient diagnostics")
    s.add_argument("--model", help="model JSON")
    s.add_argument("--trial", type=_nonneg_int, default=0, help="index of the manifest trial to analyse")
    s.add_argument("--skill", type=int, help="restrict to the first segment of this skill")
    s.add_argument("--well-separated", action="store_true", help="use the built-in well-separated benchmark")
    s.add_argument("--length", type=int, default=200)
    s.set_defaults(func=cmd_diag)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        failures = args.func(args) or []
    except UsageError as exc:
        print(f"hmmgrad {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, io.FormatError, ModelError, TrainingError, ValueError, KeyError) as exc:
        print(f"hmmgrad {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if failures:
        print(f"{len(failures)} acceptance check(s) failed", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
