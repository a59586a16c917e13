"""``helioforge`` command line.

Most commands work on a data directory holding ``sr.csv``, ``gp.csv`` and
``service.csv`` (the layout ``synth`` writes) and a predictor store
directory (the layout ``build`` writes).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import arimodels, cleaning, ensemble, evaluation, gate, impact, pipeline, service, synth
from .ensemble import BASIC, TIME_ORDER
from .timeseries import DatasetSplit, TimeSeries, read_csv, read_forecast_csv, to_datetime64, write_csv, write_forecast_csv

log = logging.getLogger("helioforge")

EXIT_OK, EXIT_ERROR, EXIT_STORAGE = 0, 1, 3


# ---------------------------------------------------------------- helpers


def _load_data(data_dir):
    d = Path(data_dir)
    sr, gp = read_csv(d / "sr.csv"), read_csv(d / "gp.csv")
    if not sr.same_grid(gp):
        start, n = cleaning.common_window(sr, gp)
        sr, gp = cleaning.align(sr, start, n), cleaning.align(gp, start, n)
    return sr, gp, read_forecast_csv(d / "service.csv", "service")


def _split(text: str | None, series: TimeSeries) -> DatasetSplit:
    per_day = series.samples_per_day
    if text:
        a, b, c = (int(x) for x in text.split(","))
    else:
        days = len(series) // per_day
        a, b = days // 2, days // 4
        c = days - a - b
    return DatasetSplit.by_days(a, b, c, per_day)


def _origins(args, sr: TimeSeries, split: DatasetSplit) -> np.ndarray:
    if getattr(args, "origin", None):
        return np.array([sr.index_of(to_datetime64(o)) for o in args.origin], dtype=np.int64)
    return pipeline.full_horizon_origins(*split.validation, stride=getattr(args, "stride", 1))


def _sr_members(store: Path, sr, issues, origins):
    models = {
        "sr_long": arimodels.ModelParams.load(store / pipeline.Predictors.FILES["sr_long"]),
        "sr_short": arimodels.ModelParams.load(store / pipeline.Predictors.FILES["sr_short"]),
    }
    m = pipeline.sr_components(models, sr, issues, origins)
    return m, [m[k] for k in pipeline.SR_MEMBERS]


def _period2(args):
    sr, gp, issues = _load_data(args.data)
    split = _split(args.split, sr)
    e_lo, e_hi = split.ensemble_calibration
    sr_e = sr.slice(0, e_hi)
    origins = pipeline.full_horizon_origins(e_lo, e_hi)
    m, members = _sr_members(Path(args.store), sr_e, issues, origins)
    return sr_e, m, members


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = synth.SynthConfig(
        days=args.days, seed=args.seed, service_skill=args.service_skill, regime_persistence=args.regime_persistence
    )
    data = synth.generate(cfg)
    data.save(args.out)
    print(f"wrote {args.days} days to {args.out}")
    return EXIT_OK


def cmd_clean(args) -> int:
    if args.sr and args.gp:
        gp, sr = cleaning.clean_pair(
            read_csv(args.gp), read_csv(args.sr), args.window, args.threshold, args.max_gap, args.step,
            neighbor_first=not args.cross_first,
        )
        out = Path(args.out)
        write_csv(sr, out / "sr.csv")
        write_csv(gp, out / "gp.csv")
        print(f"wrote {out / 'sr.csv'} and {out / 'gp.csv'}")
        return EXIT_OK
    if not args.input:
        raise ValueError("give --in, or both --sr and --gp")
    cleaned = cleaning.clean_series(read_csv(args.input), args.window, args.threshold, args.max_gap, args.step)
    write_csv(cleaned, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


_FIT_NAMES = {("sr", "ari-long"): "sr_long", ("sr", "ari-short"): "sr_short", ("gp", "ari-long"): "gp_ari", ("gp", "arix"): "gp_arix"}


def cmd_fit(args) -> int:
    sr, gp, _ = _load_data(args.data)
    split = _split(args.split, sr)
    spec = arimodels.load_spec(args.spec)
    lo, hi = split.calibration
    target = (sr if args.target == "sr" else gp).slice(lo, hi)
    exo = sr.slice(lo, hi) if spec.exo_lags else None
    model = arimodels.fit_ar(target, spec, exo)
    out = args.out
    if out is None:
        attr = _FIT_NAMES.get((args.target, args.spec))
        if attr is None:
            raise ValueError("--out is required for this target/spec combination")
        out = Path(args.store) / pipeline.Predictors.FILES[attr]
    model.save(out)
    print(f"{args.target} {args.spec}: {model.n_rows} rows, residual rms {model.fit_residual_rms:.4g} -> {out}")
    return EXIT_OK


def _gate_training(sr_e, m, daylight_only=True):
    change, inst, good, targets = gate.label_arrays(m["SR-2"], m["SR-ARI-long"], sr_e)
    X, y = gate.gate_features(change, inst), np.where(good, 1.0, -1.0)
    if daylight_only:
        lit = sr_e.usable()[targets] > 0
        X, y = X[lit], y[lit]
    return X, y


def cmd_gate_train(args) -> int:
    sr_e, m, _ = _period2(args)
    X, y = _gate_training(sr_e, m)
    X, y = gate.subsample(X, y, args.max_samples)
    C, gamma = args.C, args.gamma
    if args.grid_search:
        C, gamma, acc = gate.select_hyperparameters(X, y)
        print(f"grid search: C={C:g} gamma={gamma:g} cv accuracy {acc:.3f}")
    model = gate.train_gate_arrays(X, y, C, gamma)
    out = args.out or Path(args.store) / pipeline.Predictors.FILES["gate"]
    model.save(out)
    acc = float(np.mean(model.predict_good(X) == (y > 0)))
    print(f"gate: {len(X)} samples, {len(model.support_vectors)} support vectors, training accuracy {acc:.3f} -> {out}")
    return EXIT_OK


def cmd_gate_eval(args) -> int:
    sr, gp, issues = _load_data(args.data)
    split = _split(args.split, sr)
    model = gate.GateModel.load(args.model or Path(args.store) / pipeline.Predictors.FILES["gate"])
    lo, hi = split.validation
    m, _ = _sr_members(Path(args.store), sr, issues, pipeline.full_horizon_origins(lo, hi))
    X, y = _gate_training(sr, m)
    pred = model.predict_good(X)
    acc = float(np.mean(pred == (y > 0)))
    print(f"validation cells {len(y)}: accuracy {acc:.3f}, Good fraction {np.mean(y > 0):.3f}, predicted Good {np.mean(pred):.3f}")
    return EXIT_OK


def cmd_ensemble_fit(args) -> int:
    sr_e, m, members = _period2(args)
    store = Path(args.store)
    framework = TIME_ORDER if args.framework in ("time-order", TIME_ORDER) else BASIC
    if args.gated:
        model = gate.GateModel.load(store / pipeline.Predictors.FILES["gate"])
        feats = gate.feature_cube(m["SR-2"], sr_e)
        flat = feats.reshape(-1, feats.shape[-1])
        finite = ~np.isnan(flat).any(axis=1)
        good = np.zeros(len(flat), dtype=bool)
        good[finite] = model.predict_good(flat[finite])
        good = good.reshape(feats.shape[:2])
        for name, mask in (("es1", good), ("es2", ~good)):
            w = ensemble.fit_weights(members, sr_e, framework, cell_mask=mask)
            w.save(store / pipeline.Predictors.FILES[name])
            print(f"{name}: {w.diagnostics['rows']} rows -> {store / pipeline.Predictors.FILES[name]}")
        return EXIT_OK
    w = ensemble.fit_weights(members, sr_e, framework)
    out = store / pipeline.Predictors.FILES["sr_basic" if framework == BASIC else "sr_time"]
    w.save(out)
    print(f"{framework}: rank {w.diagnostics['rank']}, {w.diagnostics['rows']} rows -> {out}")
    return EXIT_OK


def cmd_build(args) -> int:
    sr, gp, issues = _load_data(args.data)
    split = _split(args.split, sr)
    cfg = pipeline.PipelineConfig(gate_grid_search=args.grid_search, gate_C=args.C, gate_gamma=args.gamma)
    p = pipeline.fit(sr, gp, issues, split, cfg)
    p.save(args.store)
    print(f"predictor store written to {args.store}")
    return EXIT_OK


def cmd_predict(args) -> int:
    sr, gp, issues = _load_data(args.data)
    split = _split(args.split, sr)
    p = pipeline.Predictors.load(args.store)
    origins = _origins(args, sr, split)
    f = pipeline.forecast_all(p, sr, gp, issues, origins)
    if args.predictor not in f.matrices:
        raise ValueError(f"unknown predictor {args.predictor!r}")
    write_forecast_csv(f[args.predictor], args.out)
    print(f"{args.predictor}: {len(origins)} origins -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    sr, gp, issues = _load_data(args.data)
    split = _split(args.split, sr)
    p = pipeline.Predictors.load(args.store)
    origins = pipeline.full_horizon_origins(*split.validation, stride=args.stride)
    f = pipeline.forecast_all(p, sr, gp, issues, origins)
    ids = [x.strip() for x in args.predictors.split(",")] if args.predictors else list(pipeline.METHODS)
    rows, profiles = [], {}
    for kind, measured in (("SR", sr), ("GP", gp)):
        chosen = [i for i in ids if i.startswith(kind)]
        if chosen:
            r, prof = evaluation.compare_predictors(f.table(chosen), measured, split, stride=args.stride, daylight_only=args.daylight_only)
            rows += r
            profiles.update(prof)
    evaluation.write_table(rows, Path(args.out) / "table.csv")
    evaluation.write_profiles(profiles, Path(args.out) / "profiles.csv")
    print(f"{'predictor':<8} {'RMSE_s':>8} {'RMSE_m':>8}  method")
    for r in rows:
        print(f"{r.predictor_id:<8} {r.rmse_short:8.2f} {r.rmse_medium:8.2f}  {r.method}")
    if args.correlogram:
        c = evaluation.acf_pacf(sr.slice(*split.calibration), args.correlogram)
        print("significant SR PACF lags:", " ".join(map(str, c.significant())))
    return EXIT_OK


def cmd_impact(args) -> int:
    cfg = impact.ImpactConfig.load(args.config) if args.config else impact.ImpactConfig()
    overrides = {}
    if args.rmse_targets:
        targets = tuple(float(x) for x in args.rmse_targets.split(","))
        overrides["rmse_targets"] = targets if 0.0 in targets else (0.0, *targets)
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    cfg = impact.ImpactConfig(**{**cfg.__dict__, **overrides})
    actual = None
    if args.gp:
        actual = read_csv(args.gp).usable()
        if len(actual) != impact.STEPS_PER_DAY or np.isnan(actual).any():
            raise ValueError("--gp must hold one complete day of 96 samples")
    out = Path(args.out)
    results = impact.run_study(actual, cfg, trace_dir=out)
    impact.write_summary(results, out / "summary.csv")
    print(f"{'scenario':<8} {'RMSE':>6} {'trading':>8} {'charge':>8} {'benefit':>8}")
    for r in results:
        print(f"{r.name:<8} {r.rmse_achieved:6.2f} {r.trading:8.1f} {r.charge:8.1f} {r.benefit:8.1f}")
    return EXIT_OK


def cmd_serve(args) -> int:
    cfg = service.ScheduleConfig.load(args.config)
    clock = service.ManualClock(args.now) if args.now else service.SystemClock()
    svc = service.Service(cfg, clock)
    try:
        if args.once:
            r = svc.step()
            print(f"origin {r.origin}: {r.path} (degraded={r.degraded})")
        else:
            svc.serve(args.max_cycles)
    except KeyboardInterrupt:
        log.info("stopped")
    finally:
        svc.close()
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="helioforge", description="SR/PV forecasting toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def data_args(p, store=True):
        p.add_argument("--data", default="data", help="directory with sr.csv, gp.csv, service.csv")
        p.add_argument("--split", help="calibration,ensemble,validation lengths in days")
        if store:
            p.add_argument("--store", default="store", help="predictor store directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--days", type=int, default=120)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--service-skill", type=float, default=synth.SynthConfig.service_skill)
    p.add_argument("--regime-persistence", type=float, default=synth.SynthConfig.regime_persistence)
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("clean", help="outlier screening, gap filling and resampling")
    p.add_argument("--in", dest="input", help="single series CSV")
    p.add_argument("--out", required=True, help="output CSV (or directory with --sr/--gp)")
    p.add_argument("--sr")
    p.add_argument("--gp")
    p.add_argument("--max-gap", type=int, default=cleaning.DEFAULT_MAX_GAP)
    p.add_argument("--window", type=int, default=cleaning.DEFAULT_WINDOW)
    p.add_argument("--threshold", type=float, default=cleaning.DEFAULT_THRESHOLD)
    p.add_argument("--step", type=int, default=cleaning.GRID_STEP)
    p.add_argument("--cross-first", action="store_true", help="cross-match before neighbour screening")
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("fit", help="fit one ARI/ARIX model on the calibration period")
    data_args(p)
    p.add_argument("--target", choices=("sr", "gp"), required=True)
    p.add_argument("--spec", required=True, help="preset (ari-long, ari-short, arix) or lag-spec file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gate-train", help="train the Good/Bad gate")
    data_args(p)
    p.add_argument("--C", type=float, default=10.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--grid-search", action="store_true")
    p.add_argument("--max-samples", type=int, default=2500)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gate_train)

    p = sub.add_parser("gate-eval", help="gate accuracy on the validation period")
    data_args(p)
    p.add_argument("--model")
    p.set_defaults(func=cmd_gate_eval)

    p = sub.add_parser("ensemble-fit", help="fit SR ensemble weights")
    data_args(p)
    p.add_argument("--framework", choices=("basic", "time-order"), default="basic")
    p.add_argument("--gated", action="store_true", help="fit ES1/ES2 on gate-routed cells")
    p.set_defaults(func=cmd_ensemble_fit)

    p = sub.add_parser("build", help="fit every model into a predictor store")
    data_args(p)
    p.add_argument("--C", type=float, default=10.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--grid-search", action="store_true")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("predict", help="write one predictor's forecasts")
    data_args(p)
    p.add_argument("--predictor", required=True, choices=tuple(pipeline.METHODS))
    p.add_argument("--origin", action="append", help="origin timestamp (repeatable); default every validation origin")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", default="forecast.csv")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="validation RMSE table and lead-time profiles")
    data_args(p)
    p.add_argument("--predictors", help="comma-separated ids, default all")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--daylight-only", action="store_true")
    p.add_argument("--correlogram", type=int, metavar="MAX_LAG", help="also report significant PACF lags")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("impact", help="prediction-error impact on battery dispatch")
    p.add_argument("--rmse-targets", help="comma-separated percentages; 0 is always included")
    p.add_argument("--seeds", type=int)
    p.add_argument("--config", help="impact settings file")
    p.add_argument("--gp", help="one day of actual GP (96 samples) instead of the synthetic day")
    p.add_argument("--out", default="impact")
    p.set_defaults(func=cmd_impact)

    p = sub.add_parser("serve", help="run the online prediction service")
    p.add_argument("--config", required=True)
    p.add_argument("--once", action="store_true", help="run a single cycle now and exit")
    p.add_argument("--now", help="start time for a simulated clock")
    p.add_argument("--max-cycles", type=int)
    p.set_defaults(func=cmd_serve)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except service.StorageError as exc:
        print(f"storage error: {exc}", file=sys.stderr)
        return EXIT_STORAGE
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
