"""Command-line interface.

Exit codes: 0 success, 2 invalid input or configuration, 3 a fit missed the
convergence gate, 1 anything else.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import pandas as pd

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_CONVERGENCE = 0, 1, 2, 3
TERMS = ("dc1e", "dc1as", "dc1bs", "c_ca")

logger = logging.getLogger("nonergodic_eas")


class ConvergenceFailure(RuntimeError):
    pass


def _freq_list(text: str) -> list:
    try:
        vals = [float(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad frequency list {text!r}") from exc
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("frequencies must be positive")
    return sorted(set(vals))


def _load_config(path) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _sampler(args, cfg):
    from .inference import SamplerConfig

    d = dict(cfg.get("sampler", {}))
    for k in ("chains", "warmup", "draws", "max_tree_depth", "target_accept"):
        v = getattr(args, k, None)
        if v is not None:
            d[k] = v
    d["seed"] = args.seed if args.seed is not None else d.get("seed", 0)
    return SamplerConfig.from_dict(d)


def _read_grid(path):
    from .cells import CellGrid, read_grid_csv

    if path is None:
        return None
    if str(path).endswith(".csv"):
        return read_grid_csv(path)
    return CellGrid.from_dict(json.loads(Path(path).read_text()))


def _ingest(args, cfg):
    from .ingest import ingest

    return ingest(args.flatfile, args.c7, getattr(args, "polygons", None) or cfg.get("polygons"),
                  getattr(args, "zone", None) or cfg.get("zone", "11S"), _read_grid(args.grid),
                  getattr(args, "cell_size", None) or cfg.get("cell_size", 25.0),
                  "skip" if getattr(args, "skip_bad_rows", False) else "raise")


def _data_args(p, freqs=False):
    p.add_argument("--flatfile", required=True, help="flatfile CSV")
    p.add_argument("--c7", required=True, help="JSON mapping frequency to c7")
    p.add_argument("--grid", help="grid CSV or JSON (default: fitted to the data extent)")
    p.add_argument("--zone", help="UTM zone, e.g. 11S")
    if freqs:
        p.add_argument("--freqs", type=_freq_list, help="comma-separated frequencies (Hz)")


def _sampler_args(p):
    p.add_argument("--chains", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--draws", type=int)
    p.add_argument("--max-tree-depth", dest="max_tree_depth", type=int)
    p.add_argument("--target-accept", dest="target_accept", type=float)
    p.add_argument("--mode", choices=("nuts", "laplace"), default=None,
                   help="laplace: posterior mode plus Gaussian approximation (fast, approximate)")


# -- commands ------------------------------------------------------------------


def cmd_synth(args, cfg):
    from .validate import SyntheticSpec, generate_synthetic, make_fixture

    if args.fixture:
        syn = make_fixture()
    else:
        spec = dict(cfg.get("synthetic", {}))
        if args.spec:
            spec.update(json.loads(Path(args.spec).read_text()))
        if args.seed is not None:
            spec["seed"] = args.seed
        syn = generate_synthetic(SyntheticSpec.from_dict(spec))
    paths = syn.write(args.out)
    print(f"wrote {len(syn.flatfile)} records to {paths['flatfile']}")
    return EXIT_OK


def cmd_ingest(args, cfg):
    from .cells import write_grid_csv, write_segments_csv

    data, report = _ingest(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_grid_csv(out / "grid.csv", data.grid)
    write_segments_csv(out / "segments.csv", data.seg, data.record_id)
    pd.DataFrame({"record_id": data.record_id, "event_id": data.event_id,
                  "station_id": data.station_id, "region": data.region,
                  "eq_x_km": data.eq_xy[:, 0], "eq_y_km": data.eq_xy[:, 1],
                  "sta_x_km": data.sta_xy[:, 0], "sta_y_km": data.sta_xy[:, 1]}
                 ).to_csv(out / "records.csv", index=False)
    (out / "ingest_report.json").write_text(json.dumps(
        {"rows_in": report.rows_in, "records": report.records, "rejected": report.rejected,
         "counts": report.counts}, indent=1))
    c = report.counts
    print(f"records {c['records']}  events {c['events']}  stations {c['stations']}  "
          f"cells crossed {c['cells_crossed']}  rejected {len(report.rejected)}")
    return EXIT_OK


def cmd_fit(args, cfg):
    from .inference import SmoothedHyper, fit_phase1, fit_phase2
    from .model import Priors, prepare
    from .pipeline import substream
    from .predict import FittedFrequency

    data, _ = _ingest(args, cfg)
    freqs = args.freqs or [float(f) for f in data.freqs]
    sampler = _sampler(args, cfg)
    priors = Priors.from_dict(cfg.get("priors"))
    mode = args.mode or cfg.get("mode", "nuts")
    hyper = None
    if args.phase == 2:
        if not args.hyper:
            raise ValueError("phase 2 needs --hyper (smoothed hyperparameter CSV)")
        hyper = SmoothedHyper.read_csv(args.hyper)
    out = Path(args.out)
    failed = []
    for f in freqs:
        fd = prepare(data, f)
        s = dataclasses.replace(sampler, seed=substream(sampler.seed, "sampler", args.phase, f))
        if args.phase == 1:
            post = fit_phase1(fd, s, priors, mode)
        else:
            post = fit_phase2(fd, hyper.at(f), s, priors, mode)
            (out / "fitted").mkdir(parents=True, exist_ok=True)
            FittedFrequency.from_posterior(post, fd, hyper.at(f), data.grid).save(
                out / "fitted" / f"fitted_f{f:g}.json")
        paths = post.write(out)
        print(f"{f:g} Hz: {'converged' if post.converged else 'NOT converged'} -> {paths['summary']}")
        if not post.converged:
            failed.append(f)
    if failed:
        raise ConvergenceFailure(f"convergence gate missed at {failed} Hz")
    return EXIT_OK


def cmd_smooth(args, cfg):
    from .inference import PosteriorSummary, SmoothingRules, smooth_hyperparameters
    from .plotting import plot_smoothing

    src = Path(args.phase1_dir)
    posts = {}
    for meta in sorted(src.glob("phase1_f*_meta.json")):
        p = PosteriorSummary.read(src, meta.name[: -len("_meta.json")])
        posts[p.freq] = p
    if not posts:
        raise ValueError(f"no phase-1 summaries in {src}")
    rules = SmoothingRules.from_dict(json.loads(Path(args.rules).read_text()) if args.rules
                                     else cfg.get("smoothing"))
    sm = smooth_hyperparameters(posts, rules)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sm.write_csv(out)
    plot_smoothing(sm, out.with_suffix(".png"))
    print(f"smoothed hyperparameters at {len(sm.freqs)} frequencies -> {out}")
    return EXIT_OK


def cmd_run(args, cfg):
    from .pipeline import PipelineConfig, all_converged, run_pipeline, summary_lines

    d = dict(cfg)
    for k in ("flatfile", "c7", "grid", "zone"):
        v = getattr(args, k, None)
        if v is not None:
            d[k] = v
    if args.out:
        d["out_dir"] = args.out
    if args.freqs:
        d["freqs"] = args.freqs
    if args.phase1_freqs:
        d["phase1_freqs"] = args.phase1_freqs
    if args.phase:
        d["phase"] = args.phase
    if args.phase1_bundle:
        d["phase1_bundle"] = args.phase1_bundle
    if args.mode:
        d["mode"] = args.mode
    if args.seed is not None:
        d["seed"] = args.seed
    if args.workers is not None:
        d["workers"] = args.workers
    if args.no_figures:
        d["figures"] = False
    d["sampler"] = _sampler(argparse.Namespace(**{**vars(args), "seed": None}), d).to_dict()
    missing = [k for k in ("flatfile", "c7", "out_dir") if not d.get(k)]
    if missing:
        raise ValueError(f"missing required settings: {missing}")
    bundle = run_pipeline(PipelineConfig.from_dict(d))
    print("\n".join(summary_lines(bundle)))
    if not all_converged(bundle):
        raise ConvergenceFailure("at least one fit missed the convergence gate")
    return EXIT_OK


def _bundle(path):
    from .pipeline import ModelBundle

    return ModelBundle.load(path)


def cmd_predict(args, cfg):
    from .geo import classify_region, GeoPoint, latlon_to_utm, load_polygons
    from .predict import predict_scenario

    b = _bundle(args.bundle)
    zone = b.manifest["config"].get("zone", "11S")
    eq = latlon_to_utm(args.eq[0], args.eq[1], zone)
    sta = latlon_to_utm(args.sta[0], args.sta[1], zone)
    cls_ll = args.cls or [args.eq[0], args.eq[1], args.depth]
    cx, cy = latlon_to_utm(cls_ll[0], cls_ll[1], zone)
    region = classify_region(GeoPoint(args.eq[0], args.eq[1]), load_polygons())
    rows = []
    for f in args.freqs or sorted(b.fitted):
        p = predict_scenario(eq, sta, (cx, cy, cls_ll[2]), args.mag, f, b.fitted,
                             station_id=args.station_id, region=region, aleatory=b.aleatory)
        rows.append({"freq": f, "median_adjustment": p.median_adjustment, "epistemic_sd": p.epistemic_sd,
                     "tau0": p.aleatory_sd["tau0"], "phi0": p.aleatory_sd["phi0"],
                     "total_sigma": p.aleatory_sd["total"], "rrup_km": p.rrup_km,
                     "n_clamped": p.n_clamped,
                     **{f"{k}_mean": m for k, (m, _) in p.terms.items()}})
    df = pd.DataFrame(rows)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        if out.suffix == ".json":
            out.write_text(df.to_json(orient="records", indent=1))
        else:
            df.to_csv(out, index=False)
    print(df.to_string(index=False))
    return EXIT_OK


def cmd_map(args, cfg):
    from .plotting import plot_map
    from .predict import export_coefficient_map, query_grid

    b = _bundle(args.bundle)
    hits = [f for f in b.fitted if math.isclose(f, args.freq, rel_tol=1e-6)]
    if not hits:
        raise KeyError(f"frequency {args.freq} not in bundle; available: {sorted(b.fitted)}")
    ff = b.fitted[hits[0]]
    g = b.grid
    bbox = ((args.bbox[0], args.bbox[1]), (args.bbox[2], args.bbox[3])) if args.bbox else \
        ((g.origin.x, g.origin.y), (g.x_max, g.y_max))
    fld = getattr(ff, args.term)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    df = export_coefficient_map(fld, query_grid(bbox, args.res), out,
                                zone=b.manifest["config"].get("zone", "11S"))
    plot_map(df, args.term, ff.freq, out.with_suffix(".png"))
    print(f"{len(df)} points -> {out}")
    return EXIT_OK


def cmd_correlate(args, cfg):
    from .ifcorr import (CorrelationFitError, empirical_correlations, fit_correlation_model,
                         save_models)
    from .pipeline import term_values
    from .model import prepare
    from .plotting import plot_correlations

    b = _bundle(args.bundle)
    data, _ = _ingest(argparse.Namespace(
        flatfile=b.manifest["config"]["flatfile"], c7=b.manifest["config"]["c7"],
        grid=str(b.path / "grid.csv"), zone=b.manifest["config"].get("zone")), cfg)
    per_term = {}
    for f in sorted(b.fitted):
        vals = term_values(b.posterior(2, f), prepare(data, f))
        for t, v in vals.items():
            per_term.setdefault(t, {})[f] = v
    models, emp = {}, {}
    for t, values in per_term.items():
        emp[t] = empirical_correlations(values)
        try:
            models[t] = fit_correlation_model(emp[t])
        except (ValueError, CorrelationFitError) as exc:
            print(f"{t}: not fitted ({exc})")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_models(out, models)
    if models:
        plot_correlations(models, emp, out.with_suffix(".png"))
    for t, m in sorted(models.items()):
        print(f"{t}: A={m.A:.3f} B={m.B:.3f} C={m.C:.3f} D={m.D:.3f}")
    return EXIT_OK


def cmd_sample_spectra(args, cfg):
    from .ifcorr import CorrelationModel, load_models, sample_correlated_terms
    from .plotting import plot_spectra

    b = _bundle(args.bundle)
    models = {} if args.reference else dict(b.correlation)
    if args.correlation:
        models = load_models(args.correlation)
    for t in TERMS:
        models.setdefault(t, CorrelationModel.reference(t))
    if b.smoothed is None:
        raise ValueError("bundle has no smoothed hyperparameters")
    freqs = args.freqs or sorted(b.fitted)
    hs = [b.smoothed.at(f) for f in freqs]
    sds = {"dc1e": [h.omega_1e for h in hs], "dc1as": [h.omega_1as for h in hs],
           "dc1bs": [h.omega_1bs for h in hs],
           "c_ca": [math.hypot(h.omega_ca1, h.omega_ca2) for h in hs]}
    seed = args.seed if args.seed is not None else 0
    draws = sample_correlated_terms(models, sds, freqs, seed=seed, n_samples=args.n)
    rows = [{"sample": i, "term": t, "freq": f, "value": float(v[i, j])}
            for t, v in sorted(draws.items()) for i in range(args.n) for j, f in enumerate(freqs)]
    df = pd.DataFrame(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(out, index=False)
    plot_spectra(df, out.with_suffix(".png"))
    print(f"{args.n} samples x {len(freqs)} frequencies -> {out}")
    return EXIT_OK


def cmd_crossval(args, cfg):
    from .inference import SmoothedHyper
    from .plotting import plot_crossval
    from .validate import crossval

    data, _ = _ingest(args, cfg)
    if args.hyper:
        hyper = SmoothedHyper.read_csv(args.hyper).at(args.freq)
    elif args.bundle:
        hyper = _bundle(args.bundle).smoothed.at(args.freq)
    else:
        raise ValueError("crossval needs --hyper or --bundle")
    rep = crossval(data, hyper, args.freq, k=args.k, seed=args.seed or 0, sampler=_sampler(args, cfg),
                   mode=args.mode or cfg.get("mode", "nuts"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rep.to_dict(), indent=1))
    plot_crossval(rep, out.with_suffix(".png"))
    for fr in rep.folds:
        print(f"fold {fr.fold}: n={fr.n_test} non-ergodic {fr.rmse_nonergodic:.4f} "
              f"ergodic {fr.rmse_ergodic:.4f}")
    print(f"rmse ratio {rep.ratio:.4f}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nonergodic-eas",
                                 description="Non-ergodic Fourier amplitude model tools")
    ap.add_argument("--config", help="JSON configuration file")
    ap.add_argument("--seed", type=int, help="root random seed")
    ap.add_argument("--workers", type=int, help="concurrent per-frequency jobs (run)")
    ap.add_argument("--verbose", "-v", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic flatfile")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON overrides for the synthetic configuration")
    p.add_argument("--fixture", action="store_true", help="regenerate the shipped 200-record fixture")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="project, classify and segment a flatfile")
    _data_args(p)
    p.add_argument("--polygons", help="region polygon JSON")
    p.add_argument("--cell-size", dest="cell_size", type=float)
    p.add_argument("--skip-bad-rows", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="phase-1 or phase-2 posterior at each frequency")
    p.add_argument("--phase", type=int, choices=(1, 2), required=True)
    _data_args(p, freqs=True)
    p.add_argument("--hyper", help="smoothed hyperparameter CSV (phase 2)")
    _sampler_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("smooth", help="smooth phase-1 hyperparameters across frequency")
    p.add_argument("--phase1-dir", dest="phase1_dir", required=True)
    p.add_argument("--rules", help="JSON smoothing rules")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser("run", help="full two-phase pipeline into a model bundle")
    p.add_argument("--flatfile")
    p.add_argument("--c7")
    p.add_argument("--grid")
    p.add_argument("--zone")
    p.add_argument("--freqs", type=_freq_list)
    p.add_argument("--phase1-freqs", dest="phase1_freqs", type=_freq_list)
    p.add_argument("--phase", choices=("both", "1", "2"))
    p.add_argument("--phase1-bundle", dest="phase1_bundle")
    p.add_argument("--no-figures", dest="no_figures", action="store_true")
    _sampler_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("predict", help="scenario median adjustment and uncertainty")
    p.add_argument("--bundle", required=True)
    p.add_argument("--eq", nargs=2, type=float, metavar=("LAT", "LON"), required=True)
    p.add_argument("--sta", nargs=2, type=float, metavar=("LAT", "LON"), required=True)
    p.add_argument("--cls", nargs=3, type=float, metavar=("LAT", "LON", "DEPTH_KM"),
                   help="closest point on the rupture (default: epicentre at --depth)")
    p.add_argument("--depth", type=float, default=8.0)
    p.add_argument("--mag", type=float, required=True)
    p.add_argument("--freqs", type=_freq_list)
    p.add_argument("--station-id", dest="station_id")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("map", help="coefficient map on a regular grid")
    p.add_argument("--bundle", required=True)
    p.add_argument("--term", choices=("dc1e", "dc1as", "c_ca"), required=True)
    p.add_argument("--freq", type=float, required=True)
    p.add_argument("--res", type=float, default=5.0, help="spacing in km")
    p.add_argument("--bbox", nargs=4, type=float, metavar=("X0", "Y0", "X1", "Y1"))
    p.add_argument("--out", required=True, help=".csv or .geojson")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("correlate", help="fit inter-frequency correlation models")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("sample-spectra", help="correlated draws of the terms across frequency")
    p.add_argument("--bundle", required=True)
    p.add_argument("--freqs", type=_freq_list)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--correlation", help="correlation model JSON (default: the bundle's)")
    p.add_argument("--reference", action="store_true", help="use the published coefficients")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_spectra)

    p = sub.add_parser("crossval", help="earthquake-grouped k-fold cross-validation")
    _data_args(p)
    p.add_argument("--freq", type=float, required=True)
    p.add_argument("--hyper")
    p.add_argument("--bundle")
    p.add_argument("--k", type=int, default=5)
    _sampler_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_crossval)
    return ap


def main(argv=None) -> int:
    from .ingest import IngestError
    from .pipeline import PipelineError

    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    invalid = (ValueError, KeyError, FileNotFoundError, IngestError, json.JSONDecodeError)
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except ConvergenceFailure as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID if isinstance(exc.cause, invalid) else EXIT_ERROR
    except invalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        logger.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
