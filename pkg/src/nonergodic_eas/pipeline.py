"""End-to-end two-phase run and the on-disk model bundle.

Bundle layout (paths relative to the bundle directory)::

    manifest.json              config, config hash, sha256 of every data file
    grid.csv, segments.csv     geometry used for the fit
    ingest_report.json
    phase1/                    per-frequency summaries, draws and meta (phase 1)
    smoothed_hyper.csv
    phase2/                    per-frequency summaries, draws and meta (phase 2)
    fitted/fitted_f<freq>.json predictive state per frequency
    aleatory.json              when at least five frequencies were fitted
    correlation.json           when the correlation fit had enough data
    figures/                   report images, not covered by the hash
    run_log.json               timings, not covered by the hash
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import __version__
from .aleatory import AleatoryModel, raw_phi0_by_magnitude, smooth_aleatory
from .cells import CellGrid, read_grid_csv, write_grid_csv, write_segments_csv
from .ifcorr import (CorrelationFitError, empirical_correlations, fit_correlation_model,
                     load_models, save_models)
from .inference import (PosteriorSummary, SamplerConfig, SmoothedHyper, SmoothingRules,
                        fit_phase1, fit_phase2, smooth_hyperparameters)
from .ingest import ingest
from .model import ModelParams, Priors, fitted_values, prepare
from .predict import FittedFrequency

logger = logging.getLogger(__name__)

BUNDLE_FORMAT = 1
UNHASHED = ("figures", "run_log.json", "manifest.json", "diagnostics.json")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def substream(root: int, name: str, *keys) -> int:
    """Deterministic child seed for a named use of the root seed."""
    text = "/".join([str(int(root)), name, *(repr(k) for k in keys)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little") & 0x7FFFFFFF


@dataclass
class PipelineConfig:
    flatfile: str
    c7: object  # path to JSON or {freq: c7}
    out_dir: str
    grid: str | None = None
    cell_size: float = 25.0
    zone: str = "11S"
    polygons: str | None = None
    freqs: list | None = None
    phase1_freqs: list | None = None
    phase: str = "both"  # "both", "1" or "2"
    phase1_bundle: str | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    mode: str = "nuts"
    smoothing: SmoothingRules = field(default_factory=SmoothingRules)
    priors: dict = field(default_factory=dict)
    seed: int = 0
    workers: int = 1
    figures: bool = True
    on_error: str = "raise"

    def __post_init__(self):
        if isinstance(self.sampler, dict):
            self.sampler = SamplerConfig.from_dict(self.sampler)
        if isinstance(self.smoothing, dict):
            self.smoothing = SmoothingRules.from_dict(self.smoothing)
        for name in ("freqs", "phase1_freqs"):
            v = getattr(self, name)
            if v is None:
                continue
            v = [float(f) for f in v]
            if any(f <= 0 for f in v):
                raise ValueError(f"{name}: frequencies must be positive")
            if any(b <= a for a, b in zip(v, v[1:])):
                raise ValueError(f"{name}: frequencies must be strictly increasing")
            setattr(self, name, v)
        if self.phase not in ("both", "1", "2"):
            raise ValueError("phase must be 'both', '1' or '2'")
        if self.phase == "2" and not self.phase1_bundle:
            raise ValueError("a phase-2-only run needs phase1_bundle")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        Priors.from_dict(self.priors)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sampler"] = self.sampler.to_dict()
        d["smoothing"] = self.smoothing.to_dict()
        if isinstance(self.c7, dict):
            d["c7"] = {repr(float(k)): float(v) for k, v in self.c7.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def hash(self) -> str:
        """Hash of everything that affects results (not workers or figures)."""
        d = self.to_dict()
        for k in ("out_dir", "workers", "figures"):
            d.pop(k)
        for k in ("flatfile", "grid", "polygons", "phase1_bundle") + (("c7",) if isinstance(self.c7, str) else ()):
            if d.get(k):
                p = Path(d[k])
                d[k] = {"name": p.name, "sha256": _sha256(p) if p.is_file() else None}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hashed_files(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root)
        if p.is_file() and rel.parts[0] not in UNHASHED:
            out[rel.as_posix()] = _sha256(p)
    return out


def bundle_hash(files: dict) -> str:
    return hashlib.sha256(json.dumps(files, sort_keys=True).encode()).hexdigest()


def _fit_job(args):
    phase, fd, hyper, sampler, priors, mode = args
    if phase == 1:
        return fit_phase1(fd, sampler, priors, mode)
    return fit_phase2(fd, hyper, sampler, priors, mode)


def _run_jobs(jobs: list, workers: int) -> list:
    if workers == 1 or len(jobs) == 1:
        return [_fit_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn")) as ex:
        return list(ex.map(_fit_job, jobs))


def _posterior_means(post: PosteriorSummary, fd) -> ModelParams:
    b = post.block
    dc0e = b("dc0e") if "dc0e" in post.blocks else np.zeros(2)
    return ModelParams(b("dc0"), np.asarray(dc0e), b("dc1e"), b("dc1as"), b("dc1bs"),
                       b("c_ca"), b("dB"), b("phi0"), b("tau0"))


def term_values(post: PosteriorSummary, fd) -> dict:
    """Posterior means keyed by the instance each term belongs to."""
    dc1e = post.block("dc1e")
    ev_loc = np.zeros(len(fd.event_ids), dtype=int)
    ev_loc[fd.ev_idx] = fd.eqloc_idx
    sta_loc = np.zeros(len(fd.station_ids), dtype=int)
    sta_loc[fd.sta_idx] = fd.staloc_idx
    return {
        "dc1e": {str(e): float(dc1e[ev_loc[i]]) for i, e in enumerate(fd.event_ids)},
        "dc1as": {str(s): float(post.block("dc1as")[sta_loc[i]]) for i, s in enumerate(fd.station_ids)},
        "dc1bs": {str(s): float(v) for s, v in zip(fd.station_ids, post.block("dc1bs"))},
        "c_ca": {str(int(c)): float(v) for c, v in zip(fd.cell_ids, post.block("c_ca"))},
    }


@dataclass
class ModelBundle:
    path: Path
    manifest: dict
    grid: CellGrid
    smoothed: SmoothedHyper | None
    fitted: dict  # freq -> FittedFrequency
    aleatory: AleatoryModel | None = None
    correlation: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        root = Path(path)
        manifest = json.loads((root / "manifest.json").read_text())
        fitted = {}
        for p in sorted((root / "fitted").glob("fitted_f*.json")):
            ff = FittedFrequency.load(p)
            fitted[ff.freq] = ff
        smoothed = (SmoothedHyper.read_csv(root / "smoothed_hyper.csv")
                    if (root / "smoothed_hyper.csv").exists() else None)
        aleatory = AleatoryModel.load(root / "aleatory.json") if (root / "aleatory.json").exists() else None
        corr = load_models(root / "correlation.json") if (root / "correlation.json").exists() else {}
        return cls(root, manifest, read_grid_csv(root / "grid.csv"), smoothed, fitted, aleatory, corr)

    def posterior(self, phase: int, freq: float) -> PosteriorSummary:
        return PosteriorSummary.read(self.path / f"phase{phase}", f"phase{phase}_f{freq:g}")

    def validate(self) -> list:
        """Problems found when checking files against the manifest (empty if none)."""
        problems = []
        files = _hashed_files(self.path)
        expected = self.manifest.get("files", {})
        for k in sorted(set(expected) | set(files)):
            if k not in files:
                problems.append(f"missing file {k}")
            elif k not in expected:
                problems.append(f"unlisted file {k}")
            elif files[k] != expected[k]:
                problems.append(f"hash mismatch for {k}")
        if bundle_hash(expected) != self.manifest.get("bundle_hash"):
            problems.append("bundle hash does not match file list")
        return problems


def _write_manifest(out: Path, config: PipelineConfig, extra: dict) -> dict:
    files = _hashed_files(out)
    manifest = {"format": BUNDLE_FORMAT, "package_version": __version__,
                "config": config.to_dict(), "config_hash": config.hash(),
                "files": files, "bundle_hash": bundle_hash(files), **extra}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def run_pipeline(config: PipelineConfig) -> ModelBundle:
    """ingest -> phase 1 -> smoothing -> phase 2 -> aleatory -> correlation -> bundle."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write_test"
    probe.write_text("")
    probe.unlink()
    priors = Priors.from_dict(config.priors)
    log = {"stages": {}}
    state = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            diag = {"failed_stage": name, "error": f"{type(exc).__name__}: {exc}",
                    "completed": list(log["stages"])}
            (out / "diagnostics.json").write_text(json.dumps(diag, indent=1))
            raise PipelineError(name, exc) from exc
        log["stages"][name] = round(time.perf_counter() - t0, 3)
        logger.info("stage %s done in %.1f s", name, log["stages"][name])
        return result

    def do_ingest():
        grid = None
        if config.grid:
            grid = (read_grid_csv(config.grid) if str(config.grid).endswith(".csv")
                    else CellGrid.from_dict(json.loads(Path(config.grid).read_text())))
        data, report = ingest(config.flatfile, config.c7, config.polygons, config.zone, grid,
                              config.cell_size, config.on_error)
        if data.n_records == 0:
            raise ValueError("no usable records")
        write_grid_csv(out / "grid.csv", data.grid)
        write_segments_csv(out / "segments.csv", data.seg, data.record_id)
        (out / "ingest_report.json").write_text(json.dumps(
            {"rows_in": report.rows_in, "records": report.records, "rejected": report.rejected,
             "counts": report.counts}, indent=1, sort_keys=True))
        freqs = config.freqs or [float(f) for f in data.freqs]
        for f in freqs:
            data.freq_index(f)
        state["data"], state["freqs"] = data, freqs

    def sampler_for(phase, f):
        return dataclasses.replace(config.sampler, seed=substream(config.seed, "sampler", phase, f))

    def do_phase1():
        data, freqs = state["data"], state["freqs"]
        p1 = config.phase1_freqs or freqs[::2]
        if len(p1) < 3 <= len(freqs):
            p1 = freqs
        jobs = [(1, prepare(data, f), None, sampler_for(1, f), priors, config.mode) for f in p1]
        posts = _run_jobs(jobs, config.workers)
        for p in posts:
            p.write(out / "phase1")
        state["phase1"] = {p.freq: p for p in posts}

    def do_smooth():
        if config.phase == "2":
            src = Path(config.phase1_bundle)
            smoothed = SmoothedHyper.read_csv(src / "smoothed_hyper.csv")
        else:
            posts = state["phase1"]
            if len(posts) >= 3:
                smoothed = smooth_hyperparameters(posts, config.smoothing)
            else:
                warnings.warn("fewer than 3 phase-1 frequencies: hyperparameters pinned to their "
                              "posterior means without smoothing", RuntimeWarning, stacklevel=2)
                freqs = sorted(posts)
                vals = {k: [posts[f].block(k) for f in freqs] for k in posts[freqs[0]].gate_names()}
                smoothed = SmoothedHyper(freqs, vals, vals)
        smoothed.write_csv(out / "smoothed_hyper.csv")
        state["smoothed"] = smoothed

    def do_phase2():
        data, freqs, sm = state["data"], state["freqs"], state["smoothed"]
        fds = {f: prepare(data, f) for f in freqs}
        jobs = [(2, fds[f], sm.at(f), sampler_for(2, f), priors, config.mode) for f in freqs]
        posts = _run_jobs(jobs, config.workers)
        (out / "fitted").mkdir(exist_ok=True)
        fitted = {}
        for p in posts:
            p.write(out / "phase2")
            ff = FittedFrequency.from_posterior(p, fds[p.freq], sm.at(p.freq), data.grid)
            ff.save(out / "fitted" / f"fitted_f{p.freq:g}.json")
            fitted[p.freq] = ff
        state["phase2"] = {p.freq: p for p in posts}
        state["fds"], state["fitted"] = fds, fitted

    def do_aleatory():
        posts, fds = state["phase2"], state["fds"]
        freqs = sorted(posts)
        if len(freqs) < 5:
            logger.warning("aleatory smoothing needs 5 frequencies; %d fitted, skipped", len(freqs))
            return None
        tau0, m1, m2 = [], [], []
        data = state["data"]
        for f in freqs:
            fd = fds[f]
            dW = fd.y - fitted_values(_posterior_means(posts[f], fd), fd)
            mag = data.mag[np.isfinite(data.residuals[:, data.freq_index(f)])]
            a, b = raw_phi0_by_magnitude(mag, dW, fallback=posts[f].block("phi0"))
            tau0.append(posts[f].block("tau0"))
            m1.append(a)
            m2.append(b)
        model = smooth_aleatory(freqs, tau0, m1, m2)
        model.save(out / "aleatory.json")
        state["aleatory"] = model

    def do_correlation():
        posts, fds = state["phase2"], state["fds"]
        per_term = {}
        for f in sorted(posts):
            for term, vals in term_values(posts[f], fds[f]).items():
                per_term.setdefault(term, {})[f] = vals
        models, empirical = {}, {}
        for term, values in per_term.items():
            emp = empirical_correlations(values)
            empirical[term] = emp
            try:
                models[term] = fit_correlation_model(emp)
            except (ValueError, CorrelationFitError) as exc:
                logger.warning("correlation model for %s not fitted: %s", term, exc)
        if models:
            save_models(out / "correlation.json", models)
        state["correlation"], state["empirical"] = models, empirical

    stage("ingest", do_ingest)
    if config.phase in ("both", "1"):
        stage("phase1", do_phase1)
    if config.phase == "1":
        if len(state["phase1"]) >= 3:
            stage("smooth", do_smooth)
    else:
        stage("smooth", do_smooth)
        stage("phase2", do_phase2)
        stage("aleatory", do_aleatory)
        stage("correlation", do_correlation)

    converged = {f"phase{ph}": {repr(f): bool(p.converged) for f, p in state.get(f"phase{ph}", {}).items()}
                 for ph in (1, 2)}
    manifest = _write_manifest(out, config, {"converged": converged})

    if config.figures:
        stage("figures", lambda: _figures(out, state))
    (out / "run_log.json").write_text(json.dumps(log, indent=1))
    return ModelBundle(out, manifest, state["data"].grid, state.get("smoothed"),
                       state.get("fitted", {}), state.get("aleatory"), state.get("correlation", {}))


def _figures(out: Path, state: dict):
    from . import plotting

    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    if state.get("smoothed") is not None:
        plotting.plot_smoothing(state["smoothed"], fig_dir / "hyperparameter_smoothing.png")
    for f, ff in state.get("fitted", {}).items():
        plotting.plot_coefficients(ff, fig_dir / f"coefficients_f{f:g}.png")
    if state.get("aleatory") is not None:
        plotting.plot_aleatory(state["aleatory"], fig_dir / "aleatory.png")
    if state.get("correlation"):
        plotting.plot_correlations(state["correlation"], state["empirical"], fig_dir / "correlation.png")


def all_converged(bundle: ModelBundle) -> bool:
    conv = bundle.manifest.get("converged", {})
    return all(v for ph in conv.values() for v in ph.values())


def summary_lines(bundle: ModelBundle) -> list:
    lines = [f"bundle {bundle.path} hash {bundle.manifest['bundle_hash'][:12]}"]
    for ph, d in bundle.manifest.get("converged", {}).items():
        for f, ok in sorted(d.items(), key=lambda kv: float(kv[0])):
            lines.append(f"  {ph} {float(f):g} Hz: {'converged' if ok else 'NOT converged'}")
    return lines

