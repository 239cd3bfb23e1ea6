"""Synthetic data generation and earthquake-grouped cross-validation."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import ifcorr
from .cells import CellGrid, Ray3, build_segment_matrix
from .geo import XY, classify_regions, load_polygons, utm_to_latlon
from .kernels import distance_matrix
from .model import REGIONS, HyperParams, apply_dc0e_mask

logger = logging.getLogger(__name__)


# -- folds -----------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict  # event_id -> fold index
    seed: int

    def test_events(self, fold: int) -> set:
        return {e for e, f in self.assignment.items() if f == fold}

    def train_events(self, fold: int) -> set:
        return {e for e, f in self.assignment.items() if f != fold}


def make_folds(events, k: int = 5, seed: int = 0) -> FoldPlan:
    """Random partition of the unique events into ``k`` near-equal folds."""
    if k < 2:
        raise ValueError("k-fold cross-validation needs k >= 2 (no held-out set otherwise)")
    uniq = sorted(set(map(str, events)))
    if k > len(uniq):
        raise ValueError(f"k={k} exceeds the number of events ({len(uniq)})")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(uniq))
    assignment = {uniq[j]: int(i % k) for i, j in enumerate(perm)}
    return FoldPlan(k, assignment, seed)


def rmse(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x**2)))


def ergodic_residuals(data, j: int) -> np.ndarray:
    """Ergodic total residuals ``ln EAS - f_erg`` at frequency index ``j``."""
    return data.residuals[:, j] - data.c7[j] * data.rrup


@dataclass
class FoldResult:
    fold: int
    n_test: int
    rmse_nonergodic: float
    rmse_ergodic: float
    converged: bool = True
    failed: bool = False


@dataclass
class CrossValReport:
    freq: float
    folds: list

    @property
    def usable(self):
        return [f for f in self.folds if not f.failed]

    @property
    def rmse_nonergodic(self) -> float:
        u = self.usable
        return float(np.mean([f.rmse_nonergodic for f in u])) if u else math.nan

    @property
    def rmse_ergodic(self) -> float:
        u = self.usable
        return float(np.mean([f.rmse_ergodic for f in u])) if u else math.nan

    @property
    def ratio(self) -> float:
        return self.rmse_nonergodic / self.rmse_ergodic

    def to_dict(self) -> dict:
        return {"freq": self.freq, "folds": [dataclasses.asdict(f) for f in self.folds],
                "rmse_nonergodic": self.rmse_nonergodic, "rmse_ergodic": self.rmse_ergodic,
                "ratio": self.ratio}


def crossval(data, hyper, freq: float, k: int = 5, seed: int = 0, sampler=None,
             priors=None, condition_events: bool = True, mode: str = "nuts") -> CrossValReport:
    """Earthquake-grouped k-fold cross-validation at one frequency.

    Each fold refits the model (hyperparameters pinned to ``hyper``) on the
    training events and predicts the held-out records with the predictive
    mean.  Input residuals are de-attenuated, so the ergodic baseline
    predicts ``c7 * R_rup`` and its error is the ergodic total residual.
    """
    from .inference import SamplerConfig, fit_phase2
    from .model import Priors, prepare
    from .predict import FittedFrequency

    sampler = sampler or SamplerConfig()
    priors = priors or Priors()
    plan = make_folds(data.event_id, k, seed)
    j = data.freq_index(freq)
    results = []
    for fold in range(k):
        test_ev = plan.test_events(fold)
        is_test = np.isin(data.event_id.astype(str), list(test_ev))
        train, test = data.subset(~is_test), data.subset(is_test)
        assert not set(train.event_id.astype(str)) & set(test.event_id.astype(str)), "event leakage"
        y_test = test.residuals[:, j]
        ok = np.isfinite(y_test)
        y_test = y_test[ok]
        test = test.subset(ok)
        erg = ergodic_residuals(test, j)
        try:
            fd = prepare(train, freq)
            post = fit_phase2(fd, hyper, dataclasses.replace(sampler, seed=sampler.seed + fold),
                              priors, mode=mode)
        except Exception as exc:  # a failed fold is reported, not fatal
            logger.warning("fold %d failed: %s", fold, exc)
            results.append(FoldResult(fold, len(y_test), math.nan, rmse(erg), False, True))
            continue
        fitted = FittedFrequency.from_posterior(post, fd, hyper, data.grid)
        pred = fitted.predict_records(test, condition_events=condition_events)
        ok = bool(post.converged)
        if not ok:
            logger.warning("fold %d missed the convergence gate; excluded from the average", fold)
        results.append(FoldResult(fold, len(y_test), rmse(y_test - pred), rmse(erg), ok, not ok))
    return CrossValReport(float(data.freqs[j]), results)


# -- synthetic data ----------------------------------------------------------


@dataclass
class SyntheticSpec:
    n_events: int = 60
    n_stations: int = 150
    grid: CellGrid = field(default_factory=lambda: CellGrid(XY(50.0, 3650.0), 25.0, 25.0, 20, 20))
    hyper: HyperParams = field(default_factory=lambda: HyperParams(
        ell_1e=40.0, omega_1e=0.1, ell_1as=30.0, omega_1as=0.3, omega_1bs=0.45,
        ell_ca1=50.0, omega_ca1=0.003, omega_ca2=0.002))
    freqs: tuple = (5.0,)
    c7: tuple = (-0.006,)
    phi0: float = 0.35
    tau0: float = 0.38
    dc0: float = 0.0
    dc0e: tuple = (0.0, 0.0)
    mag_range: tuple = (3.0, 7.0)
    depth_range: tuple = (2.0, 15.0)
    r_max: float = 200.0
    p_record: float = 0.5
    cluster_frac: float = 0.6
    n_clusters: int = 3
    cluster_sd: float = 15.0
    freq_correlated: bool = True
    zone: str = "11S"
    seed: int = 0

    def __post_init__(self):
        if self.n_events < 1 or self.n_stations < 1:
            raise ValueError("event and station counts must be positive")
        if len(self.freqs) != len(self.c7):
            raise ValueError("one c7 value per frequency is required")
        if any(f <= 0 for f in self.freqs):
            raise ValueError("frequencies must be positive")
        if self.phi0 < 0 or self.tau0 < 0:
            raise ValueError("aleatory standard deviations must be non-negative")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid"] = self.grid.to_dict()
        d["hyper"] = self.hyper.as_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "grid" in d:
            d["grid"] = CellGrid.from_dict(d["grid"])
        if "hyper" in d:
            d["hyper"] = HyperParams.from_dict(d["hyper"])
        for k in ("freqs", "c7", "dc0e", "mag_range", "depth_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SyntheticData:
    flatfile: pd.DataFrame
    c7: dict  # freq -> c7
    truth: dict
    grid: CellGrid
    spec: SyntheticSpec

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"flatfile": out / "flatfile.csv", "c7": out / "c7.json",
                 "truth": out / "truth.json", "grid": out / "grid.json"}
        self.flatfile.to_csv(paths["flatfile"], index=False)
        _dump(paths["c7"], {repr(float(f)): v for f, v in self.c7.items()})
        _dump(paths["truth"], self.truth)
        _dump(paths["grid"], self.grid.to_dict())
        return paths


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def freq_column(freq: float) -> str:
    return f"res_f{float(freq):g}"


def _freq_root(term: str, freqs, correlated: bool) -> np.ndarray:
    m = len(freqs)
    if not correlated or m == 1:
        return np.eye(m)
    R = ifcorr.repair_psd(ifcorr.correlation_matrix(ifcorr.CorrelationModel.reference(term), freqs))
    lam, V = np.linalg.eigh(R)
    return V * np.sqrt(np.clip(lam, 0.0, None))


def _gp_draw(rng, pts, omega, ell, root_f):
    """Space-frequency separable field, shape (n_pts, n_freqs)."""
    n, m = len(pts), root_f.shape[0]
    eps = rng.standard_normal((n, m))
    if n == 0 or omega == 0:
        return np.zeros((n, m))
    k = np.exp(-distance_matrix(pts) / ell) + 1e-9 * np.eye(n)
    return omega * np.linalg.cholesky(k) @ eps @ root_f.T


def _stations(rng, spec: SyntheticSpec, lo, hi):
    n_cl = int(round(spec.cluster_frac * spec.n_stations)) if spec.n_clusters > 0 else 0
    centres = rng.uniform(lo + 0.2 * (hi - lo), hi - 0.2 * (hi - lo), size=(max(spec.n_clusters, 1), 2))
    which = rng.integers(0, max(spec.n_clusters, 1), size=n_cl)
    clustered = centres[which] + rng.normal(0.0, spec.cluster_sd, size=(n_cl, 2))
    uniform = rng.uniform(lo, hi, size=(spec.n_stations - n_cl, 2))
    return np.clip(np.vstack([clustered, uniform]), lo + 0.5, hi - 0.5)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Draw a synthetic flatfile from the model's own generative process.

    Source and site constants are Gaussian-process draws at random
    locations, cell coefficients come from the cell prior with positive
    draws clipped to zero, and between/within-event terms are independent
    normals.  Terms are correlated across frequency with the reference
    inter-frequency models when ``freq_correlated`` is set.
    """
    grid = spec.grid
    rng = np.random.default_rng(spec.seed)
    lo = np.array([grid.origin.x, grid.origin.y])
    hi = np.array([grid.x_max, grid.y_max])
    if np.any(hi - lo <= 1.0):
        raise ValueError("grid too small for synthetic points")
    freqs = np.asarray(spec.freqs, dtype=float)
    c7 = np.asarray(spec.c7, dtype=float)
    nf = len(freqs)
    h = spec.hyper

    eq_xy = rng.uniform(lo + 0.5, hi - 0.5, size=(spec.n_events, 2))
    depth = rng.uniform(*spec.depth_range, size=spec.n_events)
    mag = rng.uniform(*spec.mag_range, size=spec.n_events)
    sta_xy = _stations(rng, spec, lo, hi)
    vs30 = rng.uniform(200.0, 800.0, size=spec.n_stations)

    ev_ids = [f"EQ{i:04d}" for i in range(spec.n_events)]
    st_ids = [f"ST{i:04d}" for i in range(spec.n_stations)]

    # record selection
    dist = distance_matrix(eq_xy, sta_xy)
    pick = (dist <= spec.r_max) & (rng.random(dist.shape) < spec.p_record)
    ev_idx, st_idx = np.nonzero(pick)
    if len(ev_idx) == 0:
        raise ValueError("synthetic configuration produced no records")

    # coefficient draws
    dc1e = _gp_draw(rng, eq_xy, h.omega_1e, h.ell_1e, _freq_root("dc1e", freqs, spec.freq_correlated))
    dc1as = _gp_draw(rng, sta_xy, h.omega_1as, h.ell_1as, _freq_root("dc1as", freqs, spec.freq_correlated))
    dc1bs = h.omega_1bs * rng.standard_normal((spec.n_stations, nf)) @ _freq_root(
        "dc1bs", freqs, spec.freq_correlated).T
    root_ca = _freq_root("c_ca", freqs, spec.freq_correlated)
    mids = grid.midpoints()
    c_ca = c7[None, :] + _gp_draw(rng, mids, h.omega_ca1, h.ell_ca1, root_ca)
    c_ca = c_ca + h.omega_ca2 * rng.standard_normal((grid.n_cells, nf)) @ root_ca.T
    n_clipped = int(np.sum(c_ca > 0))
    c_ca = np.minimum(c_ca, 0.0)
    dB = spec.tau0 * rng.standard_normal((spec.n_events, nf))
    dW = spec.phi0 * rng.standard_normal((len(ev_idx), nf))

    # geometry
    rays = [Ray3((eq_xy[e, 0], eq_xy[e, 1], depth[e]), (sta_xy[s, 0], sta_xy[s, 1], 0.0))
            for e, s in zip(ev_idx, st_idx)]
    rrup = np.array([r.length for r in rays])
    seg = build_segment_matrix(grid, rays)

    eq_lat, eq_lon = utm_to_latlon(eq_xy[:, 0], eq_xy[:, 1], spec.zone)
    st_lat, st_lon = utm_to_latlon(sta_xy[:, 0], sta_xy[:, 1], spec.zone)
    region = classify_regions(eq_lat, eq_lon, load_polygons())
    rec_region = region[ev_idx]

    y = np.empty((len(ev_idx), nf))
    for j, f in enumerate(freqs):
        sel = apply_dc0e_mask(mag[ev_idx], f, rec_region)
        dc0e = np.zeros(len(ev_idx))
        for r, lab in enumerate(REGIONS):
            dc0e[sel == lab] = spec.dc0e[r]
        y[:, j] = (spec.dc0 + dc0e + dc1e[ev_idx, j] + dc1as[st_idx, j] + dc1bs[st_idx, j]
                   + seg @ c_ca[:, j] + dB[ev_idx, j] + dW[:, j])

    cols = {
        "event_id": [ev_ids[e] for e in ev_idx],
        "station_id": [st_ids[s] for s in st_idx],
        "mag": mag[ev_idx],
        "rrup_km": rrup,
        "vs30": vs30[st_idx],
        "eq_lat": eq_lat[ev_idx], "eq_lon": eq_lon[ev_idx],
        "sta_lat": st_lat[st_idx], "sta_lon": st_lon[st_idx],
        "cls_lat": eq_lat[ev_idx], "cls_lon": eq_lon[ev_idx],
        "cls_depth_km": depth[ev_idx],
    }
    for j, f in enumerate(freqs):
        cols[freq_column(f)] = y[:, j]
    flat = pd.DataFrame(cols)

    def per(ids, arr):
        return {i: arr[k].tolist() for k, i in enumerate(ids)}

    truth = {
        "freqs": freqs.tolist(), "c7": c7.tolist(), "hyper": h.as_dict(),
        "phi0": spec.phi0, "tau0": spec.tau0, "dc0": spec.dc0,
        "dc0e": dict(zip(REGIONS, map(float, spec.dc0e))),
        "n_clipped_cells": n_clipped,
        "events": {i: {"x": float(eq_xy[k, 0]), "y": float(eq_xy[k, 1]), "depth": float(depth[k]),
                       "mag": float(mag[k])} for k, i in enumerate(ev_ids)},
        "stations": {i: {"x": float(sta_xy[k, 0]), "y": float(sta_xy[k, 1])}
                     for k, i in enumerate(st_ids)},
        "dc1e": per(ev_ids, dc1e), "dc1as": per(st_ids, dc1as), "dc1bs": per(st_ids, dc1bs),
        "dB": per(ev_ids, dB), "c_ca": {str(c): c_ca[c].tolist() for c in range(grid.n_cells)},
    }
    if n_clipped:
        logger.debug("clipped %d positive cell draws to zero", n_clipped)
    return SyntheticData(flat, {float(f): float(c) for f, c in zip(freqs, c7)}, truth, grid, spec)


# -- synthetic recovery ----------------------------------------------------------

RECOVERY_NAMES = ("ell_1as", "omega_1as", "omega_1bs", "phi0", "tau0")


@dataclass
class RecoveryReport:
    names: tuple
    seeds: list
    truth: dict  # name -> generating value
    intervals: dict  # name -> list of (q05, q95) per seed
    converged: list
    runtimes: list

    def covered(self, name: str) -> np.ndarray:
        t = self.truth[name]
        return np.array([lo <= t <= hi for lo, hi in self.intervals[name]])

    def coverage(self, name: str) -> float:
        return float(np.mean(self.covered(name)))

    def to_dict(self) -> dict:
        return {"names": list(self.names), "seeds": self.seeds, "truth": self.truth,
                "intervals": {k: [list(map(float, iv)) for iv in v] for k, v in self.intervals.items()},
                "coverage": {k: self.coverage(k) for k in self.intervals},
                "converged": self.converged, "runtimes_s": self.runtimes}


def recovery_study(seeds, spec: SyntheticSpec | None = None, sampler=None,
                   names=RECOVERY_NAMES, report_all: bool = True) -> RecoveryReport:
    """Repeat generate -> phase-1 fit over ``seeds`` and record 5-95% intervals.

    Coverage is reported for ``names``; with ``report_all`` the remaining
    hyperparameters are recorded too.
    """
    import time

    from .inference import SamplerConfig, fit_phase1
    from .ingest import ingest
    from .model import HYPER_NAMES, prepare

    spec = spec or SyntheticSpec()
    sampler = sampler or SamplerConfig(chains=1, warmup=150, draws=150, max_tree_depth=6)
    tracked = list(names) + ([k for k in HYPER_NAMES if k not in names] if report_all else [])
    truth = {k: (getattr(spec.hyper, k) if k in HYPER_NAMES else getattr(spec, k)) for k in tracked}
    intervals = {k: [] for k in tracked}
    converged, runtimes = [], []
    for s in seeds:
        syn = generate_synthetic(dataclasses.replace(spec, seed=int(s)))
        data, _ = ingest(syn.flatfile, syn.c7, zone=spec.zone, grid=syn.grid)
        fd = prepare(data, float(spec.freqs[0]))
        t0 = time.perf_counter()
        post = fit_phase1(fd, dataclasses.replace(sampler, seed=int(s)))
        runtimes.append(time.perf_counter() - t0)
        converged.append(bool(post.converged))
        for k in tracked:
            intervals[k].append((post.block(k, "q05"), post.block(k, "q95")))
        logger.info("recovery seed %s: %.0f s", s, runtimes[-1])
    return RecoveryReport(tuple(names), [int(s) for s in seeds], truth, intervals, converged, runtimes)


# -- shipped fixture -------------------------------------------------------------

FIXTURE_RECORDS = 200
FIXTURE_FILES = {"flatfile": "fixture_flatfile.csv", "c7": "fixture_c7.json",
                 "grid": "fixture_grid.json"}


def fixture_spec() -> SyntheticSpec:
    """Small six-frequency configuration behind the shipped fixture."""
    return SyntheticSpec(
        n_events=20, n_stations=30, grid=CellGrid(XY(350.0, 3750.0), 20.0, 20.0, 6, 6),
        freqs=(0.5, 1.0, 2.5, 4.0, 7.0, 12.0),
        c7=(-0.002, -0.003, -0.004, -0.005, -0.006, -0.008),
        p_record=0.45, n_clusters=2, cluster_sd=10.0, seed=7)


def make_fixture() -> SyntheticData:
    """Regenerate the shipped fixture: the first 200 records of :func:`fixture_spec`."""
    syn = generate_synthetic(fixture_spec())
    if len(syn.flatfile) < FIXTURE_RECORDS:
        raise RuntimeError("fixture configuration yields too few records")
    syn.flatfile = syn.flatfile.iloc[:FIXTURE_RECORDS].reset_index(drop=True)
    return syn


def fixture_paths() -> dict:
    """Filesystem paths of the shipped fixture files."""
    from importlib import resources

    base = resources.files("nonergodic_eas.resources")
    return {k: Path(str(base.joinpath(v))) for k, v in FIXTURE_FILES.items()}
