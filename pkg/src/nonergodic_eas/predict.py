"""Predictive distributions of the non-ergodic coefficients at new locations.

Coefficients at new points are obtained by conditioning the Gaussian
process on the posterior at the known points:

    mean = m0 + k^T K^-1 (mu - m0)
    cov  = K** - k^T K^-1 k + (k^T K^-1) Psi (k^T K^-1)^T

where ``Psi`` is the diagonal posterior variance at the known points.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd
import scipy.linalg as sla

from .cells import CellGrid, Ray3, segment_ray
from .geo import utm_to_latlon
from .kernels import JITTER, KernelSpec, cov_matrix, cross_cov, distance_matrix
from .model import REGIONS, HyperParams, apply_dc0e_mask

TERMS = ("dc1e", "dc1as", "c_ca")
JITTER_STEPS = 5


@dataclass
class CoefficientField:
    """Posterior of one spatially varying term at its known locations."""

    term: str
    known_xy: np.ndarray
    posterior_mean: np.ndarray
    posterior_sd: np.ndarray
    kernel: KernelSpec
    prior_mean: float = 0.0

    def __post_init__(self):
        if self.term not in TERMS:
            raise ValueError(f"unknown term {self.term!r}; expected one of {TERMS}")
        self.known_xy = np.asarray(self.known_xy, dtype=float).reshape(-1, 2)
        self.posterior_mean = np.asarray(self.posterior_mean, dtype=float).ravel()
        self.posterior_sd = np.asarray(self.posterior_sd, dtype=float).ravel()
        n = len(self.known_xy)
        if len(self.posterior_mean) != n or len(self.posterior_sd) != n:
            raise ValueError("known locations, means and sds must have equal length")
        if np.any(self.posterior_sd < 0):
            raise ValueError("posterior sds must be non-negative")

    @property
    def clamped(self) -> bool:
        return self.term == "c_ca"

    @cached_property
    def _factor(self):
        """(K, Cholesky factor); diagonal jitter only when K is numerically singular."""
        K = cov_matrix(self.kernel, self.known_xy)
        scale = max(self.kernel.prior_variance, 1e-300)
        for jitter in (0.0,) + tuple(JITTER * 10.0**i for i in range(JITTER_STEPS)):
            Kj = K + jitter * scale * np.eye(len(K))
            try:
                return Kj, sla.cho_factor(Kj, lower=True)
            except np.linalg.LinAlgError:
                continue
        raise np.linalg.LinAlgError(f"{self.term}: known-point covariance is not factorizable")

    @property
    def _chol(self):
        return self._factor[1]

    def _same(self, a, b):
        if not self.kernel.has_nugget:
            return None
        return distance_matrix(a, b) < 1e-9

    def to_dict(self) -> dict:
        return {"term": self.term, "known_xy": self.known_xy.tolist(),
                "posterior_mean": self.posterior_mean.tolist(),
                "posterior_sd": self.posterior_sd.tolist(),
                "kernel": {"omega": self.kernel.omega, "ell": self.kernel.ell,
                           "omega_nugget": self.kernel.omega_nugget, "family": self.kernel.family},
                "prior_mean": self.prior_mean}

    @classmethod
    def from_dict(cls, d) -> "CoefficientField":
        return cls(d["term"], np.asarray(d["known_xy"], dtype=float).reshape(-1, 2),
                   d["posterior_mean"], d["posterior_sd"], KernelSpec(**d["kernel"]),
                   float(d["prior_mean"]))


@dataclass
class Conditioned:
    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray | None = None
    n_clamped: int = 0

    def __iter__(self):
        yield self.mean
        yield self.cov if self.cov is not None else np.diag(self.var)

    @property
    def sd(self):
        return np.sqrt(self.var)


def _floor_psd(c):
    c = 0.5 * (c + c.T)
    lam, V = np.linalg.eigh(c)
    if lam.min() >= 0:
        return c
    return (V * np.maximum(lam, 0.0)) @ V.T


def condition_field(fld: CoefficientField, new_pts, full_cov: bool = True) -> Conditioned:
    """Predictive mean and covariance of ``fld`` at ``new_pts``.

    With ``full_cov=False`` only the marginal variances are formed, which
    keeps large map grids tractable.  For cell coefficients the mean is
    clamped at zero and the number of clamped entries is reported.
    """
    new = np.asarray(new_pts, dtype=float).reshape(-1, 2)
    kern = fld.kernel
    prior_var = kern.prior_variance
    if len(new) == 0:
        return Conditioned(np.zeros(0), np.zeros(0), np.zeros((0, 0)) if full_cov else None)
    if len(fld.known_xy) == 0:
        mean = np.full(len(new), fld.prior_mean)
        kss = cov_matrix(kern, new) if full_cov else None
        var = np.full(len(new), prior_var)
        return Conditioned(mean, var, kss)

    k = cross_cov(kern, fld.known_xy, new, fld._same(fld.known_xy, new))
    A = sla.cho_solve(fld._chol, k).T  # k^T K^-1
    mean = fld.prior_mean + A @ (fld.posterior_mean - fld.prior_mean)
    psi = fld.posterior_sd**2
    if full_cov:
        kss = cov_matrix(kern, new)
        cov = kss - A @ k + (A * psi) @ A.T
        cov = _floor_psd(cov)
        var = np.clip(np.diag(cov).copy(), 0.0, None)
    else:
        cov = None
        var = prior_var - np.einsum("ij,ji->i", A, k) + (A**2) @ psi
        var = np.clip(var, 0.0, None)
    n_clamped = 0
    if fld.clamped:
        n_clamped = int(np.sum(mean > 0))
        mean = np.minimum(mean, 0.0)
    return Conditioned(mean, var, cov, n_clamped)


def predictive_mean_prior_form(fld: CoefficientField, new_pts):
    """Conditional mean and covariance ignoring posterior uncertainty (Psi = 0)."""
    new = np.asarray(new_pts, dtype=float).reshape(-1, 2)
    K = fld._factor[0]
    k = cross_cov(fld.kernel, fld.known_xy, new, fld._same(fld.known_xy, new))
    kss = cov_matrix(fld.kernel, new)
    sol = np.linalg.solve(K, k)
    return fld.prior_mean + sol.T @ (fld.posterior_mean - fld.prior_mean), kss - k.T @ sol


# -- fitted model at one frequency -------------------------------------------


@dataclass
class ScenarioPrediction:
    median_adjustment: float
    epistemic_sd: float
    terms: dict  # name -> (mean, variance)
    aleatory_sd: dict  # tau0, phi0, total
    rrup_km: float = math.nan
    n_clamped: int = 0

    def to_dict(self) -> dict:
        return {"median_adjustment": self.median_adjustment, "epistemic_sd": self.epistemic_sd,
                "terms": {k: {"mean": m, "var": v} for k, (m, v) in self.terms.items()},
                "aleatory_sd": self.aleatory_sd, "rrup_km": self.rrup_km,
                "n_clamped": self.n_clamped}


@dataclass
class FittedFrequency:
    """Posterior summaries needed for prediction at one frequency."""

    freq: float
    c7: float
    hyper: HyperParams
    dc0: tuple  # (mean, sd)
    dc0e: dict  # region -> (mean, sd)
    dc1e: CoefficientField
    dc1as: CoefficientField
    c_ca: CoefficientField
    station_ids: list
    dc1bs_mean: np.ndarray
    dc1bs_sd: np.ndarray
    phi0: float
    tau0: float
    grid: CellGrid
    _cell_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_posterior(cls, post, fd, hyper: HyperParams, grid: CellGrid) -> "FittedFrequency":
        b = post.block
        h = hyper
        dc0e = {r: (0.0, 0.0) for r in REGIONS}
        if "dc0e" in post.blocks:
            m, s = b("dc0e", "mean"), b("dc0e", "sd")
            dc0e = {r: (float(m[i]), float(s[i])) for i, r in enumerate(REGIONS)}
        return cls(
            freq=fd.freq, c7=fd.c7, hyper=h,
            dc0=(float(b("dc0", "mean")), float(b("dc0", "sd"))),
            dc0e=dc0e,
            dc1e=CoefficientField("dc1e", fd.eq_locs, b("dc1e", "mean"), b("dc1e", "sd"),
                                  KernelSpec(h.omega_1e, h.ell_1e)),
            dc1as=CoefficientField("dc1as", fd.sta_locs, b("dc1as", "mean"), b("dc1as", "sd"),
                                   KernelSpec(h.omega_1as, h.ell_1as)),
            c_ca=CoefficientField("c_ca", fd.cell_xy, b("c_ca", "mean"), b("c_ca", "sd"),
                                  KernelSpec(h.omega_ca1, h.ell_ca1, h.omega_ca2,
                                             "exponential-plus-nugget"), prior_mean=fd.c7),
            station_ids=[str(s) for s in fd.station_ids],
            dc1bs_mean=np.asarray(b("dc1bs", "mean")), dc1bs_sd=np.asarray(b("dc1bs", "sd")),
            phi0=float(b("phi0", "mean")), tau0=float(b("tau0", "mean")), grid=grid,
        )

    def to_dict(self) -> dict:
        return {"freq": self.freq, "c7": self.c7, "hyper": self.hyper.as_dict(),
                "dc0": list(self.dc0), "dc0e": {k: list(v) for k, v in self.dc0e.items()},
                "dc1e": self.dc1e.to_dict(), "dc1as": self.dc1as.to_dict(),
                "c_ca": self.c_ca.to_dict(), "station_ids": self.station_ids,
                "dc1bs_mean": self.dc1bs_mean.tolist(), "dc1bs_sd": self.dc1bs_sd.tolist(),
                "phi0": self.phi0, "tau0": self.tau0, "grid": self.grid.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "FittedFrequency":
        return cls(float(d["freq"]), float(d["c7"]), HyperParams.from_dict(d["hyper"]),
                   tuple(d["dc0"]), {k: tuple(v) for k, v in d["dc0e"].items()},
                   CoefficientField.from_dict(d["dc1e"]), CoefficientField.from_dict(d["dc1as"]),
                   CoefficientField.from_dict(d["c_ca"]), list(d["station_ids"]),
                   np.asarray(d["dc1bs_mean"], dtype=float), np.asarray(d["dc1bs_sd"], dtype=float),
                   float(d["phi0"]), float(d["tau0"]), CellGrid.from_dict(d["grid"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "FittedFrequency":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def cell_means(self) -> np.ndarray:
        """Conditioned (clamped) cell coefficients over the full grid."""
        if "all" not in self._cell_cache:
            self._cell_cache["all"] = condition_field(self.c_ca, self.grid.midpoints(), full_cov=False)
        return self._cell_cache["all"].mean

    def _station(self, station_id):
        if station_id is not None:
            try:
                i = self.station_ids.index(str(station_id))
                return float(self.dc1bs_mean[i]), float(self.dc1bs_sd[i]) ** 2
            except ValueError:
                pass
        return 0.0, self.hyper.omega_1bs**2

    def predict_records(self, data, condition_events: bool = True) -> np.ndarray:
        """Predictive-mean residuals for every record of ``data`` at this frequency."""
        n = data.n_records
        if n == 0:
            return np.zeros(0)
        out = np.full(n, self.dc0[0])
        sel = apply_dc0e_mask(data.mag, self.freq, data.region)
        for r in REGIONS:
            out[sel == r] += self.dc0e[r][0]
        if condition_events:
            out += condition_field(self.dc1e, data.eq_xy, full_cov=False).mean
        out += condition_field(self.dc1as, data.sta_xy, full_cov=False).mean
        index = {s: i for i, s in enumerate(self.station_ids)}
        out += np.array([self.dc1bs_mean[index[s]] if s in index else 0.0
                         for s in data.station_id.astype(str)])
        out += data.seg @ self.cell_means()
        return out


def predict_scenario(eq_xy, sta_xy, cls_xyz, M: float, freq: float, fitted, station_id=None,
                     region=None, aleatory=None) -> ScenarioPrediction:
    """Median non-ergodic adjustment and epistemic sd for one scenario.

    ``fitted`` maps frequency to :class:`FittedFrequency` (a single instance
    is accepted too).  Component variances are summed as independent; the
    path variance is ``dR^T Sigma dR`` over the cells the new ray crosses.
    """
    if isinstance(fitted, FittedFrequency):
        fitted = {fitted.freq: fitted}
    hit = [f for f in fitted if math.isclose(f, freq, rel_tol=1e-6)]
    if not hit:
        raise KeyError(f"frequency {freq} not fitted; available: {sorted(fitted)}")
    ff = fitted[hit[0]]
    eq = np.asarray(eq_xy, dtype=float)[:2]
    st = np.asarray(sta_xy, dtype=float)[:2]
    cls_ = np.asarray(cls_xyz, dtype=float)
    depth = float(cls_[2]) if len(cls_) > 2 else 0.0

    terms = {"dc0": (ff.dc0[0], ff.dc0[1] ** 2)}
    sel = apply_dc0e_mask(M, ff.freq, region)
    if sel is not None:
        m, s = ff.dc0e[sel]
        terms["dc0e"] = (m, s**2)
    c = condition_field(ff.dc1e, eq[None, :])
    terms["dc1e"] = (float(c.mean[0]), float(c.var[0]))
    c = condition_field(ff.dc1as, st[None, :])
    terms["dc1as"] = (float(c.mean[0]), float(c.var[0]))
    terms["dc1bs"] = ff._station(station_id)

    ray = Ray3((cls_[0], cls_[1], depth), (st[0], st[1], 0.0))
    segs = segment_ray(ff.grid, ray)
    cells = np.array([s[0] for s in segs])
    dR = np.array([s[1] for s in segs])
    c = condition_field(ff.c_ca, ff.grid.midpoints()[cells])
    terms["path"] = (float(c.mean @ dR), float(dR @ c.cov @ dR))

    median = float(sum(m for m, _ in terms.values()))
    epi = math.sqrt(max(sum(v for _, v in terms.values()), 0.0))
    if aleatory is not None:
        from .aleatory import phi0_of_mag, tau0_of_mag
        tau0, phi0 = tau0_of_mag(aleatory, M, ff.freq), phi0_of_mag(aleatory, M, ff.freq)
    else:
        tau0, phi0 = ff.tau0, ff.phi0
    ale = {"tau0": tau0, "phi0": phi0, "total": math.sqrt(tau0**2 + phi0**2)}
    return ScenarioPrediction(median, epi, terms, ale, ray.length, c.n_clamped)


# -- maps ------------------------------------------------------------------


def query_grid(bbox, res_km: float) -> np.ndarray:
    """Regular (n, 2) query points over ``((x0, y0), (x1, y1))`` at spacing ``res_km``."""
    (x0, y0), (x1, y1) = bbox
    if res_km <= 0:
        raise ValueError("resolution must be positive")
    xs = np.arange(min(x0, x1), max(x0, x1) + 1e-9, res_km)
    ys = np.arange(min(y0, y1), max(y0, y1) + 1e-9, res_km)
    X, Y = np.meshgrid(xs, ys)
    return np.column_stack([X.ravel(), Y.ravel()])


MAP_COLUMNS = ["lon", "lat", "x_km", "y_km", "mean", "sd"]


def export_coefficient_map(fld: CoefficientField, query_xy, path=None, fmt: str | None = None,
                           zone="11S") -> pd.DataFrame:
    """Tabulate the conditioned mean and sd of ``fld`` on ``query_xy``.

    Written as CSV or GeoJSON (chosen by ``fmt`` or the file suffix).
    """
    q = np.asarray(query_xy, dtype=float).reshape(-1, 2)
    c = condition_field(fld, q, full_cov=False)
    if len(q):
        lat, lon = utm_to_latlon(q[:, 0], q[:, 1], zone)
    else:
        lat = lon = np.zeros(0)
    df = pd.DataFrame({"lon": np.atleast_1d(lon), "lat": np.atleast_1d(lat), "x_km": q[:, 0],
                       "y_km": q[:, 1], "mean": c.mean, "sd": c.sd}, columns=MAP_COLUMNS)
    if path is not None:
        fmt = fmt or ("geojson" if str(path).endswith((".geojson", ".json")) else "csv")
        if fmt == "csv":
            df.to_csv(path, index=False)
        elif fmt == "geojson":
            feats = [{"type": "Feature",
                      "geometry": {"type": "Point", "coordinates": [r.lon, r.lat]},
                      "properties": {"term": fld.term, "mean": r.mean, "sd": r.sd,
                                     "x_km": r.x_km, "y_km": r.y_km}}
                     for r in df.itertuples()]
            with open(path, "w") as fh:
                json.dump({"type": "FeatureCollection", "features": feats}, fh)
        else:
            raise ValueError(f"unknown map format {fmt!r}")
    return df
