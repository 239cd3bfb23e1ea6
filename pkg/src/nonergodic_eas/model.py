"""Non-ergodic median model, parameter containers and posterior density.

The model works on residuals of the ergodic backbone with its anelastic
attenuation removed, ``y = ln EAS - f_erg + c7 * R_rup``.  At one frequency

    y = dc0 + dc0e[region] + dc1e(x_e) + dc1as(x_s) + dc1bs[s]
        + c_ca . dR + dB[e] + dW

with ``dc0e`` active only for M < 5 and f < 5 Hz.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import jax.scipy.linalg as jsl  # noqa: E402
import numpy as np  # noqa: E402
import scipy.sparse as sp  # noqa: E402

from .cells import CellGrid  # noqa: E402
from .kernels import JITTER, distance_matrix  # noqa: E402

DC0E_MAG_MAX = 5.0
DC0E_FREQ_MAX = 5.0
REGIONS = ("north", "south")
LOG_2PI = math.log(2.0 * math.pi)

HYPER_NAMES = ("ell_1e", "omega_1e", "ell_1as", "omega_1as", "omega_1bs",
               "ell_ca1", "omega_ca1", "omega_ca2")


@dataclass
class Record:
    """A single ground-motion observation at one frequency."""

    event_id: str
    station_id: str
    M: float
    R_rup: float
    V_S30: float
    eq_xy: tuple
    sta_xy: tuple
    cls_xyz: tuple
    region: Optional[str]
    residual: float

    def __post_init__(self):
        if not self.R_rup > 0:
            raise ValueError("R_rup must be positive")
        if not 2.0 <= self.M <= 9.0:
            raise ValueError(f"magnitude {self.M} outside [2, 9]")


@jax.tree_util.register_dataclass
@dataclass
class HyperParams:
    ell_1e: float
    omega_1e: float
    ell_1as: float
    omega_1as: float
    omega_1bs: float
    ell_ca1: float
    omega_ca1: float
    omega_ca2: float

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in HYPER_NAMES}

    @classmethod
    def from_dict(cls, d) -> "HyperParams":
        return cls(**{k: float(d[k]) for k in HYPER_NAMES})


@jax.tree_util.register_dataclass
@dataclass
class ModelParams:
    dc0: float
    dc0e: object  # (2,) north, south
    dc1e: object  # unique event locations
    dc1as: object  # unique station locations
    dc1bs: object  # stations
    c_ca: object  # modelled cells, <= 0
    dB: object  # events
    phi0: float
    tau0: float

    @property
    def dc0e_north(self):
        return self.dc0e[0]

    @property
    def dc0e_south(self):
        return self.dc0e[1]


@dataclass(frozen=True)
class Priors:
    """Prior distribution parameters; defaults follow the published model."""

    dc0_sd: float = 0.1
    dc0e_sd: float = 0.2
    ell_alpha: float = 2.0
    ell_beta: float = 50.0
    omega_rate: float = 20.0
    omega_1bs_logmean: float = -0.8
    omega_1bs_logsd: float = 0.3
    phi0_logmean: float = -1.3
    phi0_logsd: float = 0.3
    tau0_logmean: float = -1.0
    tau0_logsd: float = 0.3

    @classmethod
    def from_dict(cls, d: dict | None) -> "Priors":
        if not d:
            return cls()
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown prior overrides: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


# -- dataset ---------------------------------------------------------------


def _unique_index(keys):
    uniq, inv = np.unique(np.asarray(keys), return_inverse=True, axis=0)
    return uniq, inv.ravel()


@dataclass
class Dataset:
    """Column-oriented ground-motion records with their path segmentation."""

    record_id: np.ndarray
    event_id: np.ndarray
    station_id: np.ndarray
    mag: np.ndarray
    rrup: np.ndarray
    vs30: np.ndarray
    eq_xy: np.ndarray
    sta_xy: np.ndarray
    cls_xyz: np.ndarray
    region: np.ndarray  # object array of labels / None
    freqs: np.ndarray
    residuals: np.ndarray  # (n_records, n_freqs), NaN where unusable
    c7: np.ndarray  # (n_freqs,)
    seg: sp.csr_matrix
    grid: CellGrid

    def __len__(self):
        return len(self.record_id)

    @property
    def n_records(self) -> int:
        return len(self.record_id)

    def freq_index(self, freq: float) -> int:
        hits = np.flatnonzero(np.isclose(self.freqs, freq, rtol=1e-6, atol=0))
        if len(hits) == 0:
            raise KeyError(f"frequency {freq} not in dataset; available: {list(map(float, self.freqs))}")
        return int(hits[0])

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return dataclasses.replace(
            self,
            record_id=self.record_id[idx], event_id=self.event_id[idx],
            station_id=self.station_id[idx], mag=self.mag[idx], rrup=self.rrup[idx],
            vs30=self.vs30[idx], eq_xy=self.eq_xy[idx], sta_xy=self.sta_xy[idx],
            cls_xyz=self.cls_xyz[idx], region=self.region[idx],
            residuals=self.residuals[idx], seg=self.seg[idx],
        )

    def record(self, i: int, freq: float) -> Record:
        k = self.freq_index(freq)
        return Record(str(self.event_id[i]), str(self.station_id[i]), float(self.mag[i]),
                      float(self.rrup[i]), float(self.vs30[i]), tuple(self.eq_xy[i]),
                      tuple(self.sta_xy[i]), tuple(self.cls_xyz[i]), self.region[i],
                      float(self.residuals[i, k]))

    def counts(self) -> dict:
        crossed = int(np.count_nonzero(np.asarray((self.seg != 0).sum(axis=0)).ravel()))
        return {"records": self.n_records,
                "events": int(len(np.unique(self.event_id))),
                "stations": int(len(np.unique(self.station_id))),
                "cells_crossed": crossed}


def apply_dc0e_mask(mag, freq, region):
    """Which regional constant applies: ``'north'``, ``'south'`` or ``None``.

    Works elementwise on arrays, returning an object array.
    """
    scalar = np.ndim(mag) == 0 and np.ndim(region) == 0
    mag = np.atleast_1d(np.asarray(mag, dtype=float))
    region = np.atleast_1d(np.asarray(region, dtype=object))
    active = (mag < DC0E_MAG_MAX) & (freq < DC0E_FREQ_MAX)
    out = np.full(mag.shape, None, dtype=object)
    for lab in REGIONS:
        out[active & (region == lab)] = lab
    return out[0] if scalar else out


def _owner_location(owner, loc, n_owner):
    """Location index of each station (event), or None if any owner has several."""
    out = np.full(n_owner, -1)
    out[owner] = loc
    if np.any(out[owner] != loc) or np.any(out < 0):
        return None
    return out


@dataclass
class FreqData:
    """Everything the density needs at one frequency, in index form."""

    freq: float
    c7: float
    y: np.ndarray
    record_id: np.ndarray
    ev_idx: np.ndarray
    eqloc_idx: np.ndarray
    staloc_idx: np.ndarray
    sta_idx: np.ndarray
    dc0e_sel: np.ndarray  # 0 none, 1 north, 2 south
    seg_row: np.ndarray
    seg_col: np.ndarray  # index into modelled cells
    seg_val: np.ndarray
    event_ids: np.ndarray
    station_ids: np.ndarray
    eq_locs: np.ndarray  # (n_eqloc, 2)
    sta_locs: np.ndarray  # (n_staloc, 2)
    cell_ids: np.ndarray  # grid ids of modelled cells
    cell_xy: np.ndarray
    dist_eq: np.ndarray = field(repr=False, default=None)
    dist_sta: np.ndarray = field(repr=False, default=None)
    dist_cell: np.ndarray = field(repr=False, default=None)
    sta_loc: np.ndarray = field(repr=False, default=None)  # location of each station, or None
    ev_loc: np.ndarray = field(repr=False, default=None)  # location of each event, or None

    def __post_init__(self):
        self.sta_loc = _owner_location(self.sta_idx, self.staloc_idx, len(self.station_ids))
        self.ev_loc = _owner_location(self.ev_idx, self.eqloc_idx, len(self.event_ids))
        self.dist_eq = distance_matrix(self.eq_locs) if len(self.eq_locs) else np.zeros((0, 0))
        self.dist_sta = distance_matrix(self.sta_locs) if len(self.sta_locs) else np.zeros((0, 0))
        self.dist_cell = distance_matrix(self.cell_xy) if len(self.cell_xy) else np.zeros((0, 0))

    @property
    def n(self):
        return len(self.y)

    @property
    def dc0e_active(self) -> bool:
        return self.freq < DC0E_FREQ_MAX

    @property
    def sizes(self) -> dict:
        return {"dc1e": len(self.eq_locs), "dc1as": len(self.sta_locs),
                "dc1bs": len(self.station_ids), "c_ca": len(self.cell_ids),
                "dB": len(self.event_ids)}


def prepare(data: Dataset, freq: float, cells: str = "crossed") -> FreqData:
    """Index the records usable at ``freq``.

    ``cells='crossed'`` models only cells crossed by at least one path; other
    cells are recovered afterwards by conditioning.  ``cells='all'`` keeps
    every grid cell.
    """
    k = data.freq_index(freq)
    use = np.isfinite(data.residuals[:, k])
    d = data.subset(use)
    events, ev_idx = _unique_index(d.event_id.astype(str))
    stations, sta_idx = _unique_index(d.station_id.astype(str))
    eq_locs, eqloc_idx = _unique_index(np.round(d.eq_xy, 6))
    sta_locs, staloc_idx = _unique_index(np.round(d.sta_xy, 6))
    if len(d) == 0:
        eq_locs = np.zeros((0, 2))
        sta_locs = np.zeros((0, 2))

    sel = np.zeros(len(d), dtype=int)
    lab = apply_dc0e_mask(d.mag, float(data.freqs[k]), d.region)
    sel[lab == "north"] = 1
    sel[lab == "south"] = 2

    coo = sp.coo_matrix(d.seg)
    nz = coo.data != 0
    rows, cols, vals = coo.row[nz], coo.col[nz], coo.data[nz]
    if cells == "crossed":
        cell_ids = np.unique(cols)
    elif cells == "all":
        cell_ids = np.arange(data.grid.n_cells)
    else:
        raise ValueError(f"cells must be 'crossed' or 'all', got {cells!r}")
    col_map = np.full(data.grid.n_cells, -1)
    col_map[cell_ids] = np.arange(len(cell_ids))
    order = np.lexsort((cols, rows))
    return FreqData(
        freq=float(data.freqs[k]), c7=float(data.c7[k]), y=d.residuals[:, k].astype(float),
        record_id=d.record_id, ev_idx=ev_idx, eqloc_idx=eqloc_idx, staloc_idx=staloc_idx,
        sta_idx=sta_idx, dc0e_sel=sel, seg_row=rows[order], seg_col=col_map[cols[order]],
        seg_val=vals[order], event_ids=events, station_ids=stations, eq_locs=eq_locs,
        sta_locs=sta_locs, cell_ids=cell_ids, cell_xy=data.grid.midpoints()[cell_ids],
    )


# -- densities -------------------------------------------------------------


def median_nonergodic(rec: Record, params: ModelParams, seg_row, freq: float,
                      eqloc: int, staloc: int, sta: int, cell_index=None) -> float:
    """Non-ergodic adjustment to the de-attenuated backbone for one record.

    ``seg_row`` is a list of ``(cell, dR)``; ``cell_index`` maps grid cell ids
    to positions in ``params.c_ca`` (identity when omitted).
    """
    for name, idx, arr in (("event location", eqloc, params.dc1e),
                           ("station location", staloc, params.dc1as),
                           ("station", sta, params.dc1bs)):
        if idx is None or not 0 <= idx < len(arr):
            raise IndexError(f"missing {name} index {idx!r} for record {rec.event_id}/{rec.station_id}")
    total = sum(dr for _, dr in seg_row)
    if not math.isclose(total, rec.R_rup, rel_tol=1e-6):
        raise ValueError(f"segment row sums to {total} km, expected R_rup={rec.R_rup}")
    out = float(params.dc0)
    sel = apply_dc0e_mask(rec.M, freq, rec.region)
    if sel is not None:
        out += float(params.dc0e[REGIONS.index(sel)])
    out += float(params.dc1e[eqloc]) + float(params.dc1as[staloc]) + float(params.dc1bs[sta])
    for cell, dr in seg_row:
        j = cell if cell_index is None else cell_index[cell]
        out += float(params.c_ca[j]) * dr
    return out


def _median_vec(params: ModelParams, fd: FreqData):
    atten = jax.ops.segment_sum(params.c_ca[fd.seg_col] * fd.seg_val, fd.seg_row,
                                num_segments=fd.n)
    dc0e = jnp.concatenate([jnp.zeros(1), jnp.asarray(params.dc0e)])[fd.dc0e_sel]
    return (params.dc0 + dc0e + params.dc1e[fd.eqloc_idx] + params.dc1as[fd.staloc_idx]
            + params.dc1bs[fd.sta_idx] + atten)


def fitted_values(params: ModelParams, fd: FreqData) -> np.ndarray:
    """Per-record mean including the between-event term."""
    return np.asarray(_median_vec(params, fd) + params.dB[fd.ev_idx])


def _normal_lpdf(x, mu, sd):
    return -0.5 * ((x - mu) / sd) ** 2 - jnp.log(sd) - 0.5 * LOG_2PI


def log_likelihood(params: ModelParams, fd: FreqData):
    mu = _median_vec(params, fd) + params.dB[fd.ev_idx]
    return jnp.sum(_normal_lpdf(jnp.asarray(fd.y), mu, params.phi0))


def _lognormal_lpdf(x, mu, sd):
    return _normal_lpdf(jnp.log(x), mu, sd) - jnp.log(x)


def _invgamma_lpdf(x, a, b):
    return a * jnp.log(b) - jax.scipy.special.gammaln(a) - (a + 1) * jnp.log(x) - b / x


def _exp_lpdf(x, rate):
    return jnp.log(rate) - rate * x


def corr_chol(dist, ell, jitter=JITTER):
    n = dist.shape[0]
    c = jnp.exp(-jnp.asarray(dist) / ell) + jitter * jnp.eye(n)
    return jnp.linalg.cholesky(c)


def cell_chol(dist, ell, omega1, omega2, jitter=JITTER):
    n = dist.shape[0]
    var = omega1**2 + omega2**2
    k = omega1**2 * jnp.exp(-jnp.asarray(dist) / ell) + (omega2**2 + jitter * var) * jnp.eye(n)
    return jnp.linalg.cholesky(k)


def _mvn_chol_lpdf(x, mean, chol):
    z = jsl.solve_triangular(chol, x - mean, lower=True)
    return -0.5 * jnp.dot(z, z) - jnp.sum(jnp.log(jnp.diag(chol))) - 0.5 * x.shape[0] * LOG_2PI


def log_prior_hyper(h: HyperParams, priors: Priors):
    lp = 0.0
    for ell in (h.ell_1e, h.ell_1as, h.ell_ca1):
        lp += _invgamma_lpdf(ell, priors.ell_alpha, priors.ell_beta)
    for om in (h.omega_1e, h.omega_1as, h.omega_ca1, h.omega_ca2):
        lp += _exp_lpdf(om, priors.omega_rate)
    lp += _lognormal_lpdf(h.omega_1bs, priors.omega_1bs_logmean, priors.omega_1bs_logsd)
    return lp


def _scalar_priors(params: ModelParams, fd: FreqData, priors: Priors):
    lp = _normal_lpdf(params.dc0, 0.0, priors.dc0_sd)
    if fd.dc0e_active:
        lp += jnp.sum(_normal_lpdf(jnp.asarray(params.dc0e), 0.0, priors.dc0e_sd))
    lp += _lognormal_lpdf(params.phi0, priors.phi0_logmean, priors.phi0_logsd)
    lp += _lognormal_lpdf(params.tau0, priors.tau0_logmean, priors.tau0_logsd)
    return lp


def _truncate(lp, c_ca):
    return jnp.where(jnp.any(c_ca > 0.0), -jnp.inf, lp)


def log_posterior(params: ModelParams, hyper: HyperParams, fd: FreqData, phase: int = 1,
                  priors: Priors = Priors()):
    """Unnormalised log posterior in the centred parameterisation.

    In phase 2 the hyperparameters are fixed and contribute no prior term.
    The cell prior is the multivariate normal restricted to c_ca <= 0
    without its truncation normaliser; states with any positive cell
    coefficient have density -inf.
    """
    if phase not in (1, 2):
        raise ValueError("phase must be 1 or 2")
    h = hyper
    lp = log_likelihood(params, fd)
    lp += jnp.sum(_normal_lpdf(params.dB, 0.0, params.tau0))
    if fd.sizes["dc1e"]:
        lp += _mvn_chol_lpdf(params.dc1e, 0.0, h.omega_1e * corr_chol(fd.dist_eq, h.ell_1e))
    if fd.sizes["dc1as"]:
        lp += _mvn_chol_lpdf(params.dc1as, 0.0, h.omega_1as * corr_chol(fd.dist_sta, h.ell_1as))
    lp += jnp.sum(_normal_lpdf(params.dc1bs, 0.0, h.omega_1bs))
    if fd.sizes["c_ca"]:
        lp += _mvn_chol_lpdf(params.c_ca, fd.c7,
                             cell_chol(fd.dist_cell, h.ell_ca1, h.omega_ca1, h.omega_ca2))
    lp += _scalar_priors(params, fd, priors)
    if phase == 1:
        lp += log_prior_hyper(h, priors)
    return _truncate(lp, params.c_ca)


# -- non-centred parameterisation used by the samplers ----------------------


IID_FORMS = ("total", "centered", "noncentered")


def _iid_form(fd: FreqData, iid: str) -> str:
    if iid not in IID_FORMS:
        raise ValueError(f"iid must be one of {IID_FORMS}, got {iid!r}")
    if iid == "total" and (fd.sta_loc is None or fd.ev_loc is None):
        return "centered"
    return iid


def latent_shapes(fd: FreqData, phase: int, iid: str = "total") -> dict:
    """Latent layout.

    The spatially correlated vectors are always non-centred.  The iid
    station and event terms take one of three forms: ``'total'`` samples
    each station's (event's) summed adjustment and recovers the iid part by
    subtracting the spatial term, which removes the ridge between the two;
    ``'centered'`` samples them directly; ``'noncentered'`` scales standard
    normals.  ``'total'`` needs one location per station and per event and
    falls back to ``'centered'`` otherwise.
    """
    s = fd.sizes
    shapes = {"dc0": (), "z_1e": (s["dc1e"],), "z_1as": (s["dc1as"],),
              "v_ca": (s["c_ca"],), "log_phi0": (), "log_tau0": ()}
    shapes.update({
        "total": {"t_sta": (s["dc1bs"],), "t_ev": (s["dB"],)},
        "centered": {"dc1bs": (s["dc1bs"],), "dB": (s["dB"],)},
        "noncentered": {"z_1bs": (s["dc1bs"],), "z_B": (s["dB"],)},
    }[_iid_form(fd, iid)])
    if fd.dc0e_active:
        shapes["dc0e"] = (2,)
    if phase == 1:
        shapes["log_hyper"] = (len(HYPER_NAMES),)
    return shapes


def initial_latent(fd: FreqData, phase: int, priors: Priors = Priors(), hyper0=None,
                   iid: str = "total") -> dict:
    """Start at the prior centre: all latent normals zero, c_ca = c7."""
    out = {k: np.zeros(v) for k, v in latent_shapes(fd, phase, iid).items()}
    out["v_ca"] = np.full(fd.sizes["c_ca"], math.log(max(-fd.c7, 1e-6)))
    out["log_phi0"] = np.array(priors.phi0_logmean)
    out["log_tau0"] = np.array(priors.tau0_logmean)
    if phase == 1:
        h0 = hyper0 or HyperParams(30.0, 0.1, 30.0, 0.1, math.exp(priors.omega_1bs_logmean),
                                   30.0, 0.1 * abs(fd.c7) + 1e-4, 0.1 * abs(fd.c7) + 1e-4)
        out["log_hyper"] = np.log([getattr(h0, k) for k in HYPER_NAMES])
    return out


def fixed_factors(fd: FreqData, hyper: HyperParams, jitter: float = JITTER) -> dict:
    """Cholesky factors for phase 2, where hyperparameters are pinned."""
    out = {}
    if fd.sizes["dc1e"]:
        out["L_1e"] = np.asarray(hyper.omega_1e * corr_chol(fd.dist_eq, hyper.ell_1e, jitter))
    if fd.sizes["dc1as"]:
        out["L_1as"] = np.asarray(hyper.omega_1as * corr_chol(fd.dist_sta, hyper.ell_1as, jitter))
    if fd.sizes["c_ca"]:
        out["L_ca"] = np.asarray(cell_chol(fd.dist_cell, hyper.ell_ca1, hyper.omega_ca1,
                                           hyper.omega_ca2, jitter))
    return out


def _fixed_factor(fd, hyper, factors, key):
    if factors is not None and key in factors:
        return factors[key]
    return fixed_factors(fd, hyper)[key]


def latent_to_params(u: dict, fd: FreqData, hyper: HyperParams | None = None,
                     factors: dict | None = None):
    """Map a latent state to (ModelParams, HyperParams, log|Jacobian|).

    The Jacobian covers the non-centred scalings, the cell bound transform
    and the log transforms of the positive parameters, so that
    ``log_density_noncentered(u) == log_posterior(params) + log|J|``.
    """
    logjac = 0.0
    if "log_hyper" in u:
        lh = u["log_hyper"]
        h = HyperParams(*[jnp.exp(lh[i]) for i in range(len(HYPER_NAMES))])
        logjac += jnp.sum(lh)
        factors = {}
        if fd.sizes["dc1e"]:
            factors["L_1e"] = h.omega_1e * corr_chol(fd.dist_eq, h.ell_1e)
        if fd.sizes["dc1as"]:
            factors["L_1as"] = h.omega_1as * corr_chol(fd.dist_sta, h.ell_1as)
    else:
        if hyper is None:
            raise ValueError("phase 2 needs fixed hyperparameters")
        h = hyper
        factors = factors if factors is not None else fixed_factors(fd, hyper)

    def scaled(key, z):
        nonlocal logjac
        if key not in factors:
            return jnp.zeros(0)
        L = factors[key]
        logjac += jnp.sum(jnp.log(jnp.diag(L)))
        return L @ z

    dc1e = scaled("L_1e", u["z_1e"])
    dc1as = scaled("L_1as", u["z_1as"])
    # per-cell upper bound at zero
    c_ca = -jnp.exp(u["v_ca"])
    logjac += jnp.sum(u["v_ca"])
    phi0 = jnp.exp(u["log_phi0"])
    tau0 = jnp.exp(u["log_tau0"])
    logjac += u["log_phi0"] + u["log_tau0"]
    if "z_1bs" in u:
        dc1bs = h.omega_1bs * u["z_1bs"]
        logjac += u["z_1bs"].shape[0] * jnp.log(h.omega_1bs)
    elif "t_sta" in u:
        # unit-Jacobian shear
        dc1bs = u["t_sta"] - dc1as[fd.sta_loc] if fd.sizes["dc1as"] else u["t_sta"]
    else:
        dc1bs = u["dc1bs"]
    if "z_B" in u:
        dB = tau0 * u["z_B"]
        logjac += u["z_B"].shape[0] * jnp.log(tau0)
    elif "t_ev" in u:
        dB = u["t_ev"] - dc1e[fd.ev_loc] if fd.sizes["dc1e"] else u["t_ev"]
    else:
        dB = u["dB"]
    dc0e = u["dc0e"] if "dc0e" in u else jnp.zeros(2)
    params = ModelParams(u["dc0"], dc0e, dc1e, dc1as, dc1bs, c_ca, dB, phi0, tau0)
    return params, h, logjac


def log_density_noncentered(u: dict, fd: FreqData, priors: Priors = Priors(),
                            hyper: HyperParams | None = None, factors: dict | None = None):
    """Sampler target over the latent state.

    Source and site vectors are non-centred (standard normals scaled by the
    Cholesky factor), so their normal terms already absorb the scaling
    Jacobians; see :func:`latent_shapes` for the iid station and event
    terms.  Cell coefficients are sampled as ``c = -exp(v)``, which
    keeps every state inside the truncation region; their prior is the
    multivariate normal on ``c`` plus the log Jacobian ``sum(v)``.
    Positive scalars are sampled on the log scale.
    """
    params, h, _ = latent_to_params(u, fd, hyper, factors)
    lp = log_likelihood(params, fd)
    for k in ("z_1e", "z_1as", "z_1bs", "z_B"):
        if k in u:
            lp += jnp.sum(_normal_lpdf(u[k], 0.0, 1.0))
    if "z_1bs" not in u:
        lp += jnp.sum(_normal_lpdf(params.dc1bs, 0.0, h.omega_1bs))
    if "z_B" not in u:
        lp += jnp.sum(_normal_lpdf(params.dB, 0.0, params.tau0))
    if fd.sizes["c_ca"]:
        L_ca = (cell_chol(fd.dist_cell, h.ell_ca1, h.omega_ca1, h.omega_ca2)
                if "log_hyper" in u else _fixed_factor(fd, h, factors, "L_ca"))
        lp += _mvn_chol_lpdf(params.c_ca, fd.c7, L_ca) + jnp.sum(u["v_ca"])
    lp += _scalar_priors(params, fd, priors)
    lp += u["log_phi0"] + u["log_tau0"]
    if "log_hyper" in u:
        lp += jnp.sum(u["log_hyper"]) + log_prior_hyper(h, priors)
    return _truncate(lp, params.c_ca)
