"""Posterior sampling, posterior summaries and hyperparameter smoothing.

Phase 1 samples the hyperparameters jointly with the model parameters at a
subset of frequencies.  The hyperparameters are then smoothed across
frequency and pinned, and phase 2 samples the remaining parameters at every
frequency.
"""
from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
import pandas as pd
from jax.flatten_util import ravel_pytree
from numpyro.diagnostics import effective_sample_size, split_gelman_rubin
from numpyro.infer import MCMC, NUTS
from scipy.optimize import isotonic_regression, minimize

from .kernels import JITTER
from .model import (HYPER_NAMES, REGIONS, FreqData, HyperParams, Priors, fixed_factors,
                    initial_latent, latent_to_params, log_density_noncentered)

logger = logging.getLogger(__name__)

PARAM_BLOCKS = ("dc0", "dc0e", "dc1e", "dc1as", "dc1bs", "c_ca", "dB", "phi0", "tau0")
STATS = ("mean", "sd", "q05", "q95", "ess", "rhat")
MODES = ("nuts", "laplace")
JITTER_STEPS = 5


class FactorizationError(RuntimeError):
    def __init__(self, freq, detail=""):
        super().__init__(f"covariance factorization failed at {freq:g} Hz after jitter escalation"
                         + (f": {detail}" if detail else ""))
        self.freq = freq


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 2
    warmup: int = 500
    draws: int = 500
    target_accept: float = 0.8
    max_tree_depth: int = 7
    seed: int = 0
    max_rhat: float = 1.05
    min_ess: float = 100.0
    iid: str = "centered"

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be at least 1")
        if self.warmup < 1 or self.draws < 1:
            raise ValueError("warmup and draws must be at least 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "SamplerConfig":
        return cls(**(d or {}))


# -- summaries -----------------------------------------------------------------


def _diagnostics(x: np.ndarray):
    """ESS and split R-hat of ``x`` shaped (chains, draws, ...)."""
    if x.shape[1] < 4:
        nan = np.full(x.shape[2:], np.nan)
        return nan, nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ess = np.asarray(effective_sample_size(x), dtype=float)
        rhat = np.asarray(split_gelman_rubin(x), dtype=float)
    flat = x.reshape(-1, *x.shape[2:])
    const = np.ptp(flat, axis=0) == 0
    ess = np.where(const, np.nan, ess)
    ess = np.where(ess < 0, np.nan, ess)  # degenerate autocorrelation estimate
    rhat = np.where(const, np.nan, rhat)
    return ess, rhat


@dataclass
class PosteriorSummary:
    """Per-parameter posterior statistics plus the retained draws.

    ``draws[name]`` has shape ``(chains, draws, *block_shape)``.
    """

    freq: float
    phase: int
    draws: dict
    labels: dict
    stats: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    converged: bool = False
    mode: str = "nuts"

    def __post_init__(self):
        if not self.stats:
            self.stats = {}
            for name, x in self.draws.items():
                flat = x.reshape(-1, *x.shape[2:])
                ess, rhat = _diagnostics(x)
                self.stats[name] = {
                    "mean": flat.mean(axis=0), "sd": flat.std(axis=0, ddof=1 if len(flat) > 1 else 0),
                    "q05": np.percentile(flat, 5, axis=0), "q95": np.percentile(flat, 95, axis=0),
                    "ess": ess, "rhat": rhat}

    @property
    def blocks(self) -> tuple:
        return tuple(self.draws)

    def block(self, name: str, stat: str = "mean"):
        if stat not in STATS:
            raise KeyError(f"unknown statistic {stat!r}")
        v = self.stats[name][stat]
        return float(v) if np.ndim(v) == 0 else np.asarray(v)

    def gate_names(self) -> tuple:
        return HYPER_NAMES if self.phase == 1 else ("phi0", "tau0")

    def check_convergence(self, max_rhat: float = 1.05, min_ess: float = 100.0) -> list:
        """Names failing the R-hat or ESS gate."""
        bad = []
        for n in self.gate_names():
            r, e = self.block(n, "rhat"), self.block(n, "ess")
            if not (np.isfinite(r) and r < max_rhat and np.isfinite(e) and e >= min_ess):
                bad.append(n)
        return bad

    def hyper(self, stat: str = "mean") -> HyperParams:
        if self.phase != 1:
            raise ValueError("hyperparameters are only sampled in phase 1")
        return HyperParams(**{k: self.block(k, stat) for k in HYPER_NAMES})

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for name in self.draws:
            st = self.stats[name]
            labels = self.labels.get(name, [""])
            for i in range(max(1, int(np.prod(np.shape(st["mean"]))))):
                rows.append({"parameter": name, "index": i, "label": labels[i] if i < len(labels) else "",
                             **{s: float(np.ravel(st[s])[i]) for s in STATS}})
        return pd.DataFrame(rows, columns=["parameter", "index", "label", *STATS])

    def draws_frame(self) -> pd.DataFrame:
        """One row per retained draw; columns ``chain``, ``draw`` then ``name[i]``."""
        any_x = next(iter(self.draws.values()))
        c, n = any_x.shape[:2]
        cols = {"chain": np.repeat(np.arange(c), n), "draw": np.tile(np.arange(n), c)}
        for name, x in self.draws.items():
            flat = x.reshape(c * n, -1)
            if x.ndim == 2:
                cols[name] = flat[:, 0]
            else:
                for i in range(flat.shape[1]):
                    cols[f"{name}[{i}]"] = flat[:, i]
        return pd.DataFrame(cols)

    def write(self, directory, prefix: str | None = None) -> dict:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        prefix = prefix or f"phase{self.phase}_f{self.freq:g}"
        paths = {"summary": d / f"{prefix}_summary.csv", "draws": d / f"{prefix}_draws.csv",
                 "meta": d / f"{prefix}_meta.json"}
        self.to_frame().to_csv(paths["summary"], index=False, float_format="%.17g")
        self.draws_frame().to_csv(paths["draws"], index=False, float_format="%.17g")
        meta = {"freq": self.freq, "phase": self.phase, "converged": self.converged, "mode": self.mode,
                "shapes": {k: list(v.shape[2:]) for k, v in self.draws.items()},
                "labels": self.labels, "diagnostics": self.diagnostics}
        paths["meta"].write_text(json.dumps(meta, indent=1, sort_keys=True, default=float))
        return paths

    @classmethod
    def read(cls, directory, prefix: str) -> "PosteriorSummary":
        d = Path(directory)
        meta = json.loads((d / f"{prefix}_meta.json").read_text())
        df = pd.read_csv(d / f"{prefix}_draws.csv", float_precision="round_trip")
        c = int(df["chain"].max()) + 1
        n = len(df) // c
        draws = {}
        for name, shape in meta["shapes"].items():
            if not shape:
                draws[name] = df[name].to_numpy(dtype=float).reshape(c, n)
            else:
                size = int(np.prod(shape))
                cols = [f"{name}[{i}]" for i in range(size)]
                # C order keeps the summary statistics bit-identical to the writer's
                block = np.ascontiguousarray(df[cols].to_numpy(dtype=float))
                draws[name] = block.reshape(c, n, *shape) if size else np.zeros((c, n, *shape))
        return cls(float(meta["freq"]), int(meta["phase"]), draws, meta["labels"],
                   diagnostics=meta["diagnostics"], converged=bool(meta["converged"]),
                   mode=meta["mode"])


# -- fitting -------------------------------------------------------------------


def _labels(fd: FreqData, phase: int) -> dict:
    loc = lambda xy: [f"{x:.3f},{y:.3f}" for x, y in xy]  # noqa: E731
    out = {"dc0": [""], "dc0e": list(REGIONS), "dc1e": loc(fd.eq_locs), "dc1as": loc(fd.sta_locs),
           "dc1bs": [str(s) for s in fd.station_ids], "c_ca": [str(int(c)) for c in fd.cell_ids],
           "dB": [str(e) for e in fd.event_ids], "phi0": [""], "tau0": [""]}
    if phase == 1:
        out.update({k: [""] for k in HYPER_NAMES})
    return out


def _check_data(fd: FreqData):
    if len(fd.event_ids) < 2 or len(fd.station_ids) < 2:
        raise ValueError(f"need at least 2 events and 2 stations at {fd.freq:g} Hz, "
                         f"got {len(fd.event_ids)} and {len(fd.station_ids)}")


def _factors(fd: FreqData, hyper: HyperParams) -> dict:
    for k in range(JITTER_STEPS):
        jit = JITTER * 10.0**k
        f = fixed_factors(fd, hyper, jit)
        if all(np.all(np.isfinite(v)) for v in f.values()):
            if k:
                logger.warning("%g Hz: covariance jitter raised to %g", fd.freq, jit)
            return {key: jnp.asarray(v) for key, v in f.items()}
    raise FactorizationError(fd.freq)


def _target(fd: FreqData, phase: int, priors: Priors, hyper: HyperParams | None):
    if phase == 1:
        return lambda u: log_density_noncentered(u, fd, priors)
    factors = _factors(fd, hyper)
    return lambda u: log_density_noncentered(u, fd, priors, hyper=hyper, factors=factors)


def _constrained(u_draws: dict, fd: FreqData, hyper, phase: int, factors=None) -> dict:
    """Map latent draws shaped (chains, n, ...) to model-space blocks."""
    c, n = next(iter(u_draws.values())).shape[:2]
    flat = {k: jnp.asarray(v).reshape(c * n, *v.shape[2:]) for k, v in u_draws.items()}
    if phase == 2 and factors is None:
        factors = _factors(fd, hyper)

    def one(u):
        p, h, _ = latent_to_params(u, fd, None if phase == 1 else hyper, factors)
        out = {b: getattr(p, b) for b in PARAM_BLOCKS}
        if phase == 1:
            out.update({k: getattr(h, k) for k in HYPER_NAMES})
        return out

    res = jax.jit(jax.vmap(one))(flat)
    out = {k: np.asarray(v).reshape(c, n, *np.shape(v)[1:]) for k, v in res.items()}
    if not fd.dc0e_active:
        out.pop("dc0e")
    return out


def _initial(fd: FreqData, phase: int, priors: Priors, config: SamplerConfig):
    u0 = initial_latent(fd, phase, priors, iid=config.iid)
    rng = np.random.default_rng(config.seed)
    inits = []
    for _ in range(config.chains):
        inits.append({k: np.asarray(v) + rng.uniform(-0.5, 0.5, np.shape(v)) for k, v in u0.items()})
    return inits


def _run_nuts(logp, inits: list, config: SamplerConfig):
    kernel = NUTS(potential_fn=lambda u: -logp(u), target_accept_prob=config.target_accept,
                  max_tree_depth=config.max_tree_depth)
    mcmc = MCMC(kernel, num_warmup=config.warmup, num_samples=config.draws,
                num_chains=config.chains, chain_method="sequential", progress_bar=False)
    init = (jax.tree_util.tree_map(lambda *xs: jnp.stack(xs), *inits) if config.chains > 1
            else jax.tree_util.tree_map(jnp.asarray, inits[0]))
    mcmc.run(jax.random.PRNGKey(config.seed), init_params=init,
             extra_fields=("num_steps", "diverging"))
    samples = {k: np.asarray(v) for k, v in mcmc.get_samples(group_by_chain=True).items()}
    extra = mcmc.get_extra_fields(group_by_chain=True)
    diag = {"divergences": int(np.sum(extra["diverging"])),
            "mean_steps": float(np.mean(extra["num_steps"]))}
    return samples, diag


def hessian(f, x, chunk: int = 32) -> np.ndarray:
    """Dense Hessian from batched Hessian-vector products (bounded memory)."""
    grad = jax.grad(f)
    hvp = jax.jit(jax.vmap(lambda v: jax.jvp(grad, (x,), (v,))[1]))
    eye = np.eye(len(x))
    H = np.vstack([np.asarray(hvp(jnp.asarray(eye[i:i + chunk]))) for i in range(0, len(x), chunk)])
    return 0.5 * (H + H.T)


def _run_laplace(logp, inits: list, config: SamplerConfig):
    flat0, unravel = ravel_pytree(jax.tree_util.tree_map(jnp.asarray, inits[0]))
    negf = lambda x: -logp(unravel(x))  # noqa: E731
    vg = jax.jit(jax.value_and_grad(negf))

    def fun(x):
        v, g = vg(jnp.asarray(x))
        return float(v), np.asarray(g)

    res = minimize(fun, np.asarray(flat0), jac=True, method="L-BFGS-B",
                   options={"maxiter": 20000, "maxfun": 40000})
    if not np.isfinite(res.fun):
        raise RuntimeError("posterior mode search ended at a non-finite density")
    H = hessian(negf, jnp.asarray(res.x))
    lam, V = np.linalg.eigh(H)
    n_bad = int(np.sum(lam <= 0))
    lam = np.maximum(lam, 1e-8 * max(lam.max(), 1.0))
    root = V / np.sqrt(lam)
    rng = np.random.default_rng(config.seed)
    eps = rng.standard_normal((config.chains * config.draws, len(flat0)))
    x = res.x + eps @ root.T
    draws = jax.vmap(unravel)(jnp.asarray(x))
    samples = {k: np.asarray(v).reshape(config.chains, config.draws, *np.shape(v)[1:])
               for k, v in draws.items()}
    diag = {"optimizer_success": bool(res.success), "optimizer_iterations": int(res.nit),
            "neg_log_density": float(res.fun), "nonpositive_curvature": n_bad}
    return samples, diag


def _fit(fd: FreqData, phase: int, config: SamplerConfig, priors: Priors, hyper, mode: str):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    _check_data(fd)
    config = config or SamplerConfig()
    priors = priors or Priors()
    if phase == 1:
        h0 = HyperParams(*np.exp(initial_latent(fd, 1, priors)["log_hyper"]))
        _factors(fd, h0)  # fail early on an unusable geometry
    logp = _target(fd, phase, priors, hyper)
    inits = _initial(fd, phase, priors, config)
    if not np.isfinite(float(logp(jax.tree_util.tree_map(jnp.asarray, inits[0])))):
        raise FactorizationError(fd.freq, "initial state has non-finite density")
    t0 = time.perf_counter()
    run = _run_nuts if mode == "nuts" else _run_laplace
    samples, diag = run(logp, inits, config)
    logger.info("%g Hz phase %d (%s): %.1f s", fd.freq, phase, mode, time.perf_counter() - t0)
    draws = _constrained(samples, fd, hyper, phase)
    if phase == 1 and not all(np.all(np.isfinite(v)) for v in draws.values()):
        raise FactorizationError(fd.freq, "non-finite draws")
    post = PosteriorSummary(fd.freq, phase, draws, _labels(fd, phase), diagnostics=diag, mode=mode)
    failing = post.check_convergence(config.max_rhat, config.min_ess)
    post.diagnostics["gate_failures"] = failing
    post.converged = not failing and (mode == "nuts" or diag.get("optimizer_success", False))
    if failing:
        logger.warning("%g Hz phase %d: convergence gate failed for %s", fd.freq, phase, failing)
    return post


def fit_phase1(fd: FreqData, config: SamplerConfig | None = None, priors: Priors | None = None,
               mode: str = "nuts") -> PosteriorSummary:
    """Joint posterior of the model parameters and all eight hyperparameters."""
    return _fit(fd, 1, config, priors, None, mode)


def fit_phase2(fd: FreqData, hyper: HyperParams, config: SamplerConfig | None = None,
               priors: Priors | None = None, mode: str = "nuts") -> PosteriorSummary:
    """Posterior of the model parameters with the hyperparameters pinned."""
    if hyper is None:
        raise ValueError("phase 2 needs pinned hyperparameters")
    return _fit(fd, 2, config, priors, hyper, mode)


# -- hyperparameter smoothing ----------------------------------------------------


@dataclass(frozen=True)
class SmoothingRules:
    knots_hz: tuple = (0.5, 5.0, 15.0)
    ell_ca_cutoff_km: float = 75.0
    floor: float = 1e-6

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "SmoothingRules":
        if not d:
            return cls()
        d = dict(d)
        if "knots_hz" in d:
            d["knots_hz"] = tuple(float(k) for k in d["knots_hz"])
        return cls(**d)


@dataclass
class SmoothedHyper:
    """Pinned hyperparameters at the phase-1 frequencies, interpolated in ln(f)."""

    freqs: np.ndarray
    values: dict  # name -> array over freqs
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=float)
        order = np.argsort(self.freqs)
        self.freqs = self.freqs[order]
        self.values = {k: np.asarray(self.values[k], dtype=float)[order] for k in HYPER_NAMES}
        self.raw = {k: np.asarray(v, dtype=float)[order] for k, v in self.raw.items()}
        for k, v in self.values.items():
            if not np.all(v > 0):
                raise ValueError(f"smoothed {k} must be positive")

    def at(self, freq: float) -> HyperParams:
        x = math.log(freq)
        lf = np.log(self.freqs)
        return HyperParams(**{k: float(np.interp(x, lf, self.values[k])) for k in HYPER_NAMES})

    def to_frame(self) -> pd.DataFrame:
        d = {"freq": self.freqs, **{k: self.values[k] for k in HYPER_NAMES}}
        d.update({f"raw_{k}": v for k, v in self.raw.items()})
        return pd.DataFrame(d)

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path) -> "SmoothedHyper":
        df = pd.read_csv(path, float_precision="round_trip")
        raw = {c[4:]: df[c].to_numpy() for c in df.columns if c.startswith("raw_")}
        return cls(df["freq"].to_numpy(), {k: df[k].to_numpy() for k in HYPER_NAMES}, raw)


def _hinge_basis(x, knots):
    return np.column_stack([np.ones_like(x), x] + [np.maximum(x - math.log(k), 0.0) for k in knots])


def _median3(v):
    out = v.copy()
    for i in range(1, len(v) - 1):
        out[i] = np.median(v[i - 1:i + 2])
    return out


def _monotone(x):
    up = np.asarray(isotonic_regression(x, increasing=True).x)
    down = np.asarray(isotonic_regression(x, increasing=False).x)
    return up if np.sum((up - x) ** 2) <= np.sum((down - x) ** 2) else down


def smooth_hyperparameters(means, rules: SmoothingRules | None = None) -> SmoothedHyper:
    """Smooth phase-1 posterior means across frequency.

    ``means`` maps frequency to a :class:`PosteriorSummary` or to a dict of
    hyperparameter means.
    """
    rules = rules or SmoothingRules()
    freqs = np.array(sorted(means), dtype=float)
    if len(freqs) < 3:
        raise ValueError(f"need at least 3 fitted frequencies, got {len(freqs)}")

    def mean_of(m, k):
        return m.block(k) if isinstance(m, PosteriorSummary) else float(m[k])

    raw = {k: np.array([mean_of(means[f], k) for f in freqs]) for k in HYPER_NAMES}
    x = np.log(freqs)
    out = {}

    # frequency-independent source terms
    for k in ("ell_1e", "omega_1e"):
        out[k] = np.full(len(freqs), raw[k].mean())

    # site term: hinge fit up to the last knot, then absorb leftover source variance
    cut = max(rules.knots_hz)
    below = freqs <= cut
    B = _hinge_basis(x, [k for k in rules.knots_hz if k < cut])
    if below.sum() >= 2:
        coef = np.linalg.lstsq(B[below], raw["omega_1as"][below], rcond=None)[0]
        fit = B @ coef
        fit[~below] = _hinge_basis(np.array([math.log(cut)]), [k for k in rules.knots_hz if k < cut]) @ coef
    else:
        fit = np.full(len(freqs), raw["omega_1as"][below].mean() if below.any() else raw["omega_1as"].mean())
    excess = np.maximum(raw["omega_1e"] - out["omega_1e"], 0.0)
    out["omega_1as"] = np.where(below, fit, np.hypot(fit, excess))

    for k in ("ell_1as", "omega_1bs"):
        out[k] = _median3(raw[k])

    small = raw["ell_ca1"] < rules.ell_ca_cutoff_km
    if small.any():
        out["ell_ca1"] = np.full(len(freqs), raw["ell_ca1"][small].mean())
    else:
        warnings.warn(f"no ell_ca1 mean below {rules.ell_ca_cutoff_km:g} km; using the mean over "
                      "all frequencies", RuntimeWarning, stacklevel=2)
        out["ell_ca1"] = np.full(len(freqs), raw["ell_ca1"].mean())

    for k in ("omega_ca1", "omega_ca2"):
        out[k] = _monotone(raw[k])

    for k, v in out.items():
        if np.any(v <= 0):
            logger.warning("smoothed %s not positive at some frequencies; floored at %g", k, rules.floor)
            out[k] = np.maximum(v, rules.floor)
    return SmoothedHyper(freqs, out, raw)
