"""Magnitude-dependent aleatory standard deviations.

The within-event standard deviation is piecewise linear in magnitude:
``phi0_m1`` below M 5, ``phi0_m2`` above M 6.5 and a linear blend between.
The between-event standard deviation is constant in magnitude.  Each of the
three parameters is smoothed across frequency with a quartic in ln(f).
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P

logger = logging.getLogger(__name__)

PARAMS = ("tau0", "phi0_m1", "phi0_m2")
DEGREE = 4


@dataclass
class AleatoryModel:
    freqs: np.ndarray
    raw: dict  # parameter -> per-frequency values
    coefs: dict  # parameter -> polynomial coefficients in ln(f), lowest order first
    mag_breaks: tuple = (5.0, 6.5)
    flags: list = field(default_factory=list)

    def smoothed(self, param: str, freq):
        if param not in PARAMS:
            raise KeyError(f"unknown aleatory parameter {param!r}")
        f = np.asarray(freq, dtype=float)
        if np.any(f <= 0):
            raise ValueError("frequency must be positive")
        out = P.polyval(np.log(f), self.coefs[param])
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {"freqs": np.asarray(self.freqs).tolist(),
                "raw": {k: np.asarray(v).tolist() for k, v in self.raw.items()},
                "coefs": {k: np.asarray(v).tolist() for k, v in self.coefs.items()},
                "mag_breaks": list(self.mag_breaks), "flags": list(self.flags),
                "degree": DEGREE, "basis": "ln(freq)"}

    @classmethod
    def from_dict(cls, d) -> "AleatoryModel":
        return cls(np.asarray(d["freqs"], dtype=float),
                   {k: np.asarray(v, dtype=float) for k, v in d["raw"].items()},
                   {k: np.asarray(v, dtype=float) for k, v in d["coefs"].items()},
                   tuple(d.get("mag_breaks", (5.0, 6.5))), list(d.get("flags", [])))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "AleatoryModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def smooth_aleatory(freqs, tau0, phi0_m1, phi0_m2, mag_breaks=(5.0, 6.5)) -> AleatoryModel:
    """Least-squares quartic in ln(f) through each raw parameter."""
    f = np.asarray(freqs, dtype=float)
    if len(f) < DEGREE + 1:
        raise ValueError(f"need at least {DEGREE + 1} frequencies for a degree-{DEGREE} fit, got {len(f)}")
    if np.any(f <= 0):
        raise ValueError("frequencies must be positive")
    if not mag_breaks[0] < mag_breaks[1]:
        raise ValueError("magnitude breakpoints must be increasing")
    raw = {"tau0": np.asarray(tau0, float), "phi0_m1": np.asarray(phi0_m1, float),
           "phi0_m2": np.asarray(phi0_m2, float)}
    for k, v in raw.items():
        if v.shape != f.shape:
            raise ValueError(f"{k} must have one value per frequency")
    x = np.log(f)
    coefs = {k: P.polyfit(x, v, DEGREE) for k, v in raw.items()}
    model = AleatoryModel(f, raw, coefs, tuple(mag_breaks))

    band = np.exp(np.linspace(x.min(), x.max(), 200))
    for k in PARAMS:
        if np.any(model.smoothed(k, band) <= 0):
            msg = f"smoothed {k} is not positive everywhere in [{f.min():g}, {f.max():g}] Hz"
            model.flags.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    bad = f[raw["phi0_m2"] > raw["phi0_m1"]]
    if len(bad):
        msg = f"phi0_m2 exceeds phi0_m1 at {len(bad)} frequencies"
        model.flags.append(msg)
        logger.warning(msg)
    return model


def phi0_of_mag(model: AleatoryModel, M, freq):
    """Within-event sd: constant outside the breakpoints, linear between."""
    m1, m2 = model.mag_breaks
    p1 = model.smoothed("phi0_m1", freq)
    p2 = model.smoothed("phi0_m2", freq)
    t = np.clip((np.asarray(M, dtype=float) - m1) / (m2 - m1), 0.0, 1.0)
    out = (1.0 - t) * p1 + t * p2
    return float(out) if np.ndim(out) == 0 else out


def tau0_of_mag(model: AleatoryModel, M, freq):
    """Between-event sd; independent of magnitude."""
    tau = model.smoothed("tau0", freq)
    if np.ndim(M) == 0:
        return tau
    return np.broadcast_to(tau, np.shape(M)).copy()


def total_sigma(model: AleatoryModel, M, freq):
    return np.hypot(tau0_of_mag(model, M, freq), phi0_of_mag(model, M, freq))


def raw_phi0_by_magnitude(mag, dW, mag_breaks=(5.0, 6.5), min_count: int = 10,
                          fallback: float | None = None) -> tuple[float, float]:
    """Within-event sd below the lower and above the upper breakpoint.

    Subsets with fewer than ``min_count`` records fall back to the sd of all
    residuals (or ``fallback`` when given).
    """
    mag = np.asarray(mag, dtype=float)
    dW = np.asarray(dW, dtype=float)
    overall = float(np.sqrt(np.mean(dW**2))) if fallback is None else float(fallback)
    out = []
    for sel, label in ((mag < mag_breaks[0], "small"), (mag > mag_breaks[1], "large")):
        if sel.sum() >= min_count:
            out.append(float(np.sqrt(np.mean(dW[sel] ** 2))))
        else:
            logger.info("too few %s-magnitude records (%d) for phi0; using overall value",
                        label, int(sel.sum()))
            out.append(overall)
    return out[0], out[1]


def load_fixture() -> AleatoryModel:
    """Representative smoothed aleatory model shipped for regression tests."""
    from importlib import resources

    d = json.loads(resources.files("nonergodic_eas.resources").joinpath("aleatory_fixture.json").read_text())
    return smooth_aleatory(d["freqs"], d["tau0"], d["phi0_m1"], d["phi0_m2"])
