"""Inter-frequency correlation of the non-ergodic terms.

The correlation between two frequencies depends only on
``f_r = |ln(f1/f2)|`` and is modelled as

    rho(f_r) = 1                                           for f_r = 0
    rho(f_r) = tanh(A exp(-B f_r) + C exp(-D f_r))         otherwise

with ``A, B, C, D`` stored as positive magnitudes; the decay signs are
applied on evaluation.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

# published coefficients per term, as printed (decay rates positive)
REFERENCE_MODELS = {
    "dc1e": (1.94, 0.77, 0.96, 19.49),
    "dc1as": (1.30, 0.92, 1.36, 30.85),
    "dc1bs": (1.83, 1.86, 2.77, 63.96),
    "c_ca": (1.85, 0.41, 0.27, 10.00),
}

START_POINTS = (
    (1.0, 0.5, 1.0, 10.0),
    (2.0, 1.0, 1.0, 20.0),
    (1.0, 1.0, 2.0, 50.0),
    (1.5, 0.3, 0.5, 5.0),
    (0.5, 2.0, 1.0, 30.0),
    (2.0, 0.5, 0.5, 15.0),
    (1.0, 0.1, 1.0, 3.0),
    (3.0, 1.0, 0.3, 60.0),
)


class CorrelationFitError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


@dataclass(frozen=True)
class CorrelationModel:
    A: float
    B: float
    C: float
    D: float
    rss: float = float("nan")
    diagnostics: dict = field(default_factory=dict, compare=False)

    def z_curve(self, fr):
        fr = np.asarray(fr, dtype=float)
        return self.A * np.exp(-self.B * fr) + self.C * np.exp(-self.D * fr)

    def rho(self, fr):
        fr = np.asarray(fr, dtype=float)
        return np.where(fr == 0.0, 1.0, np.tanh(self.z_curve(fr)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rss"] = None if not np.isfinite(self.rss) else float(self.rss)
        return d

    @classmethod
    def from_dict(cls, d) -> "CorrelationModel":
        rss = d.get("rss")
        return cls(float(d["A"]), float(d["B"]), float(d["C"]), float(d["D"]),
                   float("nan") if rss is None else float(rss), d.get("diagnostics", {}))

    @classmethod
    def reference(cls, term: str) -> "CorrelationModel":
        return cls(*REFERENCE_MODELS[term])


def freq_distance(f1, f2):
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if np.any(f1 <= 0) or np.any(f2 <= 0):
        raise ValueError("frequencies must be positive")
    return np.abs(np.log(f1) - np.log(f2))  # exactly symmetric in (f1, f2)


def eval_correlation(model: CorrelationModel, f1, f2):
    rho = model.rho(freq_distance(f1, f2))
    return float(rho) if np.ndim(rho) == 0 else rho


def empirical_rho(x, y) -> float:
    """Pearson product-moment correlation."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("samples must be 1-D and of equal length")
    if len(x) < 4:
        raise ValueError("need at least 4 paired samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = np.dot(dx, dx)
    syy = np.dot(dy, dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("zero variance: correlation undefined")
    return float(np.clip(np.dot(dx, dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def fisher_z(rho, n=None):
    """Fisher transform ``z = atanh(rho)`` and, given ``n``, ``1/sqrt(n-3)``."""
    rho = np.asarray(rho, dtype=float)
    if np.any(np.abs(rho) >= 1.0):
        raise ValueError("|rho| = 1 has an infinite Fisher z")
    z = np.arctanh(rho)
    z = float(z) if z.ndim == 0 else z
    if n is None:
        return z, None
    n = np.asarray(n, dtype=float)
    if np.any(n <= 3):
        raise ValueError("need n > 3 samples for the z standard error")
    se = 1.0 / np.sqrt(n - 3.0)
    return z, (float(se) if se.ndim == 0 else se)


@dataclass
class EmpiricalCorr:
    f1: np.ndarray
    f2: np.ndarray
    rho: np.ndarray
    n: np.ndarray
    z: np.ndarray = None
    z_se: np.ndarray = None

    def __post_init__(self):
        for k in ("f1", "f2", "rho", "n"):
            setattr(self, k, np.asarray(getattr(self, k), dtype=float))
        keep = (self.n > 3) & (np.abs(self.rho) < 1.0)
        if not np.all(keep):
            logger.debug("dropping %d pairs with n <= 3 or |rho| = 1", np.sum(~keep))
        for k in ("f1", "f2", "rho", "n"):
            setattr(self, k, getattr(self, k)[keep])
        self.z, self.z_se = fisher_z(self.rho, self.n) if len(self.rho) else (np.zeros(0), np.zeros(0))
        self.z = np.atleast_1d(self.z)
        self.z_se = np.atleast_1d(self.z_se)

    @property
    def fr(self):
        return freq_distance(self.f1, self.f2)


def empirical_correlations(values: dict, min_n: int = 4) -> EmpiricalCorr:
    """Correlations of one term between every pair of frequencies.

    ``values`` maps frequency to a ``{instance_id: value}`` mapping (for
    example posterior means per station).  Only instances present at both
    frequencies enter a pair.
    """
    freqs = sorted(values)
    f1s, f2s, rhos, ns = [], [], [], []
    for fa, fb in itertools.combinations(freqs, 2):
        common = sorted(set(values[fa]) & set(values[fb]))
        if len(common) < max(min_n, 4):
            continue
        xa = np.array([values[fa][k] for k in common])
        xb = np.array([values[fb][k] for k in common])
        try:
            rho = empirical_rho(xa, xb)
        except ValueError:
            continue
        f1s.append(fa)
        f2s.append(fb)
        rhos.append(rho)
        ns.append(len(common))
    return EmpiricalCorr(f1s, f2s, rhos, ns)


def _jacobian(p, fr):
    a, b, c, d = p
    eb = np.exp(-b * fr)
    ed = np.exp(-d * fr)
    return np.column_stack([eb, -a * fr * eb, ed, -c * fr * ed])


def _levenberg_marquardt(p0, fr, z, w, max_iter=500, tol=1e-12):
    """Weighted least squares of z on ``A e^{-B fr} + C e^{-D fr}``.

    Damping starts at 1e-3, is multiplied by 10 after a rejected step and
    divided by 10 after an accepted one.
    """
    sw = np.sqrt(w)
    p = np.asarray(p0, dtype=float)

    def cost(q):
        with np.errstate(over="ignore", invalid="ignore"):  # wild trial steps are rejected below
            r = sw * (z - (q[0] * np.exp(-q[1] * fr) + q[2] * np.exp(-q[3] * fr)))
            return float(np.dot(r, r)), r

    f, r = cost(p)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            J = -sw[:, None] * _jacobian(p, fr)
        g = J.T @ r
        H = J.T @ J
        accepted = False
        while lam < 1e16:
            A = H + lam * (np.diag(np.diag(H)) + 1e-12 * np.eye(4))
            try:
                step = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            p_new = p + step
            f_new, r_new = cost(p_new)
            if np.isfinite(f_new) and f_new < f:
                accepted = True
                lam /= 10.0
                break
            lam *= 10.0
        if not accepted:
            converged = True  # no downhill step left at any damping
            break
        rel = (f - f_new) / max(f, 1e-300)
        small_step = np.linalg.norm(step) <= tol * (np.linalg.norm(p) + tol)
        p, f, r = p_new, f_new, r_new
        if rel < tol or small_step or f < 1e-300:
            converged = True
            break
    return p, f, converged, it


def fit_correlation_model(emp: EmpiricalCorr, starts=START_POINTS) -> CorrelationModel:
    """Fit the two-term decay model to Fisher-z values, weights ``1/se**2``."""
    fr = emp.fr
    keep = fr > 0
    fr, z, se = fr[keep], emp.z[keep], emp.z_se[keep]
    n_distinct = len(np.unique(np.round(fr, 12)))
    if n_distinct < 8:
        raise ValueError(f"need at least 8 distinct frequency distances, got {n_distinct}")
    if np.ptp(z) < 1e-12:
        raise CorrelationFitError("constant correlation data: the decay model is degenerate")
    w = 1.0 / se**2

    diags = []
    best = None
    for p0 in starts:
        p, rss, ok, it = _levenberg_marquardt(p0, fr, z, w)
        diags.append({"start": list(p0), "params": p.tolist(), "rss": rss,
                      "converged": bool(ok), "iterations": it})
        if ok and np.all(np.isfinite(p)) and (best is None or rss < best[1]):
            best = (p, rss)
    if best is None:
        raise CorrelationFitError("no start converged", diags)
    p, rss = best
    # the two terms are interchangeable; keep the slower decay first
    if p[1] > p[3]:
        p = p[[2, 3, 0, 1]]
    return CorrelationModel(*map(float, p), rss=float(rss),
                            diagnostics={"starts": diags, "n_pairs": int(len(fr))})


def correlation_matrix(model: CorrelationModel, freqs) -> np.ndarray:
    f = np.asarray(freqs, dtype=float)
    return np.asarray(eval_correlation(model, f[:, None], f[None, :]))


def repair_psd(R: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Nearest-correlation style repair by eigenvalue clipping.

    Matrices that are already positive semi-definite are returned unchanged.
    """
    R = 0.5 * (R + R.T)
    lam, V = np.linalg.eigh(R)
    if lam.min() >= -1e-12:
        return R
    lam = np.maximum(lam, floor)
    out = (V * lam) @ V.T
    d = np.sqrt(np.diag(out))
    out = out / np.outer(d, d)
    np.fill_diagonal(out, 1.0)
    return out


def sample_correlated_terms(models: dict, marginal_sds: dict, freqs, seed=0,
                            n_samples: int = 1) -> dict:
    """Zero-mean draws of each term across ``freqs``.

    ``marginal_sds[term]`` is a scalar or one sd per frequency.  Returns
    ``{term: array (n_samples, n_freqs)}``.  Repeated frequencies receive
    identical values.
    """
    freqs = np.asarray(freqs, dtype=float)
    if freqs.size < 1:
        raise ValueError("need at least one frequency")
    uniq, inv = np.unique(freqs, return_inverse=True)
    rng = np.random.default_rng(seed)
    out = {}
    for term in sorted(models):
        R = repair_psd(correlation_matrix(models[term], uniq))
        lam, V = np.linalg.eigh(R)
        root = V * np.sqrt(np.clip(lam, 0.0, None))
        eps = rng.standard_normal((n_samples, len(uniq)))
        draws = eps @ root.T
        sd = np.broadcast_to(np.asarray(marginal_sds[term], dtype=float), freqs.shape)
        out[term] = draws[:, inv] * sd
    return out


def save_models(path, models: dict) -> None:
    with open(path, "w") as fh:
        json.dump({k: v.to_dict() for k, v in sorted(models.items())}, fh, indent=2, sort_keys=True)


def load_models(path) -> dict:
    with open(path) as fh:
        return {k: CorrelationModel.from_dict(v) for k, v in json.load(fh).items()}
