"""Spatial covariance functions for the varying coefficients.

The source and site constants use an exponential (Matern 1/2) kernel; the
cell attenuation coefficients add an independent per-cell nugget on top.
Functions taking ``xp`` work with both numpy and jax.numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

JITTER = 1e-9


@dataclass(frozen=True)
class KernelSpec:
    omega: float
    ell: float
    omega_nugget: float = 0.0
    family: str = "exponential"

    def __post_init__(self):
        if self.family not in ("exponential", "exponential-plus-nugget"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.omega < 0 or self.omega_nugget < 0:
            raise ValueError("kernel standard deviations must be non-negative")
        if not self.ell > 0:
            raise ValueError("correlation length must be positive")

    @property
    def has_nugget(self) -> bool:
        return self.family == "exponential-plus-nugget"

    @property
    def prior_variance(self) -> float:
        return self.omega**2 + (self.omega_nugget**2 if self.has_nugget else 0.0)


def _xy(p):
    return np.array([p.x, p.y]) if hasattr(p, "x") else np.asarray(p, dtype=float)


def cov_exponential(spec: KernelSpec, a, b) -> float:
    d = np.linalg.norm(_xy(a) - _xy(b))
    return spec.omega**2 * np.exp(-d / spec.ell)


def cov_cell(spec: KernelSpec, a, b, same_cell: bool) -> float:
    if not spec.has_nugget:
        raise ValueError("cell covariance needs an exponential-plus-nugget kernel")
    return cov_exponential(spec, a, b) + spec.omega_nugget**2 * float(same_cell)


def distance_matrix(a, b=None) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = a if b is None else np.atleast_2d(np.asarray(b, dtype=float))
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite coordinates")
    return cdist(a, b)


def exp_cov_from_dist(dist, omega, ell, xp=np):
    return omega**2 * xp.exp(-dist / ell)


def cov_matrix(spec: KernelSpec, pts, jitter: bool = False) -> np.ndarray:
    """Gram matrix over ``pts`` (n, 2).

    Identical rows are treated as the same cell for the nugget term, so
    this is only meaningful for the cell kernel when ``pts`` are distinct cell
    midpoints.  ``jitter`` adds ``1e-9 * omega**2`` to the diagonal.
    """
    pts = np.asarray([_xy(p) for p in pts]) if not isinstance(pts, np.ndarray) else pts
    if len(pts) == 0:
        raise ValueError("need at least one point")
    dist = distance_matrix(pts)
    k = exp_cov_from_dist(dist, spec.omega, spec.ell)
    if spec.has_nugget:
        k = k + spec.omega_nugget**2 * np.eye(len(pts))
    if jitter:
        k = k + JITTER * max(spec.prior_variance, 1e-300) * np.eye(len(pts))
    return k


def cross_cov(spec: KernelSpec, a, b, same=None) -> np.ndarray:
    """Covariance between point sets ``a`` and ``b``.

    ``same`` is an optional boolean (len(a), len(b)) mask of identical cells
    that receive the nugget.
    """
    k = exp_cov_from_dist(distance_matrix(a, b), spec.omega, spec.ell)
    if spec.has_nugget and same is not None:
        k = k + spec.omega_nugget**2 * np.asarray(same, dtype=float)
    return k
