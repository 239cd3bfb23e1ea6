"""Coordinate projection and region-polygon classification.

The transverse Mercator projection uses Krueger's n-series to sixth order
(Karney 2011), which is accurate to well below a millimetre within a few
thousand kilometres of the central meridian.  All projected coordinates are
returned in kilometres.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

# WGS84
_A = 6378137.0
_F = 1.0 / 298.257223563
_K0 = 0.9996
_E0 = 500000.0
_N0_SOUTH = 10000000.0

_N = _F / (2.0 - _F)
_E2 = _F * (2.0 - _F)
_ECC = np.sqrt(_E2)
_RECT_A = _A / (1.0 + _N) * (1.0 + _N**2 / 4.0 + _N**4 / 64.0 + _N**6 / 256.0)


def _series(n):
    alpha = np.array([
        n / 2 - 2 * n**2 / 3 + 5 * n**3 / 16 + 41 * n**4 / 180 - 127 * n**5 / 288 + 7891 * n**6 / 37800,
        13 * n**2 / 48 - 3 * n**3 / 5 + 557 * n**4 / 1440 + 281 * n**5 / 630 - 1983433 * n**6 / 1935360,
        61 * n**3 / 240 - 103 * n**4 / 140 + 15061 * n**5 / 26880 + 167603 * n**6 / 181440,
        49561 * n**4 / 161280 - 179 * n**5 / 168 + 6601661 * n**6 / 7257600,
        34729 * n**5 / 80640 - 3418889 * n**6 / 1995840,
        212378941 * n**6 / 319334400,
    ])
    beta = np.array([
        n / 2 - 2 * n**2 / 3 + 37 * n**3 / 96 - n**4 / 360 - 81 * n**5 / 512 + 96199 * n**6 / 604800,
        n**2 / 48 + n**3 / 15 - 437 * n**4 / 1440 + 46 * n**5 / 105 - 1118711 * n**6 / 3870720,
        17 * n**3 / 480 - 37 * n**4 / 840 - 209 * n**5 / 4480 + 5569 * n**6 / 90720,
        4397 * n**4 / 161280 - 11 * n**5 / 504 - 830251 * n**6 / 7257600,
        4583 * n**5 / 161280 - 108847 * n**6 / 3991680,
        20648693 * n**6 / 638668800,
    ])
    return alpha, beta


_ALPHA, _BETA = _series(_N)
_J2 = 2.0 * np.arange(1, 7)


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"invalid coordinates lat={self.lat}, lon={self.lon}")


@dataclass(frozen=True)
class XY:
    """Planar projected coordinates in km."""

    x: float
    y: float


@dataclass(frozen=True)
class UTMZone:
    number: int
    north: bool = True

    @classmethod
    def parse(cls, zone: "str | int | UTMZone") -> "UTMZone":
        """Parse ``'11S'``-style zone ids; the letter is the MGRS latitude band."""
        if isinstance(zone, UTMZone):
            return zone
        if isinstance(zone, int):
            return cls(zone, True)
        text = str(zone).strip().upper()
        digits = "".join(ch for ch in text if ch.isdigit())
        band = text[len(digits):]
        number = int(digits)
        if not 1 <= number <= 60:
            raise ValueError(f"UTM zone number out of range: {zone!r}")
        if band and (len(band) != 1 or band not in "CDEFGHJKLMNPQRSTUVWX"):
            raise ValueError(f"bad latitude band in zone {zone!r}")
        return cls(number, (band or "N") >= "N")

    @property
    def central_meridian(self) -> float:
        return -183.0 + 6.0 * self.number


DEFAULT_ZONE = UTMZone(11, True)


def _tau_prime(tau):
    sig = np.sinh(_ECC * np.arctanh(_ECC * tau / np.sqrt(1.0 + tau**2)))
    return tau * np.sqrt(1.0 + sig**2) - sig * np.sqrt(1.0 + tau**2)


def latlon_to_utm(lat, lon, zone="11S"):
    """Project geographic coordinates (degrees) to UTM easting/northing in km.

    Accepts scalars or arrays; returns a pair of arrays (or floats).
    """
    z = UTMZone.parse(zone)
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if not np.all(np.isfinite(lat)) or not np.all(np.isfinite(lon)):
        raise ValueError("non-finite coordinates")
    if np.any(np.abs(lat) > 84.0):
        raise ValueError("latitude outside the UTM validity band (|lat| <= 84)")

    phi = np.radians(lat)
    lam = np.radians((lon - z.central_meridian + 180.0) % 360.0 - 180.0)
    tau = np.tan(phi)
    t = _tau_prime(tau)
    xi_p = np.arctan2(t, np.cos(lam))
    eta_p = np.arcsinh(np.sin(lam) / np.sqrt(t**2 + np.cos(lam) ** 2))

    xi = xi_p + np.sum(_ALPHA * np.sin(_J2 * xi_p[..., None]) * np.cosh(_J2 * eta_p[..., None]), axis=-1)
    eta = eta_p + np.sum(_ALPHA * np.cos(_J2 * xi_p[..., None]) * np.sinh(_J2 * eta_p[..., None]), axis=-1)

    easting = _E0 + _K0 * _RECT_A * eta
    northing = _K0 * _RECT_A * xi + (0.0 if z.north else _N0_SOUTH)
    x, y = easting / 1000.0, northing / 1000.0
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def utm_to_latlon(x_km, y_km, zone="11S"):
    """Inverse of :func:`latlon_to_utm`."""
    z = UTMZone.parse(zone)
    easting = np.asarray(x_km, dtype=float) * 1000.0
    northing = np.asarray(y_km, dtype=float) * 1000.0 - (0.0 if z.north else _N0_SOUTH)

    xi = northing / (_K0 * _RECT_A)
    eta = (easting - _E0) / (_K0 * _RECT_A)
    xi_p = xi - np.sum(_BETA * np.sin(_J2 * xi[..., None]) * np.cosh(_J2 * eta[..., None]), axis=-1)
    eta_p = eta - np.sum(_BETA * np.cos(_J2 * xi[..., None]) * np.sinh(_J2 * eta[..., None]), axis=-1)

    tau_p = np.sin(xi_p) / np.sqrt(np.sinh(eta_p) ** 2 + np.cos(xi_p) ** 2)
    lam = np.arctan2(np.sinh(eta_p), np.cos(xi_p))

    # Newton iteration for tau given tau'
    tau = tau_p.copy()
    for _ in range(6):
        tp = _tau_prime(tau)
        dtau = (tau_p - tp) / np.sqrt(1.0 + tp**2) * (1.0 + (1.0 - _E2) * tau**2) / (
            (1.0 - _E2) * np.sqrt(1.0 + tau**2)
        )
        tau = tau + dtau

    lat = np.degrees(np.arctan(tau))
    lon = np.degrees(lam) + z.central_meridian
    lon = (lon + 180.0) % 360.0 - 180.0
    if lat.ndim == 0:
        return float(lat), float(lon)
    return lat, lon


def project_to_utm(p: GeoPoint, zone="11S") -> XY:
    x, y = latlon_to_utm(p.lat, p.lon, zone)
    return XY(x, y)


def unproject_from_utm(q: XY, zone="11S") -> GeoPoint:
    lat, lon = utm_to_latlon(q.x, q.y, zone)
    return GeoPoint(lat, lon)


@dataclass(frozen=True)
class RegionPolygon:
    label: str
    vertices: tuple  # ((lat, lon), ...), ring implicitly closed

    def __post_init__(self):
        verts = tuple((float(a), float(b)) for a, b in self.vertices)
        if len(verts) < 3:
            raise ValueError(f"polygon {self.label!r} needs at least 3 vertices")
        if verts[0] == verts[-1]:
            verts = verts[:-1]
        object.__setattr__(self, "vertices", verts)

    def contains(self, lat, lon) -> np.ndarray:
        """Even-odd point-in-polygon test; boundary points count as inside."""
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        py, px = lat[..., None], lon[..., None]
        v = np.asarray(self.vertices)
        y1, x1 = v[:, 0], v[:, 1]
        y2, x2 = np.roll(y1, -1), np.roll(x1, -1)

        # crossing number on a horizontal ray towards +lon
        straddle = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside = np.sum(straddle & (px < x_cross), axis=-1) % 2 == 1

        # on-edge test
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        scale = np.hypot(x2 - x1, y2 - y1)
        within = (
            (np.minimum(x1, x2) - 1e-12 <= px) & (px <= np.maximum(x1, x2) + 1e-12)
            & (np.minimum(y1, y2) - 1e-12 <= py) & (py <= np.maximum(y1, y2) + 1e-12)
        )
        on_edge = np.any(within & (np.abs(cross) <= 1e-12 * np.maximum(scale, 1.0)), axis=-1)
        return inside | on_edge


def classify_region(p: GeoPoint, polys: Sequence[RegionPolygon]) -> str | None:
    """Label of the first polygon containing ``p``, or ``None``."""
    for poly in polys:
        if bool(poly.contains(p.lat, p.lon)):
            return poly.label
    return None


def classify_regions(lat, lon, polys: Sequence[RegionPolygon]) -> np.ndarray:
    """Vectorised :func:`classify_region`; unclassified entries are ``None``."""
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    out = np.full(lat.shape, None, dtype=object)
    for poly in reversed(list(polys)):
        out[poly.contains(lat, lon)] = poly.label
    return out


def load_polygons(path=None) -> list[RegionPolygon]:
    """Read polygons from JSON ``[{label, vertices: [[lat, lon], ...]}, ...]``.

    Without a path the packaged northern/southern California polygons are used.
    """
    if path is None:
        text = resources.files("nonergodic_eas.resources").joinpath("ca_regions.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return [RegionPolygon(d["label"], tuple(map(tuple, d["vertices"]))) for d in json.loads(text)]
