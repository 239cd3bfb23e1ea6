"""Attenuation cell grid and ray segmentation.

Cells are vertical prisms of ``dx`` by ``dy`` km in map view.  A source-to-site
ray is a 3-D segment; its length inside each prism is the fraction of the
parametric interval spent over the prism's footprint times the ray length, so
the segments of a ray always add up to the full ray length.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .geo import XY

MIN_SEGMENT_KM = 1e-12


class RayOutsideGridError(ValueError):
    pass


@dataclass(frozen=True)
class CellGrid:
    origin: XY  # south-west corner
    dx: float
    dy: float
    nx: int
    ny: int

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("cell sizes must be positive")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one cell")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def x_max(self) -> float:
        return self.origin.x + self.nx * self.dx

    @property
    def y_max(self) -> float:
        return self.origin.y + self.ny * self.dy

    def cell_id(self, ix, iy):
        return np.asarray(iy) * self.nx + np.asarray(ix)

    def midpoints(self) -> np.ndarray:
        """(n_cells, 2) array of cell-centre coordinates, ordered by cell id."""
        ix = np.tile(np.arange(self.nx), self.ny)
        iy = np.repeat(np.arange(self.ny), self.nx)
        return np.column_stack([
            self.origin.x + (ix + 0.5) * self.dx,
            self.origin.y + (iy + 0.5) * self.dy,
        ])

    def contains(self, x, y, tol=1e-9) -> np.ndarray:
        x = np.asarray(x)
        y = np.asarray(y)
        return (
            (x >= self.origin.x - tol) & (x <= self.x_max + tol)
            & (y >= self.origin.y - tol) & (y <= self.y_max + tol)
        )

    def locate(self, x, y):
        """Cell indices (ix, iy) of points; points on the outer edge map inward."""
        ix = np.floor((np.asarray(x) - self.origin.x) / self.dx).astype(int)
        iy = np.floor((np.asarray(y) - self.origin.y) / self.dy).astype(int)
        return np.clip(ix, 0, self.nx - 1), np.clip(iy, 0, self.ny - 1)

    def to_dict(self) -> dict:
        return {"x0": self.origin.x, "y0": self.origin.y, "dx": self.dx, "dy": self.dy,
                "nx": self.nx, "ny": self.ny}

    @classmethod
    def from_dict(cls, d: dict) -> "CellGrid":
        return cls(XY(float(d["x0"]), float(d["y0"])), float(d["dx"]), float(d["dy"]),
                   int(d["nx"]), int(d["ny"]))


@dataclass(frozen=True)
class Ray3:
    """Straight ray from the closest point on the rupture to the site."""

    start: tuple  # (x, y, depth) km
    end: tuple

    @property
    def length(self) -> float:
        return math.dist(self.start, self.end)


def build_grid(bbox: tuple, dx: float = 25.0, dy: float = 25.0) -> CellGrid:
    """Smallest grid of whole cells anchored at the bbox south-west corner."""
    if not (dx > 0 and dy > 0):
        raise ValueError("cell sizes must be positive")
    (x0, y0), (x1, y1) = [(p.x, p.y) if isinstance(p, XY) else tuple(p) for p in bbox]
    xmin, xmax = min(x0, x1), max(x0, x1)
    ymin, ymax = min(y0, y1), max(y0, y1)
    if xmax == xmin and ymax == ymin:
        return CellGrid(XY(xmin - dx / 2, ymin - dy / 2), dx, dy, 1, 1)
    nx = max(1, math.ceil((xmax - xmin) / dx - 1e-9))
    ny = max(1, math.ceil((ymax - ymin) / dy - 1e-9))
    return CellGrid(XY(xmin, ymin), dx, dy, nx, ny)


def _axis_setup(p0, d, origin, size, i):
    if d > 0:
        return 1, (origin + (i + 1) * size - p0) / d, size / d
    if d < 0:
        return -1, (origin + i * size - p0) / d, -size / d
    return 0, math.inf, math.inf


def segment_ray(grid: CellGrid, ray: Ray3, ray_id=None) -> list[tuple[int, float]]:
    """Per-cell 3-D path lengths of ``ray``, in traversal order.

    Grid stepping follows Amanatides & Woo: the parametric positions of the
    next x and y cell boundaries are advanced incrementally.  When both are
    crossed at once (a cell corner) both indices advance together, so the
    diagonal neighbour touched only at the corner gets no entry.
    """
    x0, y0 = ray.start[0], ray.start[1]
    x1, y1 = ray.end[0], ray.end[1]
    for name, (px, py) in (("start", (x0, y0)), ("end", (x1, y1))):
        if not bool(grid.contains(px, py)):
            label = "" if ray_id is None else f" {ray_id}"
            raise RayOutsideGridError(
                f"ray{label} {name} point ({px:.3f}, {py:.3f}) km lies outside the cell grid"
            )
    length = ray.length
    ix, iy = (int(v) for v in grid.locate(x0, y0))
    step_x, t_max_x, t_dx = _axis_setup(x0, x1 - x0, grid.origin.x, grid.dx, ix)
    step_y, t_max_y, t_dy = _axis_setup(y0, y1 - y0, grid.origin.y, grid.dy, iy)

    out: list[tuple[int, float]] = []
    t_prev = 0.0
    while True:
        t_next = min(t_max_x, t_max_y, 1.0)
        seg = (t_next - t_prev) * length
        if seg > MIN_SEGMENT_KM:
            out.append((iy * grid.nx + ix, seg))
        if t_next >= 1.0:
            break
        t_prev = t_next
        if t_max_x < t_max_y:
            ix += step_x
            t_max_x += t_dx
        elif t_max_y < t_max_x:
            iy += step_y
            t_max_y += t_dy
        else:
            ix += step_x
            iy += step_y
            t_max_x += t_dx
            t_max_y += t_dy
        # rounding at the far edge can step one cell past the grid
        if not (0 <= ix < grid.nx and 0 <= iy < grid.ny):
            ix = min(max(ix, 0), grid.nx - 1)
            iy = min(max(iy, 0), grid.ny - 1)
    if not out:
        # degenerate ray (zero length): attribute to the start cell
        out.append((int(grid.cell_id(*grid.locate(x0, y0))), length))
    return out


def build_segment_matrix(grid: CellGrid, rays: Sequence[Ray3],
                         lengths: Iterable[float] | None = None,
                         ray_ids: Sequence | None = None) -> sp.csr_matrix:
    """Sparse (n_rays, n_cells) matrix of in-cell path lengths.

    When ``lengths`` is given each row is rescaled to add up to that value
    (used to tie rows to the tabulated rupture distance).
    """
    rows, cols, vals = [], [], []
    lengths = None if lengths is None else list(lengths)
    for r, ray in enumerate(rays):
        segs = segment_ray(grid, ray, ray_id=None if ray_ids is None else ray_ids[r])
        c = np.array([s[0] for s in segs])
        v = np.array([s[1] for s in segs])
        if lengths is not None:
            total = v.sum()
            v = v / total * lengths[r] if total > 0 else np.full_like(v, lengths[r] / len(v))
        rows.append(np.full(len(c), r))
        cols.append(c)
        vals.append(v)
    n = len(rays)
    if n == 0:
        return sp.csr_matrix((0, grid.n_cells))
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, grid.n_cells),
    )
    return mat.tocsr()


def coverage_stats(seg: sp.spmatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell number of paths and total traversed length (km)."""
    seg = sp.csc_matrix(seg)
    # explicit zeros do not count as a crossing
    counts = np.asarray((seg != 0).sum(axis=0)).ravel()
    lengths = np.asarray(seg.sum(axis=0)).ravel()
    return counts.astype(int), lengths


def write_segments_csv(path, seg: sp.spmatrix, record_ids: Sequence) -> None:
    coo = sp.coo_matrix(seg)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "cell_id", "dR_km"])
        for k in order:
            w.writerow([record_ids[coo.row[k]], int(coo.col[k]), repr(float(coo.data[k]))])


def read_segments_csv(path, record_ids: Sequence, n_cells: int) -> sp.csr_matrix:
    index = {str(r): i for i, r in enumerate(record_ids)}
    rows, cols, vals = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(index[row["record_id"]])
            cols.append(int(row["cell_id"]))
            vals.append(float(row["dR_km"]))
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(record_ids), n_cells))


def write_grid_csv(path, grid: CellGrid) -> None:
    mids = grid.midpoints()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "x_mid", "y_mid"])
        for i, (x, y) in enumerate(mids):
            w.writerow([i, repr(float(x)), repr(float(y))])


def read_grid_csv(path) -> CellGrid:
    """Rebuild a grid from its midpoint table (cell ids in row-major order)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    xs = np.unique(np.round(data[:, 1], 9))
    ys = np.unique(np.round(data[:, 2], 9))
    dx = float(np.min(np.diff(xs))) if len(xs) > 1 else None
    dy = float(np.min(np.diff(ys))) if len(ys) > 1 else None
    if dx is None and dy is None:
        raise ValueError("a single-cell grid CSV does not define the cell size; use the JSON grid form")
    dx = dx if dx is not None else dy
    dy = dy if dy is not None else dx
    return CellGrid(XY(xs[0] - dx / 2, ys[0] - dy / 2), dx, dy, len(xs), len(ys))
