"""Flatfile ingestion: projection, region labels and path segmentation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .cells import CellGrid, Ray3, RayOutsideGridError, build_grid, segment_ray
from .geo import XY, GeoPoint, classify_regions, latlon_to_utm, load_polygons
from .model import Dataset

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("event_id", "station_id", "mag", "rrup_km", "vs30", "eq_lat", "eq_lon",
                    "sta_lat", "sta_lon", "cls_lat", "cls_lon", "cls_depth_km")
RES_PREFIX = "res_f"


class IngestError(ValueError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


@dataclass
class IngestReport:
    rows_in: int = 0
    records: int = 0
    rejected: list = field(default_factory=list)  # (row, reason)
    counts: dict = field(default_factory=dict)


def residual_columns(columns) -> dict:
    """Map frequency (Hz) to its ``res_f<freq>`` column name, sorted by frequency."""
    out = {}
    for c in columns:
        if c.startswith(RES_PREFIX):
            try:
                out[float(c[len(RES_PREFIX):])] = c
            except ValueError as exc:
                raise IngestError(f"cannot parse frequency from column {c!r}") from exc
    return dict(sorted(out.items()))


def read_c7(source, freqs) -> np.ndarray:
    """c7 per frequency from a ``{freq: c7}`` mapping or JSON file.

    Frequencies missing from the table are interpolated linearly in
    ln(frequency), with a warning.
    """
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            source = json.load(fh)
    table = {float(k): float(v) for k, v in dict(source).items()}
    if not table:
        raise IngestError("empty c7 table")
    fk = np.array(sorted(table))
    ck = np.array([table[f] for f in fk])
    out = []
    for f in freqs:
        hit = np.isclose(fk, f, rtol=1e-9, atol=0)
        if hit.any():
            out.append(ck[hit][0])
            continue
        if not fk[0] <= f <= fk[-1]:
            raise IngestError(f"c7 requested at {f} Hz outside the tabulated range [{fk[0]}, {fk[-1]}]")
        logger.warning("c7 at %g Hz interpolated in log-frequency", f)
        out.append(float(np.interp(np.log(f), np.log(fk), ck)))
    return np.asarray(out, dtype=float)


def _read_frame(flatfile) -> pd.DataFrame:
    if isinstance(flatfile, pd.DataFrame):
        return flatfile.reset_index(drop=True)
    return pd.read_csv(flatfile, dtype={"event_id": str, "station_id": str}, float_precision="round_trip")


def _check_row(row_no, row, rescols):
    for c in REQUIRED_COLUMNS[2:]:
        v = row[c]
        if not np.isfinite(v):
            raise IngestError(f"non-finite value in column {c!r}", row_no)
    for pre in ("eq", "sta", "cls"):
        try:
            GeoPoint(row[f"{pre}_lat"], row[f"{pre}_lon"])
        except ValueError as exc:
            raise IngestError(f"{pre} coordinates invalid ({exc})", row_no) from exc
        if abs(row[f"{pre}_lat"]) > 84.0:
            raise IngestError(f"{pre} latitude outside the UTM band", row_no)
    if not row["rrup_km"] > 0:
        raise IngestError("rrup_km must be positive", row_no)
    if not 2.0 <= row["mag"] <= 9.0:
        raise IngestError(f"magnitude {row['mag']} outside [2, 9]", row_no)
    for c in rescols:
        if np.isinf(row[c]):
            raise IngestError(f"infinite residual in {c!r}", row_no)


def ingest(flatfile, c7, polygons=None, zone="11S", grid: CellGrid | None = None,
           cell_size: float = 25.0, on_error: str = "raise") -> tuple[Dataset, IngestReport]:
    """Load a flatfile into a :class:`Dataset` with its segment matrix.

    Empty residual cells mark a record as unusable at that frequency.  With
    ``on_error='skip'`` bad rows are dropped and logged instead of raising;
    row numbers are 1-based data rows.
    """
    if on_error not in ("raise", "skip"):
        raise ValueError("on_error must be 'raise' or 'skip'")
    df = _read_frame(flatfile)
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise IngestError(f"missing columns: {missing}")
    rescols = residual_columns(df.columns)
    freqs = np.array(list(rescols), dtype=float)
    report = IngestReport(rows_in=len(df))
    polys = load_polygons() if polygons is None else polygons
    if not isinstance(polys, list):
        polys = load_polygons(polys)

    num = df[list(REQUIRED_COLUMNS[2:]) + list(rescols.values())].apply(pd.to_numeric, errors="coerce")
    keep = []
    for i in range(len(df)):
        try:
            _check_row(i + 1, num.iloc[i], rescols.values())
            keep.append(i)
        except IngestError as exc:
            if on_error == "raise":
                raise
            logger.warning("rejected %s", exc)
            report.rejected.append((i + 1, str(exc)))
    df = df.iloc[keep].reset_index(drop=True)
    num = num.iloc[keep].reset_index(drop=True)
    rows = np.array(keep, dtype=int) + 1

    def xy(pre):
        if len(num) == 0:
            return np.zeros((0, 2))
        x, y = latlon_to_utm(num[f"{pre}_lat"].to_numpy(), num[f"{pre}_lon"].to_numpy(), zone)
        return np.column_stack([np.atleast_1d(x), np.atleast_1d(y)])

    eq_xy, sta_xy, cls_xy = xy("eq"), xy("sta"), xy("cls")
    depth = num["cls_depth_km"].to_numpy(dtype=float) if len(num) else np.zeros(0)
    rrup = num["rrup_km"].to_numpy(dtype=float) if len(num) else np.zeros(0)

    if grid is None:
        pts = np.vstack([eq_xy, sta_xy, cls_xy])
        if len(pts):
            grid = build_grid((tuple(pts.min(axis=0)), tuple(pts.max(axis=0))), cell_size, cell_size)
        else:
            grid = CellGrid(XY(0.0, 0.0), cell_size, cell_size, 1, 1)

    r_idx, c_idx, vals, good = [], [], [], []
    for i in range(len(num)):
        ray = Ray3((cls_xy[i, 0], cls_xy[i, 1], depth[i]), (sta_xy[i, 0], sta_xy[i, 1], 0.0))
        try:
            segs = segment_ray(grid, ray, ray_id=f"row {rows[i]}")
        except RayOutsideGridError as exc:
            if on_error == "raise":
                raise IngestError(str(exc), int(rows[i])) from exc
            logger.warning("rejected row %d: %s", rows[i], exc)
            report.rejected.append((int(rows[i]), str(exc)))
            continue
        if abs(ray.length - rrup[i]) > 1e-3 * rrup[i]:
            logger.debug("row %d: ray length %.4f km vs rrup %.4f km; row rescaled",
                         rows[i], ray.length, rrup[i])
        v = np.array([s[1] for s in segs])
        v = v * (rrup[i] / v.sum()) if v.sum() > 0 else np.full(len(v), rrup[i] / len(v))
        k = len(good)
        r_idx.extend([k] * len(segs))
        c_idx.extend(s[0] for s in segs)
        vals.extend(v)
        good.append(i)
    good = np.asarray(good, dtype=int)
    seg = sp.csr_matrix((vals, (r_idx, c_idx)), shape=(len(good), grid.n_cells))

    sub = num.iloc[good] if len(good) else num.iloc[:0]
    region = (classify_regions(sub["eq_lat"].to_numpy(), sub["eq_lon"].to_numpy(), polys)
              if len(good) else np.zeros(0, dtype=object))
    residuals = (sub[list(rescols.values())].to_numpy(dtype=float) if len(good)
                 else np.zeros((0, len(freqs))))
    data = Dataset(
        record_id=np.array([f"r{r}" for r in rows[good]] if len(good) else [], dtype=object),
        event_id=df["event_id"].astype(str).to_numpy(dtype=object)[good],
        station_id=df["station_id"].astype(str).to_numpy(dtype=object)[good],
        mag=sub["mag"].to_numpy(dtype=float) if len(good) else np.zeros(0),
        rrup=rrup[good],
        vs30=sub["vs30"].to_numpy(dtype=float) if len(good) else np.zeros(0),
        eq_xy=eq_xy[good] if len(good) else np.zeros((0, 2)),
        sta_xy=sta_xy[good] if len(good) else np.zeros((0, 2)),
        cls_xyz=(np.column_stack([cls_xy[good], depth[good]]) if len(good) else np.zeros((0, 3))),
        region=np.asarray(region, dtype=object),
        freqs=freqs,
        residuals=residuals,
        c7=read_c7(c7, freqs) if len(freqs) else np.zeros(0),
        seg=seg,
        grid=grid,
    )
    report.records = data.n_records
    report.counts = data.counts()
    logger.info("ingested %d records (%d rejected)", report.records, len(report.rejected))
    return data, report
