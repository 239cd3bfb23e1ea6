import time
from collections import Counter

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from nonergodic_eas.cells import (
    CellGrid,
    Ray3,
    RayOutsideGridError,
    build_grid,
    build_segment_matrix,
    coverage_stats,
    read_grid_csv,
    read_segments_csv,
    segment_ray,
    write_grid_csv,
    write_segments_csv,
)
from nonergodic_eas.geo import XY

GRID = CellGrid(XY(0.0, 0.0), 25.0, 25.0, 8, 8)


def brute_force(grid, ray, step_km=1e-3):
    """In-cell lengths by sampling the ray at midpoints of short pieces."""
    p0, p1 = np.asarray(ray.start), np.asarray(ray.end)
    n = max(int(np.ceil(ray.length / step_km)), 1)
    t = (np.arange(n) + 0.5) / n
    pts = p0[None, :] + t[:, None] * (p1 - p0)[None, :]
    ix, iy = grid.locate(pts[:, 0], pts[:, 1])
    ids = grid.cell_id(ix, iy)
    out = Counter()
    for c in ids:
        out[int(c)] += ray.length / n
    return out


def random_rays(rng, grid, n):
    lo = np.array([grid.origin.x, grid.origin.y])
    hi = np.array([grid.x_max, grid.y_max])
    a = rng.uniform(lo, hi, (n, 2))
    b = rng.uniform(lo, hi, (n, 2))
    za = rng.uniform(0.0, 20.0, n)
    return [Ray3((a[i, 0], a[i, 1], za[i]), (b[i, 0], b[i, 1], 0.0)) for i in range(n)]


def test_build_grid_exact_tiling():
    g = build_grid((XY(0, 0), XY(100, 100)), 25, 25)
    assert (g.nx, g.ny, g.n_cells) == (4, 4, 16)


def test_build_grid_expands_outward():
    g = build_grid((XY(0, 0), XY(101, 99)), 25, 25)
    assert (g.nx, g.ny) == (5, 4)
    assert g.x_max >= 101 and g.y_max >= 99


def test_build_grid_degenerate_bbox():
    g = build_grid((XY(10, 20), XY(10, 20)), 25, 25)
    assert g.n_cells == 1
    assert bool(g.contains(10, 20))


def test_build_grid_rejects_bad_cell_size():
    with pytest.raises(ValueError):
        build_grid((XY(0, 0), XY(10, 10)), 0.0, 25)
    with pytest.raises(ValueError):
        CellGrid(XY(0, 0), 25, -1, 2, 2)


def test_axis_aligned_split():
    segs = segment_ray(GRID, Ray3((25.0, 10.0, 0.0), (75.0, 10.0, 0.0)))
    assert [c for c, _ in segs] == [1, 2]
    np.testing.assert_allclose([d for _, d in segs], [25.0, 25.0], rtol=1e-12)


def test_ray_inside_single_cell():
    ray = Ray3((30.0, 30.0, 8.0), (40.0, 45.0, 0.0))
    segs = segment_ray(GRID, ray)
    assert len(segs) == 1
    assert segs[0][0] == GRID.cell_id(1, 1)
    assert segs[0][1] == pytest.approx(ray.length, rel=1e-12)


def test_diagonal_through_corner_matches_brute_force():
    ray = Ray3((10.0, 10.0, 0.0), (60.0, 60.0, 0.0))
    segs = segment_ray(GRID, ray)
    assert sum(d for _, d in segs) == pytest.approx(ray.length, rel=1e-12)
    got = Counter()
    for c, d in segs:
        got[c] += d
    ref = brute_force(GRID, ray)
    for c in set(got) | set(ref):
        assert abs(got[c] - ref[c]) <= 1e-3 * ray.length


@pytest.mark.parametrize("seed", range(5))
def test_random_rays_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    for ray in random_rays(rng, GRID, 4):
        got = Counter()
        for c, d in segment_ray(GRID, ray):
            got[c] += d
        ref = brute_force(GRID, ray, step_km=5e-3)
        for c in set(got) | set(ref):
            assert abs(got[c] - ref[c]) <= 1e-3 * ray.length


def test_row_sum_identity_over_random_rays():
    rng = np.random.default_rng(0)
    rays = random_rays(rng, GRID, 1000)
    err = max(abs(sum(d for _, d in segment_ray(GRID, r)) - r.length) / r.length for r in rays)
    assert err < 1e-9


def test_segments_are_contiguous_in_traversal_order():
    ray = Ray3((1.0, 1.0, 5.0), (190.0, 120.0, 0.0))
    cells = [c for c, _ in segment_ray(GRID, ray)]
    ix, iy = np.array(cells) % GRID.nx, np.array(cells) // GRID.nx
    steps = np.abs(np.diff(ix)) + np.abs(np.diff(iy))
    assert np.all(steps >= 1) and np.all(np.abs(np.diff(ix)) <= 1) and np.all(np.abs(np.diff(iy)) <= 1)


def test_ray_leaving_grid_names_endpoint():
    with pytest.raises(RayOutsideGridError, match="r17 end"):
        segment_ray(GRID, Ray3((10.0, 10.0, 0.0), (300.0, 10.0, 0.0)), ray_id="r17")


def test_zero_length_ray():
    segs = segment_ray(GRID, Ray3((30.0, 30.0, 0.0), (30.0, 30.0, 0.0)))
    assert segs == [(int(GRID.cell_id(1, 1)), 0.0)]


coords = st.floats(0.5, 199.5)


@given(coords, coords, coords, coords, st.floats(0.0, 30.0))
@settings(max_examples=200, deadline=None)
def test_reversal_gives_same_multiset(x0, y0, x1, y1, z):
    fwd = segment_ray(GRID, Ray3((x0, y0, z), (x1, y1, 0.0)))
    bwd = segment_ray(GRID, Ray3((x1, y1, 0.0), (x0, y0, z)))
    a = sorted(fwd)
    b = sorted(bwd)
    assert [c for c, _ in a] == [c for c, _ in b]
    np.testing.assert_allclose([d for _, d in a], [d for _, d in b], rtol=1e-9, atol=1e-9)


@given(coords, coords, coords, coords, st.floats(-500.0, 500.0), st.floats(-500.0, 500.0))
@settings(max_examples=200, deadline=None)
def test_translation_equivariance(x0, y0, x1, y1, tx, ty):
    shifted = CellGrid(XY(tx, ty), GRID.dx, GRID.dy, GRID.nx, GRID.ny)
    a = segment_ray(GRID, Ray3((x0, y0, 3.0), (x1, y1, 0.0)))
    b = segment_ray(shifted, Ray3((x0 + tx, y0 + ty, 3.0), (x1 + tx, y1 + ty, 0.0)))
    assert [c for c, _ in a] == [c for c, _ in b]
    np.testing.assert_allclose([d for _, d in a], [d for _, d in b], rtol=1e-7, atol=1e-7)


@given(coords, coords, coords, coords, st.floats(0.0, 30.0))
@settings(max_examples=300, deadline=None)
def test_row_sum_property(x0, y0, x1, y1, z):
    ray = Ray3((x0, y0, z), (x1, y1, 0.0))
    segs = segment_ray(GRID, ray)
    assert all(d >= 0 for _, d in segs)
    total = sum(d for _, d in segs)
    assert abs(total - ray.length) <= 1e-9 * max(ray.length, 1e-12)


def test_segment_matrix_rescales_to_tabulated_length():
    rng = np.random.default_rng(1)
    rays = random_rays(rng, GRID, 50)
    lengths = [r.length * 1.01 for r in rays]
    mat = build_segment_matrix(GRID, rays, lengths)
    np.testing.assert_allclose(np.asarray(mat.sum(axis=1)).ravel(), lengths, rtol=1e-12)
    assert mat.shape == (50, GRID.n_cells)
    assert mat.data.min() >= 0


def test_empty_segment_matrix():
    mat = build_segment_matrix(GRID, [])
    assert mat.shape == (0, GRID.n_cells)
    counts, lengths = coverage_stats(mat)
    assert counts.sum() == 0 and lengths.sum() == 0


def test_coverage_one_ray_three_cells():
    mat = build_segment_matrix(GRID, [Ray3((5.0, 5.0, 0.0), (70.0, 5.0, 0.0))])
    counts, lengths = coverage_stats(mat)
    assert list(np.flatnonzero(counts)) == [0, 1, 2]
    assert counts.sum() == 3
    assert lengths.sum() == pytest.approx(65.0)


def test_coverage_fan_matches_recount():
    rng = np.random.default_rng(2)
    src = (100.0, 100.0, 10.0)
    ends = rng.uniform(0.0, 200.0, (100, 2))
    rays = [Ray3(src, (x, y, 0.0)) for x, y in ends]
    counts, _ = coverage_stats(build_segment_matrix(GRID, rays))
    ref = np.zeros(GRID.n_cells, dtype=int)
    for r in rays:
        for c in {c for c, _ in segment_ray(GRID, r)}:
            ref[c] += 1
    np.testing.assert_array_equal(counts, ref)


def test_csv_round_trips(tmp_path):
    rng = np.random.default_rng(4)
    rays = random_rays(rng, GRID, 20)
    mat = build_segment_matrix(GRID, rays)
    ids = [f"rec{i}" for i in range(20)]
    write_segments_csv(tmp_path / "seg.csv", mat, ids)
    back = read_segments_csv(tmp_path / "seg.csv", ids, GRID.n_cells)
    assert abs(back - mat).max() == 0.0
    write_grid_csv(tmp_path / "grid.csv", GRID)
    assert read_grid_csv(tmp_path / "grid.csv") == GRID


def test_segmentation_speed():
    rng = np.random.default_rng(9)
    rays = random_rays(rng, GRID, 10_000)
    t0 = time.perf_counter()
    mat = build_segment_matrix(GRID, rays)
    elapsed = time.perf_counter() - t0
    assert sp.issparse(mat)
    assert elapsed < 5.0
