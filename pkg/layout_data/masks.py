"""
Polygon <-> raster conversion for instance masks.

Pixel (r, c) covers the half-open square [c, c+1) x [r, r+1); it is "on" when
its centre (c+0.5, r+0.5) lies inside the polygon set under the even-odd rule.
"""
from typing import List, Sequence

import numpy as np

Polygon = Sequence[float]  # flat [x0, y0, x1, y1, ...] as in COCO


def rasterize_polygons(polygons: Sequence[Polygon], height: int, width: int) -> np.ndarray:
    """Even-odd fill of flat COCO polygons onto a (height, width) boolean grid."""
    out = np.zeros((height, width), dtype=bool)
    if height <= 0 or width <= 0:
        return out
    yc = np.arange(height, dtype=np.float64) + 0.5
    xc = np.arange(width, dtype=np.float64) + 0.5

    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 3:
            continue
        x0, y0 = pts[:, 0], pts[:, 1]
        x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
        for ax, ay, bx, by in zip(x0, y0, x1, y1):
            if ay == by:
                continue
            lo, hi = (ay, by) if ay < by else (by, ay)
            rows = np.nonzero((yc >= lo) & (yc < hi))[0]
            if rows.size == 0:
                continue
            t = (yc[rows] - ay) / (by - ay)
            x_cross = ax + t * (bx - ax)
            # toggle every pixel centre left of the crossing
            out[rows] ^= xc[None, :] < x_cross[:, None]
    return out


def polygonize_raster(raster: np.ndarray) -> List[List[float]]:
    """
    Decompose a boolean raster into disjoint axis-aligned rectangles.

    Horizontal runs are merged with identical runs on the following rows, so
    a filled rectangle comes back as a single 4-vertex polygon.
    """
    raster = np.asarray(raster, dtype=bool)
    polygons: List[List[float]] = []
    open_runs = {}  # (c0, c1) -> starting row

    def runs_of(row: np.ndarray):
        padded = np.concatenate(([False], row, [False]))
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        return set(zip(edges[0::2].tolist(), edges[1::2].tolist()))

    def close(run, r0, r1):
        c0, c1 = run
        polygons.append([float(c0), float(r0), float(c1), float(r0),
                         float(c1), float(r1), float(c0), float(r1)])

    for r in range(raster.shape[0]):
        current = runs_of(raster[r])
        for run in list(open_runs):
            if run not in current:
                close(run, open_runs.pop(run), r)
        for run in current:
            open_runs.setdefault(run, r)
    for run, r0 in sorted(open_runs.items(), key=lambda kv: kv[1]):
        close(run, r0, raster.shape[0])
    return polygons


def polygon_bounds(polygons: Sequence[Polygon]):
    """Vertex extent (x_min, y_min, x_max, y_max) of a polygon set, or None."""
    pts = [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in polygons if len(p) >= 2]
    if not pts:
        return None
    allp = np.concatenate(pts)
    return (float(allp[:, 0].min()), float(allp[:, 1].min()),
            float(allp[:, 0].max()), float(allp[:, 1].max()))
