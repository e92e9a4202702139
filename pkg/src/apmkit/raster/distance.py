"""Exact Euclidean distance transforms and distance-to-feature maps.

Distances are measured in map units between pixel centers, with
anisotropic pixel sizes supported. The transform is the classic two-pass
lower-envelope scheme: an index sweep along columns followed by a
parabolic envelope along rows, which is exact (no chamfer approximation).
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

from ..errors import DataError, EmptyInputError
from .grid import RasterGrid


def _envelope_1d(f: np.ndarray, spacing: float) -> np.ndarray:
    """1-D squared-distance transform of sampled function ``f``.

    Returns ``min_j (spacing*(i - j))**2 + f[j]`` for every ``i``. Entries
    with ``f[j] = inf`` contribute no parabola.
    """
    n = f.size
    out = np.full(n, np.inf)
    v = np.zeros(n, dtype=np.intp)
    z = np.zeros(n + 1)
    k = -1
    s = 0.0
    for i in range(n):
        fi = f[i]
        if not np.isfinite(fi):
            continue
        q = i * spacing
        while k >= 0:
            p = v[k] * spacing
            s = ((fi + q * q) - (f[v[k]] + p * p)) / (2.0 * q - 2.0 * p)
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = i
        z[k] = -np.inf if k == 0 else s
        z[k + 1] = np.inf
    if k < 0:
        return out
    j = 0
    for i in range(n):
        x = i * spacing
        while z[j + 1] < x:
            j += 1
        p = v[j] * spacing
        out[i] = (x - p) ** 2 + f[v[j]]
    return out


def distance_to_mask(
    target: np.ndarray, pixel_size_x: float, pixel_size_y: float
) -> np.ndarray:
    """Exact Euclidean distance (map units) from each pixel center to the
    nearest True pixel center in ``target``.

    Args:
        target: Boolean (H, W) array of target pixels; must contain >= 1.
        pixel_size_x: Column spacing in map units (> 0).
        pixel_size_y: Row spacing in map units (sign ignored).

    Returns:
        Float64 (H, W) distances; zero on target pixels.
    """
    target = np.asarray(target, dtype=bool)
    if target.ndim != 2:
        raise DataError(f"target mask must be 2-D, got shape {target.shape}")
    if not target.any():
        raise EmptyInputError("empty target set: no pixels to measure distance to")
    height, width = target.shape
    dx = float(pixel_size_x)
    dy = abs(float(pixel_size_y))
    # Pass 1: per-column nearest target measured in row steps.
    steps = np.where(target, 0.0, np.inf)
    for r in range(1, height):
        steps[r] = np.minimum(steps[r], steps[r - 1] + 1.0)
    for r in range(height - 2, -1, -1):
        steps[r] = np.minimum(steps[r], steps[r + 1] + 1.0)
    sq = np.where(np.isfinite(steps), (steps * dy) ** 2, np.inf)
    # Pass 2: parabolic envelope along each row.
    out = np.empty((height, width), dtype=np.float64)
    for r in range(height):
        out[r] = _envelope_1d(sq[r], dx)
    return np.sqrt(out)


# --- target geometry ---------------------------------------------------------


def rasterize_points(grid: RasterGrid, points: list[tuple[float, float]]) -> np.ndarray:
    """Mark the pixel containing each point; points outside are ignored."""
    mask = np.zeros(grid.shape, dtype=bool)
    for x, y in points:
        row, col = grid.pixel_of(float(x), float(y))
        if 0 <= row < grid.height and 0 <= col < grid.width:
            mask[row, col] = True
    return mask


def rasterize_lines(
    grid: RasterGrid, lines: list[list[tuple[float, float]]]
) -> np.ndarray:
    """Mark pixels traversed by polylines, by dense sampling along segments."""
    mask = np.zeros(grid.shape, dtype=bool)
    _, _, px, py = grid.geotransform
    step = 0.5 * min(px, abs(py))
    for line in lines:
        if len(line) < 2:
            raise DataError("polyline needs at least two vertices")
        for (x0, y0), (x1, y1) in zip(line[:-1], line[1:]):
            length = math.hypot(x1 - x0, y1 - y0)
            n = max(1, int(math.ceil(length / step)))
            ts = np.linspace(0.0, 1.0, n + 1)
            xs = x0 + ts * (x1 - x0)
            ys = y0 + ts * (y1 - y0)
            for x, y in zip(xs, ys):
                row, col = grid.pixel_of(float(x), float(y))
                if 0 <= row < grid.height and 0 <= col < grid.width:
                    mask[row, col] = True
    return mask


def load_targets(path: str | os.PathLike) -> tuple[list, list]:
    """Load a JSON targets file: ``{"points": [[x, y], ...], "lines": [...]}``."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"{path}: targets file must hold a JSON object")
    points = [tuple(map(float, p)) for p in doc.get("points", [])]
    lines = [[tuple(map(float, v)) for v in ln] for ln in doc.get("lines", [])]
    return points, lines


def distance_map(
    grid: RasterGrid,
    points: list[tuple[float, float]] | None = None,
    lines: list[list[tuple[float, float]]] | None = None,
    band_name: str = "distance",
) -> RasterGrid:
    """Distance surface (map units) to the nearest of the given targets.

    Targets are rasterized onto the grid first: points mark their
    containing pixel, polylines every pixel they traverse. Distance is then
    the exact center-to-center Euclidean distance to the nearest marked
    pixel; marked pixels read zero.

    Raises:
        EmptyInputError: when no target falls inside the grid.
    """
    target = np.zeros(grid.shape, dtype=bool)
    if points:
        target |= rasterize_points(grid, points)
    if lines:
        target |= rasterize_lines(grid, lines)
    if not target.any():
        raise EmptyInputError("no distance targets fall inside the grid")
    _, _, px, py = grid.geotransform
    dist = distance_to_mask(target, px, py)
    return RasterGrid.from_array(
        dist.astype(np.float32),
        grid.geotransform,
        grid.nodata_mask,
        (band_name,),
        {"targets": int(target.sum())},
    )
