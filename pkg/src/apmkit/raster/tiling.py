"""Sliding-window tiling and stitching.

A plan is a list of equal-size windows covering the grid; overlapping
windows let per-tile predictions be blended back into a seamless surface.
Each window carries a crop margin: at stitch time only its retained
center region contributes, except that windows touching the grid border
keep their context pixels on that side so the union of retained regions
always covers the full frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConfigError, DataError, DimensionError
from .grid import RasterGrid


@dataclass(frozen=True)
class TileWindow:
    """A square window: top-left corner, size, and stitch crop margin."""

    row0: int
    col0: int
    size: int
    crop_margin: int = 0

    def __post_init__(self) -> None:
        if self.size < 1:
            raise DataError(f"window size must be >= 1, got {self.size}")
        if self.row0 < 0 or self.col0 < 0:
            raise DataError(f"window corner ({self.row0}, {self.col0}) negative")
        if not 0 <= self.crop_margin < (self.size + 1) // 2:
            raise DataError(
                f"crop_margin {self.crop_margin} must satisfy 0 <= m < size/2"
            )

    def rows(self) -> slice:
        return slice(self.row0, self.row0 + self.size)

    def cols(self) -> slice:
        return slice(self.col0, self.col0 + self.size)

    def retained(self, height: int, width: int) -> tuple[slice, slice]:
        """Window-relative slices kept at stitch time.

        The margin is dropped on interior sides; sides flush with the grid
        border keep their pixels so border areas stay covered.
        """
        top = 0 if self.row0 == 0 else self.crop_margin
        bottom = 0 if self.row0 + self.size == height else self.crop_margin
        left = 0 if self.col0 == 0 else self.crop_margin
        right = 0 if self.col0 + self.size == width else self.crop_margin
        return slice(top, self.size - bottom), slice(left, self.size - right)


def _axis_positions(extent: int, tile: int, stride: int) -> list[int]:
    positions = list(range(0, extent - tile + 1, stride))
    if positions[-1] != extent - tile:
        positions.append(extent - tile)  # clamp the last window inward
    return positions


def plan_windows(
    height: int,
    width: int,
    tile_size: int,
    overlap_fraction: float,
    crop_margin: int | None = None,
) -> list[TileWindow]:
    """Plan a full-coverage sliding-window pass over an ``(H, W)`` frame.

    The stride is ``max(1, round(tile_size * (1 - overlap_fraction)))``;
    boundary windows are clamped inward so every window is full size.
    When ``crop_margin`` is None a margin is chosen so that retained
    center regions still cover every pixel: ``(tile_size - stride) // 2``.

    Windows are ordered row-major by corner.
    """
    if not 0.0 <= overlap_fraction < 1.0:
        raise ConfigError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    if tile_size < 1:
        raise ConfigError(f"tile_size must be >= 1, got {tile_size}")
    if tile_size > height or tile_size > width:
        raise DimensionError(
            f"tile_size {tile_size} exceeds grid extent {height}x{width}"
        )
    stride = max(1, int(round(tile_size * (1.0 - overlap_fraction))))
    if crop_margin is None:
        crop_margin = max(0, (tile_size - stride) // 2)
        crop_margin = min(crop_margin, (tile_size - 1) // 2)
    rows = _axis_positions(height, tile_size, stride)
    cols = _axis_positions(width, tile_size, stride)
    return [
        TileWindow(r, c, tile_size, crop_margin) for r in rows for c in cols
    ]


def tile_plan(
    grid: RasterGrid,
    tile_size: int,
    overlap_fraction: float,
    crop_margin: int | None = None,
) -> list[TileWindow]:
    """Plan windows over ``grid``; see :func:`plan_windows`."""
    return plan_windows(grid.height, grid.width, tile_size, overlap_fraction, crop_margin)


def extract_window(values: np.ndarray, window: TileWindow) -> np.ndarray:
    """View of ``values`` (``(H, W)`` or ``(B, H, W)``) under ``window``."""
    return values[..., window.rows(), window.cols()]


def _nearest_covered_fill(band: np.ndarray, covered: np.ndarray) -> np.ndarray:
    """Give uncovered pixels the value of the nearest covered one."""
    if not covered.any():
        raise DataError("no pixel is covered by any retained window region")
    out = band.copy()
    cov_rc = np.argwhere(covered)
    for r, c in np.argwhere(~covered):
        d2 = (cov_rc[:, 0] - r) ** 2 + (cov_rc[:, 1] - c) ** 2
        rr, cc = cov_rc[int(np.argmin(d2))]
        out[r, c] = band[rr, cc]
    return out


def stitch(
    predictions: Sequence[np.ndarray],
    plan: Sequence[TileWindow],
    shape: tuple[int, int],
    geotransform: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0),
    band_names: tuple[str, ...] | None = None,
    meta: dict | None = None,
) -> RasterGrid:
    """Blend per-window predictions into one raster.

    Each output pixel is the mean of the retained-center contributions
    covering it; sums and counts are accumulated in float64 and divided
    once, so the result does not depend on window order. Should a pixel
    end up covered by no retained region (possible only with hand-built
    plans), it falls back to the value of the nearest covered pixel.

    Args:
        predictions: One array per window, ``(size, size)`` or
            ``(bands, size, size)``, in plan order.
        plan: The windows, as produced by :func:`plan_windows`.
        shape: Output ``(height, width)``.

    Returns:
        Stitched RasterGrid (float32).
    """
    height, width = int(shape[0]), int(shape[1])
    if len(predictions) != len(plan):
        raise DataError(
            f"{len(predictions)} predictions for {len(plan)} planned windows"
        )
    if not plan:
        raise DataError("empty tile plan")
    first = np.asarray(predictions[0])
    nbands = 1 if first.ndim == 2 else first.shape[0]
    acc = np.zeros((nbands, height, width), dtype=np.float64)
    count = np.zeros((height, width), dtype=np.float64)
    for window, pred in zip(plan, predictions):
        arr = np.asarray(pred, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.shape != (nbands, window.size, window.size):
            raise DataError(
                f"prediction shape {arr.shape} does not match window size "
                f"{window.size} with {nbands} bands"
            )
        if window.row0 + window.size > height or window.col0 + window.size > width:
            raise DataError(f"window {window} overruns the {height}x{width} frame")
        rel_r, rel_c = window.retained(height, width)
        abs_r = slice(window.row0 + rel_r.start, window.row0 + rel_r.stop)
        abs_c = slice(window.col0 + rel_c.start, window.col0 + rel_c.stop)
        acc[:, abs_r, abs_c] += arr[:, rel_r, rel_c]
        count[abs_r, abs_c] += 1.0
    covered = count > 0
    out = np.empty_like(acc)
    for b in range(nbands):
        band = np.divide(acc[b], count, out=np.zeros_like(count), where=covered)
        if not covered.all():
            band = _nearest_covered_fill(band, covered)
        out[b] = band
    if band_names is None:
        band_names = tuple(f"band_{i + 1}" for i in range(nbands))
    return RasterGrid(
        out.astype(np.float32),
        geotransform,
        np.zeros((height, width), dtype=bool),
        band_names,
        meta or {},
    )


def save_plan(
    path,
    plan: Sequence[TileWindow],
    shape: tuple[int, int],
    geotransform: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0),
) -> None:
    """Write a window plan, with its frame shape and geotransform, as JSON."""
    doc = {
        "height": int(shape[0]),
        "width": int(shape[1]),
        "geotransform": [float(v) for v in geotransform],
        "windows": [
            {
                "row0": w.row0,
                "col0": w.col0,
                "size": w.size,
                "crop_margin": w.crop_margin,
            }
            for w in plan
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_plan(path) -> tuple[list[TileWindow], tuple[int, int], tuple[float, float, float, float]]:
    """Read a plan written by :func:`save_plan`.

    Returns:
        (windows, (height, width), geotransform).
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid plan JSON: {exc}") from exc
    try:
        shape = (int(doc["height"]), int(doc["width"]))
        gt = tuple(float(v) for v in doc["geotransform"])
        windows = [
            TileWindow(int(w["row0"]), int(w["col0"]), int(w["size"]),
                       int(w.get("crop_margin", 0)))
            for w in doc["windows"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed plan: {exc}") from exc
    if len(gt) != 4:
        raise DataError(f"{path}: geotransform must have 4 entries")
    return windows, shape, gt
