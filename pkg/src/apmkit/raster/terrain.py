"""Terrain derivatives from a digital elevation model.

``derive_terrain`` turns a single-band DEM into three feature bands:

* slope in degrees, from the Horn 3x3 stencil;
* aspect as a compass bearing of steepest descent (0 = north, clockwise,
  in [0, 360)), with flat cells set to the sentinel -1;
* proximity to the drainage network in map units, where the network is
  the set of cells whose D8 flow accumulation reaches a fraction of the
  grid's cell count.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, EmptyInputError
from .distance import distance_to_mask
from .grid import RasterGrid, fill_holes

FLAT_ASPECT = -1.0

# D8 neighbour offsets, fixed order for deterministic tie-breaks.
_D8_OFFSETS = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)


def horn_gradients(
    values: np.ndarray, pixel_size_x: float, pixel_size_y: float
) -> tuple[np.ndarray, np.ndarray]:
    """Map-frame elevation gradients (dz/dx, dz/dy) via the Horn stencil.

    Boundary cells use edge replication. ``pixel_size_y`` is signed; the
    returned dz/dy is with respect to the +y (northing) axis either way.
    """
    z = np.pad(np.asarray(values, dtype=np.float64), 1, mode="edge")
    dz_dcol = (
        (z[:-2, 2:] + 2.0 * z[1:-1, 2:] + z[2:, 2:])
        - (z[:-2, :-2] + 2.0 * z[1:-1, :-2] + z[2:, :-2])
    ) / 8.0
    dz_drow = (
        (z[2:, :-2] + 2.0 * z[2:, 1:-1] + z[2:, 2:])
        - (z[:-2, :-2] + 2.0 * z[:-2, 1:-1] + z[:-2, 2:])
    ) / 8.0
    gx = dz_dcol / float(pixel_size_x)
    gy = dz_drow / float(pixel_size_y)
    return gx, gy


def slope_aspect(
    values: np.ndarray, pixel_size_x: float, pixel_size_y: float
) -> tuple[np.ndarray, np.ndarray]:
    """Slope (degrees, [0, 90]) and downslope aspect (degrees, [0, 360)).

    Flat cells (zero gradient) get aspect ``FLAT_ASPECT``.
    """
    gx, gy = horn_gradients(values, pixel_size_x, pixel_size_y)
    slope = np.degrees(np.arctan(np.hypot(gx, gy)))
    aspect = np.degrees(np.arctan2(-gx, -gy)) % 360.0
    flat = (gx == 0.0) & (gy == 0.0)
    aspect[flat] = FLAT_ASPECT
    return slope, aspect


def d8_flow_targets(
    values: np.ndarray,
    valid: np.ndarray,
    pixel_size_x: float,
    pixel_size_y: float,
) -> np.ndarray:
    """Flat index of each cell's steepest-descent neighbour, or -1 for pits.

    Drops are elevation differences divided by center distance, so the
    diagonal direction competes fairly with the axis ones. Only strictly
    lower, valid neighbours receive flow.
    """
    height, width = values.shape
    dx = float(pixel_size_x)
    dy = abs(float(pixel_size_y))
    best_drop = np.zeros((height, width), dtype=np.float64)
    target = np.full((height, width), -1, dtype=np.int64)
    cols = np.arange(width)
    rows = np.arange(height)
    flat_index = rows[:, None] * width + cols[None, :]
    z = np.where(valid, values, np.inf)
    for dr, dc in _D8_OFFSETS:
        dist = np.hypot(dr * dy, dc * dx)
        src_r = slice(max(0, dr), height + min(0, dr))
        src_c = slice(max(0, dc), width + min(0, dc))
        dst_r = slice(max(0, -dr), height - max(0, dr))
        dst_c = slice(max(0, -dc), width - max(0, dc))
        drop = np.full((height, width), -np.inf)
        # inf - inf between two masked cells is fine: the NaN never wins.
        with np.errstate(invalid="ignore"):
            drop[dst_r, dst_c] = (z[dst_r, dst_c] - z[src_r, src_c]) / dist
        nbr = np.full((height, width), -1, dtype=np.int64)
        nbr[dst_r, dst_c] = flat_index[src_r, src_c]
        better = valid & (drop > best_drop) & (drop > 0.0)
        best_drop[better] = drop[better]
        target[better] = nbr[better]
    return target


def flow_accumulation(
    values: np.ndarray,
    valid: np.ndarray,
    pixel_size_x: float,
    pixel_size_y: float,
) -> np.ndarray:
    """D8 accumulation: number of cells (self included) draining through each.

    Cells are processed from highest to lowest so every contribution is
    final when passed downstream. Invalid cells take no part.
    """
    height, width = values.shape
    target = d8_flow_targets(values, valid, pixel_size_x, pixel_size_y)
    acc = np.where(valid, 1.0, 0.0).ravel()
    flat_target = target.ravel()
    z = np.where(valid, values, -np.inf).ravel()
    order = np.argsort(-z, kind="stable")
    for idx in order:
        t = flat_target[idx]
        if t >= 0:
            acc[t] += acc[idx]
    return acc.reshape(height, width)


def stream_mask(
    values: np.ndarray,
    valid: np.ndarray,
    pixel_size_x: float,
    pixel_size_y: float,
    threshold_fraction: float = 0.01,
) -> np.ndarray:
    """Drainage cells: accumulation at or above ``threshold_fraction`` of the
    valid cell count. If the threshold exceeds every accumulation value the
    maximum-accumulation cells stand in, so the mask is never empty.
    """
    acc = flow_accumulation(values, valid, pixel_size_x, pixel_size_y)
    threshold = threshold_fraction * float(valid.sum())
    mask = valid & (acc >= threshold)
    if not mask.any():
        mask = valid & (acc == acc[valid].max())
    return mask


def derive_terrain(
    dem: RasterGrid, stream_threshold: float = 0.01
) -> RasterGrid:
    """Derive slope, aspect and drainage proximity bands from a DEM.

    Args:
        dem: Single-band elevation grid, at least 3x3, not fully masked.
        stream_threshold: Flow-accumulation fraction defining the drainage
            network.

    Returns:
        Three-band grid (``slope``, ``aspect``, ``hydro_proximity``) on the
        DEM's frame, masked where the DEM is masked.
    """
    if dem.bands != 1:
        raise DimensionError(f"terrain derivation expects 1 band, got {dem.bands}")
    if dem.height < 3 or dem.width < 3:
        raise DimensionError(
            f"DEM must be at least 3x3, got {dem.height}x{dem.width}"
        )
    mask = dem.nodata_mask
    if mask.all():
        raise EmptyInputError("DEM is fully masked")
    _, _, px, py = dem.geotransform
    valid = ~mask
    filled = fill_holes(dem.band(0), mask)
    slope, aspect = slope_aspect(filled, px, py)
    streams = stream_mask(dem.band(0), valid, px, py, stream_threshold)
    proximity = distance_to_mask(streams, px, py)
    data = np.stack([slope, aspect, proximity]).astype(np.float32)
    return RasterGrid(
        data,
        dem.geotransform,
        mask,
        ("slope", "aspect", "hydro_proximity"),
        {"stream_threshold_fraction": float(stream_threshold)},
    )
