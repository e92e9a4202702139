"""Label rasterization: site points to a {1, 0, nodata} training raster."""

from __future__ import annotations

import logging

import numpy as np

from ..errors import DataError
from .grid import RasterGrid
from .sites import SiteRecord

logger = logging.getLogger(__name__)

DEFAULT_LABEL_RADIUS = 295.0


def rasterize_labels(
    grid: RasterGrid,
    sites: list[SiteRecord],
    radius: float = DEFAULT_LABEL_RADIUS,
) -> RasterGrid:
    """Burn site disks into a label raster.

    Every pixel whose center falls within ``radius`` map units of a
    positive site becomes 1, of a negative site 0; positives win where
    disks overlap. The pixel containing a site is always labeled, so point
    labels survive radii below half a pixel. Everything else is nodata
    (the unlabeled pool). Disks are clipped at the raster boundary only.

    Sites with polarity ``unlabeled`` contribute nothing. Sites outside
    the raster extent are skipped with a logged warning.
    """
    if radius < 0:
        raise DataError(f"label radius must be >= 0, got {radius}")
    pos = np.zeros(grid.shape, dtype=bool)
    neg = np.zeros(grid.shape, dtype=bool)
    for site in sites:
        if site.polarity == "unlabeled":
            continue
        if not grid.contains(site.x, site.y):
            logger.warning(
                "site '%s' at (%s, %s) lies outside the raster extent; skipped",
                site.site_id, site.x, site.y,
            )
            continue
        disk = grid.disk_mask(site.x, site.y, radius)
        if site.polarity == "positive":
            pos |= disk
        else:
            neg |= disk
    values = np.full(grid.shape, np.nan, dtype=np.float32)
    values[neg] = 0.0
    values[pos] = 1.0  # positive precedence over overlapping negatives
    labeled = pos | neg
    mask = ~labeled | grid.nodata_mask
    values[mask] = np.nan
    return RasterGrid(
        values[None, :, :],
        grid.geotransform,
        mask,
        ("labels",),
        {"label_radius": float(radius)},
    )
