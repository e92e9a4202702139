"""Raster container and IO.

A :class:`RasterGrid` is an immutable in-memory raster: band-major,
row-major ``float32`` samples, a four-number geotransform
``(origin_x, origin_y, pixel_size_x, pixel_size_y)`` and a per-pixel
nodata mask. Masked samples are normalised to NaN so that a grid has a
single canonical byte representation.

The on-disk container is deliberately minimal and portable: a 4-byte
magic, a little-endian uint32 header length, a JSON header and a raw
little-endian float32 payload. A reader for ESRI ASCII grids is provided
for interchange with GIS tooling.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, DimensionError, EmptyInputError

_MAGIC = b"APMG"


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """Immutable raster: float32 samples plus geotransform and nodata mask.

    Attributes:
        data: Array of shape ``(bands, height, width)``, float32. Masked
            pixels hold NaN in every band.
        geotransform: ``(origin_x, origin_y, pixel_size_x, pixel_size_y)``.
            ``origin`` is the outer corner of pixel ``(0, 0)``;
            ``pixel_size_y`` is negative for north-up rasters.
        nodata_mask: Boolean array ``(height, width)``; True marks nodata.
        band_names: One name per band.
        meta: Free-form JSON-serialisable metadata.
    """

    data: np.ndarray
    geotransform: tuple[float, float, float, float]
    nodata_mask: np.ndarray
    band_names: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise DimensionError(f"raster data must be 3-D, got shape {data.shape}")
        bands, height, width = data.shape
        if bands < 1 or height < 1 or width < 1:
            raise DimensionError(f"degenerate raster shape {data.shape}")
        gt = tuple(float(v) for v in self.geotransform)
        if len(gt) != 4:
            raise DataError("geotransform must have four entries")
        if gt[2] <= 0.0 or gt[3] == 0.0:
            raise DataError(f"invalid pixel sizes in geotransform {gt}")
        mask = np.ascontiguousarray(self.nodata_mask, dtype=bool)
        if mask.shape != (height, width):
            raise DimensionError(
                f"mask shape {mask.shape} does not match raster {height}x{width}"
            )
        names = tuple(str(n) for n in self.band_names)
        if len(names) != bands:
            raise DataError(f"{len(names)} band names for {bands} bands")
        if mask.any():
            data = data.copy()
            data[:, mask] = np.nan
        bad = ~np.isfinite(data[:, ~mask])
        if bad.any():
            raise DataError("non-finite values outside the nodata mask")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "geotransform", gt)
        object.__setattr__(self, "nodata_mask", mask)
        object.__setattr__(self, "band_names", names)
        object.__setattr__(self, "meta", dict(self.meta))

    # --- construction -------------------------------------------------

    @staticmethod
    def from_array(
        values: np.ndarray,
        geotransform: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0),
        nodata_mask: np.ndarray | None = None,
        band_names: tuple[str, ...] | None = None,
        meta: dict | None = None,
    ) -> "RasterGrid":
        """Build a grid from a 2-D ``(H, W)`` or 3-D ``(B, H, W)`` array."""
        arr = np.asarray(values, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3:
            raise DimensionError(f"expected 2-D or 3-D array, got shape {arr.shape}")
        if nodata_mask is None:
            nodata_mask = np.zeros(arr.shape[1:], dtype=bool)
        if band_names is None:
            band_names = tuple(f"band_{i + 1}" for i in range(arr.shape[0]))
        return RasterGrid(arr, geotransform, nodata_mask, band_names, meta or {})

    # --- shape and geometry -------------------------------------------

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def band(self, index: int) -> np.ndarray:
        return self.data[index]

    def band_index(self, name: str) -> int:
        try:
            return self.band_names.index(name)
        except ValueError:
            raise DataError(f"no band named '{name}'") from None

    def pixel_of(self, x: float, y: float) -> tuple[int, int]:
        """Return (row, col) of the pixel containing map coordinate (x, y)."""
        ox, oy, px, py = self.geotransform
        col = math.floor((x - ox) / px)
        row = math.floor((y - oy) / py)
        return row, col

    def contains(self, x: float, y: float) -> bool:
        row, col = self.pixel_of(x, y)
        return 0 <= row < self.height and 0 <= col < self.width

    def center_xy(self, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map coordinates of pixel centers for index arrays."""
        ox, oy, px, py = self.geotransform
        x = ox + (np.asarray(cols, dtype=np.float64) + 0.5) * px
        y = oy + (np.asarray(rows, dtype=np.float64) + 0.5) * py
        return x, y

    def center_grids(self) -> tuple[np.ndarray, np.ndarray]:
        """Full (H, W) grids of pixel-center map coordinates."""
        rows = np.arange(self.height, dtype=np.float64)[:, None]
        cols = np.arange(self.width, dtype=np.float64)[None, :]
        ox, oy, px, py = self.geotransform
        x = np.broadcast_to(ox + (cols + 0.5) * px, (self.height, self.width))
        y = np.broadcast_to(oy + (rows + 0.5) * py, (self.height, self.width))
        return x, y

    def disk_mask(self, x: float, y: float, radius: float) -> np.ndarray:
        """Pixels whose center lies within ``radius`` of (x, y), in map units.

        The pixel containing (x, y) is always included when it lies inside
        the grid, so point geometries survive radii below half a pixel.
        """
        if radius < 0:
            raise DataError(f"negative radius {radius}")
        ox, oy, px, py = self.geotransform
        out = np.zeros((self.height, self.width), dtype=bool)
        # Candidate index box around the disk, then an exact center check.
        half_c = int(math.ceil(radius / px)) + 1
        half_r = int(math.ceil(radius / abs(py))) + 1
        rc = (y - oy) / py - 0.5
        cc = (x - ox) / px - 0.5
        r0 = max(0, int(math.floor(rc)) - half_r)
        r1 = min(self.height - 1, int(math.ceil(rc)) + half_r)
        c0 = max(0, int(math.floor(cc)) - half_c)
        c1 = min(self.width - 1, int(math.ceil(cc)) + half_c)
        if r0 <= r1 and c0 <= c1:
            rows = np.arange(r0, r1 + 1)
            cols = np.arange(c0, c1 + 1)
            cx, cy = self.center_xy(rows[:, None], cols[None, :])
            inside = (cx - x) ** 2 + (cy - y) ** 2 <= radius * radius
            out[r0 : r1 + 1, c0 : c1 + 1] = inside
        row, col = self.pixel_of(x, y)
        if 0 <= row < self.height and 0 <= col < self.width:
            out[row, col] = True
        return out

    def same_frame(self, other: "RasterGrid") -> bool:
        """True when shapes and geotransforms agree."""
        return self.shape == other.shape and self.geotransform == other.geotransform


# --- binary container ----------------------------------------------------


def save_raster(grid: RasterGrid, path: str | os.PathLike) -> None:
    """Write ``grid`` to the portable binary container.

    Layout: magic ``APMG``, uint32 little-endian header length, UTF-8 JSON
    header, then the float32 little-endian band-major payload. Masked
    pixels are stored as NaN; the header records ``"nodata": null`` to say
    exactly that.
    """
    header = {
        "width": grid.width,
        "height": grid.height,
        "bands": grid.bands,
        "band_names": list(grid.band_names),
        "geotransform": list(grid.geotransform),
        "nodata": None,
        "meta": grid.meta,
    }
    try:
        blob = json.dumps(header, sort_keys=True, allow_nan=False).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise DataError(f"raster metadata is not JSON-serialisable: {exc}") from exc
    payload = np.ascontiguousarray(grid.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        fh.write(payload.tobytes())


def load_raster(path: str | os.PathLike) -> RasterGrid:
    """Read a grid previously written by :func:`save_raster`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise DataError(f"{path}: not a raster container (bad magic {magic!r})")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise DataError(f"{path}: truncated header")
        (hlen,) = np.frombuffer(raw_len, dtype="<u4")
        blob = fh.read(int(hlen))
        if len(blob) != int(hlen):
            raise DataError(f"{path}: truncated header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: corrupt header: {exc}") from exc
        width = int(header["width"])
        height = int(header["height"])
        bands = int(header["bands"])
        count = bands * height * width
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise DataError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(bands, height, width)
    data = data.astype(np.float32)
    nodata = header.get("nodata")
    if nodata is None:
        mask = np.isnan(data[0])
    else:
        mask = data[0] == np.float32(nodata)
        data = np.where(mask[None, :, :], np.nan, data).astype(np.float32)
    return RasterGrid(
        data,
        tuple(header["geotransform"]),
        mask,
        tuple(header["band_names"]),
        header.get("meta", {}),
    )


# --- ESRI ASCII interchange ----------------------------------------------


def read_esri_ascii(path: str | os.PathLike) -> RasterGrid:
    """Read a single-band ESRI ASCII grid (``.asc``).

    Supports ``xllcorner``/``yllcorner`` and the cell-center variants.
    The nodata value, when present, becomes the nodata mask.
    """
    keys: dict[str, float] = {}
    rows: list[np.ndarray] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            head = parts[0].lower()
            if head in (
                "ncols",
                "nrows",
                "xllcorner",
                "yllcorner",
                "xllcenter",
                "yllcenter",
                "cellsize",
                "nodata_value",
            ):
                if len(parts) != 2:
                    raise DataError(f"{path}: malformed header line {line.strip()!r}")
                keys[head] = float(parts[1])
            else:
                rows.append(np.array(parts, dtype=np.float64))
    for required in ("ncols", "nrows", "cellsize"):
        if required not in keys:
            raise DataError(f"{path}: missing ESRI header field '{required}'")
    ncols = int(keys["ncols"])
    nrows = int(keys["nrows"])
    cell = keys["cellsize"]
    if cell <= 0:
        raise DataError(f"{path}: cellsize must be positive")
    flat = np.concatenate(rows) if rows else np.array([], dtype=np.float64)
    if flat.size != nrows * ncols:
        raise DataError(
            f"{path}: expected {nrows * ncols} samples, found {flat.size}"
        )
    values = flat.reshape(nrows, ncols)
    if "xllcorner" in keys:
        xll = keys["xllcorner"]
    elif "xllcenter" in keys:
        xll = keys["xllcenter"] - cell / 2.0
    else:
        raise DataError(f"{path}: missing xllcorner/xllcenter")
    if "yllcorner" in keys:
        yll = keys["yllcorner"]
    elif "yllcenter" in keys:
        yll = keys["yllcenter"] - cell / 2.0
    else:
        raise DataError(f"{path}: missing yllcorner/yllcenter")
    # Rows are stored north to south; our origin is the top-left corner.
    geotransform = (xll, yll + nrows * cell, cell, -cell)
    if "nodata_value" in keys:
        mask = values == keys["nodata_value"]
    else:
        mask = np.zeros_like(values, dtype=bool)
    values = np.where(mask, np.nan, values)
    return RasterGrid.from_array(values, geotransform, mask, ("band_1",))


# --- small array utilities -------------------------------------------------


def fill_holes(values: np.ndarray, hole_mask: np.ndarray) -> np.ndarray:
    """Fill masked cells by iterative 8-neighbour averaging.

    Used to give gradient stencils something sensible to chew on near
    nodata holes. Raises when nothing at all is valid.
    """
    if hole_mask.all():
        raise EmptyInputError("cannot fill: every cell is masked")
    filled = np.asarray(values, dtype=np.float64).copy()
    filled[hole_mask] = 0.0
    hole = hole_mask.copy()
    while hole.any():
        valid = (~hole).astype(np.float64)
        vals = np.where(hole, 0.0, filled)
        sums = np.zeros_like(filled)
        counts = np.zeros_like(filled)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                src_r = slice(max(0, dr), filled.shape[0] + min(0, dr))
                src_c = slice(max(0, dc), filled.shape[1] + min(0, dc))
                dst_r = slice(max(0, -dr), filled.shape[0] - max(0, dr))
                dst_c = slice(max(0, -dc), filled.shape[1] - max(0, dc))
                sums[dst_r, dst_c] += vals[src_r, src_c]
                counts[dst_r, dst_c] += valid[src_r, src_c]
        ready = hole & (counts > 0)
        if not ready.any():  # isolated region; cannot happen with any valid cell
            break
        filled[ready] = sums[ready] / counts[ready]
        hole[ready] = False
    return filled
