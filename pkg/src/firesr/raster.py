"""Raster data model, resampling kernels, and on-disk codecs.

A :class:`Raster` is a single-channel 2D grid of float64 values on a
plate-carree lat/lon grid. Row 0 is the northern-most row; ``origin_lon`` /
``origin_lat`` locate the north-west corner of the grid's bounding box and
``pixel_size`` is the extent of one pixel in degrees.

Resampling uses half-pixel-center coordinate mapping with edge clamping:
output pixel ``x`` samples input coordinate ``(x + 0.5) * (w_in / w_out) - 0.5``.
Both interpolators are separable and are applied as per-axis weight-matrix
products, which makes the adjoint of an interpolation exactly the transposed
product. All operations are pure; returned rasters never alias their inputs.

File formats
------------
FSR (bit-exact float raster): bytes 0-3 magic ``FSR1``; bytes 4-7 little-endian
u32 header length N; bytes 8..8+N UTF-8 JSON header with keys ``width``,
``height``, ``pixel_size``, ``origin_lon``, ``origin_lat``, optional
``nodata``, ``dtype`` (``f32``); then width*height little-endian float32,
row-major, north-to-south rows.

PGM (P5, 8-bit, min-max scaled) is provided for visualization, and a
``row,col,value`` CSV reader for hand-built fixtures.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, GridMismatchError

log = logging.getLogger(__name__)

FSR_MAGIC = b"FSR1"

# channel role labels used throughout the pipeline
ROLE_FIRE = "fire"
ROLE_TEMP_DEV = "temp_dev"
ROLE_BURNABLE = "burnable"
INPUT_ROLES = (ROLE_FIRE, ROLE_TEMP_DEV, ROLE_BURNABLE)


@dataclass
class Raster:
    """Single-channel 2D grid with geospatial metadata.

    ``values`` is a (height, width) float64 array; row 0 is the northern row.
    """

    values: np.ndarray
    origin_lon: float = 0.0
    origin_lat: float = 0.0
    pixel_size: float = 1.0
    nodata: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"raster values must be 2D, got shape {self.values.shape}")
        if self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise DataError(f"raster dims must be >= 1, got {self.values.shape}")
        if not self.pixel_size > 0:
            raise DataError(f"pixel_size must be > 0, got {self.pixel_size}")
        finite = np.isfinite(self.values)
        if not finite.all():
            bad = ~finite
            if self.nodata is None or not _nodata_mask(self.values, self.nodata)[bad].all():
                raise DataError(
                    f"{int(bad.sum())} nonfinite non-nodata value(s) in raster"
                )

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def geotransform(self) -> tuple[float, float, float, int, int]:
        return (self.origin_lon, self.origin_lat, self.pixel_size, self.width, self.height)

    def same_grid(self, other: "Raster") -> bool:
        return self.geotransform() == other.geotransform()

    def copy(self) -> "Raster":
        return replace(self, values=self.values.copy())


@dataclass
class ChannelStack:
    """Ordered rasters sharing one grid, labelled with channel roles."""

    channels: list[Raster]
    roles: tuple[str, ...]

    def __post_init__(self):
        self.roles = tuple(self.roles)
        if len(self.roles) != len(self.channels):
            raise DataError(
                f"{len(self.channels)} channels but {len(self.roles)} roles"
            )
        if len(set(self.roles)) != len(self.roles):
            raise DataError(f"duplicate channel roles: {self.roles}")
        unknown = set(self.roles) - set(INPUT_ROLES)
        if unknown:
            raise DataError(f"unknown channel roles: {sorted(unknown)}")
        first = self.channels[0]
        for ch in self.channels[1:]:
            if not ch.same_grid(first):
                raise GridMismatchError(
                    f"channel grids differ: {first.geotransform()} vs {ch.geotransform()}"
                )

    @property
    def width(self) -> int:
        return self.channels[0].width

    @property
    def height(self) -> int:
        return self.channels[0].height

    def array(self) -> np.ndarray:
        """Stack channel values into a (channels, height, width) array."""
        return np.stack([ch.values for ch in self.channels])


def _nodata_mask(values: np.ndarray, nodata: float) -> np.ndarray:
    if math.isnan(nodata):
        return np.isnan(values)
    return values == nodata


def _prepare_for_resampling(src: Raster, op_name: str) -> np.ndarray:
    """Return source values with nodata replaced by 0, rejecting nonfinite data."""
    values = src.values
    if src.nodata is not None:
        mask = _nodata_mask(values, src.nodata)
        n_replaced = int(mask.sum())
        if n_replaced:
            log.warning("%s: replaced %d nodata pixel(s) with 0", op_name, n_replaced)
            values = np.where(mask, 0.0, values)
    if not np.isfinite(values).all():
        raise DataError(f"{op_name}: source raster contains nonfinite values")
    return values


def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5


@lru_cache(maxsize=256)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) 1D bilinear interpolation matrix with edge clamping."""
    m = np.zeros((n_out, n_in))
    coords = _source_coords(n_in, n_out)
    for i, x in enumerate(coords):
        x0 = math.floor(x)
        f = x - x0
        m[i, min(max(x0, 0), n_in - 1)] += 1.0 - f
        m[i, min(max(x0 + 1, 0), n_in - 1)] += f
    m.setflags(write=False)
    return m


def keys_kernel(x: float, a: float = -0.5) -> float:
    """Cubic convolution kernel weight at offset ``x`` (support [-2, 2])."""
    x = abs(x)
    if x <= 1.0:
        return (a + 2.0) * x**3 - (a + 3.0) * x**2 + 1.0
    if x < 2.0:
        return a * x**3 - 5.0 * a * x**2 + 8.0 * a * x - 4.0 * a
    return 0.0


@lru_cache(maxsize=256)
def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) 1D cubic-convolution matrix (Keys kernel, a=-0.5)."""
    m = np.zeros((n_out, n_in))
    coords = _source_coords(n_in, n_out)
    for i, x in enumerate(coords):
        x0 = math.floor(x)
        f = x - x0
        for tap in range(-1, 3):
            w = keys_kernel(tap - f)
            m[i, min(max(x0 + tap, 0), n_in - 1)] += w
    m.setflags(write=False)
    return m


def _separable_resample(
    src: Raster, out_width: int, out_height: int, matrix_fn, op_name: str
) -> Raster:
    if out_width < 1 or out_height < 1:
        raise DataError(f"{op_name}: output dims must be >= 1, got {out_width}x{out_height}")
    values = _prepare_for_resampling(src, op_name)
    rows = matrix_fn(src.height, out_height)
    cols = matrix_fn(src.width, out_width)
    out = rows @ values @ cols.T
    return Raster(
        values=out,
        origin_lon=src.origin_lon,
        origin_lat=src.origin_lat,
        pixel_size=src.pixel_size * (src.width / out_width),
        nodata=None,
    )


def bilinear_resample(src: Raster, out_width: int, out_height: int) -> Raster:
    """Bilinear resample to the requested dims (half-pixel centers, clamped)."""
    return _separable_resample(src, out_width, out_height, bilinear_matrix, "bilinear_resample")


def bicubic_resample(src: Raster, out_width: int, out_height: int) -> Raster:
    """Cubic-convolution resample (Keys a=-0.5, half-pixel centers, clamped)."""
    return _separable_resample(src, out_width, out_height, bicubic_matrix, "bicubic_resample")


def block_average_downsample(src: Raster, factor: int) -> Raster:
    """Downsample by averaging each factor x factor block.

    Conserves the global mean exactly; the LR/HR derivation of the training
    pipeline depends on that (a decimating downsample would drop single-pixel
    fires entirely).
    """
    if factor not in (2, 4, 8):
        raise DataError(f"block_average_downsample: factor must be one of 2, 4, 8, got {factor}")
    if src.width % factor or src.height % factor:
        raise DataError(
            f"block_average_downsample: dims {src.width}x{src.height} not divisible by "
            f"{factor}; crop the raster to a multiple of the factor first"
        )
    values = _prepare_for_resampling(src, "block_average_downsample")
    h, w = values.shape
    out = values.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return Raster(
        values=out,
        origin_lon=src.origin_lon,
        origin_lat=src.origin_lat,
        pixel_size=src.pixel_size * factor,
        nodata=None,
    )


# ---------------------------------------------------------------------------
# FSR codec

def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_raster(r: Raster, path: str | Path) -> None:
    """Write an FSR file. Values are stored as little-endian float32."""
    header = {
        "width": r.width,
        "height": r.height,
        "pixel_size": r.pixel_size,
        "origin_lon": r.origin_lon,
        "origin_lat": r.origin_lat,
        "dtype": "f32",
    }
    if r.nodata is not None:
        header["nodata"] = r.nodata
    header_bytes = _canonical_json(header)
    payload = r.values.astype("<f4").tobytes(order="C")
    with open(path, "wb") as f:
        f.write(FSR_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)


def read_raster(path: str | Path) -> Raster:
    """Read an FSR file written by :func:`write_raster`."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise FormatError(f"{path}: file too short for an FSR header")
    magic = blob[:4]
    if magic != FSR_MAGIC:
        if magic[:3] == FSR_MAGIC[:3]:
            raise FormatError(f"{path}: unsupported FSR version {magic!r}")
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FSR_MAGIC!r}")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + header_len:
        raise FormatError(f"{path}: truncated header ({header_len} bytes declared)")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: undecodable header: {exc}") from exc
    for key in ("width", "height", "pixel_size", "origin_lon", "origin_lat", "dtype"):
        if key not in header:
            raise FormatError(f"{path}: header missing key {key!r}")
    if header["dtype"] != "f32":
        raise FormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    width, height = int(header["width"]), int(header["height"])
    payload = blob[8 + header_len :]
    expected = width * height * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header declares "
            f"{width}x{height} ({expected} bytes)"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    return Raster(
        values=values.astype(np.float64),
        origin_lon=float(header["origin_lon"]),
        origin_lat=float(header["origin_lat"]),
        pixel_size=float(header["pixel_size"]),
        nodata=None if "nodata" not in header else float(header["nodata"]),
    )


# ---------------------------------------------------------------------------
# Visualization / fixture formats

def scale_to_bytes(values: np.ndarray) -> np.ndarray:
    """Min-max scale an array to uint8; a flat array maps to mid-gray (128)."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(values: np.ndarray, path: str | Path) -> None:
    """Write a binary P5 PGM, min-max scaled to 8 bit."""
    data = scale_to_bytes(values)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes(order="C"))


def write_ppm(rgb: np.ndarray, path: str | Path) -> None:
    """Write a binary P6 PPM from a (height, width, 3) uint8 array."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise DataError(f"write_ppm expects (h, w, 3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes(order="C"))


def raster_from_csv(
    path: str | Path,
    width: int,
    height: int,
    fill: float = 0.0,
    origin_lon: float = 0.0,
    origin_lat: float = 0.0,
    pixel_size: float = 1.0,
) -> Raster:
    """Build a raster from ``row,col,value`` triples (header line optional).

    Unlisted cells take ``fill``. Intended for small hand-built fixtures.
    """
    values = np.full((height, width), fill, dtype=np.float64)
    with open(path, newline="") as f:
        for ln, rec in enumerate(csv.reader(f), start=1):
            if not rec or not rec[0].strip():
                continue
            if ln == 1 and not rec[0].strip().lstrip("-").isdigit():
                continue  # header
            if len(rec) != 3:
                raise FormatError(f"{path}:{ln}: expected row,col,value, got {rec!r}")
            row, col = int(rec[0]), int(rec[1])
            if not (0 <= row < height and 0 <= col < width):
                raise FormatError(
                    f"{path}:{ln}: cell ({row},{col}) outside {width}x{height} grid"
                )
            values[row, col] = float(rec[2])
    return Raster(
        values=values,
        origin_lon=origin_lon,
        origin_lat=origin_lat,
        pixel_size=pixel_size,
    )
