"""Image container, PNM / FR32 file formats and the Gaussian convolution engine.

All filters in the package follow the correlation convention (kernels are not
flipped) with edge replication at the borders:

    out[y, x] = sum_{u, v} w[v + ry, u + rx] * f[clamp(y + v), clamp(x + u)]
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

from .errors import ContractError, FormatError, ParameterError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# Kernels with more taps than this go through the FFT path.
_DIRECT_TAPS_LIMIT = 225


@dataclass(frozen=True, eq=False)
class Raster:
    """A height x width x channels grid of finite float64 samples."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ContractError(f"raster data must be 2-D or 3-D, got shape {arr.shape}")
        h, w, c = arr.shape
        if h < 1 or w < 1:
            raise ContractError(f"raster must be at least 1x1, got {w}x{h}")
        if c not in (1, 3):
            raise ContractError(f"raster must have 1 or 3 channels, got {c}")
        if not np.all(np.isfinite(arr)):
            raise ContractError("raster samples must be finite")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def samples(self) -> np.ndarray:
        """Row-major, channel-interleaved flat view of the samples."""
        return self.data.reshape(-1)

    @property
    def plane(self) -> np.ndarray:
        """The 2-D sample array of a single-channel raster."""
        if self.channels != 1:
            raise ContractError(f"expected a single-channel raster, got {self.channels} channels")
        return self.data[:, :, 0]

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None


def as_plane(image) -> np.ndarray:
    """Return a float64 2-D array for a single-channel Raster or a 2-D array."""
    if isinstance(image, Raster):
        return np.asarray(image.plane, dtype=np.float64)
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ContractError(f"expected a single-channel image, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Kernel:
    """Correlation kernel with odd dimensions (2*radius_y+1, 2*radius_x+1)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
            raise ContractError(f"kernel must be 2-D with odd sides, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ContractError("kernel weights must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def radius_x(self) -> int:
        return self.weights.shape[1] // 2

    @property
    def radius_y(self) -> int:
        return self.weights.shape[0] // 2


# ---------------------------------------------------------------------------
# Gaussian derivative kernels
# ---------------------------------------------------------------------------

def gaussian_radius(sigma: float) -> int:
    return int(math.ceil(4.0 * sigma))


def _hermite_factor(t, sigma, order):
    s2 = sigma * sigma
    if order == 0:
        return np.ones_like(t)
    if order == 1:
        return -t / s2
    return (t * t - s2) / (s2 * s2)


def gaussian_derivative_1d(sigma: float, order: int, radius: int | None = None) -> np.ndarray:
    """Sampled 1-D Gaussian derivative; the order-0 taps sum to one."""
    if radius is None:
        radius = gaussian_radius(sigma)
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    g /= g.sum()
    return g * _hermite_factor(t, sigma, order)


def remove_dc(weights: np.ndarray, sigma: float) -> np.ndarray:
    """Project a derivative kernel onto zero DC.

    Sampling and truncating at 4 sigma leaves a small nonzero sum on even-order
    derivatives.  The residual is removed by subtracting the matching multiple
    of the normalized Gaussian, which keeps the operation linear (so steered
    combinations of projected kernels equal projected steered kernels) and
    preserves the kernel's symmetry.
    """
    ry, rx = weights.shape[0] // 2, weights.shape[1] // 2
    g0 = np.outer(gaussian_derivative_1d(sigma, 0, ry), gaussian_derivative_1d(sigma, 0, rx))
    g0 /= g0.sum()
    return weights - weights.sum() * g0


def gaussian_kernel(sigma: float, dx: int = 0, dy: int = 0) -> Kernel:
    """Kernel sampling d^dx/dx d^dy/dy of an isotropic Gaussian.

    Radius is ceil(4 sigma) on both axes.  The order-0 kernel sums to one and
    every derivative kernel sums to zero.
    """
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if dx < 0 or dy < 0 or dx + dy > 2:
        raise ParameterError(f"derivative orders must satisfy dx + dy <= 2, got ({dx}, {dy})")
    r = gaussian_radius(sigma)
    w = np.outer(gaussian_derivative_1d(sigma, dy, r), gaussian_derivative_1d(sigma, dx, r))
    if dx == 0 and dy == 0:
        w /= w.sum()
    else:
        w = remove_dc(w, sigma)
    return Kernel(w)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def correlate(plane: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Correlate a 2-D array with odd-sized weights, replicating edges."""
    plane = np.asarray(plane, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size <= _DIRECT_TAPS_LIMIT:
        return ndimage.correlate(plane, weights, mode="nearest")
    ry, rx = weights.shape[0] // 2, weights.shape[1] // 2
    padded = np.pad(plane, ((ry, ry), (rx, rx)), mode="edge")
    return signal.fftconvolve(padded, weights[::-1, ::-1], mode="valid")


def convolve(raster, kernel: Kernel) -> Raster:
    """Correlate a single-channel raster with `kernel` (no kernel flip)."""
    if isinstance(raster, Raster) and raster.channels != 1:
        raise ContractError("convolve requires a single-channel raster")
    return Raster(correlate(as_plane(raster), kernel.weights))


def gaussian_blur(plane: np.ndarray, sigma: float) -> np.ndarray:
    g = gaussian_derivative_1d(sigma, 0)
    out = ndimage.correlate1d(np.asarray(plane, dtype=np.float64), g, axis=0, mode="nearest")
    return ndimage.correlate1d(out, g, axis=1, mode="nearest")


def to_gray(raster: Raster) -> Raster:
    """Luma conversion for 3-channel rasters; single-channel input is returned as is."""
    if raster.channels == 1:
        return raster
    r, g, b = LUMA_WEIGHTS
    d = raster.data
    return Raster(r * d[:, :, 0] + g * d[:, :, 1] + b * d[:, :, 2])


# ---------------------------------------------------------------------------
# Binary PNM (P5 / P6)
# ---------------------------------------------------------------------------

def _read_header_token(buf: bytes, pos: int, path) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError("unexpected end of header", offset=pos, path=path)
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    return buf[start:pos], start


def _parse_uint(token: bytes, offset: int, path, what: str) -> int:
    if not token.isdigit():
        raise FormatError(f"invalid {what} {token!r}", offset=offset, path=path)
    return int(token)


def read_pnm(path) -> Raster:
    """Read a binary PGM (P5) or PPM (P6) file, scaling samples to [0, 1]."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 2:
        raise FormatError("file too short for a PNM magic number", offset=0, path=path)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}", offset=0, path=path)
    channels = 1 if magic == b"P5" else 3
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        tok, start = _read_header_token(buf, pos, path)
        fields.append(_parse_uint(tok, start, path, what))
        pos = start + len(tok)
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"invalid dimensions {width}x{height}", offset=2, path=path)
    if maxval not in (255, 65535):
        raise FormatError(f"unsupported maxval {maxval}", offset=pos - len(str(maxval)), path=path)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", offset=pos, path=path)
    pos += 1
    dtype = np.dtype(np.uint8) if maxval == 255 else np.dtype(">u2")
    count = width * height * channels
    need = count * dtype.itemsize
    if len(buf) - pos < need:
        raise FormatError(
            f"truncated payload: expected {need} bytes, found {len(buf) - pos}",
            offset=len(buf), path=path,
        )
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    data = raw.astype(np.float64).reshape(height, width, channels) / maxval
    return Raster(data)


def encode_pnm(raster: Raster, depth: int = 8) -> bytes:
    if depth not in (8, 16):
        raise ParameterError(f"depth must be 8 or 16, got {depth}")
    maxval = 255 if depth == 8 else 65535
    magic = b"P5" if raster.channels == 1 else b"P6"
    q = np.rint(np.clip(raster.data, 0.0, 1.0) * maxval)
    payload = q.astype(np.uint8 if depth == 8 else ">u2").tobytes()
    header = magic + f"\n{raster.width} {raster.height}\n{maxval}\n".encode("ascii")
    return header + payload


def write_pnm(raster: Raster, path, depth: int = 8) -> None:
    """Write a raster as binary PGM/PPM; samples are clamped to [0, 1]."""
    data = encode_pnm(raster, depth)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write PNM file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# FR32 float rasters
# ---------------------------------------------------------------------------

FR32_MAGIC = b"FR32"
_FR32_HEADER = struct.Struct("<4sIII")


def encode_fr32(data: np.ndarray) -> bytes:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    return _FR32_HEADER.pack(FR32_MAGIC, w, h, c) + arr.astype("<f4").tobytes()


def decode_fr32(buf: bytes, path=None) -> np.ndarray:
    if len(buf) < _FR32_HEADER.size:
        raise FormatError("file too short for an FR32 header", offset=len(buf), path=path)
    magic, w, h, c = _FR32_HEADER.unpack_from(buf, 0)
    if magic != FR32_MAGIC:
        raise FormatError(f"bad FR32 magic {magic!r}", offset=0, path=path)
    if w < 1 or h < 1 or c < 1:
        raise FormatError(f"invalid FR32 dimensions {w}x{h}x{c}", offset=4, path=path)
    need = w * h * c * 4
    avail = len(buf) - _FR32_HEADER.size
    if avail != need:
        raise FormatError(
            f"FR32 payload size mismatch: expected {need} bytes, found {avail}",
            offset=_FR32_HEADER.size, path=path,
        )
    arr = np.frombuffer(buf, dtype="<f4", offset=_FR32_HEADER.size).astype(np.float64)
    return arr.reshape(h, w, c)


def write_fr32(data, path) -> None:
    """Write a raster or an (H, W[, C]) array as FR32."""
    if isinstance(data, Raster):
        data = data.data
    Path(path).write_bytes(encode_fr32(data))


def read_fr32(path) -> np.ndarray:
    """Read an FR32 file into an (H, W, C) float64 array."""
    path = Path(path)
    return decode_fr32(path.read_bytes(), path=path)
