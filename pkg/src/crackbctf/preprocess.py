"""Modality conditioning ahead of feature extraction."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError
from .filters import elongated_features
from .raster import Raster, as_plane, gaussian_blur

log = logging.getLogger(__name__)

CRUDE_SIGMA = 1.0
CRUDE_QUANTILE = 0.98
CLAHE_TILES = 8
CLAHE_CLIP = 3.0
CLAHE_BINS = 256


@dataclass(frozen=True)
class CrudeCrackMap:
    mask: np.ndarray  # uint8, 1 = candidate crack
    modality: str = ""
    degenerate: bool = False

    @property
    def empty(self) -> bool:
        return not self.mask.any()


@dataclass(frozen=True)
class AlignmentOffset:
    dx: int
    dy: int
    score: float


def crude_crack_map(raster, sigma: float = CRUDE_SIGMA, quantile: float = CRUDE_QUANTILE,
                    modality: str = "") -> CrudeCrackMap:
    """Mark pixels whose maximal elongated-filter response exceeds its `quantile`."""
    if not 0.0 < quantile < 1.0:
        raise ParameterError(f"quantile must lie in (0, 1), got {quantile}")
    f = as_plane(raster)
    if np.ptp(f) == 0:
        log.warning("crude crack map requested for a constant image; returning an empty mask")
        return CrudeCrackMap(np.zeros(f.shape, dtype=np.uint8), modality, True)
    resp, _ = elongated_features(f, sigma)
    cut = np.quantile(resp, quantile)
    mask = (resp > cut) & (resp > 0)
    return CrudeCrackMap(mask.astype(np.uint8), modality, not mask.any())


def _shift_mask(mask: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """out[y, x] = mask[y - dy, x - dx], zero outside."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    ys, yd = max(0, -dy), max(0, dy)
    xs, xd = max(0, -dx), max(0, dx)
    hh, ww = h - abs(dy), w - abs(dx)
    if hh > 0 and ww > 0:
        out[yd:yd + hh, xd:xd + ww] = mask[ys:ys + hh, xs:xs + ww]
    return out


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den == 0:
        return -1.0
    return float((a * b).sum() / den)


def align_translation(reference: CrudeCrackMap, moving: CrudeCrackMap, radius: int) -> AlignmentOffset:
    """Exhaustive integer search for the shift that best registers `moving` onto `reference`.

    The returned offset is meant for :func:`apply_offset` on the moving
    modality.  Ties go to the smallest |dx| + |dy|, then the smallest dy, then
    the smallest dx.
    """
    ref = np.asarray(reference.mask, dtype=np.float64)
    mov = np.asarray(moving.mask, dtype=np.float64)
    if ref.shape != mov.shape:
        raise ContractError(f"mask shapes differ: {ref.shape} vs {mov.shape}")
    if radius < 0:
        raise ParameterError(f"radius must be nonnegative, got {radius}")
    if not ref.any() or not mov.any():
        raise ContractError("no crack structure to align")
    candidates = sorted(
        itertools.product(range(-radius, radius + 1), repeat=2),
        key=lambda d: (abs(d[0]) + abs(d[1]), d[1], d[0]),
    )
    best = None
    for dx, dy in candidates:
        score = _ncc(ref, _shift_mask(mov, dx, dy))
        if best is None or score > best.score:
            best = AlignmentOffset(dx, dy, score)
    return best


def apply_offset(raster: Raster, offset: AlignmentOffset) -> Raster:
    """Translate by (dx, dy): out[y, x] = in[y - dy, x - dx], edges replicated."""
    d = raster.data
    h, w = d.shape[:2]
    rows = np.clip(np.arange(h) - offset.dy, 0, h - 1)
    cols = np.clip(np.arange(w) - offset.dx, 0, w - 1)
    return Raster(d[rows][:, cols])


def xray_flatten(raster, blur_sigma: float) -> Raster:
    """Remove the smooth background: input - (blur - min(blur)).  Not clamped."""
    f = as_plane(raster)
    b = gaussian_blur(f, blur_sigma)
    return Raster(f - (b - b.min()))


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.round(np.linspace(0, n, tiles + 1)).astype(int)


def _clip_histogram(hist: np.ndarray, limit: float) -> np.ndarray:
    """Clip at `limit` and spread the excess uniformly, repeating until stable."""
    hist = hist.astype(np.float64)
    for _ in range(64):
        excess = np.maximum(hist - limit, 0.0).sum()
        if excess <= 1e-9 * hist.sum():
            break
        hist = np.minimum(hist, limit) + excess / hist.size
    return hist


def clahe(raster, tiles_x: int = CLAHE_TILES, tiles_y: int = CLAHE_TILES,
          clip_limit: float = CLAHE_CLIP, bins: int = CLAHE_BINS) -> Raster:
    """Contrast-limited adaptive histogram equalization.

    Intensities are binned over the image's own [min, max] range, so inputs
    need not lie in [0, 1].  Each tile's clipped histogram defines a CDF
    mapping; pixel values bilinearly interpolate the mappings of the four
    nearest tile centers.  Output lies in [0, 1].
    """
    f = as_plane(raster)
    h, w = f.shape
    if tiles_x < 1 or tiles_y < 1 or tiles_x > w or tiles_y > h:
        raise ParameterError(f"tile grid {tiles_x}x{tiles_y} does not fit a {w}x{h} image")
    if not clip_limit > 1:
        raise ParameterError(f"clip limit must exceed 1, got {clip_limit}")
    lo, span = f.min(), np.ptp(f)
    if span > 0:
        b = np.minimum(((f - lo) / span * bins).astype(np.int64), bins - 1)
    else:
        b = np.zeros(f.shape, dtype=np.int64)

    ye, xe = _tile_edges(h, tiles_y), _tile_edges(w, tiles_x)
    luts = np.empty((tiles_y, tiles_x, bins))
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tile = b[ye[ty]:ye[ty + 1], xe[tx]:xe[tx + 1]]
            hist = np.bincount(tile.ravel(), minlength=bins)
            hist = _clip_histogram(hist, clip_limit * tile.size / bins)
            luts[ty, tx] = np.cumsum(hist) / hist.sum()

    def axis_weights(n, edges, tiles):
        centers = 0.5 * (edges[:-1] + edges[1:]) - 0.5
        pos = np.arange(n, dtype=np.float64)
        i1 = np.searchsorted(centers, pos, side="right")
        i0 = np.clip(i1 - 1, 0, tiles - 1)
        i1 = np.clip(i1, 0, tiles - 1)
        den = centers[i1] - centers[i0]
        t = np.divide(pos - centers[i0], den, out=np.zeros(n), where=den > 0)
        return i0, i1, np.clip(t, 0.0, 1.0)

    y0, y1, ty = axis_weights(h, ye, tiles_y)
    x0, x1, tx = axis_weights(w, xe, tiles_x)
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    TY, TX = np.meshgrid(ty, tx, indexing="ij")
    v00 = luts[Y0, X0, b]
    v01 = luts[Y0, X1, b]
    v10 = luts[Y1, X0, b]
    v11 = luts[Y1, X1, b]
    out = (1 - TY) * ((1 - TX) * v00 + TX * v01) + TY * ((1 - TX) * v10 + TX * v11)
    return Raster(np.clip(out, 0.0, 1.0))
