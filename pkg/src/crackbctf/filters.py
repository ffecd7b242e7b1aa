"""Per-pixel filters that make up the crack feature bank.

Every filter takes a single-channel image (a :class:`Raster` or a 2-D array)
and returns float64 planes of the same shape.  Polarity is chosen so that a
dark crack on a bright background produces a large positive response.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .raster import Kernel, as_plane, correlate, gaussian_kernel, gaussian_radius

COHERENCE_EPS = 1e-12
FRANGI_BETA = 0.5
FRANGI_SIGMAS = (1.0, 2.0, 4.0)
ELONGATED_ORIENTATIONS = 12
LBP_POINTS = 16
LBP_RADIUS = 3
LBP_CATEGORIES = LBP_POINTS + 2
MEDIAN_SIZES = (3, 6, 12)
LOG_SIGMAS = (1.0, 2.0, 5.0)


FLAT_TOL = 1e-10


def _offset_free(f: np.ndarray) -> np.ndarray:
    """Input for zero-sum kernels with one sample subtracted.

    The kernels ignore constants only up to roundoff in their weight sums;
    removing an offset first makes flat images give exact zeros.
    """
    return f - f.flat[0]


def hessian(image, sigma: float):
    """Scale-normalized Hessian (sigma^2 * second derivatives) as (Hxx, Hxy, Hyy)."""
    f = _offset_free(as_plane(image))
    s2 = sigma * sigma
    hxx = s2 * correlate(f, gaussian_kernel(sigma, 2, 0).weights)
    hxy = s2 * correlate(f, gaussian_kernel(sigma, 1, 1).weights)
    hyy = s2 * correlate(f, gaussian_kernel(sigma, 0, 2).weights)
    return hxx, hxy, hyy


def steering_angles(orientations: int) -> np.ndarray:
    return np.arange(orientations) * (math.pi / orientations)


def elongated_responses(image, sigma: float, orientations: int = ELONGATED_ORIENTATIONS) -> np.ndarray:
    """Second directional derivative across each of `orientations` angles in [0, pi).

    Returns an (orientations, H, W) stack.  Angle theta measures the direction
    across the ridge; a vertical dark line peaks at theta = 0.
    """
    if orientations < 2:
        raise ParameterError(f"need at least 2 orientations, got {orientations}")
    hxx, hxy, hyy = hessian(image, sigma)
    out = np.empty((orientations,) + hxx.shape)
    for i, theta in enumerate(steering_angles(orientations)):
        c, s = math.cos(theta), math.sin(theta)
        out[i] = c * c * hxx + 2.0 * s * c * hxy + s * s * hyy
    return out


def elongated_features(image, sigma: float, orientations: int = ELONGATED_ORIENTATIONS):
    """Maximal steered ridge response and the index of the maximizing angle."""
    resp = elongated_responses(image, sigma, orientations)
    return resp.max(axis=0), resp.argmax(axis=0).astype(np.float64)


def _sym_eig2(a, b, d):
    """Eigenvalues (hi, lo) of [[a, b], [b, d]] elementwise."""
    mean = 0.5 * (a + d)
    rad = np.sqrt((0.5 * (a - d)) ** 2 + b * b)
    return mean + rad, mean - rad


def frangi_features(image, sigmas=FRANGI_SIGMAS, beta: float = FRANGI_BETA):
    """Multi-scale Frangi vesselness for dark ridges.

    Returns the vesselness (max over scales) and the index into `sigmas` of
    the winning scale.  The structureness constant c is half of the largest
    Hessian Frobenius norm found over all scales.
    """
    sigmas = tuple(sigmas)
    if not sigmas:
        raise ParameterError("frangi_features needs at least one scale")
    f = as_plane(image)
    per_scale = []
    for sigma in sigmas:
        hxx, hxy, hyy = hessian(f, sigma)
        hi, lo = _sym_eig2(hxx, hxy, hyy)
        swap = np.abs(hi) < np.abs(lo)
        l1 = np.where(swap, hi, lo)
        l2 = np.where(swap, lo, hi)
        per_scale.append((l1, l2))
    c = 0.5 * max(float(np.sqrt(l1 * l1 + l2 * l2).max()) for l1, l2 in per_scale)
    responses = np.zeros((len(sigmas),) + f.shape)
    # a flat image yields roundoff-level curvature that must not be normalized up
    if c > FLAT_TOL * max(1.0, float(np.abs(f).max())):
        for i, (l1, l2) in enumerate(per_scale):
            pos = l2 > 0
            rb = np.divide(l1, l2, out=np.zeros_like(l1), where=pos)
            s2 = l1 * l1 + l2 * l2
            v = np.exp(-rb * rb / (2 * beta * beta)) * (1.0 - np.exp(-s2 / (2 * c * c)))
            responses[i] = np.where(pos, v, 0.0)
    return responses.max(axis=0), responses.argmax(axis=0).astype(np.float64)


def structure_tensor_features(image, grad_sigma: float = 1.0, window_sigma: float = 2.0):
    """Structure tensor eigenvalues, dominant orientation and coherence.

    Returns ``(L1, L2, orientation, coherence)`` with ``L1 >= L2 >= 0`` and the
    orientation of the dominant eigenvector in [0, pi).
    """
    f = _offset_free(as_plane(image))
    ix = correlate(f, gaussian_kernel(grad_sigma, 1, 0).weights)
    iy = correlate(f, gaussian_kernel(grad_sigma, 0, 1).weights)
    win = gaussian_kernel(window_sigma).weights
    jxx = correlate(ix * ix, win)
    jxy = correlate(ix * iy, win)
    jyy = correlate(iy * iy, win)
    l1, l2 = _sym_eig2(jxx, jxy, jyy)
    l1 = np.maximum(l1, 0.0)
    l2 = np.clip(l2, 0.0, l1)
    theta = np.mod(0.5 * np.arctan2(2.0 * jxy, jxx - jyy), math.pi)
    # mod can return exactly pi for tiny negative angles
    theta = np.where(theta >= math.pi, 0.0, theta)
    coherence = (l1 - l2) / (l1 + l2 + COHERENCE_EPS)
    return l1, l2, theta, coherence


def _square_offsets(size: int):
    if size == 2:
        return [(dy, dx) for dy in (0, 1) for dx in (0, 1)]
    if size == 3:
        return [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    raise ParameterError(f"structuring element must be 2 or 3, got {size}")


def _shift_reduce(f: np.ndarray, offsets, reduce):
    """reduce over f[y + dy, x + dx] for the given offsets, edges replicated."""
    pad = max(max(abs(dy), abs(dx)) for dy, dx in offsets)
    p = np.pad(f, pad, mode="edge")
    h, w = f.shape
    out = None
    for dy, dx in offsets:
        view = p[pad + dy:pad + dy + h, pad + dx:pad + dx + w]
        out = view.copy() if out is None else reduce(out, view)
    return out


def grey_closing(image, se: int) -> np.ndarray:
    """Flat square closing; a 2x2 element has its origin at the top-left cell."""
    f = as_plane(image)
    offsets = _square_offsets(se)
    dilated = _shift_reduce(f, [(-dy, -dx) for dy, dx in offsets], np.maximum)
    return _shift_reduce(dilated, offsets, np.minimum)


def black_top_hat(image, se: int) -> np.ndarray:
    """Closing minus input; highlights dark details smaller than the element."""
    f = as_plane(image)
    return grey_closing(f, se) - f


def lbp_offsets(points: int = LBP_POINTS, radius: float = LBP_RADIUS) -> np.ndarray:
    """(points, 2) array of (dy, dx) sample offsets on the circle."""
    ang = 2.0 * math.pi * np.arange(points) / points
    off = np.stack([-radius * np.sin(ang), radius * np.cos(ang)], axis=1)
    snapped = np.round(off)
    return np.where(np.abs(off - snapped) < 1e-9, snapped, off)


def lbp_riu(image, points: int = LBP_POINTS, radius: float = LBP_RADIUS) -> np.ndarray:
    """Rotation-invariant uniform LBP codes in 0..points+1.

    Neighbors are bilinearly interpolated with edge replication; a neighbor
    greater than or equal to the center sets its bit.  Patterns with at most
    two circular transitions map to their bit count, all others to points+1.
    """
    f = as_plane(image)
    h, w = f.shape
    pad = int(math.ceil(radius)) + 1
    p = np.pad(f, pad, mode="edge")
    ones = np.zeros((h, w), dtype=np.int64)
    bits = []
    for dy, dx in lbp_offsets(points, radius):
        y0, x0 = math.floor(dy), math.floor(dx)
        fy, fx = dy - y0, dx - x0
        r0, c0 = pad + y0, pad + x0
        f00 = p[r0:r0 + h, c0:c0 + w]
        f01 = p[r0:r0 + h, c0 + 1:c0 + 1 + w]
        f10 = p[r0 + 1:r0 + 1 + h, c0:c0 + w]
        f11 = p[r0 + 1:r0 + 1 + h, c0 + 1:c0 + 1 + w]
        v = f00 + fx * (f01 - f00) + fy * (f10 - f00) + fx * fy * (f11 - f10 - f01 + f00)
        b = (v >= f).astype(np.int64)
        bits.append(b)
        ones += b
    transitions = np.zeros((h, w), dtype=np.int64)
    for i in range(points):
        transitions += bits[i] != bits[i - 1]
    return np.where(transitions <= 2, ones, points + 1).astype(np.float64)


def median_filter(image, size: int) -> np.ndarray:
    """Windowed median with edge replication.

    Even windows cover rows y..y+size-1 and columns x..x+size-1 and return the
    lower of the two middle order statistics.
    """
    if size not in MEDIAN_SIZES:
        raise ParameterError(f"median size must be one of {MEDIAN_SIZES}, got {size}")
    f = as_plane(image)
    n = size * size
    origin = 0 if size % 2 else -(size // 2)
    return ndimage.rank_filter(f, rank=(n - 1) // 2, size=size, mode="nearest", origin=origin)


def log_filter(image, sigma: float) -> np.ndarray:
    """Scale-normalized Laplacian of Gaussian, sigma^2 (Gxx + Gyy)."""
    f = _offset_free(as_plane(image))
    k = gaussian_kernel(sigma, 2, 0).weights + gaussian_kernel(sigma, 0, 2).weights
    return sigma * sigma * correlate(f, k)


# ---------------------------------------------------------------------------
# Leung-Malik bank
# ---------------------------------------------------------------------------

LM_DERIV_SCALES = (1.0, math.sqrt(2.0), 2.0)
LM_ISO_SCALES = (1.0, math.sqrt(2.0), 2.0, 2.0 * math.sqrt(2.0))
LM_ORIENTATIONS = 6
LM_ELONGATION = 3.0


def _grid(radius: int):
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.meshgrid(t, t)  # x varies along columns, y along rows


def _oriented_derivative(sigma: float, theta: float, order: int) -> np.ndarray:
    """Anisotropic Gaussian derivative: sigma across theta, 3*sigma along the ridge."""
    along = LM_ELONGATION * sigma
    x, y = _grid(gaussian_radius(along))
    u = x * math.cos(theta) + y * math.sin(theta)
    v = -x * math.sin(theta) + y * math.cos(theta)
    g = np.exp(-0.5 * (u * u / (sigma * sigma) + v * v / (along * along)))
    if order == 1:
        g = g * (-u / sigma ** 2)
    else:
        g = g * ((u * u - sigma ** 2) / sigma ** 4)
    return g


def _log_kernel(sigma: float) -> np.ndarray:
    x, y = _grid(gaussian_radius(sigma))
    r2 = x * x + y * y
    s2 = sigma * sigma
    return np.exp(-0.5 * r2 / s2) * (r2 - 2 * s2) / (s2 * s2)


def _gauss_kernel(sigma: float) -> np.ndarray:
    x, y = _grid(gaussian_radius(sigma))
    return np.exp(-0.5 * (x * x + y * y) / (sigma * sigma))


def _zero_dc_l1(k: np.ndarray) -> np.ndarray:
    k = k - k.mean()
    return k / np.abs(k).sum()


def leung_malik_bank():
    """The 48-filter Leung-Malik bank as a list of ``(Kernel, info)`` pairs.

    Order: 18 first-derivative filters (scale-major, 6 orientations each),
    18 second-derivative filters (same grid), 8 LoG filters (the four base
    scales, then three times each) and 4 Gaussians.
    """
    bank = []
    for order in (1, 2):
        for sigma in LM_DERIV_SCALES:
            for k in range(LM_ORIENTATIONS):
                theta = k * math.pi / LM_ORIENTATIONS
                w = _zero_dc_l1(_oriented_derivative(sigma, theta, order))
                bank.append((Kernel(w), {
                    "family": "directional", "order": order,
                    "sigma": round(sigma, 6), "orientation": k,
                }))
    for sigma in LM_ISO_SCALES + tuple(3 * s for s in LM_ISO_SCALES):
        bank.append((Kernel(_zero_dc_l1(_log_kernel(sigma))), {"family": "log", "sigma": round(sigma, 6)}))
    for sigma in LM_ISO_SCALES:
        g = _gauss_kernel(sigma)
        bank.append((Kernel(g / g.sum()), {"family": "gaussian", "sigma": round(sigma, 6)}))
    return bank


def leung_malik_responses(image, bank=None) -> np.ndarray:
    """(48, H, W) stack of bank responses, in bank order."""
    f = as_plane(image)
    if bank is None:
        bank = leung_malik_bank()
    flat = _offset_free(f)
    out = np.empty((len(bank),) + f.shape)
    for i, (kernel, info) in enumerate(bank):
        out[i] = correlate(f if info["family"] == "gaussian" else flat, kernel.weights)
    return out
